"""Losses, ray groups and the optimisation loop."""
from .config import TrainConfig
from .groups import RayGroups, StratifiedBatcher, ThresholdSchedule, make_batch, update_ray_groups
from .losses import (LossWeights, LtsPoints, TrainBatch, eikonal_loss, lts_loss_E, lts_loss_S,
                     rendering_loss, sample_lts_points, smoothing_loss, suppression_loss)
from .trainer import NumericalError, RayStore, Trainer, ray_emission_strength, train

__all__ = ["TrainConfig", "RayGroups", "StratifiedBatcher", "ThresholdSchedule", "make_batch",
           "update_ray_groups", "LossWeights", "LtsPoints", "TrainBatch", "eikonal_loss", "lts_loss_E",
           "lts_loss_S", "rendering_loss", "sample_lts_points", "smoothing_loss", "suppression_loss",
           "NumericalError", "RayStore", "Trainer", "ray_emission_strength", "train"]
