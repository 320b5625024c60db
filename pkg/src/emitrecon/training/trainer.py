"""Three-phase optimisation loop.

Phase 1 fits the images with the rendering loss alone.  Phase 2 adds the
basic LTS losses.  Phase 3 switches the emission-side loss to the
group-aware l1 form, adds emission suppression on certain rays and
smoothing, and shrinks the uncertain group at regular intervals.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..fields import FieldSet
from ..io import Dataset, load_checkpoint, save_checkpoint
from ..renderer import CounterSampler, RayBatch, make_rays, march
from .config import TrainConfig
from .groups import RayGroups, StratifiedBatcher, ThresholdSchedule, update_ray_groups
from .losses import (LtsPoints, TrainBatch, eikonal_loss, lts_terms, rendering_loss,
                     sample_lts_points, smoothing_loss, suppression_loss)

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


@dataclass
class RayStore:
    """Every training ray of a dataset, flattened frame-major."""

    rays: RayBatch
    target: torch.Tensor   # (N, 3)
    alpha: torch.Tensor | None
    frame: np.ndarray      # (N,)
    view: np.ndarray       # (N,)
    height: int
    width: int

    @classmethod
    def from_dataset(cls, ds: Dataset, dtype=torch.float32) -> "RayStore":
        origins, dirs, targets, alphas, on, frame, view = [], [], [], [], [], [], []
        for i, f in enumerate(ds.frames):
            o, d = ds.camera(i).pixel_rays()
            origins.append(o)
            dirs.append(d)
            targets.append(f.image.reshape(-1, 3))
            if f.alpha is not None:
                alphas.append(f.alpha.reshape(-1))
            on.append(np.full(len(o), f.on))
            frame.append(np.full(len(o), i))
            view.append(np.full(len(o), f.view))
        t = lambda a: torch.as_tensor(np.concatenate(a), dtype=dtype)  # noqa: E731
        bbox = (torch.as_tensor(ds.bbox[0], dtype=dtype), torch.as_tensor(ds.bbox[1], dtype=dtype))
        rays = make_rays(t(origins), t(dirs), bbox, on=torch.as_tensor(np.concatenate(on)))
        alpha = t(alphas) if len(alphas) == len(ds.frames) else None
        return cls(rays, t(targets), alpha, np.concatenate(frame), np.concatenate(view),
                   ds.height, ds.width)

    def __len__(self):
        return len(self.rays)

    def batch(self, ids) -> TrainBatch:
        ids = torch.as_tensor(ids, dtype=torch.int64)
        return TrainBatch(self.rays.select(ids), self.target[ids],
                          None if self.alpha is None else self.alpha[ids])


@torch.no_grad()
@torch.no_grad()
def ray_emission_strength(rays: RayBatch, fields, n_samples: int = 100, chunk: int = 4096) -> np.ndarray:
    """max_RGB sum_i w_i E(x_i) per ray (deterministic mid-point samples)."""
    out = []
    for s in range(0, len(rays), chunk):
        sub = rays.select(slice(s, s + chunk))
        m = march(sub, fields, n_samples, jitter=False)
        out.append((m.weights[..., None] * fields.emission(m.x)).sum(-2).amax(-1))
    if not out:
        return np.zeros(0)
    return torch.cat(out).double().numpy()


def fields_from_config(cfg: TrainConfig, bbox) -> FieldSet:
    return FieldSet(bbox[0], bbox[1], cfg.resolution, features=cfg.features, env_lobes=cfg.env_lobes,
                    sharpness=cfg.sharpness, seed=cfg.seed)


class Trainer:
    def __init__(self, dataset: Dataset, cfg: TrainConfig, *, out_dir=None, log_path=None):
        self.cfg = cfg
        self.dataset = dataset
        torch.set_num_threads(max(1, int(cfg.workers)))
        self.store = RayStore.from_dataset(dataset)
        self.fields = fields_from_config(cfg, dataset.bbox)
        f = self.fields
        emission = f.emission_grid.values
        radiance = [f.radiance_s.grid.values, f.radiance_e.grid.values]
        grids = [p for p in f.grid_parameters() if p is not emission and all(p is not r for r in radiance)]
        or_grid = lambda lr: cfg.lr_grid if lr is None else lr  # noqa: E731
        self.optimizer = torch.optim.Adam([
            {"params": grids, "lr": cfg.lr_grid},
            {"params": [emission], "lr": or_grid(cfg.lr_emission)},
            {"params": f.head_parameters(), "lr": cfg.lr_head},
            {"params": radiance, "lr": or_grid(cfg.lr_radiance)},
        ])
        self.groups = RayGroups.initial(len(self.store), cfg.group_interval)
        self.batcher = StratifiedBatcher(cfg.seed)
        self.sampler = CounterSampler(cfg.seed)
        start = cfg.warmup_steps + cfg.basic_steps
        if cfg.k_slope is None:
            self.schedule = ThresholdSchedule.over(start, cfg.progressive_steps, cfg.k_floor, cfg.k_cap)
        else:
            self.schedule = ThresholdSchedule(cfg.k_slope, start, cfg.k_floor, cfg.k_cap)
        self.step_count = 0
        self.records: list[dict] = []
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.log_path = Path(log_path) if log_path is not None else None
        if self.log_path is not None:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            self.log_path.write_text("")

    # -- one optimisation step ----------------------------------------------
    def _losses(self, step: int):
        cfg, wts = self.cfg, self.cfg.weights
        phase = cfg.phase(step)
        ids = self.batcher(self.groups, cfg.batch_size)
        batch = self.store.batch(ids)
        certain = torch.as_tensor(self.groups.certain[ids])
        terms = {}
        loss_r, m = rendering_loss(batch, self.fields, wts.lambda_tau, n_samples=cfg.n_samples,
                                   sampler=self.sampler, step=step, lambda_mask=wts.lambda_mask,
                                   reduction="mean")
        terms["render"] = loss_r
        total = loss_r
        if phase >= 2 and cfg.lts_points > 0:
            pts = sample_lts_points(m, self.fields, batch.rays, certain, sampler=self.sampler, step=step)
            if len(pts) > cfg.lts_points:
                pts = _take_points(pts, cfg.lts_points)
            if len(pts):
                ls, le = lts_terms(pts, self.fields, cfg.lts_dirs, progressive=phase == 3, weights=wts,
                                   n_samples=cfg.lts_secondary, sampler=self.sampler, step=step,
                                   min_weight=cfg.lts_min_weight)
                terms["lts_S"], terms["lts_E"] = ls, le
                total = total + wts.lambda_lts_s * ls + wts.lambda_lts_e * le
                if phase == 3 and wts.lambda_smooth > 0:
                    sm = smoothing_loss(pts.x, self.fields, sampler=self.sampler, step=step,
                                        keys=pts.keys, reduction="mean")
                    terms["smooth"] = sm
                    total = total + wts.lambda_smooth * sm
                if wts.lambda_eikonal > 0:
                    ek = eikonal_loss(pts.x, self.fields, reduction="mean")
                    terms["eikonal"] = ek
                    total = total + wts.lambda_eikonal * ek
        if phase == 3 and wts.lambda_supp > 0:
            sp = suppression_loss(m, self.fields, certain, reduction="sum") / max(len(ids), 1)
            terms["supp"] = sp
            total = total + wts.lambda_supp * sp
        terms["total"] = total
        return total, terms, ids

    def step(self) -> dict:
        step = self.step_count
        self.optimizer.zero_grad(set_to_none=True)
        total, terms, ids = self._losses(step)
        if not torch.isfinite(total):
            self._dump_failure(step, terms, ids)
            raise NumericalError(f"non-finite loss at step {step}: "
                                 + ", ".join(f"{k}={float(v.detach()):.4g}" for k, v in terms.items()))
        total.backward()
        self.optimizer.step()
        self.fields.project()
        self.step_count += 1
        if self.cfg.phase(step) == 3 and (step + 1 - self.schedule.start) % self.cfg.group_interval == 0:
            self.update_groups(step + 1)
        rec = {"step": step, "phase": self.cfg.phase(step)}
        rec.update({k: float(v.detach()) for k, v in terms.items()})
        n_u, n_c = self.groups.sizes()
        rec.update({"n_uncertain": n_u, "n_certain": n_c, "k": self.schedule(step)})
        self.records.append(rec)
        if self.log_path is not None:
            with open(self.log_path, "a") as fh:
                fh.write(json.dumps(rec) + "\n")
        if self.cfg.checkpoint_every and self.out_dir is not None and self.step_count % self.cfg.checkpoint_every == 0:
            self.save(self.out_dir / f"ckpt_{self.step_count:06d}.bin")
        return rec

    def update_groups(self, step: int) -> None:
        k = self.schedule(step)
        ids = self.groups.uncertain_ids
        strengths = ray_emission_strength(self.store.rays.select(torch.as_tensor(ids)), self.fields,
                                          self.cfg.n_samples)
        self.groups = update_ray_groups(self.groups, strengths, k, step)
        log.info("step %d: k=%.3g, |R^U|=%d", step, k, self.groups.sizes()[0])

    def train(self, steps: int | None = None, callback=None) -> FieldSet:
        steps = self.cfg.total_steps if steps is None else steps
        for _ in range(steps):
            rec = self.step()
            if callback is not None:
                callback(rec)
            if self.cfg.log_every and rec["step"] % self.cfg.log_every == 0:
                log.info(" ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}"
                                  for k, v in rec.items()))
        return self.fields

    def _dump_failure(self, step, terms, ids):
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        dump = {"step": step, "terms": {k: float(v.detach()) for k, v in terms.items()},
                "ray_ids": [int(i) for i in ids]}
        (self.out_dir / f"nan_step_{step}.json").write_text(json.dumps(dump))

    # -- persistence ----------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {f"fields.{k}": v.detach().cpu().numpy() for k, v in self.fields.state_dict().items()}
        st = self.optimizer.state_dict()
        for pid, s in sorted(st["state"].items()):
            for key, val in sorted(s.items()):
                arrays[f"optim.{pid}.{key}"] = torch.as_tensor(val).detach().cpu().numpy()
        arrays["groups.uncertain"] = self.groups.uncertain.astype(np.uint8)
        return arrays

    def save(self, path) -> None:
        meta = {"config": self.cfg.to_dict(), "step": self.step_count, "k": self.groups.k,
                "group_history": self.groups.history, "batcher": self.batcher.state_dict()}
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(path, self.state_arrays(), meta)

    def load(self, path) -> None:
        arrays, meta = load_checkpoint(path)
        sd = {k[len("fields."):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("fields.")}
        self.fields.load_state_dict(sd)
        opt = self.optimizer.state_dict()
        state = {}
        for k, v in arrays.items():
            if k.startswith("optim."):
                _, pid, key = k.split(".", 2)
                state.setdefault(int(pid), {})[key] = torch.from_numpy(v)
        opt["state"] = state
        self.optimizer.load_state_dict(opt)
        unc = arrays["groups.uncertain"].astype(bool)
        if unc.shape[0] != len(self.store):
            raise ValueError("checkpoint ray groups do not match the dataset")
        self.groups = RayGroups(unc, meta["step"], meta["k"], self.cfg.group_interval,
                                [tuple(h) for h in meta["group_history"]])
        self.batcher.load_state_dict(meta.get("batcher", {}), self.groups)
        self.step_count = int(meta["step"])

    # -- outputs ---------------------------------------------------------------
    def identification(self):
        """Per-view uncertain-group masks and emission-strength maps (lights-on rays)."""
        masks, strength = {}, {}
        s_all = ray_emission_strength(self.store.rays, self.fields, self.cfg.n_samples)
        h, w = self.store.height, self.store.width
        for i, f in enumerate(self.dataset.frames):
            if not f.on:
                continue
            sl = slice(i * h * w, (i + 1) * h * w)
            masks[f.view] = self.groups.uncertain[sl].reshape(h, w)
            strength[f.view] = s_all[sl].reshape(h, w)
        return masks, strength


def _take_points(pts: LtsPoints, n: int) -> LtsPoints:
    return LtsPoints(pts.x[:n], pts.wo[:n], pts.on[:n], pts.certain[:n], pts.keys[:n])


def train(dataset: Dataset, cfg: TrainConfig, **kw):
    """Run the full schedule; returns (fields, groups, per-step records)."""
    tr = Trainer(dataset, cfg, **kw)
    tr.train()
    return tr.fields, tr.groups, tr.records


__all__ = ["Trainer", "TrainConfig", "RayStore", "NumericalError", "train", "ray_emission_strength"]
