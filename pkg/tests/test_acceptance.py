"""Acceptance criteria AC-1 .. AC-8.

Each test name starts with ``test_acN_``; the conftest summary hook folds the
outcomes into one pass/fail line per criterion.  The end-to-end criteria
(AC-4 to AC-6) share one session-scoped training run on the box scene.
"""
import copy
import math
import time

import numpy as np
import pytest
import torch

from emitrecon.camera import Camera, look_at
from emitrecon.colorspace import hsv_to_rgb, linear_to_srgb, rgb_to_hsv, srgb_to_linear, tau
from emitrecon.editing import (EditedEmission, EditSource, EditSpec, direct_relight, finetune_radiance,
                               match_rays, relit_buffers)
from emitrecon.fields import FieldSet
from emitrecon.io import read_pfm, write_pfm
from emitrecon.metrics import metric_iou, threshold_baseline
from emitrecon.oracle import (AnalyticFields, PathTraceConfig, make_box_scene, make_two_surface_scene,
                              path_trace, point_radiance)
from emitrecon.renderer import (CounterSampler, composite_color, decompose_illumination, expected_surface_point,
                                make_rays, march, reflection_integrals)
from emitrecon.synth import synthesize_dataset
from emitrecon.training import TrainConfig, Trainer, lts_loss_E
from emitrecon.training.gradcheck import run_suite, tiny_fields, tiny_problem
from emitrecon.training.trainer import ray_emission_strength

F64 = torch.float64
STRENGTH = 5.0
SOFTPLUS_FLOOR = math.log1p(math.exp(-6.0))

# Compute-scaled schedule of the end-to-end run (about 12 min on one core).
E2E_SCHEDULE = dict(warmup_steps=600, basic_steps=200, progressive_steps=600, group_interval=200, log_every=0)


def report(name, **values):
    print(f"[{name}] " + " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
                                  for k, v in values.items()))


# --- shared end-to-end run ---------------------------------------------------

@pytest.fixture(scope="session")
def box_dataset():
    cfg = PathTraceConfig(spp=32, bounces=2, n_samples=100)
    return synthesize_dataset(make_box_scene(STRENGTH), 16, 64, cfg=cfg, emission_spp=128)


@pytest.fixture(scope="session")
def trained(box_dataset):
    t0 = time.time()
    tr = Trainer(box_dataset, TrainConfig.from_dict(E2E_SCHEDULE))
    tr.train()
    report("AC-4 train", seconds=time.time() - t0, steps=tr.step_count)
    return tr


@pytest.fixture(scope="session")
def identification(trained):
    return trained.identification()


# --- AC-1 gradient suite -----------------------------------------------------

def test_ac1_gradients_match_finite_differences():
    t0 = time.time()
    suite = run_suite(seed=0, n_params=4)
    worst = {name: rep.max_error for name, rep in suite.items()}
    report("AC-1", seconds=time.time() - t0, **worst)
    assert set(worst) == {"render", "lts_S", "lts_E_basic", "lts_E_progressive", "supp", "smooth"}
    for name, rep in suite.items():
        assert all(n > 0 for n in rep.checked.values()), name
        assert rep.max_error < 1e-3, (name, rep.errors)
    assert time.time() - t0 < 120


def _grads(fields, loss):
    for p in fields.parameters():
        p.grad = None
    loss.backward()
    return {n: (torch.zeros_like(p) if p.grad is None else p.grad) for n, p in fields.named_parameters()}


def test_ac1_stop_gradient_paths_receive_zero():
    fields = tiny_fields(1)
    _, pts = tiny_problem(1)
    # uncertain points: lambda_l side reaches only E(x), lambda_r side only L_o^E
    pts.certain[:] = False
    g = _grads(fields, lts_loss_E(pts, fields, 8, progressive=True, lambda_l=1.0, lambda_r=0.0, n_samples=16))
    assert float(g["emission_grid.values"].abs().max()) > 0
    assert all(float(v.abs().max()) == 0.0 for n, v in g.items() if n != "emission_grid.values")
    g = _grads(fields, lts_loss_E(pts, fields, 8, progressive=True, lambda_l=0.0, lambda_r=1.0, n_samples=16))
    assert all(float(v.abs().max()) == 0.0 for n, v in g.items() if not n.startswith("radiance_e."))
    # certain points: E(x) is excluded from the estimate
    pts.certain[:] = True
    g = _grads(fields, lts_loss_E(pts, fields, 8, progressive=True, n_samples=16))
    assert float(g["emission_grid.values"].abs().max()) == 0.0


# --- AC-2 transport identities -----------------------------------------------

def test_ac2_weight_sum_identity_on_random_fields():
    worst = 0.0
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        fs = FieldSet(resolution=8, features=2, env_lobes=2, radiance_hidden=4, tonemap_hidden=4,
                      sharpness=float(rng.uniform(1, 300)), seed=seed, dtype=F64)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            fs.sdf_field.grid.values.add_(0.5 * torch.randn(fs.sdf_field.grid.values.shape, generator=gen,
                                                            dtype=F64))
        o = torch.as_tensor(rng.normal(size=(8, 3)) * 3)
        d = torch.as_tensor(rng.normal(size=(8, 3)))
        d = d / d.norm(dim=-1, keepdim=True)
        with torch.no_grad():
            m = march(make_rays(o, d, fs.bbox), fs, 32, sampler=CounterSampler(seed))
        worst = max(worst, float((m.weights.sum(-1) + m.t_end - 1.0).abs().max()))
    report("AC-2 weight sum", max_error=worst)
    assert worst < 1e-6


def test_ac2_zero_bounce_renderer_matches_oracle():
    scene = make_box_scene(STRENGTH)
    fields = AnalyticFields(scene, bounces=0)
    cam = Camera.from_fov(look_at((-2.5, -2.0, 1.2), (0.3, 0.2, -0.4)), 24, 24, 0.8)
    o, toward = cam.pixel_rays()
    ref = path_trace(scene, o, toward, PathTraceConfig(bounces=0, spp=1, n_samples=100, jitter=False),
                     env=False, background=False)
    rays = make_rays(torch.as_tensor(o), torch.as_tensor(toward), fields.bbox,
                     on=torch.ones(len(o), dtype=torch.bool))
    c = composite_color(march(rays, fields, 100, jitter=False), fields, "hdr").numpy()
    err = float(np.abs(c - ref).max())
    report("AC-2 b=0", max_error=err, emitter_pixels=int((ref.max(1) > 1).sum()))
    assert (ref.max(1) > 1).sum() > 0
    assert err < 1e-5


def test_ac2_one_bounce_estimate_within_monte_carlo_error():
    scene = make_two_surface_scene(3.0)
    fields = AnalyticFields(scene, bounces=0)
    n, spp = 8, 4096
    rng = np.random.default_rng(0)
    o = np.column_stack([rng.uniform(-0.3, 0.3, size=(n, 2)), np.full(n, 0.3)])
    toward = np.tile([0.0, 0.0, 1.0], (n, 1))
    ref, var = path_trace(scene, o, toward, PathTraceConfig(bounces=1, spp=spp, n_samples=100, n_secondary=64,
                                                            jitter=False), env=False, return_variance=True)
    rays = make_rays(torch.as_tensor(o), torch.as_tensor(toward), fields.bbox, on=torch.ones(n, dtype=torch.bool))
    bufs = decompose_illumination(rays, fields, spp, n_samples=100, n_secondary=64, jitter=False, min_weight=0.0)
    lhat = sum(bufs.values()).numpy()
    # two independent estimators with the same per-sample variance
    sigma = np.sqrt(2 * var / spp)
    z = np.abs(lhat - ref) / np.maximum(sigma, 1e-12)
    report("AC-2 b=1", max_z=float(z.max()), mean_radiance=float(ref.mean()))
    assert ref.min() > 0.1
    assert np.all(z < 3.0)


# --- AC-3 LTS fixed point ----------------------------------------------------

def test_ac3_oracle_fields_satisfy_light_transport():
    t0 = time.time()
    scene = make_box_scene(STRENGTH)
    pts = np.array([(-0.3, -0.2, -0.6), (0.3, 0.0, -0.6), (0.0, 0.3, -0.6), (0.45, -0.1, -0.6),
                    (0.6, -0.4, 0.1), (0.6, 0.3, 0.2), (0.2, 0.6, -0.2), (-0.3, 0.6, 0.1)])
    nrm = np.array([(0, 0, 1)] * 4 + [(-1, 0, 0)] * 2 + [(0, -1, 0)] * 2, dtype=float)
    wo = nrm + np.array([-0.5, -0.4, 0.3])
    wo /= np.linalg.norm(wo, axis=1, keepdims=True)
    assert (np.sum(wo * nrm, 1) > 0).all()
    bounces = 6
    lo_s = point_radiance(scene, pts, wo, bounces=bounces, spp=1 << 15, emission=False, env=True, seed=1)
    lo_e = point_radiance(scene, pts, wo, bounces=bounces, spp=1 << 15, emission=True, env=False, seed=2)
    fields = AnalyticFields(scene, bounces=bounces, seed=3)
    x = torch.as_tensor(pts)
    r = reflection_integrals(x, torch.as_tensor(wo), fields, 4096, n_samples=64, sampler=CounterSampler(5),
                             min_weight=1e-4)
    lhat_s = (r.env_direct + r.env_indirect).numpy()
    lhat_e = (r.emission + fields.emission(x)).numpy()
    rel = lambda a, b: float(np.linalg.norm(a - b) / np.linalg.norm(a))  # noqa: E731
    res = {"S": rel(lo_s, lhat_s), "E": rel(lo_e, lhat_e), "total": rel(lo_s + lo_e, lhat_s + lhat_e)}
    report("AC-3", seconds=time.time() - t0, **res)
    assert all(v < 0.05 for v in res.values())


# --- AC-4 end-to-end reconstruction ------------------------------------------

def _pooled(maps, views):
    return np.concatenate([np.asarray(maps[v]).ravel() for v in views])


def test_ac4_identification_iou(box_dataset, identification):
    masks, _ = identification
    views = sorted(masks)
    iou = metric_iou(_pooled(masks, views), _pooled(box_dataset.masks, views))
    report("AC-4 iou", iou=iou)
    assert iou >= 0.6


def test_ac4_peak_emission_strength(identification):
    _, strength = identification
    peak = float(max(s.max() for s in strength.values()))
    report("AC-4 peak", peak=peak, target=STRENGTH)
    assert abs(peak - STRENGTH) <= 0.3 * STRENGTH


def test_ac4_beats_pixel_thresholding(box_dataset, identification):
    masks, _ = identification
    views = sorted(masks)
    iou = metric_iou(_pooled(masks, views), _pooled(box_dataset.masks, views))
    on = [f for f in box_dataset.frames if f.on]
    base_iou, base_t = threshold_baseline([f.image for f in on], [box_dataset.masks[f.view] for f in on])
    report("AC-4 baseline", iou=iou, baseline_iou=float(base_iou), baseline_threshold=float(base_t))
    assert iou > base_iou


# --- AC-5 progressive mechanics ----------------------------------------------

def test_ac5_uncertain_group_never_grows(trained):
    sizes = [len(trained.store)] + [n for _, _, n in trained.groups.history]
    report("AC-5 sizes", sizes=sizes)
    assert len(trained.groups.history) >= 2
    assert all(a >= b for a, b in zip(sizes, sizes[1:]))


def test_ac5_certain_rays_are_dark(trained):
    s = ray_emission_strength(trained.store.rays, trained.fields, trained.cfg.n_samples)
    certain = ~trained.groups.uncertain
    k_final = trained.schedule(trained.step_count)
    worst = float(s[certain].max()) if certain.any() else 0.0
    report("AC-5 certain", n_certain=int(certain.sum()), max_strength=worst, k_final=float(k_final))
    assert certain.any()
    assert worst < k_final


# --- AC-6 edit correctness ---------------------------------------------------

def _buffer(fn, rays, key, chunk=256):
    return torch.cat([fn(rays.select(slice(s, s + chunk)))[key] for s in range(0, len(rays), chunk)]).numpy()


@pytest.fixture(scope="session")
def edit_setup(box_dataset, trained):
    view = 0
    cam = box_dataset.view_camera(view)
    mask = box_dataset.masks[view].astype(float)
    on = trained.store.rays.on
    rays = trained.store.rays.select(on.nonzero()[:, 0])
    spec = EditSpec.for_camera(cam, [EditSource(mask, 0.0, 0.0, 1.0)])
    match = match_rays(rays, trained.fields, spec, n_samples=trained.cfg.n_samples)
    o, toward = cam.pixel_rays()
    dtype = trained.fields.dtype
    cam_rays = make_rays(torch.as_tensor(o, dtype=dtype), torch.as_tensor(toward, dtype=dtype),
                         trained.fields.bbox, on=torch.ones(len(o), dtype=torch.bool))
    return spec, match, rays, cam_rays


def test_ac6_zero_intensity_edit_darkens_emission_reflection(trained, edit_setup):
    spec, match, rays, cam_rays = edit_setup
    fields = copy.deepcopy(trained.fields)
    off = spec.scaled(0.0)
    emission_fn = EditedEmission.from_match(fields, off, match)
    t0 = time.time()
    ft = finetune_radiance(fields, emission_fn, rays, steps=200, n_dirs=32, n_secondary=trained.cfg.lts_secondary,
                           n_samples=trained.cfg.n_samples, seed=0)
    refl = _buffer(lambda r: relit_buffers(fields, emission_fn, r, 32, jitter=False, n_samples=trained.cfg.n_samples,
                                           n_secondary=trained.cfg.lts_secondary), cam_rays, "emission_reflection")
    worst = float(refl.max())
    report("AC-6 i=0", seconds=time.time() - t0, hits=len(match.hit_ids(0)), final_loss=ft.losses[-1],
           max_emission_reflection=worst, limit=5 * SOFTPLUS_FLOOR)
    assert len(match.hit_ids(0)) > 0
    assert worst < 5 * SOFTPLUS_FLOOR


def test_ac6_direct_relight_is_linear_in_intensity(trained, edit_setup):
    spec, match, _, cam_rays = edit_setup
    fields = copy.deepcopy(trained.fields).double()
    rays = make_rays(cam_rays.origins.double(), cam_rays.dirs.double(), fields.bbox, on=cam_rays.on)
    bufs = {}
    for scale in (0.0, 1.0, 2.0):
        fn = EditedEmission.from_match(fields, spec.scaled(scale), match)
        bufs[scale] = _buffer(lambda r: direct_relight(fields, fn, r, 16, jitter=False, n_samples=trained.cfg.n_samples,
                                                       n_secondary=trained.cfg.lts_secondary,
                                                       sampler=CounterSampler(1))[1], rays, "emission_reflection")
    # unedited emitters contribute the same amount at every scale
    one, two = bufs[1.0] - bufs[0.0], bufs[2.0] - bufs[0.0]
    err = float(np.abs(two - 2 * one).max() / max(np.abs(two).max(), 1e-300))
    report("AC-6 linearity", rel_error=err, edited_peak=float(np.abs(two).max()))
    assert np.abs(two).max() > 0
    assert err < 1e-6


def test_ac6_edits_leave_other_emission_bitwise(trained, edit_setup):
    spec, match, rays, _ = edit_setup
    fields = trained.fields
    emission_fn = EditedEmission.from_match(fields, spec.scaled(3.0), match)
    miss = np.setdiff1d(np.arange(len(rays)), match.hit_ids(0))
    with torch.no_grad():
        sub = rays.select(torch.as_tensor(miss))
        x = expected_surface_point(march(sub, fields, trained.cfg.n_samples, jitter=False))
        rng = np.random.default_rng(0)
        lo, hi = (b.numpy() for b in fields.bbox)
        x = torch.cat([x, torch.as_tensor(rng.uniform(lo, hi, size=(20000, 3)), dtype=x.dtype)])
        outside = emission_fn.source_index(x) < 0
        same = torch.equal(emission_fn(x)[outside], fields.emission(x)[outside])
        hit_x = torch.as_tensor(match.points[match.hits[0]], dtype=x.dtype)
        changed = not torch.equal(emission_fn(hit_x), fields.emission(hit_x))
    report("AC-6 locality", outside_points=int(outside.sum()), total_points=len(x))
    assert same and changed


# --- AC-7 deterministic replay -----------------------------------------------

def test_ac7_replay_gives_identical_checkpoints(box_dataset, tmp_path):
    cfg = dict(warmup_steps=40, basic_steps=30, progressive_steps=30, group_interval=20, log_every=0)
    blobs = []
    for run in range(2):
        tr = Trainer(box_dataset, TrainConfig.from_dict(cfg))
        tr.train(100)
        assert tr.step_count == 100
        path = tmp_path / f"run{run}.bin"
        tr.save(path)
        blobs.append(path.read_bytes())
    phases = {r["phase"] for r in tr.records}
    report("AC-7", bytes=len(blobs[0]), phases=sorted(phases))
    assert phases == {1, 2, 3}
    assert blobs[0] == blobs[1]


# --- AC-8 color and HDR exactness --------------------------------------------

def test_ac8_gamma_branch_continuity():
    c = torch.tensor([0.0031308], dtype=F64)
    eps = 1e-12
    jump = float((tau(c + eps) - tau(c - eps)).abs().max())
    lin = torch.tensor([0.04045], dtype=F64)
    jump_inv = float((srgb_to_linear(lin + eps) - srgb_to_linear(lin - eps)).abs().max())
    report("AC-8 branch", jump=jump, jump_inverse=jump_inv)
    assert jump < 2e-4 and jump_inv < 2e-4


def test_ac8_color_round_trips():
    rng = np.random.default_rng(0)
    c = torch.as_tensor(rng.uniform(0, 1, size=(100000, 3)))
    srgb = float((srgb_to_linear(linear_to_srgb(c)) - c).abs().max())
    hsv = float((hsv_to_rgb(rgb_to_hsv(c)) - c).abs().max())
    report("AC-8 round trip", srgb=srgb, hsv=hsv)
    assert srgb < 1e-6 and hsv < 1e-6


def test_ac8_pfm_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    img = (rng.standard_normal((17, 23, 3)) * 10.0 ** rng.integers(-30, 30, size=(17, 23, 3))).astype(np.float32)
    img[0, 0] = [np.inf, -np.inf, -0.0]
    img[1, 1] = [np.float32(1e-45), 0.0, np.finfo(np.float32).max]
    write_pfm(tmp_path / "a.pfm", img)
    back = read_pfm(tmp_path / "a.pfm")
    assert back.dtype == np.float32
    assert back.tobytes() == img.tobytes()

