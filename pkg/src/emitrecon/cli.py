"""Command-line entry point.

Exit codes: 0 on success, 1 on invalid input (bad arguments, missing or
malformed files, checkpoint mismatch), 2 on numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .colorspace import tau
from .io import (CheckpointError, DatasetError, load_checkpoint, load_dataset, read_mask, read_pfm,
                 read_png, write_mask, write_pfm, write_png)

log = logging.getLogger("emitrecon")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2
RENDER_CHUNK = 2048


class NumericFailure(RuntimeError):
    """Raised by commands whose numerical check failed."""


# --- configuration ---------------------------------------------------------------

SYNTH_DEFAULTS = dict(scene="box", views=8, resolution=64, strength=None, env=None, spp=32,
                      emission_spp=128, bounces=2, samples=100)


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as e:
        raise ValueError(f"config {path}: {e}") from e
    if not isinstance(cfg, dict):
        raise ValueError("config must be a JSON object")
    return cfg


def _section(cfg: dict, name: str) -> dict:
    """A config file may be a bare training config or hold ``train``/``synth`` sections."""
    if name in cfg or any(k in cfg for k in ("train", "synth")):
        return dict(cfg.get(name, {}))
    return dict(cfg) if name == "train" else {}


def _train_config(args, cfg: dict):
    from .training import TrainConfig

    tc = TrainConfig.from_dict(_section(cfg, "train"))
    if args.seed is not None:
        tc.seed = args.seed
    if args.workers is not None:
        tc.workers = args.workers
    return tc


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _set_threads(args):
    if args.workers is not None:
        if args.workers < 1:
            raise ValueError("--workers must be >= 1")
        torch.set_num_threads(args.workers)


# --- model loading ----------------------------------------------------------------

def _load_trainer(data, ckpt):
    from .training import Trainer, TrainConfig

    ds = load_dataset(data)
    _, meta = load_checkpoint(ckpt)
    tr = Trainer(ds, TrainConfig.from_dict(meta["config"]))
    tr.load(ckpt)
    return ds, tr


@torch.no_grad()
def _render_rays(rays, fields, mode: str, n_samples: int) -> np.ndarray:
    from .renderer import composite_color, march

    out = []
    for s in range(0, len(rays), RENDER_CHUNK):
        sub = rays.select(slice(s, s + RENDER_CHUNK))
        m = march(sub, fields, n_samples, jitter=False)
        out.append(composite_color(m, fields, mode, background=True))
    return torch.cat(out).double().numpy()


def _view_rays(ds, tr, view: int, on: bool):
    for i, f in enumerate(ds.frames):
        if f.view == view and f.on == on:
            n = ds.width * ds.height
            return tr.store.rays.select(slice(i * n, (i + 1) * n))
    raise ValueError(f"view {view} has no {'on' if on else 'off'} frame")


def _select_views(ds, views):
    if not views:
        return ds.views
    unknown = sorted(set(views) - set(ds.views))
    if unknown:
        raise ValueError(f"unknown views: {unknown}")
    return list(views)


# --- commands ---------------------------------------------------------------------

def cmd_synth(args, cfg):
    from .oracle import PathTraceConfig, make_box_scene, make_two_surface_scene
    from .synth import synthesize_dataset

    opts = {**SYNTH_DEFAULTS, **_section(cfg, "synth")}
    for k in SYNTH_DEFAULTS:
        v = getattr(args, k, None)
        if v is not None:
            opts[k] = v
    unknown = set(opts) - set(SYNTH_DEFAULTS)
    if unknown:
        raise ValueError(f"unknown synth options: {sorted(unknown)}")
    if int(opts["views"]) < 1:
        raise ValueError("--views must be >= 1")
    kw = {}
    if opts["strength"] is not None:
        kw["strength"] = float(opts["strength"])
    if opts["env"] is not None:
        kw["env_level"] = float(opts["env"])
    if opts["scene"] == "box":
        scene = make_box_scene(**kw)
    elif opts["scene"] == "two-surface":
        scene = make_two_surface_scene(**kw)
    else:
        raise ValueError(f"unknown scene {opts['scene']!r}")
    pt = PathTraceConfig(bounces=int(opts["bounces"]), spp=int(opts["spp"]), n_samples=int(opts["samples"]),
                         seed=args.seed or 0)
    out = _out_dir(args, "dataset")
    ds = synthesize_dataset(scene, int(opts["views"]), int(opts["resolution"]), out, cfg=pt,
                            emission_spp=int(opts["emission_spp"]))
    print(json.dumps({"out": str(out), "frames": len(ds.frames), "views": len(ds.views)}))


def cmd_train(args, cfg):
    from .training import Trainer

    tc = _train_config(args, cfg)
    if args.steps is not None:
        if args.steps < 0:
            raise ValueError("--steps must be >= 0")
    ds = load_dataset(args.data)
    out = _out_dir(args, "run")
    tc.save(out / "config.json")
    tr = Trainer(ds, tc, out_dir=out, log_path=out / "train.ndjson")
    if args.resume:
        tr.load(args.resume)
    steps = tc.total_steps - tr.step_count if args.steps is None else args.steps
    tr.train(steps)
    tr.save(out / "checkpoint.bin")
    print(json.dumps({"checkpoint": str(out / "checkpoint.bin"), "step": tr.step_count,
                      "uncertain_rays": tr.groups.sizes()[0]}))


def cmd_render(args, cfg):
    from .renderer import decompose_illumination

    ds, tr = _load_trainer(args.data, args.ckpt)
    out = _out_dir(args, "render")
    views = _select_views(ds, args.view)
    tag = "on" if args.lights == "on" else "off"
    for v in views:
        rays = _view_rays(ds, tr, v, args.lights == "on")
        shape = (ds.height, ds.width, 3)
        if args.mode == "ldr":
            img = _render_rays(rays, tr.fields, "tonemapped", tr.cfg.n_samples)
            write_png(out / f"images/view_{v:03d}_{tag}.png", img.reshape(shape))
        elif args.mode == "hdr":
            img = _render_rays(rays, tr.fields, "hdr", tr.cfg.n_samples)
            write_pfm(out / f"hdr/view_{v:03d}_{tag}.pfm", img.reshape(shape))
        else:
            bufs = {}
            for s in range(0, len(rays), RENDER_CHUNK):
                with torch.no_grad():
                    part = decompose_illumination(rays.select(slice(s, s + RENDER_CHUNK)), tr.fields,
                                                  args.dirs, n_samples=tr.cfg.n_samples,
                                                  n_secondary=tr.cfg.lts_secondary, jitter=False)
                for k, b in part.items():
                    bufs.setdefault(k, []).append(b)
            for k, b in bufs.items():
                write_pfm(out / f"buffers/view_{v:03d}_{tag}_{k}.pfm",
                          torch.cat(b).double().numpy().reshape(shape))
    print(json.dumps({"out": str(out), "views": views, "mode": args.mode}))


def cmd_identify(args, cfg):
    ds, tr = _load_trainer(args.data, args.ckpt)
    out = _out_dir(args, "identify")
    masks, strength = tr.identification()
    for v in sorted(masks):
        write_mask(out / f"masks/view_{v:03d}.png", masks[v])
        write_pfm(out / f"strength/view_{v:03d}.pfm", np.repeat(strength[v][..., None], 3, -1))
    print(json.dumps({"out": str(out), "views": sorted(masks),
                      "uncertain_pixels": int(sum(m.sum() for m in masks.values()))}))


def cmd_edit(args, cfg):
    from .editing import EditedEmission, direct_relight, finetune_radiance, load_edit_spec, match_rays, relit_buffers

    ds, tr = _load_trainer(args.data, args.ckpt)
    spec = load_edit_spec(args.spec)
    out = _out_dir(args, "edit")
    on = torch.as_tensor(tr.store.rays.on)
    rays = tr.store.rays.select(on.nonzero()[:, 0])
    match = match_rays(rays, tr.fields, spec, n_samples=tr.cfg.n_samples)
    emission_fn = EditedEmission.from_match(tr.fields, spec, match)
    cam_rays = _spec_rays(spec, tr)
    seed = args.seed or 0
    result = {"hits": [int(len(match.hit_ids(j))) for j in range(len(spec.sources))]}
    if args.direct:
        color, bufs = _chunked(lambda r: direct_relight(tr.fields, emission_fn, r, args.dirs, jitter=False,
                                                        n_samples=tr.cfg.n_samples,
                                                        n_secondary=tr.cfg.lts_secondary), cam_rays)
    else:
        ft = finetune_radiance(tr.fields, emission_fn, rays, steps=args.steps, n_dirs=args.dirs,
                               n_secondary=tr.cfg.lts_secondary, n_samples=tr.cfg.n_samples, seed=seed)
        if ft.losses and not np.isfinite(ft.losses[-1]):
            raise NumericFailure("fine-tuning diverged")
        result["finetune_loss"] = ft.losses[-1] if ft.losses else None
        tr.save(out / "edited_checkpoint.bin")

        def relit(r):
            b = relit_buffers(tr.fields, emission_fn, r, args.dirs, jitter=False, n_samples=tr.cfg.n_samples,
                              n_secondary=tr.cfg.lts_secondary)
            return sum(b.values()), b

        color, bufs = _chunked(relit, cam_rays)
    shape = (spec.height, spec.width, 3)
    if not np.isfinite(color).all():
        raise NumericFailure("edited render is not finite")
    write_pfm(out / "hdr/edit.pfm", color.reshape(shape))
    write_png(out / "images/edit.png", tau(torch.as_tensor(color)).numpy().reshape(shape))
    for k, b in bufs.items():
        write_pfm(out / f"buffers/edit_{k}.pfm", b.reshape(shape))
    print(json.dumps({"out": str(out), **result}))


def _spec_rays(spec, tr):
    """Primary rays of the edit camera, toward the camera like dataset rays."""
    from .renderer import make_rays

    h, w = spec.height, spec.width
    j, i = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pix = np.stack([i + 0.5, j + 0.5, np.ones_like(i, dtype=float)], -1).reshape(-1, 3)
    R, t = spec.Rt[:3, :3], spec.Rt[:3, 3]
    d_cam = pix @ np.linalg.inv(spec.K).T            # OpenCV camera frame
    d_world = d_cam @ R                           # R^T d
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origin = -R.T @ t
    dtype = tr.fields.dtype
    bbox = tuple(torch.as_tensor(b, dtype=dtype) for b in tr.dataset.bbox)
    return make_rays(torch.as_tensor(np.repeat(origin[None], len(pix), 0), dtype=dtype),
                     torch.as_tensor(-d_world, dtype=dtype), bbox,
                     on=torch.ones(len(pix), dtype=torch.bool))


def _chunked(fn, rays):
    colors, bufs = [], {}
    for s in range(0, len(rays), RENDER_CHUNK):
        with torch.no_grad():
            c, b = fn(rays.select(slice(s, s + RENDER_CHUNK)))
        colors.append(c)
        for k, v in b.items():
            bufs.setdefault(k, []).append(v)
    return (torch.cat(colors).double().numpy(),
            {k: torch.cat(v).double().numpy() for k, v in bufs.items()})


def cmd_eval(args, cfg):
    from .metrics import metric_iou, metric_mse_hdr, metric_psnr_ldr

    gt = load_dataset(args.data)
    pred = Path(args.pred)
    if not pred.is_dir():
        raise FileNotFoundError(f"{pred} is not a directory")
    res = {"iou": {}, "mse_hdr": {}, "psnr_ldr": {}}
    pm, gm = [], []
    for v, mask in sorted(gt.masks.items()):
        p = pred / f"masks/view_{v:03d}.png"
        if p.is_file():
            pr = read_mask(p)
            res["iou"][v] = metric_iou(pr, mask)
            pm.append(pr.ravel())
            gm.append(mask.ravel())
    for f in gt.frames:
        tag = "on" if f.on else "off"
        p = pred / f"hdr/view_{f.view:03d}_{tag}.pfm"
        if p.is_file() and f.hdr is not None:
            res["mse_hdr"][f"{f.view}_{tag}"] = metric_mse_hdr(read_pfm(p), f.hdr)
        p = pred / f"images/view_{f.view:03d}_{tag}.png"
        if p.is_file():
            res["psnr_ldr"][f"{f.view}_{tag}"] = metric_psnr_ldr(read_png(p)[0], f.image)
    summary = {}
    if pm:
        summary["iou"] = metric_iou(np.concatenate(pm), np.concatenate(gm))
    if res["mse_hdr"]:
        summary["mse_hdr"] = float(np.mean(list(res["mse_hdr"].values())))
    if res["psnr_ldr"]:
        summary["psnr_ldr"] = float(np.mean(list(res["psnr_ldr"].values())))
    if not summary:
        raise ValueError(f"no predictions found under {pred}")
    report = {"summary": summary, **{k: {str(a): b for a, b in v.items()} for k, v in res.items()}}
    if args.out:
        _out_dir(args, ".").joinpath("metrics.json").write_text(json.dumps(report, indent=1))
    print(json.dumps(summary))


def cmd_gradcheck(args, cfg):
    from .training.gradcheck import run_suite

    reports = run_suite(seed=args.seed or 0, n_params=args.params)
    worst = 0.0
    for name, rep in reports.items():
        print(f"{name:20s} max rel err {rep.max_error:.3e}")
        worst = max(worst, rep.max_error)
    if args.out:
        out = _out_dir(args, ".")
        (out / "gradcheck.json").write_text(json.dumps({k: r.errors for k, r in reports.items()}, indent=1))
    if not worst < args.tol:
        raise NumericFailure(f"gradient check failed: max rel err {worst:.3e} >= {args.tol:g}")


# --- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="emitrecon", description="Emissive-source reconstruction toolkit.")
    p.add_argument("--config", help="JSON config (training config, or {'train': ..., 'synth': ...})")
    p.add_argument("--seed", type=int, help="random seed (unsigned 64-bit)")
    p.add_argument("--workers", type=int, help="number of CPU threads")
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render an on/off dataset of an analytic scene")
    s.add_argument("--scene", choices=["box", "two-surface"])
    s.add_argument("--views", type=int)
    s.add_argument("--resolution", type=int)
    s.add_argument("--strength", type=float, help="emitter strength")
    s.add_argument("--env", type=float, help="constant environment radiance")
    s.add_argument("--spp", type=int, help="paths per pixel for the lights-off render")
    s.add_argument("--emission-spp", dest="emission_spp", type=int, help="paths per pixel for the emitter term")
    s.add_argument("--bounces", type=int)
    s.add_argument("--samples", type=int, help="samples per ray segment")

    s = sub.add_parser("train", help="optimise the scene fields on a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--steps", type=int, help="number of steps (default: full schedule)")
    s.add_argument("--resume", help="checkpoint to continue from")

    s = sub.add_parser("render", help="render views of a trained model")
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--view", type=int, nargs="*")
    s.add_argument("--mode", choices=["ldr", "hdr", "decomposition"], default="ldr")
    s.add_argument("--lights", choices=["on", "off"], default="on")
    s.add_argument("--dirs", type=int, default=64, help="hemisphere samples for decomposition")

    s = sub.add_parser("identify", help="emission-strength maps and emitter masks per view")
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt", required=True)

    s = sub.add_parser("edit", help="apply an emission edit and re-light")
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--spec", required=True, help="edit spec JSON")
    s.add_argument("--direct", action="store_true", help="direct re-lighting without fine-tuning")
    s.add_argument("--steps", type=int, default=200)
    s.add_argument("--dirs", type=int, default=64)

    s = sub.add_parser("eval", help="compare predictions against a ground-truth dataset")
    s.add_argument("--data", required=True, help="ground-truth dataset")
    s.add_argument("--pred", required=True, help="directory with masks/, hdr/ or images/")

    s = sub.add_parser("gradcheck", help="finite-difference check of every loss gradient")
    s.add_argument("--params", type=int, default=4, help="entries checked per parameter class")
    s.add_argument("--tol", type=float, default=1e-3)
    return p


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "render": cmd_render, "identify": cmd_identify,
            "edit": cmd_edit, "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    from .training import NumericalError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise ValueError("--seed must be an unsigned 64-bit integer")
        _set_threads(args)
        cfg = _read_config(args.config)
        COMMANDS[args.command](args, cfg)
    except (NumericFailure, NumericalError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, DatasetError, CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
