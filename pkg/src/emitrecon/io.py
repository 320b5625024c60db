"""Image, dataset and checkpoint persistence."""
from __future__ import annotations

import hashlib
import json
import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import Camera

log = logging.getLogger(__name__)


class DatasetError(ValueError):
    """Base class for dataset loading failures."""


class MissingFileError(DatasetError, FileNotFoundError):
    pass


class MalformedDatasetError(DatasetError):
    pass


class ResolutionMismatchError(DatasetError):
    pass


class CheckpointError(ValueError):
    pass


def _parent(path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)


# --- PFM ---------------------------------------------------------------------

def write_pfm(path, image: np.ndarray) -> None:
    """Little-endian colour PFM (scale -1), rows stored bottom to top."""
    img = np.asarray(image, dtype="<f4")
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("PFM images must have shape (H, W, 3)")
    h, w, _ = img.shape
    _parent(path)
    with open(path, "wb") as fh:
        fh.write(f"PF\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0].strip() not in (b"PF", b"Pf"):
        raise ValueError(f"{path}: not a PFM file")
    channels = 3 if parts[0].strip() == b"PF" else 1
    w, h = (int(v) for v in parts[1].split())
    scale = float(parts[2])
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(parts[3], dtype=dtype, count=w * h * channels)
    arr = arr.reshape(h, w, channels)[::-1]
    return np.ascontiguousarray(arr.astype(np.float32))


# --- 8-bit PNG ------------------------------------------------------------------

def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_png(path, img: np.ndarray, alpha: np.ndarray | None = None) -> None:
    arr = to_uint8(img)
    if alpha is not None:
        arr = np.concatenate([arr, to_uint8(alpha)[..., None]], axis=-1)
    _parent(path)
    Image.fromarray(arr).save(path)


def read_png(path):
    """Returns (rgb in [0, 1], alpha in [0, 1] or None)."""
    with Image.open(path) as im:
        mode = im.mode
        arr = np.asarray(im.convert("RGBA" if "A" in mode else "RGB"), dtype=np.float32) / 255.0
    if arr.shape[-1] == 4:
        return arr[..., :3].copy(), arr[..., 3].copy()
    return arr, None


def write_mask(path, mask: np.ndarray) -> None:
    _parent(path)
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path)


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 0


# --- datasets -------------------------------------------------------------------

@dataclass
class Frame:
    image: np.ndarray             # (H, W, 3) sRGB in [0, 1]
    c2w: np.ndarray               # (4, 4)
    on: bool
    view: int
    alpha: np.ndarray | None = None
    hdr: np.ndarray | None = None
    file_path: str = ""


@dataclass
class Dataset:
    frames: list[Frame]
    width: int
    height: int
    camera_angle_x: float
    bbox: tuple = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    masks: dict[int, np.ndarray] = field(default_factory=dict)  # view -> emitter mask

    def camera(self, i: int) -> Camera:
        return Camera.from_fov(self.frames[i].c2w, self.width, self.height, self.camera_angle_x)

    def view_camera(self, view: int) -> Camera:
        for i, f in enumerate(self.frames):
            if f.view == view:
                return self.camera(i)
        raise KeyError(view)

    @property
    def views(self) -> list[int]:
        return sorted({f.view for f in self.frames})


def save_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    frames = []
    for i, f in enumerate(ds.frames):
        tag = "on" if f.on else "off"
        rel = f"images/view_{f.view:03d}_{tag}.png"
        write_png(out / rel, f.image, f.alpha)
        rec = {"file_path": rel, "transform_matrix": np.asarray(f.c2w).tolist(),
               "emissive_on": bool(f.on), "view": int(f.view)}
        if f.hdr is not None:
            hdr_rel = f"hdr/view_{f.view:03d}_{tag}.pfm"
            (out / "hdr").mkdir(exist_ok=True)
            write_pfm(out / hdr_rel, f.hdr)
            rec["hdr_path"] = hdr_rel
        if f.view in ds.masks:
            rec["mask_path"] = f"masks/view_{f.view:03d}.png"
        frames.append(rec)
    if ds.masks:
        (out / "masks").mkdir(exist_ok=True)
        for view, mask in ds.masks.items():
            write_mask(out / f"masks/view_{view:03d}.png", mask)
    meta = {"camera_angle_x": ds.camera_angle_x, "width": ds.width, "height": ds.height,
            "bbox": [list(ds.bbox[0]), list(ds.bbox[1])], "frames": frames}
    (out / "transforms.json").write_text(json.dumps(meta, indent=1))
    return out


def load_dataset(path) -> Dataset:
    root = Path(path)
    meta_path = root / "transforms.json"
    if not meta_path.is_file():
        raise MissingFileError(f"{meta_path} not found")
    try:
        meta = json.loads(meta_path.read_text())
        angle = float(meta["camera_angle_x"])
        records = meta["frames"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise MalformedDatasetError(f"{meta_path}: {exc}") from exc
    if not records:
        raise MalformedDatasetError("dataset has no frames")
    frames, masks = [], {}
    size = None
    for k, rec in enumerate(records):
        try:
            rel = rec["file_path"]
            c2w = np.asarray(rec["transform_matrix"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedDatasetError(f"frame {k}: {exc}") from exc
        if c2w.shape != (4, 4) or abs(np.linalg.det(c2w)) < 1e-12:
            raise MalformedDatasetError(f"frame {k}: transform_matrix must be an invertible 4x4")
        img_path = root / rel
        if not img_path.suffix:
            img_path = img_path.with_suffix(".png")
        if not img_path.is_file():
            raise MissingFileError(f"{img_path} not found")
        image, alpha = read_png(img_path)
        if size is None:
            size = image.shape[:2]
        elif image.shape[:2] != size:
            raise ResolutionMismatchError(f"{img_path}: {image.shape[:2]} differs from {size}")
        if "emissive_on" not in rec:
            warnings.warn(f"frame {k} has no emissive_on flag; assuming lights on", stacklevel=2)
        on = bool(rec.get("emissive_on", True))
        view = int(rec.get("view", k))
        hdr = read_pfm(root / rec["hdr_path"]) if "hdr_path" in rec else None
        if "mask_path" in rec and view not in masks:
            masks[view] = read_mask(root / rec["mask_path"])
        frames.append(Frame(image, c2w, on, view, alpha, hdr, rel))
    h, w = size
    if "width" in meta and (int(meta["width"]), int(meta["height"])) != (w, h):
        raise ResolutionMismatchError("image size disagrees with transforms.json")
    bbox = meta.get("bbox", [[-1.0] * 3, [1.0] * 3])
    return Dataset(frames, w, h, angle, (tuple(bbox[0]), tuple(bbox[1])), masks)


# --- checkpoints ------------------------------------------------------------------
# Layout: MAGIC | u32 version | u64 header length | JSON header | raw arrays | sha256
# The header lists each array's name, dtype, shape and byte offset; keys are
# sorted so identical states produce identical bytes.

MAGIC = b"EMRCKPT\x00"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        shape = np.shape(arr)
        a = np.ascontiguousarray(arr).reshape(shape)  # keep 0-d arrays 0-d
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"arrays": entries, "meta": meta}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(header)) + header + b"".join(blobs)
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def load_checkpoint(path):
    """Returns (arrays, meta); raises CheckpointError on any inconsistency."""
    data = Path(path).read_bytes()
    fixed = len(MAGIC) + 12
    if len(data) < fixed + 32 or not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint or truncated")
    version, hlen = struct.unpack("<IQ", data[len(MAGIC):fixed])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted)")
    try:
        header = json.loads(body[fixed:fixed + hlen])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: bad header") from exc
    payload = body[fixed + hlen:]
    arrays = {}
    for e in header["arrays"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{path}: array {e['name']} truncated")
        arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(tuple(e["shape"])).copy()
    return arrays, header["meta"]
