"""Disparity/image codecs, synthetic stereograms and disparity metrics."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .cost_regularization import CameraCalib


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------- PFM

def write_pfm(values: np.ndarray, little_endian: bool = True, scale: float = 1.0) -> bytes:
    """Encode an [H,W] map as grayscale PFM (rows stored bottom-to-top)."""
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise FormatError(f"PFM writer expects a 2-D map, got shape {arr.shape}")
    if scale <= 0:
        raise FormatError("scale magnitude must be positive")
    h, w = arr.shape
    dtype = "<f4" if little_endian else ">f4"
    signed = -abs(scale) if little_endian else abs(scale)
    header = f"Pf\n{w} {h}\n{signed:g}\n".encode("ascii")
    return header + np.ascontiguousarray(arr[::-1].astype(dtype)).tobytes()


def _read_token_line(buf: bytes, pos: int) -> tuple[str, int]:
    end = buf.find(b"\n", pos)
    if end < 0:
        raise FormatError("truncated PFM header")
    return buf[pos:end].decode("ascii", errors="replace").strip(), end + 1


def read_pfm(data: bytes) -> np.ndarray:
    """Decode grayscale PFM bytes into a float32 [H,W] array in top-to-bottom row order."""
    tag, pos = _read_token_line(data, 0)
    if tag == "PF":
        raise FormatError("color PFM ('PF') found, grayscale expected ('Pf')")
    if tag != "Pf":
        raise FormatError(f"not a PFM file (header {tag[:8]!r}), grayscale expected")
    dims, pos = _read_token_line(data, pos)
    m = re.fullmatch(r"(\d+)\s+(\d+)", dims)
    if not m:
        raise FormatError(f"malformed PFM dimensions line {dims!r}")
    w, h = int(m.group(1)), int(m.group(2))
    if w <= 0 or h <= 0:
        raise FormatError(f"PFM dimensions must be positive, got {w}x{h}")
    scale_line, pos = _read_token_line(data, pos)
    try:
        scale = float(scale_line)
    except ValueError:
        raise FormatError(f"malformed PFM scale {scale_line!r}") from None
    if scale == 0 or not np.isfinite(scale):
        raise FormatError("PFM scale must be non-zero and finite")
    dtype = "<f4" if scale < 0 else ">f4"
    need = w * h * 4
    payload = data[pos: pos + need]
    if len(payload) < need:
        raise FormatError(f"truncated PFM payload: expected {need} bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(h, w)[::-1]
    return arr.astype(np.float32)


def load_pfm(path) -> np.ndarray:
    return read_pfm(Path(path).read_bytes())


def save_pfm(path, values: np.ndarray) -> None:
    Path(path).write_bytes(write_pfm(values))


# ---------------------------------------------------------------- PGM / PPM

_PNM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_pnm(data: bytes) -> np.ndarray:
    """Decode binary PGM (P5) or PPM (P6), maxval 255, into a [C,H,W] float64 array in [0,1]."""
    tokens = []
    pos = 0
    for _ in range(4):
        m = _PNM_TOKEN.match(data, pos)
        if not m:
            raise FormatError("truncated PNM header")
        tokens.append(m.group(1))
        pos = m.end()
    magic = tokens[0].decode("ascii", errors="replace")
    if magic in ("P1", "P2", "P3", "P4"):
        raise FormatError(f"{magic} (ASCII/bitmap) PNM is not supported; use binary P5/P6")
    if magic not in ("P5", "P6"):
        raise FormatError(f"not a binary PGM/PPM file (magic {magic!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError("malformed PNM header") from None
    if w <= 0 or h <= 0:
        raise FormatError(f"PNM dimensions must be positive, got {w}x{h}")
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    c = 1 if magic == "P5" else 3
    need = w * h * c
    payload = data[pos: pos + need]
    if len(payload) < need:
        raise FormatError(f"truncated PNM payload: expected {need} bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, c)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def write_pnm(image: np.ndarray) -> bytes:
    """Encode a [1,H,W] / [H,W] (PGM) or [3,H,W] (PPM) image with values in [0,1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise FormatError(f"PNM writer expects [1,H,W] or [3,H,W], got {img.shape}")
    c, h, w = img.shape
    q = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    magic = "P5" if c == 1 else "P6"
    return f"{magic}\n{w} {h}\n255\n".encode("ascii") + q.transpose(1, 2, 0).tobytes()


def load_pnm(path) -> np.ndarray:
    return read_pnm(Path(path).read_bytes())


def save_pnm(path, image: np.ndarray) -> None:
    Path(path).write_bytes(write_pnm(image))


# ---------------------------------------------------------------- samples

@dataclass
class StereoSample:
    left: np.ndarray  # [3,H,W]
    right: np.ndarray  # [3,H,W]
    gt_disparity: np.ndarray  # [H,W]
    valid_mask: np.ndarray  # [H,W] of {0,1}
    calib: Optional[CameraCalib] = None
    name: str = ""

    def __post_init__(self):
        h, w = self.gt_disparity.shape
        for label, arr in (("left", self.left), ("right", self.right)):
            if arr.shape[1:] != (h, w):
                raise ValueError(f"{label} image {arr.shape} does not match disparity {h}x{w}")
        if self.valid_mask.shape != (h, w):
            raise ValueError(f"mask {self.valid_mask.shape} does not match disparity {h}x{w}")


@dataclass
class StereogramSpec:
    height: int
    width: int
    shapes: list = field(default_factory=list)  # (x0, y0, x1, y1, disparity), half-open rects


def generate_stereogram(spec: StereogramSpec, seed: int, max_disparity: Optional[int] = None) -> StereoSample:
    """Random-noise stereo pair whose correspondences follow layered rectangles.

    Background disparity is 0; rectangles are painted in order (last writer wins).
    The right view satisfies right[y, x - d] == left[y, x] for every pixel whose
    mask is 1. Right pixels that no left pixel reaches get fresh noise. Images are
    quantized to 8-bit levels so PNM round trips keep the warp exact.
    """
    h, w = spec.height, spec.width
    if h < 1 or w < 1:
        raise ValueError("stereogram size must be positive")
    gt = np.zeros((h, w), dtype=np.int64)
    for shape in spec.shapes:
        x0, y0, x1, y1, d = shape
        if d != int(d):
            raise ValueError(f"rect disparity must be an integer, got {d}")
        if d < 0 or (max_disparity is not None and d >= max_disparity):
            raise ValueError(f"rect disparity {d} outside [0, {max_disparity})")
        if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
            raise ValueError(f"rect {(x0, y0, x1, y1)} outside the {w}x{h} image")
        gt[y0:y1, x0:x1] = int(d)
    rng = np.random.default_rng(seed)
    left = rng.integers(0, 256, size=(3, h, w)).astype(np.float64) / 255.0
    right = rng.integers(0, 256, size=(3, h, w)).astype(np.float64) / 255.0
    # z-buffer: the largest disparity (nearest surface) claims each right pixel
    ys, xs = np.indices((h, w)).reshape(2, -1)
    ds = gt[ys, xs]
    xr = xs - ds
    inside = xr >= 0
    ys, xs, ds, xr = ys[inside], xs[inside], ds[inside], xr[inside]
    target = ys * w + xr
    order = np.lexsort((ds, target))
    target, ys, xs, xr = target[order], ys[order], xs[order], xr[order]
    winner = np.append(target[1:] != target[:-1], True)  # last entry per target has max d
    ys, xs, xr = ys[winner], xs[winner], xr[winner]
    right[:, ys, xr] = left[:, ys, xs]
    mask = np.zeros((h, w), dtype=np.float64)
    mask[ys, xs] = 1.0
    return StereoSample(left, right, gt.astype(np.float64), mask)


def random_stereogram_spec(height: int, width: int, max_disparity: int, rng: np.random.Generator,
                           n_rects: tuple = (2, 4), background: Optional[int] = None) -> StereogramSpec:
    """Full-frame background layer plus a few random fronto-parallel rectangles."""
    shapes = []
    if background is None:
        background = int(rng.integers(1, max(2, max_disparity // 4)))
    shapes.append((0, 0, width, height, background))
    for _ in range(int(rng.integers(n_rects[0], n_rects[1] + 1))):
        rw = int(rng.integers(max(2, width // 6), max(3, width // 2)))
        rh = int(rng.integers(max(2, height // 6), max(3, height // 2)))
        x0 = int(rng.integers(0, width - rw + 1))
        y0 = int(rng.integers(0, height - rh + 1))
        d = int(rng.integers(1, max_disparity))
        shapes.append((x0, y0, x0 + rw, y0 + rh, d))
    return StereogramSpec(height, width, shapes)


# ---------------------------------------------------------------- metrics

def _masked(pred, gt, mask):
    pred = np.asarray(getattr(pred, "data", pred), dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    m = np.asarray(mask) > 0
    if pred.shape != gt.shape or m.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}, mask {m.shape}")
    n = int(m.sum())
    if n == 0:
        raise ValueError("mask selects no pixels; metric undefined")
    return pred[m], gt[m]


def end_point_error(pred, gt, mask) -> float:
    """Mean |pred - gt| over masked pixels."""
    p, g = _masked(pred, gt, mask)
    return float(np.abs(p - g).mean())


def three_pixel_error(pred, gt, mask, rule: str = "and") -> float:
    """Percentage of masked pixels whose error exceeds 3 px and 5% of gt (KITTI D1).

    ``rule="or"`` counts pixels exceeding either threshold instead.
    """
    p, g = _masked(pred, gt, mask)
    err = np.abs(p - g)
    if rule == "and":
        bad = (err > 3.0) & (err > 0.05 * np.abs(g))
    elif rule == "or":
        bad = (err > 3.0) | (err > 0.05 * np.abs(g))
    else:
        raise ValueError(f"rule must be 'and' or 'or', got {rule!r}")
    return float(100.0 * bad.mean())


# ---------------------------------------------------------------- dataset directories

def save_sample(out_dir, name: str, sample: StereoSample) -> list:
    out = Path(out_dir)
    files = {
        f"{name}_left.ppm": write_pnm(sample.left),
        f"{name}_right.ppm": write_pnm(sample.right),
        f"{name}_disp.pfm": write_pfm(sample.gt_disparity),
        f"{name}_mask.pfm": write_pfm(sample.valid_mask),
    }
    for fname, blob in files.items():
        (out / fname).write_bytes(blob)
    return sorted(files)


def load_dataset(data_dir) -> list:
    """Load every ``<name>_left.ppm`` sample (with right/disp/mask siblings) in name order."""
    root = Path(data_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"data directory {root} does not exist")
    samples = []
    for left in sorted(root.glob("*_left.ppm")):
        name = left.name[: -len("_left.ppm")]
        paths = {k: root / f"{name}_{k}" for k in ("right.ppm", "disp.pfm", "mask.pfm")}
        missing = [str(p) for p in paths.values() if not p.exists()]
        if missing:
            raise FileNotFoundError(f"sample {name} is incomplete, missing: {', '.join(missing)}")
        samples.append(StereoSample(
            load_pnm(left),
            load_pnm(paths["right.ppm"]),
            load_pfm(paths["disp.pfm"]).astype(np.float64),
            (load_pfm(paths["mask.pfm"]) > 0).astype(np.float64),
            name=name,
        ))
    if not samples:
        raise FileNotFoundError(f"no *_left.ppm samples found in {root}")
    return samples


def disparity_to_gray(disparity: np.ndarray, max_disparity: int) -> np.ndarray:
    """Linear map [0, D-1] -> [0, 1] for 8-bit visualization (clipped)."""
    return np.clip(np.asarray(disparity, dtype=np.float64) / max(max_disparity - 1, 1), 0.0, 1.0)
