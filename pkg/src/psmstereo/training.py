"""Masked smooth-L1 supervision, augmentation, Adam training loop and checkpoints."""
from __future__ import annotations

import hashlib
import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .model import DisparityOutput, PSMNet
from .psm_blocks import ConfigError, NetworkConfig
from .stereo_io import StereoSample, end_point_error, three_pixel_error
from .tensor_core import ADAM_EPS, Tensor, adam_step, add, backward, mul, no_grad

log = logging.getLogger(__name__)

BETA1, BETA2 = 0.9, 0.999


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class LossWeights:
    w1: float = 0.5
    w2: float = 0.7
    w3: float = 1.0

    def __post_init__(self):
        if min(self.w1, self.w2, self.w3) < 0 or max(self.w1, self.w2, self.w3) <= 0:
            raise ConfigError("loss weights must be non-negative with at least one positive")

    def as_tuple(self) -> tuple:
        return (self.w1, self.w2, self.w3)


@dataclass
class TrainConfig:
    lr_schedule: tuple = ((0, 1e-3),)  # (first epoch, rate) pairs
    crop_h: Optional[int] = None  # None keeps the full image
    crop_w: Optional[int] = None
    batch_size: int = 2
    epochs: int = 10
    seed: int = 0
    val_count: int = 0  # trailing samples held out for evaluation
    eval_every: int = 1
    checkpoint_every: int = 1
    max_steps: Optional[int] = None
    target_epe: Optional[float] = None  # stop once the evaluation EPE drops below this

    def __post_init__(self):
        self.lr_schedule = tuple(tuple(p) for p in self.lr_schedule)

    def validate(self) -> "TrainConfig":
        if not self.lr_schedule or any(r < 0 for _, r in self.lr_schedule):
            raise ConfigError("lr_schedule needs at least one (epoch, rate) pair with rate >= 0")
        if sorted(e for e, _ in self.lr_schedule) != [e for e, _ in self.lr_schedule]:
            raise ConfigError("lr_schedule thresholds must be increasing")
        for n in (self.crop_h, self.crop_w):
            if n is not None and (n <= 0 or n % 4):
                raise ConfigError(f"crop sizes must be positive multiples of 4, got {n}")
        if self.batch_size < 1 or self.epochs < 0 or self.eval_every < 1 or self.checkpoint_every < 1:
            raise ConfigError("batch_size, eval_every and checkpoint_every must be >= 1, epochs >= 0")
        if self.val_count < 0:
            raise ConfigError("val_count must be >= 0")
        return self

    def learning_rate(self, epoch: int) -> float:
        rate = self.lr_schedule[0][1]
        for start, r in self.lr_schedule:
            if epoch >= start:
                rate = r
        return rate


# ---------------------------------------------------------------- losses

def smooth_l1_loss(pred: Tensor, gt: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean smooth-L1 of (gt - pred) over pixels where ``mask`` is set."""
    gt = np.asarray(gt, dtype=pred.dtype)
    m = np.asarray(mask) > 0
    if pred.shape != gt.shape or m.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}, mask {m.shape}")
    n = int(m.sum())
    if n == 0:
        raise ValueError("mask selects no labeled pixels; nothing to supervise")
    x = np.where(m, pred.data - np.where(m, gt, 0.0), 0.0)
    ax = np.abs(x)
    small = ax < 1.0
    val = np.where(small, 0.5 * x * x, ax - 0.5).sum() / n

    def bw(g):
        return (g * np.where(small, x, np.sign(x)) / n,)

    return Tensor.from_op(np.asarray(val, dtype=pred.dtype), (pred,), bw, "smooth_l1_loss")


def _weights_for(n_maps: int, weights) -> tuple:
    w = weights.as_tuple() if isinstance(weights, LossWeights) else tuple(weights)
    if n_maps == 1 and len(w) in (1, 3):
        return (1.0,)
    if len(w) != n_maps:
        raise ValueError(f"{len(w)} loss weights for {n_maps} disparity outputs")
    return w


def total_loss(outputs: DisparityOutput, gt, mask, weights, return_parts: bool = False):
    """Weighted sum of per-output smooth-L1 losses.

    A single-output (basic) model always uses weight 1.
    """
    w = _weights_for(len(outputs.maps), weights)
    parts = [smooth_l1_loss(m, gt, mask) for m in outputs.maps]
    total = mul(parts[0], w[0])
    for p, wk in zip(parts[1:], w[1:]):
        total = add(total, mul(p, wk))
    if return_parts:
        return total, [p.item() for p in parts]
    return total


def mask_from_ground_truth(gt, max_disparity: int) -> np.ndarray:
    """1 where 0 < gt < D and finite; 0 marks unlabeled or out-of-range pixels."""
    gt = np.asarray(gt, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        return (np.isfinite(gt) & (gt > 0) & (gt < max_disparity)).astype(np.float64)


# ---------------------------------------------------------------- preprocessing

def color_statistics(samples: Sequence[StereoSample]) -> tuple:
    """Per-channel mean/std over every left and right image."""
    stack = np.concatenate([np.concatenate([s.left, s.right], axis=2).reshape(3, -1) for s in samples], axis=1)
    mean = stack.mean(axis=1)
    std = stack.std(axis=1)
    return mean, np.where(std > 0, std, 1.0)


def color_normalize(image: np.ndarray, stats: tuple) -> np.ndarray:
    mean, std = (np.asarray(a, dtype=np.float64).reshape(-1, 1, 1) for a in stats)
    return (np.asarray(image, dtype=np.float64) - mean) / std


def random_crop(sample: StereoSample, crop_h: int, crop_w: int, rng: np.random.Generator) -> StereoSample:
    """Crop left, right, gt and mask at one shared random offset."""
    h, w = sample.gt_disparity.shape
    if crop_h > h or crop_w > w:
        raise ValueError(f"crop {crop_h}x{crop_w} larger than image {h}x{w}")
    y0 = int(rng.integers(0, h - crop_h + 1))
    x0 = int(rng.integers(0, w - crop_w + 1))
    ys, xs = slice(y0, y0 + crop_h), slice(x0, x0 + crop_w)
    return StereoSample(sample.left[:, ys, xs], sample.right[:, ys, xs], sample.gt_disparity[ys, xs],
                        sample.valid_mask[ys, xs], sample.calib, sample.name)


def supervision_mask(sample: StereoSample, max_disparity: int) -> np.ndarray:
    return sample.valid_mask * mask_from_ground_truth(sample.gt_disparity, max_disparity)


def _batch(samples, stats, dtype, max_disparity):
    left = np.stack([color_normalize(s.left, stats) for s in samples]).astype(dtype)
    right = np.stack([color_normalize(s.right, stats) for s in samples]).astype(dtype)
    gt = np.stack([s.gt_disparity for s in samples])
    mask = np.stack([supervision_mask(s, max_disparity) for s in samples])
    return Tensor(left), Tensor(right), gt, mask


def predict(model: PSMNet, samples: Sequence[StereoSample], stats: tuple) -> np.ndarray:
    """Final disparity maps [N,H,W] in eval mode."""
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            left, right, _, _ = _batch(samples, stats, model.config.np_dtype, model.config.max_disparity)
            return model(left, right).final.data.astype(np.float64)
    finally:
        model.train(was_training)


def evaluate(model: PSMNet, samples: Sequence[StereoSample], stats: tuple) -> dict:
    D = model.config.max_disparity
    pred = predict(model, samples, stats)
    gt = np.stack([s.gt_disparity for s in samples])
    mask = np.stack([supervision_mask(s, D) for s in samples])
    return {"epe": end_point_error(pred, gt, mask), "d1": three_pixel_error(pred, gt, mask)}


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"PSMCKPT\x00"
CKPT_VERSION = 1
_DTYPES = {1: "<f4", 2: "<f8", 3: "<i8"}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("int64"): 3}


def config_hash(net: NetworkConfig, train_cfg: Optional[TrainConfig] = None) -> str:
    blob = json.dumps({"network": asdict(net), "train": asdict(train_cfg) if train_cfg else None},
                      sort_keys=True, default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def encode_checkpoint(manifest: dict, tensors: dict) -> bytes:
    """Layout (little-endian): magic[8] | u32 version | u64 len + JSON manifest |
    u32 count | per tensor: u16 len + utf-8 name, u8 dtype code, u8 ndim, u64 dims, raw data."""
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    meta = json.dumps(manifest, sort_keys=True).encode()
    buf.write(struct.pack("<Q", len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _CODES[arr.dtype]
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return buf.getvalue()


def decode_checkpoint(blob: bytes) -> tuple:
    if blob[:8] != CKPT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 12
    (n,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    manifest = json.loads(blob[pos: pos + n])
    pos += n
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos: pos + ln].decode()
        pos += ln
        code, ndim = struct.unpack_from("<BB", blob, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        dt = np.dtype(_DTYPES[code])
        size = int(np.prod(shape)) * dt.itemsize
        tensors[name] = np.frombuffer(blob[pos: pos + size], dtype=dt).reshape(shape).copy()
        pos += size
    return manifest, tensors


def model_state(model: PSMNet) -> dict:
    state = {}
    for name, p in model.named_parameters():
        state[f"param:{name}"] = p.data
        state[f"adam_m:{name}"] = p.m
        state[f"adam_v:{name}"] = p.v
        state[f"adam_t:{name}"] = np.asarray(p.step, dtype=np.int64)
    for name, buf in model.named_buffers():
        state[f"buffer:{name}"] = buf
    return state


def load_model_state(model: PSMNet, tensors: dict) -> None:
    for name, p in model.named_parameters():
        p.data[...] = tensors[f"param:{name}"]
        p.m[...] = tensors[f"adam_m:{name}"]
        p.v[...] = tensors[f"adam_v:{name}"]
        p.step = int(tensors[f"adam_t:{name}"])
    for name, buf in model.named_buffers():
        buf[...] = tensors[f"buffer:{name}"]


def save_checkpoint(path, model: PSMNet, train_cfg: TrainConfig, state: dict) -> None:
    manifest = {
        "network": asdict(model.config),
        "train": asdict(train_cfg),
        "config_hash": config_hash(model.config, train_cfg),
        **state,
    }
    Path(path).write_bytes(encode_checkpoint(manifest, model_state(model)))


def load_checkpoint(path) -> tuple:
    """Rebuild the model from a checkpoint; returns (model, train_config, manifest)."""
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"checkpoint {p} not found")
    manifest, tensors = decode_checkpoint(p.read_bytes())
    net = NetworkConfig(**manifest["network"])
    tcfg = TrainConfig(**manifest["train"])
    model = PSMNet(net, seed=tcfg.seed)
    load_model_state(model, tensors)
    return model, tcfg, manifest


# ---------------------------------------------------------------- loop

@dataclass
class TrainReport:
    history: list = field(default_factory=list)  # one dict per epoch
    color_stats: tuple = ()
    steps: int = 0
    config_hash: str = ""

    @property
    def losses(self) -> list:
        return [h["loss"] for h in self.history]


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def train(model: PSMNet, samples: Sequence[StereoSample], config: TrainConfig, weights=None,
          out_dir=None, resume_from=None, val_samples: Optional[Sequence[StereoSample]] = None,
          stats: Optional[tuple] = None) -> TrainReport:
    """Train ``model`` in place with Adam; deterministic for a fixed ``config.seed``.

    Evaluation EPE is measured on ``val_samples`` (or on the training samples when
    none are given) in eval mode. With ``out_dir`` set, ``last.ckpt`` is rewritten
    every ``checkpoint_every`` epochs; ``resume_from`` continues such a run.
    """
    config.validate()
    net = model.config
    D = net.max_disparity
    weights = LossWeights(*net.loss_weights) if weights is None else weights
    if not samples:
        raise ValueError("no training samples")
    eval_set = list(val_samples) if val_samples else list(samples)
    rng = np.random.default_rng([config.seed, 1])
    report = TrainReport(config_hash=config_hash(net, config))
    start_epoch = 0
    if resume_from is not None:
        manifest, tensors = decode_checkpoint(Path(resume_from).read_bytes())
        if manifest["config_hash"] != report.config_hash:
            raise ConfigError("checkpoint was written with a different configuration")
        load_model_state(model, tensors)
        rng.bit_generator.state = manifest["rng_state"]
        start_epoch = manifest["epoch"] + 1
        report.steps = manifest["step"]
        report.history = manifest["history"]
        stats = tuple(np.asarray(a) for a in manifest["color_stats"])
    if stats is None:
        stats = color_statistics(samples)
    report.color_stats = tuple(np.asarray(a, dtype=np.float64) for a in stats)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)

    params = model.parameters()
    model.train()
    for epoch in range(start_epoch, config.epochs):
        if config.max_steps is not None and report.steps >= config.max_steps:
            break
        lr = config.learning_rate(epoch)
        order = rng.permutation(len(samples))
        epoch_losses, epoch_parts = [], []
        for start in range(0, len(order), config.batch_size):
            batch = [samples[i] for i in order[start: start + config.batch_size]]
            if config.crop_h or config.crop_w:
                ch = config.crop_h or batch[0].gt_disparity.shape[0]
                cw = config.crop_w or batch[0].gt_disparity.shape[1]
                batch = [random_crop(s, ch, cw, rng) for s in batch]
            left, right, gt, mask = _batch(batch, report.color_stats, net.np_dtype, D)
            if mask.sum() == 0:
                continue
            out = model(left, right)
            loss, parts = total_loss(out, gt, mask, weights, return_parts=True)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch}, step {report.steps}")
            model.zero_grad()
            backward(loss)
            adam_step(params, lr, BETA1, BETA2, ADAM_EPS)
            report.steps += 1
            epoch_losses.append(value)
            epoch_parts.append(parts)
            if config.max_steps is not None and report.steps >= config.max_steps:
                break
        row = {
            "epoch": epoch,
            "steps": report.steps,
            "lr": lr,
            "loss": float(np.mean(epoch_losses)) if epoch_losses else float("nan"),
            "loss_parts": np.mean(epoch_parts, axis=0).tolist() if epoch_parts else [],
        }
        last_epoch = epoch + 1 == config.epochs or (
            config.max_steps is not None and report.steps >= config.max_steps)
        if (epoch + 1) % config.eval_every == 0 or last_epoch:
            row.update(evaluate(model, eval_set, report.color_stats))
        report.history.append(row)
        log.info("epoch %d loss %.4f %s", epoch, row["loss"],
                 f"epe {row['epe']:.3f}" if "epe" in row else "")
        if out_dir is not None and ((epoch + 1) % config.checkpoint_every == 0 or last_epoch):
            save_checkpoint(Path(out_dir) / "last.ckpt", model, config, {
                "epoch": epoch,
                "step": report.steps,
                "rng_state": _rng_state(rng),
                "color_stats": [a.tolist() for a in report.color_stats],
                "history": report.history,
            })
        if config.target_epe is not None and row.get("epe", np.inf) < config.target_epe:
            break
    return report
