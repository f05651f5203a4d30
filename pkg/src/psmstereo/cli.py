"""Command line: gen-data, train, infer, eval, gradcheck, ablate."""
from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import io
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import configs_from_kv, dump_config, load_config, parse_kv
from .psm_blocks import ConfigError, NetworkConfig
from .stereo_io import (
    FormatError,
    StereogramSpec,
    disparity_to_gray,
    end_point_error,
    generate_stereogram,
    load_dataset,
    load_pfm,
    load_pnm,
    random_stereogram_spec,
    save_sample,
    three_pixel_error,
    write_pfm,
    write_pnm,
)

EXIT_OK = 0
EXIT_FAILURE = 1  # a check or evaluation did not pass
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_NUMERIC = 5

THREADS_ENV = "PSMSTEREO_THREADS"

log = logging.getLogger("psmstereo")


class CLIError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _manifest_hash(obj) -> str:
    return _sha(json.dumps(obj, sort_keys=True, default=str).encode())[:16]


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header: list, rows: list) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return "" if v is None else str(v)


def _text_table(title: str, manifest: str, header: list, rows: list) -> str:
    cells = [header] + [[_fmt(v) for v in r] for r in rows]
    widths = [max(len(str(r[i])) for r in cells) for i in range(len(header))]
    lines = [f"# {title}", f"# manifest {manifest}"]
    lines += ["  ".join(str(c).rjust(wd) for c, wd in zip(r, widths)) for r in cells]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- gen-data

_DATA_KEYS = ("height", "width", "max_disparity", "rects_min", "rects_max", "background", "rects")


def _parse_rects(text: str) -> list:
    rects = []
    for chunk in text.split(";"):
        if chunk.strip():
            vals = [int(v) for v in chunk.split()]
            if len(vals) != 5:
                raise ValueError(f"rect needs 'x0 y0 x1 y1 d', got {chunk.strip()!r}")
            rects.append(tuple(vals))
    return rects


def cmd_gen_data(spec_file, out_dir, count: int, seed: int) -> list:
    """Write ``count`` stereograms (PPM pair + disparity/mask PFM) and a manifest."""
    try:
        kv = parse_kv(Path(spec_file).read_text())
    except FileNotFoundError:
        raise CLIError(f"data spec {spec_file} not found", EXIT_CONFIG) from None
    except ConfigError as exc:
        raise CLIError(str(exc), EXIT_CONFIG) from None
    unknown = set(kv) - set(_DATA_KEYS)
    if unknown:
        raise CLIError(f"unknown data spec keys: {', '.join(sorted(unknown))}", EXIT_CONFIG)
    try:
        h, w = int(kv.get("height", 32)), int(kv.get("width", 64))
        D = int(kv.get("max_disparity", 16))
        lo, hi = int(kv.get("rects_min", 2)), int(kv.get("rects_max", 4))
        background = int(kv["background"]) if "background" in kv else None
        fixed = _parse_rects(kv["rects"]) if "rects" in kv else None
        if h < 1 or w < 1 or D < 2 or lo < 0 or hi < lo:
            raise ValueError("need positive size, max_disparity >= 2 and 0 <= rects_min <= rects_max")
        if count < 0:
            raise ValueError("count must be >= 0")
    except (ValueError, KeyError) as exc:
        raise CLIError(f"invalid data spec: {exc}", EXIT_CONFIG) from None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written, names = [], []
    for i in range(count):
        name = f"sample_{i:04d}"
        if fixed is not None:
            spec = StereogramSpec(h, w, list(fixed))
        else:
            spec = random_stereogram_spec(h, w, D, np.random.default_rng([seed, i, 0]), (lo, hi), background)
        try:
            sample = generate_stereogram(spec, seed=[seed, i, 1], max_disparity=D)
        except ValueError as exc:
            raise CLIError(f"invalid data spec: {exc}", EXIT_CONFIG) from None
        written += save_sample(out, name, sample)
        names.append(name)
    manifest = {
        "kind": "dataset",
        "version": __version__,
        "seed": seed,
        "count": count,
        "spec": kv,
        "samples": names,
        "files": {f: _sha((out / f).read_bytes()) for f in written},
    }
    _write_json(out / "manifest.json", manifest)
    return written + ["manifest.json"]


# ---------------------------------------------------------------- train

def _load_configs(config_file, extra=frozenset()):
    try:
        return load_config(config_file, extra)
    except ConfigError as exc:
        raise CLIError(f"config error: {exc}", EXIT_CONFIG) from None


def _load_data(data_dir):
    try:
        return load_dataset(data_dir)
    except (FileNotFoundError, FormatError, ValueError) as exc:
        raise CLIError(f"data error: {exc}", EXIT_DATA) from None


def _split(samples, val_count):
    if val_count >= len(samples):
        raise CLIError(f"val_count {val_count} leaves no training samples out of {len(samples)}", EXIT_CONFIG)
    if val_count == 0:
        return samples, None
    return samples[:-val_count], samples[-val_count:]


EPOCH_HEADER = ["epoch", "steps", "lr", "loss", "loss_1", "loss_2", "loss_3", "epe", "d1", "manifest"]


def _epoch_rows(history, manifest):
    rows = []
    for h in history:
        parts = list(h.get("loss_parts") or [])
        parts = [None] * (3 - len(parts)) + parts  # basic's single loss lands in loss_3
        rows.append([h["epoch"], h["steps"], h["lr"], h["loss"], *parts, h.get("epe"), h.get("d1"), manifest])
    return rows


def _train_run(net, tcfg, samples, out_dir=None, resume=None):
    from .model import PSMNet
    from .training import TrainingDiverged, train

    train_set, val_set = _split(samples, tcfg.val_count)
    model = PSMNet(net, seed=tcfg.seed)
    try:
        report = train(model, train_set, tcfg, out_dir=out_dir, resume_from=resume, val_samples=val_set)
    except TrainingDiverged as exc:
        raise CLIError(f"numeric failure: {exc}", EXIT_NUMERIC) from None
    return model, report


def cmd_train(config_file, data_dir, out_dir, seed=None, resume=None) -> dict:
    net, tcfg = _load_configs(config_file)
    if seed is not None:
        tcfg = replace(tcfg, seed=seed)
    samples = _load_data(data_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if resume is not None and not Path(resume).is_file():
        raise CLIError(f"checkpoint {resume} not found", EXIT_DATA)
    try:
        model, report = _train_run(net, tcfg, samples, out, resume)
    except ConfigError as exc:
        raise CLIError(f"config error: {exc}", EXIT_CONFIG) from None
    manifest = {
        "kind": "train",
        "version": __version__,
        "config": {"network": asdict(net), "train": asdict(tcfg)},
        "config_hash": report.config_hash,
        "seed": tcfg.seed,
        "dataset": {"dir": str(data_dir), "samples": [s.name for s in samples]},
        "color_stats": [a.tolist() for a in report.color_stats],
        "history": report.history,
    }
    mh = report.config_hash
    rows = _epoch_rows(report.history, mh)
    _write_json(out / "manifest.json", manifest)
    (out / "config.txt").write_text(dump_config(net, tcfg))
    _write_csv(out / "report.csv", EPOCH_HEADER, rows)
    (out / "report.txt").write_text(_text_table("training report", mh, EPOCH_HEADER[:-1],
                                                [r[:-1] for r in rows]))
    return manifest


# ---------------------------------------------------------------- infer

def cmd_infer(checkpoint, left_image, right_image, out, pad: bool = False) -> np.ndarray:
    """Predict a disparity map; writes ``<out>.pfm`` and an 8-bit ``<out>.pgm``."""
    from .tensor_core import Tensor, no_grad
    from .training import color_normalize, load_checkpoint

    try:
        model, _, manifest = load_checkpoint(checkpoint)
    except FileNotFoundError as exc:
        raise CLIError(str(exc), EXIT_DATA) from None
    except (ValueError, KeyError) as exc:
        raise CLIError(f"unreadable checkpoint {checkpoint}: {exc}", EXIT_DATA) from None
    try:
        left, right = load_pnm(left_image), load_pnm(right_image)
    except (OSError, FormatError) as exc:
        raise CLIError(f"data error: {exc}", EXIT_DATA) from None
    if left.shape != right.shape:
        raise CLIError(f"left {left.shape[1:]} and right {right.shape[1:]} image sizes differ", EXIT_DATA)
    if left.shape[0] != 3:
        raise CLIError("expected color (P6) images", EXIT_DATA)
    cfg = model.config
    stats = tuple(np.asarray(a) for a in manifest["color_stats"])
    h, w = left.shape[1:]
    mult = 16 if cfg.regularizer == "stacked_hourglass" else 4
    ph, pw = -h % mult, -w % mult
    if (ph or pw) and not pad:
        raise CLIError(f"image size {h}x{w} must be a multiple of {mult}; rerun with --pad", EXIT_DATA)
    imgs = []
    for img in (left, right):
        x = color_normalize(img, stats)
        x = np.pad(x, [(0, 0), (0, ph), (0, pw)])
        imgs.append(Tensor(x[None].astype(cfg.np_dtype)))
    model.eval()
    try:
        with no_grad():
            disp = model(*imgs).final.data[0, :h, :w].astype(np.float64)
    except ValueError as exc:
        raise CLIError(f"data error: {exc}", EXIT_DATA) from None
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.with_suffix(".pfm").write_bytes(write_pfm(disp))
    out.with_suffix(".pgm").write_bytes(write_pnm(disparity_to_gray(disp, cfg.max_disparity)))
    return disp


# ---------------------------------------------------------------- eval

EVAL_HEADER = ["sample", "pixels", "epe", "d1", "manifest"]


def cmd_eval(pred_dir, gt_dir, out_dir=None, rule: str = "and") -> dict:
    """EPE and D1 per sample and aggregated over all valid pixels."""
    pred_root, gt_root = Path(pred_dir), Path(gt_dir)
    for root in (pred_root, gt_root):
        if not root.is_dir():
            raise CLIError(f"directory {root} does not exist", EXIT_DATA)
    gt_names = sorted(p.name[: -len("_disp.pfm")] for p in gt_root.glob("*_disp.pfm"))
    pred_files = {}
    for p in sorted(pred_root.glob("*.pfm")):
        if p.name.endswith("_mask.pfm"):
            continue
        stem = p.name[: -len("_disp.pfm")] if p.name.endswith("_disp.pfm") else p.stem
        pred_files[stem] = p
    if not gt_names and not pred_files:
        raise CLIError("no disparity files found in either directory", EXIT_DATA)
    missing = [n for n in gt_names if n not in pred_files]
    extra = [n for n in pred_files if n not in gt_names]
    if missing or extra:
        msg = []
        if missing:
            msg.append("no prediction for: " + ", ".join(missing))
        if extra:
            msg.append("no ground truth for: " + ", ".join(extra))
        raise CLIError("unmatched files; " + "; ".join(msg), EXIT_DATA)
    rows, preds, gts, masks, digest = [], [], [], [], []
    for name in gt_names:
        try:
            gt = load_pfm(gt_root / f"{name}_disp.pfm").astype(np.float64)
            pred = load_pfm(pred_files[name]).astype(np.float64)
            mask_path = gt_root / f"{name}_mask.pfm"
            mask = load_pfm(mask_path) > 0 if mask_path.exists() else np.ones(gt.shape, bool)
        except FormatError as exc:
            raise CLIError(f"data error in {name}: {exc}", EXIT_DATA) from None
        if pred.shape != gt.shape:
            raise CLIError(f"{name}: prediction {pred.shape} vs ground truth {gt.shape}", EXIT_DATA)
        with np.errstate(invalid="ignore"):
            mask &= np.isfinite(gt) & (gt > 0)
        digest.append([name, _sha(pred_files[name].read_bytes()), _sha((gt_root / f"{name}_disp.pfm").read_bytes())])
        if mask.sum() == 0:
            rows.append([name, 0, None, None])
            continue
        rows.append([name, int(mask.sum()), end_point_error(pred, gt, mask), three_pixel_error(pred, gt, mask, rule)])
        preds.append(pred[mask])
        gts.append(gt[mask])
        masks.append(np.ones(int(mask.sum())))
    if not preds:
        raise CLIError("no valid ground-truth pixels in any sample", EXIT_DATA)
    p, g, m = (np.concatenate(a) for a in (preds, gts, masks))
    total = {"epe": end_point_error(p, g, m), "d1": three_pixel_error(p, g, m, rule), "pixels": int(m.size)}
    mh = _manifest_hash(digest)
    rows.append(["ALL", total["pixels"], total["epe"], total["d1"]])
    rows = [r + [mh] for r in rows]
    text = _text_table("disparity evaluation (d1 = % of pixels with error > 3 px and > 5%)", mh,
                       EVAL_HEADER[:-1], [r[:-1] for r in rows])
    print(text, end="")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "metrics.csv", EVAL_HEADER, rows)
        (out / "metrics.txt").write_text(text)
    return {"samples": rows, **total, "manifest": mh}


# ---------------------------------------------------------------- gradcheck

def cmd_gradcheck(config_file=None, seed: int = 0, corrupt=None) -> tuple:
    from .gradcheck import format_report, gradcheck_config, run_suite

    net = gradcheck_config()
    if config_file is not None:
        kv = parse_kv(Path(config_file).read_text()) if Path(config_file).is_file() else None
        if kv is None:
            raise CLIError(f"config file {config_file} not found", EXIT_CONFIG)
        try:
            net, _ = configs_from_kv(kv)
        except ConfigError as exc:
            raise CLIError(f"config error: {exc}", EXIT_CONFIG) from None
    results = run_suite(seed=seed, network=net, corrupt=corrupt)
    text = format_report(results)
    print(text)
    return all(r.passed for r in results), results


# ---------------------------------------------------------------- ablate

# dilation / SPP scales / regularizer rows mirroring the seven published settings
DEFAULT_ABLATION = ("off/none/basic; on/none/basic; off/all/basic; on/first/basic; "
                    "on/all/basic; on/all/stacked_hourglass; half/all/stacked_hourglass")
ABLATE_HEADER = ["dilation", "spp_scales", "regularizer", "val_epe", "val_d1",
                 "loss_1", "loss_2", "loss_3", "steps", "status", "config_hash", "manifest"]


def ablation_variant(base: NetworkConfig, dilation: str, spp: str, regularizer: str) -> NetworkConfig:
    if dilation == "on":
        dil = base.dilations
    elif dilation == "off":
        dil = (1, 1, 1, 1)
    elif dilation == "half":
        dil = tuple(base.dilations[:2]) + tuple(max(1, d // 2) for d in base.dilations[2:])
    else:
        raise ValueError(f"dilation must be on/off/half, got {dilation!r}")
    if spp == "all":
        scales = base.spp_scales
    elif spp == "none":
        scales = ()
    elif spp == "first":
        scales = base.spp_scales[:1]
    else:
        scales = tuple(int(s) for s in spp.split("+"))
    return replace(base, dilations=dil, spp_scales=scales, regularizer=regularizer).validate()


def parse_ablation_rows(text: str) -> list:
    rows = []
    for chunk in text.split(";"):
        if chunk.strip():
            parts = [p.strip() for p in chunk.split("/")]
            if len(parts) != 3:
                raise ConfigError(f"ablation row needs dilation/spp/regularizer, got {chunk.strip()!r}")
            rows.append(tuple(parts))
    return rows


def cmd_ablate(config_file, data_dir, out_dir) -> list:
    try:
        kv = parse_kv(Path(config_file).read_text())
    except FileNotFoundError:
        raise CLIError(f"config file {config_file} not found", EXIT_CONFIG) from None
    except ConfigError as exc:
        raise CLIError(f"config error: {exc}", EXIT_CONFIG) from None
    try:
        net, tcfg = configs_from_kv(kv, frozenset({"ablate_rows"}))
        grid = parse_ablation_rows(kv.get("ablate_rows", DEFAULT_ABLATION))
    except ConfigError as exc:
        raise CLIError(f"config error: {exc}", EXIT_CONFIG) from None
    samples = _load_data(data_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for dilation, spp, reg in grid:
        row = [dilation, spp, reg]
        try:
            cfg = ablation_variant(net, dilation, spp, reg)
            row[1] = "+".join(str(s) for s in cfg.spp_scales) or "none"
            _, report = _train_run(cfg, tcfg, samples)
            last = report.history[-1]
            parts = list(last.get("loss_parts") or [])
            parts = [None] * (3 - len(parts)) + parts
            rows.append(row + [last.get("epe"), last.get("d1"), *parts, report.steps, "ok", report.config_hash])
        except (CLIError, ConfigError, ValueError, RuntimeError) as exc:
            log.warning("ablation cell %s failed: %s", row, exc)
            rows.append(row + [None] * 6 + [f"error: {exc}".replace(",", ";"), None])
    mh = _manifest_hash({"base": kv, "grid": grid})
    rows = [r + [mh] for r in rows]
    _write_csv(out / "ablation.csv", ABLATE_HEADER, rows)
    (out / "ablation.txt").write_text(_text_table("ablation", mh, ABLATE_HEADER[:-2], [r[:-2] for r in rows]))
    _write_json(out / "manifest.json", {"kind": "ablate", "version": __version__, "config": kv,
                                        "grid": [list(g) for g in grid], "manifest": mh})
    return rows


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="psmstereo", description="Desk-scale stereo disparity network in numpy.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic stereograms")
    p.add_argument("--config", required=True, help="data spec (key = value)")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint", help="resume from this checkpoint")

    p = sub.add_parser("infer", help="predict disparity for one stereo pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--left", required=True)
    p.add_argument("--right", required=True)
    p.add_argument("--out", required=True, help="output path prefix (.pfm and .pgm are written)")
    p.add_argument("--pad", action="store_true", help="pad to a valid size and crop the result back")

    p = sub.add_parser("eval", help="score predicted disparities against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--data", required=True, help="ground-truth directory")
    p.add_argument("--out")
    p.add_argument("--rule", choices=("and", "or"), default="and", help="D1 threshold combination")

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", help=argparse.SUPPRESS)

    p = sub.add_parser("ablate", help="train a grid of architecture variants")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    return ap


def _thread_limit():
    n = os.environ.get(THREADS_ENV)
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(int(n))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with _thread_limit():
            if args.command == "gen-data":
                cmd_gen_data(args.config, args.out, args.count, args.seed)
            elif args.command == "train":
                cmd_train(args.config, args.data, args.out, args.seed, args.checkpoint)
            elif args.command == "infer":
                cmd_infer(args.checkpoint, args.left, args.right, args.out, args.pad)
            elif args.command == "eval":
                cmd_eval(args.pred, args.data, args.out, args.rule)
            elif args.command == "gradcheck":
                ok, _ = cmd_gradcheck(args.config, args.seed, args.corrupt)
                return EXIT_OK if ok else EXIT_FAILURE
            elif args.command == "ablate":
                cmd_ablate(args.config, args.data, args.out)
    except CLIError as exc:
        print(f"psmstereo {args.command}: {exc}", file=sys.stderr)
        return exc.code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
