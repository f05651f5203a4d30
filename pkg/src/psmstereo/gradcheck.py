"""Central finite-difference checks for every differentiable op and a full toy network."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor_core as tc
from .cost_regularization import build_cost_volume, disparity_regression
from .model import DisparityOutput, PSMNet
from .psm_blocks import NetworkConfig
from .tensor_core import Tensor, backward, no_grad
from .training import LossWeights, smooth_l1_loss, total_loss

STEP = 1e-5
REL_TOL = 1e-4
ABS_FLOOR = 1e-7
REL_SCALE = ABS_FLOOR / REL_TOL  # reported max_rel covers gradients at least this large


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    checked: int
    failures: int

    @property
    def passed(self) -> bool:
        return self.failures == 0


def compare(analytic: float, numeric: float, rel_tol: float = REL_TOL, abs_floor: float = ABS_FLOOR) -> tuple:
    """Returns (relative error, ok). Differences below ``abs_floor`` always pass."""
    diff = abs(analytic - numeric)
    scale = max(abs(analytic), abs(numeric))
    rel = diff / scale if scale > 0 else 0.0
    return rel, diff <= abs_floor or rel <= rel_tol


def check_function(name: str, fn: Callable[..., Tensor], inputs: Sequence[np.ndarray],
                   rng: np.random.Generator, probes: Optional[int] = None,
                   corrupt: bool = False) -> CheckResult:
    """Compare autodiff and central differences of ``sum(fn(*inputs) * R)`` for random R.

    ``probes`` limits how many entries per input are perturbed (all when None).
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*leaves)
    proj = rng.standard_normal(out.shape)
    backward(tc.sum(tc.mul(out, proj)))
    worst, checked, failures = 0.0, 0, 0

    def objective():
        with no_grad():
            return float((fn(*[Tensor(a) for a in arrays]).data * proj).sum())

    for arr, leaf in zip(arrays, leaves):
        grad = leaf.grad * (1.1 if corrupt else 1.0)
        flat = arr.reshape(-1)
        idxs = np.arange(flat.size)
        if probes is not None and probes < flat.size:
            idxs = rng.choice(flat.size, size=probes, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + STEP
            up = objective()
            flat[i] = orig - STEP
            down = objective()
            flat[i] = orig
            numeric = (up - down) / (2 * STEP)
            a = grad.reshape(-1)[i]
            rel, ok = compare(a, numeric)
            if max(abs(a), abs(numeric)) >= REL_SCALE:
                worst = max(worst, rel)
            checked += 1
            failures += not ok
    return CheckResult(name, worst, checked, failures)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def op_cases(rng: np.random.Generator) -> list:
    """(name, fn, inputs) triples for one random draw of every differentiable op."""
    n = rng.standard_normal
    rm, rv = np.zeros(3), np.ones(3)
    cases = [
        ("conv2d", lambda x, w, b: tc.conv2d(x, w, b, stride=2, padding=1, dilation=2),
         [n((1, 2, 5, 5)), n((3, 2, 3, 3)), n(3)]),
        ("conv3d", lambda x, w, b: tc.conv3d(x, w, b, stride=2, padding=1),
         [n((1, 2, 4, 4, 4)), n((2, 2, 3, 3, 3)), n(2)]),
        ("conv_transpose3d", lambda x, w, b: tc.conv_transpose3d(x, w, b, stride=2, padding=1, output_padding=1),
         [n((1, 2, 2, 2, 2)), n((2, 3, 3, 3, 3)), n(3)]),
        ("batch_norm", lambda x, g, b: tc.batch_norm(x, g, b, rm.copy(), rv.copy(), training=True),
         [n((2, 3, 3, 3)), n(3), n(3)]),
        ("batch_norm_eval", lambda x, g, b: tc.batch_norm(x, g, b, rm + 0.3, rv + 0.5, training=False),
         [n((2, 3, 2, 2)), n(3), n(3)]),
        ("relu", tc.relu, [_away_from_zero(rng, (3, 4))]),
        ("add", tc.add, [n((2, 3)), n((1, 3))]),
        ("mul", tc.mul, [n((2, 3)), n((2, 1))]),
        ("negate", tc.negate, [n((2, 3))]),
        ("concat", lambda a, b: tc.concat([a, b], axis=1), [n((1, 2)), n((1, 3))]),
        ("sum", lambda x: tc.sum(x, axis=1), [n((2, 3, 2))]),
        ("mean", lambda x: tc.mean(x, axis=(0, 2)), [n((2, 3, 2))]),
        ("reshape", lambda x: tc.reshape(x, (3, 4)), [n((2, 6))]),
        ("avg_pool2d", lambda x: tc.avg_pool2d(x, 2, 2), [n((1, 2, 4, 5))]),
        ("avg_pool2d_overlap", lambda x: tc.avg_pool2d(x, 3, 2), [n((1, 1, 7, 6))]),
        ("upsample_bilinear2d", lambda x: tc.upsample_bilinear2d(x, 5, 7), [n((1, 2, 3, 4))]),
        ("upsample_trilinear3d", lambda x: tc.upsample_trilinear3d(x, 4, 5, 7), [n((1, 1, 2, 3, 4))]),
        ("softmax", lambda x: tc.softmax(x, axis=1), [n((2, 5, 3))]),
        ("build_cost_volume", lambda l, r: build_cost_volume(l, r, 12), [n((1, 2, 2, 4)), n((1, 2, 2, 4))]),
        ("disparity_regression", lambda c: disparity_regression(c, 8, 4, 6), [n((1, 1, 2, 2, 3))]),
    ]
    gt = rng.uniform(0, 6, size=(2, 3, 4))
    resid = _away_from_zero(rng, gt.shape) * rng.choice([0.6, 2.5], size=gt.shape)  # both branches, off the knee
    mask = (rng.random(gt.shape) < 0.7).astype(float)
    mask.flat[0] = 1.0
    cases.append(("smooth_l1_loss", lambda p: smooth_l1_loss(p, gt, mask), [gt + resid]))
    cases.append((
        "total_loss",
        lambda a, b, c: total_loss(DisparityOutput([a, b, c]), gt, mask, LossWeights(0.5, 0.7, 1.0)),
        [gt + resid, gt - resid, gt + 0.5 * resid],
    ))
    return cases


def gradcheck_config(regularizer: str = "stacked_hourglass") -> NetworkConfig:
    """Smallest network that still exercises every block (16x16 input, D=16)."""
    return NetworkConfig(
        stem_channels=4, stage_channels=(4, 4, 6, 6), dilations=(1, 1, 2, 2),
        spp_scales=(4, 2, 1), spp_reduced_channels=2, fusion_channels=4,
        max_disparity=16, regularizer=regularizer, reg_channels=4, dtype="float64",
    )


def check_network(config: NetworkConfig, seed: int, probes_per_tensor: int = 3,
                  size: tuple = (16, 16), corrupt: bool = False) -> CheckResult:
    """Finite-difference check of the total loss w.r.t. ``probes_per_tensor`` random
    entries of every parameter tensor of a freshly initialized network."""
    rng = np.random.default_rng(seed)
    model = PSMNet(config, seed=seed)
    h, w = size
    left = Tensor(rng.standard_normal((2, 3, h, w)))
    right = Tensor(rng.standard_normal((2, 3, h, w)))
    gt = rng.uniform(1, config.max_disparity - 1, size=(2, h, w))
    mask = (rng.random((2, h, w)) < 0.8).astype(float)
    weights = LossWeights(*config.loss_weights)

    def loss_value():
        return total_loss(model(left, right), gt, mask, weights)

    model.zero_grad()
    backward(loss_value())
    worst, checked, failures = 0.0, 0, 0
    for name, p in model.named_parameters():
        grad = p.grad * (1.1 if corrupt else 1.0)
        flat = p.data.reshape(-1)
        for i in rng.choice(flat.size, size=min(probes_per_tensor, flat.size), replace=False):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + STEP
                up = loss_value().item()
                flat[i] = orig - STEP
                down = loss_value().item()
            flat[i] = orig
            numeric = (up - down) / (2 * STEP)
            a = grad.reshape(-1)[i]
            rel, ok = compare(a, numeric)
            if max(abs(a), abs(numeric)) >= REL_SCALE:
                worst = max(worst, rel)
            checked += 1
            failures += not ok
    label = f"psmnet_{'hourglass' if config.regularizer == 'stacked_hourglass' else 'basic'}"
    return CheckResult(label, worst, checked, failures)


def run_suite(seed: int = 0, seeds_per_op: int = 5, network: Optional[NetworkConfig] = None,
              corrupt: Optional[str] = None, include_network: bool = True) -> list:
    """One CheckResult per op (worst case over ``seeds_per_op`` draws), plus full-network checks."""
    results: dict = {}
    for k in range(seeds_per_op):
        rng = np.random.default_rng([seed, k])
        for name, fn, inputs in op_cases(rng):
            r = check_function(name, fn, inputs, rng, corrupt=(corrupt == name))
            prev = results.get(name)
            if prev is None:
                results[name] = r
            else:
                results[name] = CheckResult(name, max(prev.max_rel_error, r.max_rel_error),
                                            prev.checked + r.checked, prev.failures + r.failures)
    out = list(results.values())
    if include_network:
        base = network or gradcheck_config()
        for reg in ("stacked_hourglass", "basic"):
            cfg = NetworkConfig(**{**base.__dict__, "regularizer": reg, "dtype": "float64"})
            label = f"psmnet_{'hourglass' if reg == 'stacked_hourglass' else 'basic'}"
            out.append(check_network(cfg, seed, corrupt=(corrupt == label)))
    return out


def format_report(results: Sequence[CheckResult]) -> str:
    lines = [f"{'op':<24} {'checked':>8} {'fail':>5} {'max_rel_err':>12}  status"]
    for r in results:
        lines.append(f"{r.name:<24} {r.checked:>8} {r.failures:>5} {r.max_rel_error:>12.3e}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
