"""Finite-difference verification of every differentiable building block."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .blocks import C2PSA, Module, SEBlock, SpatialAttention
from .boxes import siou_terms
from .fusion import FusionNode, fuse
from .losses import bce_terms, focal_terms
from .tensor import Tensor

TOLERANCE = 1e-3


@dataclass
class CheckResult:
    name: str
    max_error: float
    points: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error <= TOLERANCE


def _as_float64(module: Module) -> Module:
    for _, p in module.named_parameters():
        p.data = p.data.astype(np.float64)
    return module


def _weighted_sum(y: Tensor, w: np.ndarray) -> Tensor:
    # a random projection makes every output coordinate matter
    return T.tsum(y * Tensor(w, dtype=np.float64))


def _randomize(module: Module, rng: np.random.Generator, scale: float = 0.5) -> None:
    for _, p in module.named_parameters():
        p.data = rng.normal(0.0, scale, size=p.shape)


def _channel_gap(a: np.ndarray) -> float:
    """Smallest distance between the two largest channels at any pixel."""
    top = np.sort(a, axis=1)
    return float((top[:, -1] - top[:, -2]).min())


def _module_checks(
    make: Callable[[np.random.Generator], Module],
    shape,
    rng,
    points: int,
    valid: Callable[[Module, np.ndarray], bool] | None = None,
) -> float:
    """``valid`` rejects samples too close to a non-differentiable point."""
    worst = 0.0
    for _ in range(points):
        while True:
            m = _as_float64(make(rng))
            _randomize(m, rng)
            x = rng.normal(size=shape)
            if valid is None or valid(m, x):
                break
        probe = rng.normal(size=m(Tensor(x, dtype=np.float64)).shape)
        worst = max(worst, T.grad_check(lambda t: _weighted_sum(m(t), probe), x))
        # one parameter tensor per point, picked at random
        params = [p for _, p in m.named_parameters()]
        worst = max(worst, _param_check(m, params[int(rng.integers(len(params)))], x, probe))
    return worst


def _param_check(m: Module, p: Tensor, x: np.ndarray, probe: np.ndarray, eps: float = 1e-3) -> float:
    """Central differences on one parameter tensor against its accumulated gradient."""
    saved_flag = p.requires_grad
    p.requires_grad = True
    p.grad = None
    out = _weighted_sum(m(Tensor(x, dtype=np.float64)), probe)
    out.backward()
    analytic = np.array(p.grad, dtype=np.float64)
    numeric = np.zeros_like(analytic)
    flat = p.data.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        fp = float(_weighted_sum(m(Tensor(x, dtype=np.float64)), probe).data)
        flat[k] = orig - eps
        fm = float(_weighted_sum(m(Tensor(x, dtype=np.float64)), probe).data)
        flat[k] = orig
        numeric.reshape(-1)[k] = (fp - fm) / (2 * eps)
    p.grad = None
    p.requires_grad = saved_flag
    return float((np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))).max())


def check_conv2d(rng, points=10) -> float:
    worst = 0.0
    for i in range(points):
        stride = 1 + i % 2
        groups = 2 if i % 3 == 0 else 1
        k = rng.normal(size=(4, 4 // groups, 3, 3))
        b = rng.normal(size=4)
        x = rng.normal(size=(2, 4, 5, 5))
        probe = rng.normal(size=T.conv2d(Tensor(x, dtype=np.float64), Tensor(k, dtype=np.float64), stride=stride, pad=1, groups=groups).shape)
        worst = max(
            worst,
            T.grad_check(lambda t: _weighted_sum(T.conv2d(t, Tensor(k, dtype=np.float64), Tensor(b, dtype=np.float64), stride, 1, groups), probe), x),
            T.grad_check(lambda t: _weighted_sum(T.conv2d(Tensor(x, dtype=np.float64), t, Tensor(b, dtype=np.float64), stride, 1, groups), probe), k),
            T.grad_check(lambda t: _weighted_sum(T.conv2d(Tensor(x, dtype=np.float64), Tensor(k, dtype=np.float64), t, stride, 1, groups), probe), b),
        )
    return worst


def check_se(rng, points=10) -> float:
    return _module_checks(lambda r: SEBlock(8, reduction=4, rng=r), (2, 8, 3, 3), rng, points)


# channel-max is not differentiable where the top two channels tie; keep
# samples well clear of that so central differences stay on one branch
GAP = 0.05


def check_cbam(rng, points=10) -> float:
    return _module_checks(
        lambda r: SpatialAttention(3, rng=r), (2, 4, 4, 4), rng, points, valid=lambda m, x: _channel_gap(x) > GAP
    )


def _c2psa_valid(m: C2PSA, x: np.ndarray) -> bool:
    half = x.shape[1] // 2
    return _channel_gap(m.se(Tensor(x[:, half:], dtype=np.float64)).data) > GAP


def check_c2psa(rng, points=10) -> float:
    return _module_checks(lambda r: C2PSA(8, reduction=2, spatial_kernel=3, rng=r), (1, 8, 4, 4), rng, points, valid=_c2psa_valid)


def check_fusion(rng, points=10) -> float:
    worst = 0.0
    for _ in range(points):
        node = FusionNode(3, alpha=float(rng.normal()), beta=float(rng.normal()))
        _as_float64(node)
        pi = rng.normal(size=(1, 3, 4, 4))
        pj = rng.normal(size=(1, 3, 2, 2))
        probe = rng.normal(size=pi.shape)
        f64 = lambda a: Tensor(a, dtype=np.float64)  # noqa: E731
        worst = max(
            worst,
            T.grad_check(lambda t: _weighted_sum(fuse(node, t, f64(pj)), probe), pi),
            T.grad_check(lambda t: _weighted_sum(fuse(node, f64(pi), t), probe), pj),
        )
        for name in ("alpha", "beta"):
            saved = getattr(node, name)

            def f(t: Tensor, name=name) -> Tensor:
                setattr(node, name, t)
                return _weighted_sum(fuse(node, f64(pi), f64(pj)), probe)

            worst = max(worst, T.grad_check(f, saved.data))
            setattr(node, name, saved)
    return worst


def check_focal(rng, points=10) -> float:
    worst = 0.0
    for i in range(points):
        q = rng.uniform(0.05, 0.95, size=6)
        w = rng.uniform(0.5, 2.0, size=6)
        gamma = [0.0, 0.5, 1.0, 2.0, 3.0][i % 5]
        worst = max(worst, T.grad_check(lambda t: T.tsum(focal_terms(t, w, gamma)), q))
    return worst


def check_bce(rng, points=10) -> float:
    worst = 0.0
    for _ in range(points):
        q = rng.uniform(0.05, 0.95, size=6)
        target = rng.integers(0, 2, size=6).astype(np.float64)
        worst = max(worst, T.grad_check(lambda t: T.tsum(bce_terms(t, target)), q))
    return worst


def _smooth_box_pair(rng, margin: float = 0.02) -> tuple[np.ndarray, np.ndarray]:
    """Random (pred, gt) cxcywh pair kept away from the kinks of |.| and max/min."""
    while True:
        p = np.r_[rng.uniform(0.3, 0.7, 2), rng.uniform(0.1, 0.4, 2)]
        g = np.r_[rng.uniform(0.3, 0.7, 2), rng.uniform(0.1, 0.4, 2)]
        pe = np.r_[p[:2] - p[2:] / 2, p[:2] + p[2:] / 2]
        ge = np.r_[g[:2] - g[2:] / 2, g[:2] + g[2:] / 2]
        gaps = np.r_[np.abs(p - g), np.abs(pe - ge), np.abs(pe[:2] - ge[2:]), np.abs(pe[2:] - ge[:2])]
        if gaps.min() > margin:
            return p, g


def check_siou(rng, points=10) -> float:
    worst = 0.0
    for _ in range(points):
        pairs = [_smooth_box_pair(rng) for _ in range(3)]
        pred = np.stack([a for a, _ in pairs])
        gt = np.stack([b for _, b in pairs])
        worst = max(worst, T.grad_check(lambda t: T.tsum(siou_terms(t, Tensor(gt, dtype=np.float64))), pred, eps=1e-4))
    return worst


CHECKS: dict[str, Callable[..., float]] = {
    "conv2d": check_conv2d,
    "se": check_se,
    "cbam_spatial": check_cbam,
    "c2psa": check_c2psa,
    "fusion_node": check_fusion,
    "focal": check_focal,
    "objectness_bce": check_bce,
    "siou": check_siou,
}


def run_suite(seed: int = 0, points: int = 10, only: list[str] | None = None) -> list[CheckResult]:
    results = []
    for name, fn in CHECKS.items():
        if only and name not in only:
            continue
        rng = np.random.default_rng([seed, len(results)])
        t0 = time.perf_counter()
        err = fn(rng, points)
        results.append(CheckResult(name, err, points, time.perf_counter() - t0))
    return results
