"""Finite-difference gradient oracle.

Every registered primitive has at least one case here; :func:`run_gradcheck`
additionally checks a complete tiny adapter and an end-to-end episode loss.
Inputs are drawn away from kinks (clip bounds, integer interpolation
coordinates, ties in ``min``) so central differences are meaningful.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError
from .ops import channelnorm, dwconv3d, otam, trilinear
from .tensor import (PRIMITIVES, Parameter, Tensor, add, backward, clip, concat, div, exp, gelu,
                     getitem, log, log_softmax, matmul, mean, mul, neg, no_grad, reshape, softmax,
                     sqrt, sub, tanh, tmin, transpose, tsum)

_TINY = 1e-12


def finite_diff_grad(f: Callable[[np.ndarray], float], x, eps: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`` per coordinate."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(base.copy()))
        flat[i] = orig - eps
        lo = float(f(base.copy()))
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericError(f"non-finite function value at coordinate {i}")
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def relative_error(analytic, numeric) -> float:
    """``max|a - n| / max(max|a|, max|n|)``; zero when both gradients vanish."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale < _TINY:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def check_function(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], rng: np.random.Generator,
                   eps: float = 1e-5) -> float:
    """Worst relative error over all inputs of ``sum(fn(*inputs) * W)`` for a random ``W``."""
    leaves = [Tensor(x, requires_grad=True) for x in inputs]
    out = fn(*leaves)
    weight = rng.normal(size=out.shape)
    backward(tsum(mul(out, Tensor(weight))))
    worst = 0.0
    for i, leaf in enumerate(leaves):
        def f(xi, i=i):
            args = [Tensor(v) for v in inputs]
            args[i] = Tensor(xi)
            with no_grad():
                return float((fn(*args).data * weight).sum())
        analytic = leaf.grad if leaf.grad is not None else np.zeros(leaf.shape)
        worst = max(worst, relative_error(analytic, finite_diff_grad(f, inputs[i], eps)))
    return worst


def check_parameters(loss_fn: Callable[[], Tensor], params: Sequence[Parameter],
                     eps: float = 1e-5) -> float:
    """Relative error of the full gradient of ``loss_fn`` with respect to
    ``params`` (concatenated), perturbing each parameter in place."""
    for p in params:
        p.zero_grad()
    backward(loss_fn())
    analytic_all, numeric_all = [], []
    for p in params:
        analytic = p.grad.copy()
        original = p.data

        def f(value, p=p):
            p.assign(value)
            with no_grad():
                return loss_fn().item()
        try:
            numeric = finite_diff_grad(f, original, eps)
        finally:
            p.assign(original)
        analytic_all.append(analytic.reshape(-1))
        numeric_all.append(numeric.reshape(-1))
    # one scale for the whole gradient vector: a parameter whose true gradient
    # is exactly zero (e.g. a bias that cancels in a distance) only carries
    # round-off noise and must not be judged against its own magnitude
    return relative_error(np.concatenate(analytic_all), np.concatenate(numeric_all))


# -- primitive cases -------------------------------------------------------

def _away_from(rng, shape, points, margin, low=-2.0, high=2.0):
    x = rng.uniform(low, high, shape)
    for p in points:
        close = np.abs(x - p) < margin
        x[close] = p + np.copysign(margin * 2, x[close] - p + 1e-300)
    return x


def _trilinear_inputs(rng):
    fmap = rng.normal(size=(2, 3, 4, 4, 2))
    ext = np.array([3, 4, 4])
    base = rng.integers(0, ext - 1, size=(2, 5, 3))
    coords = base + rng.uniform(0.15, 0.85, size=(2, 5, 3))
    return fmap, coords


def _softmax_rows(rng):
    return rng.normal(size=(3, 5))


# name -> builder(rng) -> (fn, [inputs]).  The part of ``name`` before "[" is the
# primitive it covers.
PRIMITIVE_CASES: dict[str, Callable] = {
    "add": lambda r: (add, [r.normal(size=(3, 4)), r.normal(size=(4,))]),
    "sub": lambda r: (sub, [r.normal(size=(2, 3)), r.normal(size=(2, 1))]),
    "mul": lambda r: (mul, [r.normal(size=(3, 4)), r.normal(size=(1, 4))]),
    "div": lambda r: (div, [r.normal(size=(3, 4)),
                            np.sign(r.normal(size=(3, 4))) * r.uniform(0.5, 2.0, (3, 4))]),
    "neg": lambda r: (neg, [r.normal(size=(5,))]),
    "exp": lambda r: (exp, [r.normal(size=(2, 3))]),
    "log": lambda r: (log, [r.uniform(0.5, 2.0, (2, 3))]),
    "tanh": lambda r: (tanh, [r.normal(size=(2, 3))]),
    "sqrt": lambda r: (sqrt, [r.uniform(0.5, 2.0, (2, 3))]),
    "gelu": lambda r: (gelu, [r.normal(size=(4, 3)) * 2.0]),
    "clip": lambda r: (lambda a: clip(a, -1.0, 1.0), [_away_from(r, (4, 4), (-1.0, 1.0), 0.05)]),
    "matmul": lambda r: (matmul, [r.normal(size=(2, 3, 4)), r.normal(size=(4, 5))]),
    "sum": lambda r: (lambda a: tsum(a, axis=1), [r.normal(size=(3, 4, 2))]),
    "mean": lambda r: (lambda a: mean(a, axis=(0, 2)), [r.normal(size=(3, 4, 2))]),
    "min": lambda r: (lambda a: tmin(a, axis=-1), [r.normal(size=(4, 5))]),
    "softmax": lambda r: (softmax, [_softmax_rows(r)]),
    "log_softmax": lambda r: (log_softmax, [_softmax_rows(r)]),
    "reshape": lambda r: (lambda a: reshape(a, (3, 4)), [r.normal(size=(2, 6))]),
    "transpose": lambda r: (lambda a: transpose(a, (2, 0, 1)), [r.normal(size=(2, 3, 4))]),
    "getitem": lambda r: (lambda a: getitem(a, (np.array([0, 2, 0]), slice(1, 3))), [r.normal(size=(3, 4))]),
    "concat": lambda r: (lambda a, b: concat([a, b], axis=1), [r.normal(size=(2, 3)), r.normal(size=(2, 2))]),
    "dwconv3d": lambda r: (lambda x, k, b: dwconv3d(x, k, b),
                           [r.normal(size=(2, 4, 5, 3, 2)), r.normal(size=(3, 3, 1, 2)), r.normal(size=(2,))]),
    "dwconv3d[strided]": lambda r: (lambda x, k, b: dwconv3d(x, k, b, stride=(2, 2, 1)),
                                    [r.normal(size=(1, 4, 5, 3, 2)), r.normal(size=(3, 3, 3, 2)),
                                     r.normal(size=(2,))]),
    "channelnorm": lambda r: (channelnorm, [r.normal(size=(2, 3, 3, 2, 3)), r.normal(size=(3,)),
                                            r.normal(size=(3,))]),
    "trilinear": lambda r: (trilinear, list(_trilinear_inputs(r))),
    "otam": lambda r: (otam, [r.uniform(0.1, 3.0, (2, 4, 5))]),
}


def case_primitive(name: str) -> str:
    return name.split("[", 1)[0]


# -- end-to-end cases ------------------------------------------------------

def tiny_adapter_case(seed: int = 0):
    """A complete dual-pathway adapter on ``(T, H, W, C) = (4, 4, 4, 8)`` with
    ``rho = 0.5`` and ``<2, 2, 2>`` kernels; every weight is randomized so no
    branch is trivially zero."""
    from .adapter import AdapterConfig, D2STAdapter
    from .adsta import AdstaConfig, SamplingKernel
    from .rng import SeededRng

    kernel = SamplingKernel(2, 2)
    cfg = AdapterConfig(bottleneck_ratio=0.5,
                        spatial_cfg=AdstaConfig("Uniform", kernel),
                        temporal_cfg=AdstaConfig("Uniform", kernel))
    rng = SeededRng(seed)
    adapter = D2STAdapter(8, (4, 4, 4), cfg, rng.child(0))
    fill = rng.child(1)
    for name, p in adapter.named_parameters():
        # small offset weights keep sampling points away from integer kinks
        scale = 0.05 if "offset_net.pointwise" in name else 0.3
        p.assign(fill.normal(p.shape, scale))
    x = Parameter(fill.normal((4, 4, 4, 8)))
    weight = fill.normal((4, 4, 4, 8))

    def loss():
        return tsum(mul(adapter(x), Tensor(weight)))
    return loss, [x] + adapter.parameters(), adapter


def tiny_episode_case(seed: int = 0):
    """Episode cross-entropy through a one-stage assembled model (adapter parameters only)."""
    from .adapter import AdapterConfig
    from .adsta import AdstaConfig, SamplingKernel
    from .backbone import InsertionPolicy, ToyBackbone, assemble
    from .fewshot import episode_loss
    from .synthvid import EpisodeSampler, temporal_pool
    from .rng import SeededRng

    kernel = SamplingKernel(2, 2)
    cfg = AdapterConfig(bottleneck_ratio=0.5,
                        spatial_cfg=AdstaConfig("Uniform", kernel),
                        temporal_cfg=AdstaConfig("Uniform", kernel))
    bb = ToyBackbone(stage_count=1, channels=8, frames=4, image_size=8, tokens=4, seed=seed)
    model = assemble(bb, InsertionPolicy("full"), cfg, seed=seed)
    fill = SeededRng(seed).child(7)
    for name, p in model.named_parameters():
        if p.trainable:
            p.assign(fill.normal(p.shape, 0.05 if "offset_net.pointwise" in name else 0.3))
    episode = EpisodeSampler(temporal_pool(), N=2, K=1, Q=1, seed=seed, frames=4, size=8).episode(0)

    def loss():
        return episode_loss(episode, model)[0]
    return loss, model.tunable_parameters(), model


@dataclass
class GradcheckReport:
    tolerance: float
    rows: list = field(default_factory=list)     # (case, primitive, max relative error)
    missing: list = field(default_factory=list)  # registered primitives without a case
    seconds: float = 0.0

    @property
    def failures(self) -> list:
        return [r for r in self.rows if not r[2] < self.tolerance]

    @property
    def ok(self) -> bool:
        return not self.failures and not self.missing

    def table(self) -> str:
        lines = ["case,primitive,max_rel_error,status"]
        for case, prim, err in self.rows:
            lines.append(f"{case},{prim},{err:.3e},{'pass' if err < self.tolerance else 'FAIL'}")
        for prim in self.missing:
            lines.append(f"-,{prim},nan,MISSING")
        return "\n".join(lines)


def run_gradcheck(seed: int = 0, trials: int = 3, tolerance: float = 1e-4, eps: float = 1e-5,
                  end_to_end: bool = True, max_params: int = 20_000) -> GradcheckReport:
    """Check every registered primitive over ``trials`` random draws, then the
    tiny adapter and the episode loss."""
    start = time.perf_counter()
    report = GradcheckReport(tolerance)
    rng = np.random.default_rng(seed)
    for name, build in PRIMITIVE_CASES.items():
        worst = 0.0
        for _ in range(trials):
            fn, inputs = build(rng)
            worst = max(worst, check_function(fn, inputs, rng, eps))
        report.rows.append((name, case_primitive(name), worst))
    covered = {case_primitive(n) for n in PRIMITIVE_CASES}
    report.missing = sorted(set(PRIMITIVES) - covered)
    if end_to_end:
        for label, case in (("adapter", tiny_adapter_case), ("episode_loss", tiny_episode_case)):
            loss, params, model = case(seed)
            count = sum(p.size for p in params)
            if count > max_params:
                raise ValueError(f"{label} check has {count} parameters, above the {max_params} limit")
            report.rows.append((label, "end-to-end", check_parameters(loss, params, eps)))
    report.seconds = time.perf_counter() - start
    return report
