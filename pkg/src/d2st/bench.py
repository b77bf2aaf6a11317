"""Dense all-token attention versus aDSTA versus the convolutional pathway.

FLOP counts are analytic.  ``core`` counts only the attention products
(``q k^T`` and ``weights v``, two FLOPs per multiply-add): dense attention
costs ``4 N^2 C`` and aDSTA ``4 N M C`` for ``N = T*H*W`` tokens and ``M``
sampled points.  ``total`` adds the projections, the offset network,
interpolation and position embedding.
"""
from __future__ import annotations

import statistics
import time
from dataclasses import asdict, dataclass

import numpy as np

from .adapter import AdapterConfig, ConvPathway, count_tunable_params
from .adsta import Adsta, AdstaConfig, SamplingKernel, adsta_forward, dpe_apply, sparse_attention
from .rng import SeededRng
from .tensor import Tensor, no_grad


def dense_attention(fmap, wq, wk, wv, wo, heads: int = 1):
    """Every token attends to every token of ``fmap``."""
    fmap = Tensor._wrap(fmap.data if isinstance(fmap, Tensor) else np.asarray(fmap))
    lead = fmap.shape[:-4]
    T, H, W, C = fmap.shape[-4:]
    tokens = fmap.reshape(lead + (T * H * W, C))
    return sparse_attention(fmap, tokens, wq, wk, wv, wo, heads)


def attention_core_flops(tokens: int, keys: int, channels: int) -> int:
    return 4 * tokens * keys * channels


def dense_flops(shape, channels: int) -> dict:
    n = int(np.prod(shape))
    core = attention_core_flops(n, n, channels)
    return {"core": core, "total": core + 4 * 2 * n * channels * channels}


def adsta_flops(shape, channels: int, kernel: SamplingKernel, use_dpe: bool = True) -> dict:
    n = int(np.prod(shape))
    m = kernel.point_count
    core = attention_core_flops(n, m, channels)
    proj = 2 * 2 * n * channels * channels + 2 * 2 * m * channels * channels
    offsets = 2 * 27 * m * channels + 2 * m * channels * 3
    interp = 8 * 2 * m * channels
    dpe = 2 * 27 * n * channels if use_dpe else 0
    return {"core": core, "total": core + proj + offsets + interp + dpe}


def conv_flops(shape, channels: int, ksize) -> int:
    n = int(np.prod(shape))
    return 2 * int(np.prod(ksize)) * n * channels + 6 * n * channels


def median_seconds(fn, repeats: int = 10) -> float:
    fn()  # warm-up
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


@dataclass
class BenchRow:
    shape: tuple
    channels: int
    tokens: int
    method: str
    points: int
    core_flops: int
    total_flops: int
    params: int
    seconds: float


def bench_geometry(shape, channels: int, kernel, variant: str = "S", repeats: int = 10,
                   seed: int = 0) -> list[BenchRow]:
    """Time dense attention, aDSTA and a conv pathway on one ``(T, H, W)`` map."""
    shape = tuple(shape)
    kernel = SamplingKernel.from_triple(kernel)
    rng = SeededRng(seed)
    x = Tensor(rng.normal((1,) + shape + (channels,)))
    mod = Adsta(channels, shape, AdstaConfig(variant, kernel), rng.child(1))
    conv = ConvPathway(channels, (3, 3, 3), rng.child(2))
    n = int(np.prod(shape))
    attn_params = 4 * channels * channels

    def run_dense():
        with no_grad():
            dense_attention(dpe_apply(x, mod.dpe), mod.wq, mod.wk, mod.wv, mod.wo)

    def run_adsta():
        with no_grad():
            adsta_forward(x, mod)

    def run_conv():
        with no_grad():
            conv(x)

    dense = dense_flops(shape, channels)
    sparse = adsta_flops(shape, channels, kernel)
    rows = [
        BenchRow(shape, channels, n, "dense", n, dense["core"], dense["total"], attn_params,
                 median_seconds(run_dense, repeats)),
        BenchRow(shape, channels, n, "adsta", kernel.point_count, sparse["core"], sparse["total"],
                 mod.num_parameters(trainable_only=True), median_seconds(run_adsta, repeats)),
        BenchRow(shape, channels, n, "conv3d", 0, 0, conv_flops(shape, channels, (3, 3, 3)),
                 conv.num_parameters(trainable_only=True), median_seconds(run_conv, repeats)),
    ]
    return rows


DEFAULT_GEOMETRIES = (
    ((4, 8, 8), (2, 4, 4), "S"),
    ((8, 8, 8), (2, 4, 4), "S"),
    ((8, 8, 8), (8, 2, 2), "T"),
    ((8, 16, 16), (2, 4, 4), "S"),
)


def run_bench(channels: int = 8, geometries=DEFAULT_GEOMETRIES, repeats: int = 10,
              seed: int = 0) -> list[BenchRow]:
    rows = []
    for shape, kernel, variant in geometries:
        rows.extend(bench_geometry(shape, channels, kernel, variant, repeats, seed))
    return rows


def dense_equivalence_error(shape=(4, 4, 4), channels: int = 8, seed: int = 0) -> float:
    """Max deviation between aDSTA with one point per token and zero offsets
    and dense attention over the position-embedded map."""
    T, H, W = shape
    if not T == H == W:
        raise ValueError("an all-token uniform grid needs T == H == W")
    rng = SeededRng(seed)
    mod = Adsta(channels, shape, AdstaConfig("Uniform", SamplingKernel(T, H)), rng)
    assert np.all(mod.offset_net.pointwise.weight.data == 0)
    x = Tensor(rng.child(1).normal(shape + (channels,)))
    with no_grad():
        ours = adsta_forward(x, mod).data
        ref = dense_attention(dpe_apply(x, mod.dpe), mod.wq, mod.wk, mod.wv, mod.wo).data
    return float(np.abs(ours - ref).max())


def parameter_table(channels: int = 32) -> list[dict]:
    """Tunable parameters per adapter kind at bottleneck ratio 0.25."""
    kinds = {"vanilla": AdapterConfig(pathway_kind="none"),
             "dst-conv3d": AdapterConfig(pathway_kind="conv3d"),
             "d2st-adsta": AdapterConfig()}
    return [{"adapter": k, "channels": channels, "params": count_tunable_params(c, channels)}
            for k, c in kinds.items()]


def rows_to_csv(rows) -> str:
    header = list(asdict(rows[0]).keys())
    lines = [",".join(header)]
    for r in rows:
        d = asdict(r)
        d["shape"] = "x".join(str(v) for v in d["shape"])
        d["seconds"] = f"{d['seconds']:.6e}"
        lines.append(",".join(str(d[h]) for h in header))
    return "\n".join(lines)
