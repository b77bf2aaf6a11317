"""Structured primitives: 3D depthwise convolution, channel normalization,
trilinear point sampling and ordered temporal alignment.

All feature maps are channel-last, ``(..., T, H, W, C)``; any number of
leading batch axes is accepted.
"""
from __future__ import annotations

import itertools

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy import ndimage

from .errors import ContractError, DimensionError
from .tensor import Tensor, _node, as_tensor, primitive


def conv_output_shape(extent: tuple[int, ...], ksize: tuple[int, ...],
                      stride: tuple[int, ...]) -> tuple[int, ...]:
    """Output extent of a zero-padded ("same" padding) strided convolution."""
    out = []
    for length, k, s in zip(extent, ksize, stride):
        if k % 2 == 0:
            raise DimensionError(f"kernel extents must be odd, got {tuple(ksize)}")
        if s < 1:
            raise DimensionError(f"strides must be positive, got {tuple(stride)}")
        pad = (k - 1) // 2
        if length + 2 * pad < k:
            raise DimensionError(f"kernel {tuple(ksize)} larger than padded input {tuple(extent)}")
        out.append((length + 2 * pad - k) // s + 1)
    return tuple(out)


@primitive("dwconv3d")
def dwconv3d(x, kernel, bias=None, stride=(1, 1, 1)) -> Tensor:
    """Per-channel 3D cross-correlation with zero padding.

    ``kernel`` has shape ``(k_t, k_h, k_w, C)`` and ``bias`` shape ``(C,)``.
    Output position ``k`` along an axis is centred on input index ``k * stride``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim < 4:
        raise DimensionError(f"dwconv3d expects (..., T, H, W, C), got {x.shape}")
    if kernel.ndim != 4 or kernel.shape[-1] != x.shape[-1]:
        raise DimensionError(f"kernel {kernel.shape} does not match input channels of {x.shape}")
    ksize = kernel.shape[:3]
    stride = tuple(int(s) for s in stride)
    extent = x.shape[-4:-1]
    out_ext = conv_output_shape(extent, ksize, stride)
    pads = [(k - 1) // 2 for k in ksize]
    lead, C = x.shape[:-4], x.shape[-1]
    # channel-first, batch-flattened: (C, B, T, H, W)
    xc = np.ascontiguousarray(np.moveaxis(x.data.reshape((-1,) + x.shape[-4:]), -1, 0))
    kd = kernel.data
    sub = (slice(None), slice(None)) + tuple(slice(0, s * (n - 1) + 1, s) for s, n in zip(stride, out_ext))

    strided = stride != (1, 1, 1)
    if strided:
        # few outputs: contract strided windows directly instead of a full-resolution pass
        out = np.zeros(xc.shape[:2] + tuple(out_ext), dtype=np.result_type(xc, kd))
        for tap, view in _tap_views(xc, ksize, pads, stride, out_ext):
            out += view * kd[tap][:, None, None, None, None]
        out = np.moveaxis(out, 0, -1)
    else:
        full = np.empty_like(xc)
        for c in range(C):
            ndimage.correlate(xc[c], kd[..., c][None], output=full[c], mode="constant", cval=0.0)
        out = np.moveaxis(full, 0, -1)
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (C,):
            raise DimensionError(f"bias {bias.shape} does not match channels {C}")
        out = out + bias.data
        parents.append(bias)
    out = np.ascontiguousarray(out).reshape(lead + out_ext + (C,))

    def bwd(g):
        g = g.reshape((-1,) + out_ext + (C,))
        red = tuple(range(g.ndim - 1))
        gx = gk = None
        if strided:
            gc = np.moveaxis(g, -1, 0)
            if x.requires_grad:
                gx = _scatter_windows(gc, kd, xc.shape, pads, stride)
                gx = np.moveaxis(gx, 0, -1).reshape(x.shape)
            if kernel.requires_grad:
                gk = np.zeros(kd.shape, dtype=np.result_type(gc, xc))
                for tap, view in _tap_views(xc, ksize, pads, stride, out_ext):
                    gk[tap] = np.einsum("zbthw,zbthw->z", view, gc)
            grads = [gx, gk]
            if bias is not None:
                grads.append(g.sum(axis=red))
            return grads
        gfull = np.zeros_like(xc)
        gfull[sub] = np.moveaxis(g, -1, 0)
        if x.requires_grad:
            gxc = np.empty_like(xc)
            for c in range(C):
                ndimage.convolve(gfull[c], kd[..., c][None], output=gxc[c], mode="constant", cval=0.0)
            gx = np.moveaxis(gxc, 0, -1).reshape(x.shape)
        if kernel.requires_grad:
            gk = _kernel_grad(xc, gfull, ksize, pads)
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=red))
        return grads
    return _node(out, parents, bwd, "dwconv3d")


def _tap_views(xc: np.ndarray, ksize, pads, stride, out_ext):
    """Yield ``((i, j, k), view)`` with ``view`` the padded input sampled at every
    output position for kernel tap ``(i, j, k)``."""
    xp = np.pad(xc, [(0, 0), (0, 0)] + [(p, p) for p in pads])
    for tap in itertools.product(*(range(k) for k in ksize)):
        yield tap, xp[(slice(None), slice(None)) + tuple(
            slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(tap, stride, out_ext))]


def _scatter_windows(gc: np.ndarray, kd: np.ndarray, shape, pads, stride) -> np.ndarray:
    """Adjoint of the strided window contraction: spread ``g * kernel`` back onto the input."""
    C, B, T, H, W = shape
    pt, ph, pw = pads
    kt, kh, kw = kd.shape[:3]
    To, Ho, Wo = gc.shape[2:]
    st, sh, sw = stride
    gp = np.zeros((C, B, T + 2 * pt, H + 2 * ph, W + 2 * pw), dtype=gc.dtype)
    for i, j, k in itertools.product(range(kt), range(kh), range(kw)):
        gp[:, :, i:i + st * (To - 1) + 1:st, j:j + sh * (Ho - 1) + 1:sh, k:k + sw * (Wo - 1) + 1:sw] += \
            gc * kd[i, j, k][:, None, None, None, None]
    return gp[:, :, pt:pt + T, ph:ph + H, pw:pw + W]


def _kernel_grad(xc: np.ndarray, gfull: np.ndarray, ksize, pads) -> np.ndarray:
    """``gk[a, b, c, ch] = sum_i g[ch, i] * x_padded[ch, i + (a, b, c)]`` via one
    strided view over the flattened padded input."""
    C, B, T, H, W = xc.shape
    pt, ph, pw = pads
    xp = np.pad(xc, [(0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)])
    Tp, Hp, Wp = T + 2 * pt, H + 2 * ph, W + 2 * pw
    gp = np.zeros_like(xp)
    gp[:, :, :T, :H, :W] = gfull
    X = xp.reshape(C, -1)
    G = gp.reshape(C, -1)
    kt, kh, kw = ksize
    span = X.shape[1] - ((kt - 1) * Hp * Wp + (kh - 1) * Wp + (kw - 1))
    s = X.strides[1]
    view = as_strided(X, shape=(C, kt, kh, kw, span),
                      strides=(X.strides[0], Hp * Wp * s, Wp * s, s, s), writeable=False)
    return np.einsum("zabcl,zl->abcz", view, G[:, :span])


@primitive("channelnorm")
def channelnorm(x, scale, shift, eps: float = 1e-8) -> Tensor:
    """Normalize each channel over the (T, H, W) extent of each sample."""
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    if x.ndim < 4:
        raise DimensionError(f"channelnorm expects (..., T, H, W, C), got {x.shape}")
    C = x.shape[-1]
    if scale.shape != (C,) or shift.shape != (C,):
        raise DimensionError(f"norm parameters {scale.shape}/{shift.shape} do not match {C} channels")
    axes = (-4, -3, -2)
    n = x.shape[-4] * x.shape[-3] * x.shape[-2]
    if n < 2:
        raise DimensionError("channelnorm needs at least 2 positions per channel")
    mu = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    sd = scale.data

    def bwd(g):
        gxhat = g * sd
        gx = None
        if x.requires_grad:
            gx = inv_std * (gxhat - gxhat.mean(axis=axes, keepdims=True)
                            - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)
    return _node(xhat * sd + shift.data, (x, scale, shift), bwd, "channelnorm")


_CORNERS = list(itertools.product((0, 1), repeat=3))


@primitive("trilinear")
def trilinear(fmap, coords) -> Tensor:
    """Sample ``fmap (..., T, H, W, C)`` at ``coords (..., M, 3)`` by trilinear
    interpolation over the 8 neighbouring tokens.

    Coordinates are in index space and must lie in ``[0, L-1]`` per axis.
    Gradients flow to both the feature map and the coordinates.
    """
    fmap, coords = as_tensor(fmap), as_tensor(coords)
    if fmap.ndim < 4 or coords.ndim < 2 or coords.shape[-1] != 3:
        raise DimensionError(f"trilinear expects (..., T, H, W, C) and (..., M, 3), got {fmap.shape}, {coords.shape}")
    lead = fmap.shape[:-4]
    if coords.shape[:-2] != lead:
        raise DimensionError(f"batch axes differ: {fmap.shape} vs {coords.shape}")
    ext = np.array(fmap.shape[-4:-1])
    C = fmap.shape[-1]
    F = fmap.data.reshape((-1,) + fmap.shape[-4:])
    B, M = F.shape[0], coords.shape[-2]
    P = coords.data.reshape(B, M, 3)
    if np.any(P < 0) or np.any(P > ext - 1) or not np.all(np.isfinite(P)):
        raise ContractError("sampling point outside the feature volume")
    i0 = np.minimum(np.floor(P).astype(np.int64), np.maximum(ext - 2, 0))
    i1 = np.minimum(i0 + 1, ext - 1)
    frac = P - i0
    weights = (1.0 - frac, frac)
    index = (i0, i1)
    bidx = np.arange(B)[:, None]

    corners = []
    out = np.zeros((B, M, C), dtype=F.dtype)
    for dt, dh, dw in _CORNERS:
        it, ih, iw = index[dt][..., 0], index[dh][..., 1], index[dw][..., 2]
        wt, wh, ww = weights[dt][..., 0], weights[dh][..., 1], weights[dw][..., 2]
        vals = F[bidx, it, ih, iw]
        out += (wt * wh * ww)[..., None] * vals
        corners.append((it, ih, iw, wt, wh, ww, vals))

    def bwd(g):
        g = g.reshape(B, M, C)
        gF = np.zeros_like(F) if fmap.requires_grad else None
        gP = np.zeros_like(P) if coords.requires_grad else None
        for (dt, dh, dw), (it, ih, iw, wt, wh, ww, vals) in zip(_CORNERS, corners):
            if gF is not None:
                np.add.at(gF, (bidx, it, ih, iw), (wt * wh * ww)[..., None] * g)
            if gP is not None:
                dot = (vals * g).sum(axis=-1)
                gP[..., 0] += (1 if dt else -1) * wh * ww * dot
                gP[..., 1] += (1 if dh else -1) * wt * ww * dot
                gP[..., 2] += (1 if dw else -1) * wt * wh * dot
        return (None if gF is None else gF.reshape(fmap.shape),
                None if gP is None else gP.reshape(coords.shape))
    return _node(out.reshape(lead + (M, C)), (fmap, coords), bwd, "trilinear")


def _otam_table(D: np.ndarray) -> np.ndarray:
    """Cumulative-cost table for monotone paths entering anywhere on row 0."""
    C = np.empty_like(D)
    C[:, 0, :] = D[:, 0, :]
    Tq, Tc = D.shape[1:]
    for i in range(1, Tq):
        C[:, i, 0] = D[:, i, 0] + C[:, i - 1, 0]
        for j in range(1, Tc):
            best = np.minimum(np.minimum(C[:, i - 1, j], C[:, i - 1, j - 1]), C[:, i, j - 1])
            C[:, i, j] = D[:, i, j] + best
    return C


def _otam_path_mask(C: np.ndarray) -> np.ndarray:
    mask = np.zeros_like(C)
    Tq = C.shape[1]
    for b in range(C.shape[0]):
        i, j = Tq - 1, int(np.argmin(C[b, Tq - 1]))
        mask[b, i, j] = 1.0
        while i > 0:
            options = [(C[b, i - 1, j - 1], i - 1, j - 1)] if j > 0 else []
            options.append((C[b, i - 1, j], i - 1, j))
            if j > 0:
                options.append((C[b, i, j - 1], i, j - 1))
            _, i, j = min(options, key=lambda o: o[0])
            mask[b, i, j] = 1.0
    return mask


def otam_directional(D: np.ndarray) -> np.ndarray:
    """Minimum monotone alignment cost of ``D (..., Tq, Tc)`` (no symmetrization)."""
    D = np.asarray(D)
    flat = D.reshape((-1,) + D.shape[-2:])
    return _otam_table(flat)[:, -1, :].min(axis=-1).reshape(D.shape[:-2])


@primitive("otam")
def otam(dist) -> Tensor:
    """Ordered temporal alignment cost of frame-distance matrices.

    Paths enter on any column of the first row and leave on any column of the
    last row, moving right, diagonally or down.  The cost is averaged with the
    same quantity computed on the transposed matrix.
    """
    dist = as_tensor(dist)
    if dist.ndim < 2 or dist.shape[-1] == 0 or dist.shape[-2] == 0:
        raise ContractError(f"otam needs a non-empty matrix, got shape {dist.shape}")
    lead, (Tq, Tc) = dist.shape[:-2], dist.shape[-2:]
    D = dist.data.reshape(-1, Tq, Tc)
    Dt = np.ascontiguousarray(D.transpose(0, 2, 1))
    fwd_table, rev_table = _otam_table(D), _otam_table(Dt)
    cost = 0.5 * (fwd_table[:, -1, :].min(axis=-1) + rev_table[:, -1, :].min(axis=-1))

    def bwd(g):
        mask = 0.5 * (_otam_path_mask(fwd_table) + _otam_path_mask(rev_table).transpose(0, 2, 1))
        return ((mask * g.reshape(-1, 1, 1)).reshape(dist.shape),)
    return _node(cost.reshape(lead), (dist,), bwd, "otam")
