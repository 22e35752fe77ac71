"""Differentiable primitives: elementwise math, 3-D (and 2-D) conv, pooling,
normalization, resampling and channel plumbing.

All spatial ops are written for any number of trailing spatial axes; the
``*3`` names are the volumetric aliases used throughout the package.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._kernels import col2im
from .tensor import ConfigError, ShapeError, Tensor, as_tensor, make_result

# im2col working-set cap per chunk (bytes)
_CHUNK_BYTES = 48 * 2**20


def _nsp(x: Tensor) -> int:
    return x.ndim - 2


def _triple(v, n: int) -> tuple:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * n
    v = tuple(int(a) for a in v)
    if len(v) != n:
        raise ConfigError(f"expected {n} values, got {v}")
    return v


def _chan_dot(a: np.ndarray, b: np.ndarray, dtype=None) -> np.ndarray:
    """Per-channel inner product over (N, *spatial)."""
    n, c = a.shape[:2]
    return np.einsum("ncv,ncv->c", a.reshape(n, c, -1), b.reshape(n, c, -1), dtype=dtype)


def _same_shape(x: Tensor, y: Tensor, op: str):
    if x.shape != y.shape:
        raise ShapeError(f"{op}: shape mismatch {x.shape} vs {y.shape}")


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def _scalar(v) -> bool:
    return not isinstance(v, Tensor)


def add(x, y) -> Tensor:
    if _scalar(y):
        return make_result(x.data + np.asarray(y, x.dtype), (x,), lambda g: (g,), "add")
    if _scalar(x):
        return add(y, x)
    _same_shape(x, y, "add")
    return make_result(x.data + y.data, (x, y), lambda g: (g, g), "add")


def sub(x, y) -> Tensor:
    if _scalar(y):
        return make_result(x.data - np.asarray(y, x.dtype), (x,), lambda g: (g,), "sub")
    if _scalar(x):
        return make_result(np.asarray(x, y.dtype) - y.data, (y,), lambda g: (-g,), "sub")
    _same_shape(x, y, "sub")
    return make_result(x.data - y.data, (x, y), lambda g: (g, -g), "sub")


def mul(x, y) -> Tensor:
    if _scalar(y):
        c = np.asarray(y, x.dtype)
        return make_result(x.data * c, (x,), lambda g: (g * c,), "mul")
    if _scalar(x):
        return mul(y, x)
    _same_shape(x, y, "mul")
    xd, yd = x.data, y.data
    return make_result(xd * yd, (x, y), lambda g: (g * yd, g * xd), "mul")


def div(x, y) -> Tensor:
    if _scalar(y):
        c = np.asarray(y, x.dtype)
        return make_result(x.data / c, (x,), lambda g: (g / c,), "div")
    if _scalar(x):
        c = np.asarray(x, y.dtype)
        yd = y.data
        return make_result(c / yd, (y,), lambda g: (-g * c / (yd * yd),), "div")
    _same_shape(x, y, "div")
    xd, yd = x.data, y.data
    return make_result(xd / yd, (x, y), lambda g: (g / yd, -g * xd / (yd * yd)), "div")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape, dtype = x.shape, x.dtype
    return make_result(
        np.asarray(x.data.sum(dtype=np.float64), dtype=dtype),
        (x,),
        lambda g: (np.full(shape, g, dtype=dtype),),
        "sum",
    )


def mean(x: Tensor) -> Tensor:
    return mul(sum(x), 1.0 / x.size)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def _sigmoid_np(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    # keep the open interval (0, 1) at the working precision
    fi = np.finfo(a.dtype)
    np.clip(out, fi.tiny, 1.0 - fi.epsneg, out=out)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    return make_result(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def dropout(x: Tensor, rate: float = 0.3, mode: str = "train", rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if mode != "train" or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in train mode needs an rng")
    keep = rng.random(x.shape) >= rate
    scale = np.asarray(1.0 / (1.0 - rate), x.dtype)
    m = keep * scale
    m = m.astype(x.dtype)
    return make_result(x.data * m, (x,), lambda g: (g * m,), "dropout")


# ---------------------------------------------------------------------------
# channel plumbing
# ---------------------------------------------------------------------------


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ShapeError("concat_channels of an empty list")
    if len(xs) == 1:
        return xs[0]
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(ref) or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: {t.shape} incompatible with {ref}")
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def bw(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(xs)))

    return make_result(np.concatenate([t.data for t in xs], axis=1), xs, bw, "concat")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype)
        full[:, start:stop] = g
        return (full,)

    return make_result(np.ascontiguousarray(x.data[:, start:stop]), (x,), bw, "slice")


def channel_mean(x: Tensor) -> Tensor:
    c = x.shape[1]

    def bw(g):
        return (np.repeat(g / c, c, axis=1),)

    return make_result(x.data.mean(axis=1, keepdims=True), (x,), bw, "channel_mean")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _out_extent(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def _pad(a: np.ndarray, padding: tuple) -> np.ndarray:
    if not any(padding):
        return a
    return np.pad(a, [(0, 0)] * (a.ndim - len(padding)) + [(p, p) for p in padding])


def _row_chunks(grid: tuple, per_voxel_bytes: int):
    rows = grid[0]
    per_row = per_voxel_bytes * math.prod(grid[1:])
    step = max(1, min(rows, _CHUNK_BYTES // max(per_row, 1)))
    for r0 in range(0, rows, step):
        yield r0, min(rows, r0 + step)


def _windows(xp_n: np.ndarray, kernel: tuple, stride: tuple) -> np.ndarray:
    """(C, *padded) -> strided view (C, *grid, *kernel)."""
    nsp = len(kernel)
    v = sliding_window_view(xp_n, kernel, axis=tuple(range(1, 1 + nsp)))
    return v[(slice(None),) + tuple(slice(None, None, s) for s in stride)]


def _cols(win: np.ndarray, r0: int, r1: int, nsp: int) -> np.ndarray:
    """Rows [r0, r1) of a window view -> (C*prod(kernel), V) matrix."""
    w = win[:, r0:r1]
    c = w.shape[0]
    perm = (0,) + tuple(range(1 + nsp, 1 + 2 * nsp)) + tuple(range(1, 1 + nsp))
    w = w.transpose(perm)
    return w.reshape(c * math.prod(w.shape[1 : 1 + nsp]), -1)


def conv(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Cross-correlation plus bias: x (N, Cin, *S), w (Cout, Cin, *K), b (Cout,)."""
    nsp = _nsp(x)
    if w.ndim != nsp + 2:
        raise ShapeError(f"conv: weight rank {w.ndim} does not match input rank {x.ndim}")
    N, C = x.shape[:2]
    Cout, Cw = w.shape[:2]
    if C != Cw:
        raise ShapeError(f"conv: input has {C} channels, weight expects {Cw}")
    K = w.shape[2:]
    stride = _triple(stride, nsp)
    padding = _triple(padding, nsp)
    S = x.shape[2:]
    G = tuple(_out_extent(n, k, s, p) for n, k, s, p in zip(S, K, stride, padding))
    if any(g <= 0 for g in G):
        raise ShapeError(f"conv: zero-extent output {G} for input {S}, kernel {K}")
    if b is not None and b.shape != (Cout,):
        raise ShapeError(f"conv: bias shape {b.shape} != ({Cout},)")
    dtype = x.dtype
    w2 = w.data.reshape(Cout, -1)
    pointwise = all(k == 1 for k in K) and all(s == 1 for s in stride) and not any(padding)
    V = math.prod(G)

    if pointwise:
        xf = x.data.reshape(N, C, -1)
        out = np.matmul(w2, xf)
    else:
        xp = _pad(x.data, padding)
        out = np.empty((N, Cout, V), dtype)
        itemsize = np.dtype(dtype).itemsize
        for n in range(N):
            win = _windows(xp[n], K, stride)
            o = out[n].reshape(Cout, *G)
            for r0, r1 in _row_chunks(G, w2.shape[1] * itemsize):
                o[:, r0:r1] = (w2 @ _cols(win, r0, r1, nsp)).reshape(Cout, r1 - r0, *G[1:])
    if b is not None:
        out += b.data.reshape(1, Cout, 1)
    out = out.reshape(N, Cout, *G)
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        g3 = g.reshape(N, Cout, V)
        gw = np.zeros_like(w2)
        gx = None
        if pointwise:
            if x.requires_grad:
                gx = np.matmul(w2.T, g3).reshape(x.shape)
            gw = np.tensordot(g3, xf, axes=([0, 2], [0, 2]))
        else:
            if x.requires_grad:
                gxp = np.zeros(xp.shape, dtype)
            itemsize = np.dtype(dtype).itemsize
            for n in range(N):
                win = _windows(xp[n], K, stride)
                gn = g3[n].reshape(Cout, *G)
                for r0, r1 in _row_chunks(G, w2.shape[1] * itemsize):
                    gc = gn[:, r0:r1].reshape(Cout, -1)
                    gw += gc @ _cols(win, r0, r1, nsp).T
                    if x.requires_grad:
                        dcols = (w2.T @ gc).reshape(C, *K, r1 - r0, *G[1:])
                        origin = (slice(None), slice(stride[0] * r0, None))
                        col2im(dcols, gxp[n][origin], stride)
            if x.requires_grad:
                crop = (slice(None), slice(None)) + tuple(slice(p, p + s) for p, s in zip(padding, S))
                gx = np.ascontiguousarray(gxp[crop])
        res = [gx, gw.reshape(w.shape)]
        if b is not None:
            res.append(g3.sum(axis=(0, 2)).astype(dtype))
        return res

    return make_result(out, inputs, bw, "conv")


conv3 = conv


def transposed_conv(x: Tensor, w: Tensor, b: Tensor | None = None, stride=2, groups: int = 1) -> Tensor:
    """Fractionally-strided conv whose output is exactly ``stride`` x the input.

    ``w`` is (Cin, Cout // groups, *K) with odd K; padding (K-1)//2 is trimmed
    from the leading edge and the trailing edge is cut so every spatial
    extent multiplies by ``stride``.  ``groups`` is 1 or Cin (depthwise).
    """
    nsp = _nsp(x)
    if w.ndim != nsp + 2:
        raise ShapeError(f"transposed_conv: weight rank {w.ndim} vs input rank {x.ndim}")
    N, Cin = x.shape[:2]
    if w.shape[0] != Cin:
        raise ShapeError(f"transposed_conv: input has {Cin} channels, weight expects {w.shape[0]}")
    K = w.shape[2:]
    stride = _triple(stride, nsp)
    pads = tuple((k - 1) // 2 for k in K)
    if any(s != 2 for s in stride) or any(p + s > k for p, s, k in zip(pads, stride, K)):
        raise ConfigError(f"transposed_conv: stride {stride} with kernel {K} does not double the extents")
    if groups not in (1, Cin):
        raise ConfigError(f"transposed_conv: groups must be 1 or {Cin}, got {groups}")
    depthwise = groups == Cin and groups > 1
    if depthwise and w.shape[1] != 1:
        raise ShapeError(f"depthwise transposed_conv needs weight (C, 1, *K), got {w.shape}")
    Cout = Cin if depthwise else w.shape[1]
    if b is not None and b.shape != (Cout,):
        raise ShapeError(f"transposed_conv: bias shape {b.shape} != ({Cout},)")
    S = x.shape[2:]
    full = tuple((n - 1) * s + k for n, s, k in zip(S, stride, K))
    crop = (slice(None), slice(None)) + tuple(slice(p, p + s * n) for p, s, n in zip(pads, stride, S))
    dtype = x.dtype
    offsets = list(np.ndindex(*K))

    def _sl(off):
        return (slice(None), slice(None)) + tuple(
            slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(off, stride, S)
        )

    outf = np.zeros((N, Cout) + full, dtype)
    if depthwise:
        wk = w.data[:, 0]
        for off in offsets:
            coeff = wk[(slice(None),) + off].reshape((1, Cin) + (1,) * nsp)
            outf[_sl(off)] += coeff * x.data
    else:
        w2 = w.data.reshape(Cin, -1)
        xf = x.data.reshape(N, Cin, -1)
        for n in range(N):
            cols = (w2.T @ xf[n]).reshape(Cout, *K, *S)
            col2im(cols, outf[n], stride)
    out = np.ascontiguousarray(outf[crop])
    if b is not None:
        out += b.data.reshape((1, Cout) + (1,) * nsp)
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        gf = np.zeros((N, Cout) + full, dtype)
        gf[crop] = g
        gx = None
        if depthwise:
            gw = np.zeros_like(w.data)
            if x.requires_grad:
                gx = np.zeros_like(x.data)
            for off in offsets:
                gs = gf[_sl(off)]
                gw[(slice(None), 0) + off] = _chan_dot(gs, x.data)
                if x.requires_grad:
                    gx += wk[(slice(None),) + off].reshape((1, Cin) + (1,) * nsp) * gs
        else:
            gw2 = np.zeros_like(w2)
            if x.requires_grad:
                gx = np.empty_like(x.data)
            for n in range(N):
                win = _windows(gf[n], K, stride)
                cols = _cols(win, 0, S[0], nsp)
                gw2 += xf[n] @ cols.T
                if x.requires_grad:
                    gx[n] = (w2 @ cols).reshape(Cin, *S)
            gw = gw2.reshape(w.shape)
        res = [gx, gw]
        if b is not None:
            res.append(g.sum(axis=(0,) + tuple(range(2, 2 + nsp))).astype(dtype))
        return res

    return make_result(out, inputs, bw, "transposed_conv")


transposed_conv3 = transposed_conv


# ---------------------------------------------------------------------------
# pooling and resampling
# ---------------------------------------------------------------------------


def avg_pool(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping mean pooling (window == stride)."""
    if window != stride:
        raise ConfigError("avg_pool supports window == stride only")
    nsp = _nsp(x)
    S = x.shape[2:]
    if any(n % window for n in S):
        raise ShapeError(f"avg_pool: spatial extents {S} not divisible by {window}")
    N, C = x.shape[:2]
    split = [N, C]
    for n in S:
        split += [n // window, window]
    red = tuple(range(3, 3 + 2 * nsp, 2))
    out = x.data.reshape(split).mean(axis=red, dtype=x.dtype)
    scale = np.asarray(1.0 / window**nsp, x.dtype)

    def bw(g):
        gg = np.expand_dims(g * scale, red)
        return (np.broadcast_to(gg, split).reshape(x.shape).copy(),)

    return make_result(np.ascontiguousarray(out), (x,), bw, "avg_pool")


avg_pool3 = avg_pool


def upsample_nn(x: Tensor, factor) -> Tensor:
    """Nearest-neighbour replication by an integer factor per spatial axis."""
    nsp = _nsp(x)
    factor = _triple(factor, nsp)
    if any(f < 1 for f in factor):
        raise ConfigError(f"upsample factors must be >= 1, got {factor}")
    if all(f == 1 for f in factor):
        return x
    N, C = x.shape[:2]
    S = x.shape[2:]
    exp = [N, C]
    shaped = [N, C]
    for n, f in zip(S, factor):
        exp += [n, f]
        shaped += [n, 1]
    out = np.broadcast_to(x.data.reshape(shaped), exp).reshape((N, C) + tuple(n * f for n, f in zip(S, factor)))
    red = tuple(range(3, 3 + 2 * nsp, 2))

    def bw(g):
        return (g.reshape(exp).sum(axis=red),)

    return make_result(np.ascontiguousarray(out), (x,), bw, "upsample_nn")


def _linear_matrix(n_in: int, f: int, dtype) -> np.ndarray:
    n_out = n_in * f
    src = (np.arange(n_out) + 0.5) / f - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = src - i0
    m = np.zeros((n_out, n_in), dtype)
    np.add.at(m, (np.arange(n_out), i0), 1 - t)
    np.add.at(m, (np.arange(n_out), i1), t)
    return m


def upsample_linear(x: Tensor, factor) -> Tensor:
    """Separable (tri)linear upsampling, half-pixel aligned, edge clamped."""
    nsp = _nsp(x)
    factor = _triple(factor, nsp)
    if any(f < 1 for f in factor):
        raise ConfigError(f"upsample factors must be >= 1, got {factor}")
    mats = [_linear_matrix(n, f, x.dtype) for n, f in zip(x.shape[2:], factor)]
    out = x.data
    for ax, m in enumerate(mats):
        out = np.moveaxis(np.tensordot(out, m, axes=([2 + ax], [1])), -1, 2 + ax)

    def bw(g):
        for ax, m in enumerate(mats):
            g = np.moveaxis(np.tensordot(g, m, axes=([2 + ax], [0])), -1, 2 + ax)
        return (np.ascontiguousarray(g),)

    return make_result(np.ascontiguousarray(out), (x,), bw, "upsample_linear")


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str = "train",
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over (N, *spatial).

    Train mode uses batch statistics and updates the running buffers in place;
    eval mode uses the running buffers.
    """
    if eps <= 0:
        raise ConfigError(f"batch_norm eps must be > 0, got {eps}")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batch_norm: gamma/beta must be ({C},)")
    nsp = _nsp(x)
    axes = (0,) + tuple(range(2, 2 + nsp))
    bshape = (1, C) + (1,) * nsp
    dtype = x.dtype
    if mode == "train":
        M = x.size // C
        mu = x.data.mean(axis=axes, dtype=np.float64)
        xc = x.data - mu.reshape(bshape).astype(dtype)
        var = _chan_dot(xc, xc, dtype=np.float64) / M
        inv = (1.0 / np.sqrt(var + eps)).astype(dtype)
        xhat = xc * inv.reshape(bshape)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (M / max(M - 1, 1))
    elif mode == "eval":
        inv = (1.0 / np.sqrt(running_var.astype(np.float64) + eps)).astype(dtype)
        xhat = (x.data - running_mean.reshape(bshape).astype(dtype)) * inv.reshape(bshape)
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def bw(g):
        gb = g.sum(axis=axes)
        gg = _chan_dot(g, xhat)
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(bshape)
            if mode == "train":
                s1 = gxhat.mean(axis=axes).reshape(bshape)
                s2 = _chan_dot(gxhat, xhat).reshape(bshape) / M
                gx = (gxhat - s1 - xhat * s2) * inv.reshape(bshape)
            else:
                gx = gxhat * inv.reshape(bshape)
            gx = gx.astype(dtype, copy=False)
        return gx, gg.astype(dtype), gb.astype(dtype)

    return make_result(out.astype(dtype, copy=False), (x, gamma, beta), bw, "batch_norm")
