"""Hot inner loops with a numba path and a pure-numpy/scipy fallback.

Set ``SIPNET_NUMBA=0`` in the environment before import to force the
fallback path (useful for debugging and for the kernel benchmark).
"""

import os

import numpy as np

_WANT_NUMBA = os.environ.get("SIPNET_NUMBA", "1").lower() not in ("0", "false", "no", "off")

try:
    if not _WANT_NUMBA:
        raise ImportError
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False


def backend() -> str:
    return "numba" if HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# col2im: scatter-add of per-offset contributions into a padded grid.
#
# ``cols`` has layout (C, *kernel, *grid) and ``out`` has (C, *padded);
# out[c, o + s*i] += cols[c, o, i] for every kernel offset o and grid
# position i.  Used by the conv input-gradient and the transposed conv.
# ---------------------------------------------------------------------------


def _col2im_numpy(cols, out, stride):
    nsp = out.ndim - 1
    kshape = cols.shape[1 : 1 + nsp]
    grid = cols.shape[1 + nsp :]
    for off in np.ndindex(*kshape):
        sl = tuple(slice(o, o + s * (g - 1) + 1, s) for o, s, g in zip(off, stride, grid))
        out[(slice(None),) + sl] += cols[(slice(None),) + off]
    return out


if HAVE_NUMBA:

    @njit(cache=True)
    def _col2im3_nb(cols, out, sd, sh, sw):
        C, KD, KH, KW, GD, GH, GW = cols.shape
        for c in range(C):
            for a in range(KD):
                for b in range(KH):
                    for e in range(KW):
                        for i in range(GD):
                            z = a + sd * i
                            for j in range(GH):
                                y = b + sh * j
                                for k in range(GW):
                                    out[c, z, y, e + sw * k] += cols[c, a, b, e, i, j, k]
        return out

    @njit(cache=True)
    def _col2im2_nb(cols, out, sh, sw):
        C, KH, KW, GH, GW = cols.shape
        for c in range(C):
            for b in range(KH):
                for e in range(KW):
                    for j in range(GH):
                        y = b + sh * j
                        for k in range(GW):
                            out[c, y, e + sw * k] += cols[c, b, e, j, k]
        return out


def col2im(cols: np.ndarray, out: np.ndarray, stride: tuple) -> np.ndarray:
    """Accumulate ``cols`` into ``out`` in place and return it."""
    if HAVE_NUMBA and cols.dtype == out.dtype:
        cols = np.ascontiguousarray(cols)
        if out.ndim == 4:
            return _col2im3_nb(cols, out, *stride)
        if out.ndim == 3:
            return _col2im2_nb(cols, out, *stride)
    return _col2im_numpy(cols, out, stride)


# ---------------------------------------------------------------------------
# Exact squared Euclidean distance transform (lower envelope of parabolas,
# one axis at a time, with per-axis voxel spacing).
# ---------------------------------------------------------------------------

_BIG = 1e30

if HAVE_NUMBA:

    @njit(cache=True)
    def _edt_lines_nb(f, spacing):
        # f: (L, n) squared distances along lines; transformed in place.
        L, n = f.shape
        v = np.empty(n, np.int64)
        z = np.empty(n + 1, np.float64)
        d = np.empty(n, np.float64)
        s2 = spacing * spacing
        for line in range(L):
            g = f[line]
            k = -1
            s = 0.0
            for q in range(n):
                if g[q] >= _BIG:
                    continue
                if k < 0:
                    k = 0
                    v[0] = q
                    z[0] = -np.inf
                    z[1] = np.inf
                    continue
                while True:
                    p = v[k]
                    s = ((g[q] + s2 * q * q) - (g[p] + s2 * p * p)) / (2.0 * s2 * (q - p))
                    if s <= z[k]:
                        k -= 1
                        if k < 0:
                            break
                    else:
                        break
                k += 1
                v[k] = q
                z[k] = s if k > 0 else -np.inf
                z[k + 1] = np.inf
            if k < 0:
                continue
            j = 0
            for q in range(n):
                while z[j + 1] < q:
                    j += 1
                p = v[j]
                d[q] = s2 * (q - p) * (q - p) + g[p]
            for q in range(n):
                g[q] = d[q]
        return f


def _edt_numba(feature: np.ndarray, spacing) -> np.ndarray:
    f = np.where(feature, 0.0, _BIG)
    for axis, sp in enumerate(spacing):
        moved = np.moveaxis(f, axis, -1)
        lines = np.ascontiguousarray(moved).reshape(-1, moved.shape[-1])
        _edt_lines_nb(lines, float(sp))
        f = np.moveaxis(lines.reshape(moved.shape), -1, axis)
    f = np.ascontiguousarray(f)
    f[f >= _BIG] = np.inf
    return f


def _edt_scipy(feature: np.ndarray, spacing) -> np.ndarray:
    from scipy.ndimage import distance_transform_edt

    d = distance_transform_edt(~feature, sampling=spacing)
    return np.asarray(d, dtype=np.float64) ** 2


def squared_edt(feature: np.ndarray, spacing) -> np.ndarray:
    """Squared distance (world units) from every voxel to the nearest ``True`` voxel.

    ``spacing`` is given per array axis.  Voxels are at ``index * spacing``.
    Returns ``inf`` everywhere if ``feature`` has no ``True`` voxel.
    """
    feature = np.asarray(feature, dtype=bool)
    if not feature.any():
        return np.full(feature.shape, np.inf)
    if HAVE_NUMBA:
        return _edt_numba(feature, spacing)
    return _edt_scipy(feature, spacing)
