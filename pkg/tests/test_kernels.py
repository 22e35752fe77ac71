import os
import subprocess
import sys

import numpy as np
import pytest

from sipnet import _kernels as k

needs_numba = pytest.mark.skipif(not k.HAVE_NUMBA, reason="numba unavailable")


def brute_sq_edt(mask, spacing):
    pts = np.argwhere(mask) * np.asarray(spacing)
    grid = np.indices(mask.shape).reshape(mask.ndim, -1).T * np.asarray(spacing)
    d = ((grid[:, None, :] - pts[None, :, :]) ** 2).sum(-1).min(axis=1)
    return d.reshape(mask.shape)


@pytest.mark.parametrize("seed", range(5))
def test_squared_edt_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(3, 9, size=3))
    mask = rng.random(shape) < 0.05
    mask.flat[rng.integers(mask.size)] = True
    sp = tuple(rng.uniform(0.3, 2.0, size=3))
    np.testing.assert_allclose(k.squared_edt(mask, sp), brute_sq_edt(mask, sp), rtol=1e-12, atol=1e-12)


def test_squared_edt_empty_is_inf():
    assert np.isinf(k.squared_edt(np.zeros((3, 3, 3), bool), (1, 1, 1))).all()


@needs_numba
def test_numba_and_fallback_edt_agree():
    rng = np.random.default_rng(9)
    mask = rng.random((10, 20, 15)) < 0.02
    sp = (1.5, 0.625, 0.625)
    np.testing.assert_allclose(k._edt_numba(mask, sp), k._edt_scipy(mask, sp), rtol=1e-12)


@needs_numba
@pytest.mark.parametrize("stride", [(1, 1, 1), (2, 2, 2), (1, 2, 1)])
def test_numba_and_fallback_col2im_agree(stride):
    rng = np.random.default_rng(1)
    cols = rng.standard_normal((3, 3, 3, 3, 4, 5, 3))
    pad = tuple((g - 1) * s + 3 for g, s in zip(cols.shape[4:], stride))
    a = k._col2im_numpy(cols, np.zeros((3,) + pad), stride)
    b = k._col2im3_nb(cols, np.zeros((3,) + pad), *stride)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_env_flag_selects_fallback():
    env = dict(os.environ, SIPNET_NUMBA="0")
    out = subprocess.run(
        [sys.executable, "-c", "from sipnet._kernels import backend; print(backend())"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "numpy"
