import numpy as np
import pytest

from oracles import hd_abd_brute, surface_points
from sipnet import metrics as M
from sipnet.metrics import MetricError


def cube(shape, lo, hi):
    m = np.zeros(shape, bool)
    m[tuple(slice(a, b) for a, b in zip(lo, hi))] = True
    return m


def test_dsc_fixtures():
    a = cube((4, 4, 4), (0, 0, 0), (2, 2, 2))
    b = cube((4, 4, 4), (0, 0, 1), (2, 2, 3))
    assert M.dsc(a, a) == 1.0
    assert M.dsc(a, cube((4, 4, 4), (2, 2, 2), (4, 4, 4))) == 0.0
    assert M.dsc(a, b) == 0.5
    assert M.dsc(np.zeros((2, 2, 2)), np.zeros((2, 2, 2))) == 1.0
    with pytest.raises(MetricError):
        M.dsc(a, np.zeros((3, 3, 3)))


def test_arvd_fixtures():
    gt = np.zeros(1000, bool)
    gt[:100] = True
    pred = np.zeros(1000, bool)
    pred[:90] = True
    g3, p3 = gt.reshape(10, 10, 10), pred.reshape(10, 10, 10)
    assert M.arvd(p3, g3) == 10.0
    assert M.arvd(g3, g3) == 0.0
    assert M.arvd(np.zeros_like(g3), g3) == 100.0
    with pytest.raises(MetricError):
        M.arvd(g3, np.zeros_like(g3))


def test_surface_counts():
    single = cube((3, 3, 3), (1, 1, 1), (2, 2, 2))
    assert len(M.surface_extract(single)) == 1
    assert len(M.surface_extract(cube((5, 5, 5), (1, 1, 1), (4, 4, 4)))) == 26
    full = np.ones((4, 5, 6), bool)
    s = M.surface_extract(full)
    assert len(s) == full.size - 2 * 3 * 4
    assert len(M.surface_extract(np.zeros((3, 3, 3)))) == 0


def test_surface_points_in_mm():
    m = cube((2, 3, 4), (1, 2, 3), (2, 3, 4))
    s = M.surface_extract(m, (0.5, 2.0, 3.0))
    np.testing.assert_allclose(s.points, [[1.5, 4.0, 3.0]])


def test_two_point_distances():
    a = np.zeros((1, 1, 6), bool)
    b = np.zeros((1, 1, 6), bool)
    a[0, 0, 0] = b[0, 0, 3] = True
    assert M.hd(a, b) == 3.0
    assert M.hd(a, b, (0.625, 1, 1)) == pytest.approx(1.875, abs=1e-12)
    c = np.zeros((1, 1, 6), bool)
    c[0, 0, 2] = True
    assert M.abd(a, c) == 2.0
    assert M.hd(a, a) == 0.0 and M.abd(a, a) == 0.0


def test_empty_masks_undefined():
    a = cube((3, 3, 3), (0, 0, 0), (1, 1, 1))
    with pytest.raises(MetricError):
        M.hd(a, np.zeros_like(a))
    with pytest.raises(MetricError):
        M.abd(np.zeros_like(a), a)


@pytest.mark.parametrize("seed", range(20))
def test_distance_metrics_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(2, 10, size=3))
    a = rng.random(shape) < rng.uniform(0.05, 0.6)
    b = rng.random(shape) < rng.uniform(0.05, 0.6)
    a.flat[0] = b.flat[-1] = True
    sp = tuple(rng.uniform(0.4, 2.0, size=3))
    h, d = hd_abd_brute(a, b, sp)
    assert abs(M.hd(a, b, sp) - h) < 1e-9
    assert abs(M.abd(a, b, sp) - d) < 1e-9


def test_symmetry_and_spacing_scaling():
    rng = np.random.default_rng(7)
    a = rng.random((6, 7, 8)) < 0.3
    b = rng.random((6, 7, 8)) < 0.3
    sp = (0.7, 0.9, 1.3)
    assert M.dsc(a, b) == M.dsc(b, a)
    assert M.hd(a, b, sp) == M.hd(b, a, sp)
    assert M.abd(a, b, sp) == pytest.approx(M.abd(b, a, sp), abs=1e-12)
    s = 2.5
    sp2 = tuple(s * v for v in sp)
    assert M.hd(a, b, sp2) == pytest.approx(s * M.hd(a, b, sp), rel=1e-12)
    assert M.abd(a, b, sp2) == pytest.approx(s * M.abd(a, b, sp), rel=1e-12)


def test_surface_oracle_agrees_with_library():
    m = np.random.default_rng(3).random((5, 6, 7)) < 0.5
    lib = M.surface_extract(m).indices.astype(float)
    assert sorted(map(tuple, lib)) == sorted(map(tuple, surface_points(m)))


def _slab(z0, z1, shape=(12, 4, 4)):
    g = np.zeros(shape, bool)
    g[z0:z1] = True
    return g


def test_region_split_rules():
    apex, mid, base = M.region_split(_slab(0, 9))
    assert (apex, mid, base) == (range(0, 3), range(3, 6), range(6, 9))
    sizes = [len(r) for r in M.region_split(_slab(1, 11))]
    assert sizes == [4, 3, 3]
    sizes = [len(r) for r in M.region_split(_slab(5, 6))]
    assert sizes == [1, 0, 0]
    with pytest.raises(MetricError):
        M.region_split(np.zeros((3, 3, 3)))


def test_evaluate_case_perfect_and_consistent():
    g = _slab(2, 11)
    g[:, 0] = False
    rep = M.evaluate_case(g, g, (1, 1, 1))
    for r in M.REGIONS:
        m = rep.regions[r]
        assert (m.dsc, m.hd_mm, m.abd_mm, m.arvd_pct) == (1.0, 0.0, 0.0, 0.0)
    p = g.copy()
    p[5] = False
    rep = M.evaluate_case(p, g, (1, 1, 1))
    assert rep.regions["whole"].dsc == M.dsc(p, g)


def test_evaluate_case_degenerate_bands_absent():
    rep = M.evaluate_case(_slab(3, 4), _slab(3, 4), (1, 1, 1))
    assert rep.regions["base"] is None
    assert rep.regions["apex"].dsc == 1.0


def test_report_csv(tmp_path):
    g = _slab(0, 6)
    M.write_report_csv(tmp_path / "r.csv", {"c1": M.evaluate_case(g, g)})
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "case,region,dsc,hd_mm,abd_mm,arvd_pct"
    assert [l.split(",")[1] for l in lines[1:]] == ["whole", "base", "apex"]
