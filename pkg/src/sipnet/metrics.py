"""Volumetric segmentation metrics with physical spacing.

Spacing arguments follow the Volume convention: (x, y, z) in millimetres,
where x runs along the last array axis and z along the first.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._kernels import squared_edt
from .data import Volume


class MetricError(ValueError):
    """Metric undefined for the given masks (e.g. empty ground truth)."""


REGIONS = ("whole", "base", "apex")
CSV_FIELDS = ("case", "region", "dsc", "hd_mm", "abd_mm", "arvd_pct")


def _arr(m) -> np.ndarray:
    return np.asarray(m.voxels if isinstance(m, Volume) else m).astype(bool)


def _zyx(spacing) -> tuple:
    x, y, z = (float(s) for s in spacing)
    return (z, y, x)


def _check(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise MetricError(f"mask extents differ: {a.shape} vs {b.shape}")


def dsc(a, b) -> float:
    a, b = _arr(a), _arr(b)
    _check(a, b)
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / (na + nb)


def arvd(a, b) -> float:
    """Absolute relative volume difference of prediction ``a`` against truth ``b``, percent."""
    a, b = _arr(a), _arr(b)
    _check(a, b)
    nb = int(b.sum())
    if nb == 0:
        raise MetricError("aRVD is undefined for an empty ground truth")
    return 100.0 * abs(int(a.sum()) - nb) / nb


def surface_mask(mask) -> np.ndarray:
    """Foreground voxels with at least one background 6-neighbour (outside counts as background)."""
    m = _arr(mask)
    p = np.pad(m, 1, constant_values=False)
    interior = m.copy()
    for ax in range(m.ndim):
        for shift in (-1, 1):
            interior &= np.roll(p, shift, axis=ax)[tuple(slice(1, -1) for _ in range(m.ndim))]
    return m & ~interior


@dataclass
class SurfacePointSet:
    indices: np.ndarray  # (M, 3) voxel indices in array order
    points: np.ndarray  # (M, 3) centre coordinates in mm, (x, y, z) order

    def __len__(self) -> int:
        return len(self.indices)


def surface_extract(mask, spacing=(1.0, 1.0, 1.0)) -> SurfacePointSet:
    idx = np.argwhere(surface_mask(mask))
    pts = idx[:, ::-1] * np.asarray([float(s) for s in spacing])
    return SurfacePointSet(idx, pts.astype(np.float64))


def _surface_distances(a: np.ndarray, b: np.ndarray, spacing) -> tuple[np.ndarray, np.ndarray]:
    """Distances from every surface voxel of ``a`` to the surface of ``b`` and vice versa."""
    _check(a, b)
    if not a.any() or not b.any():
        raise MetricError("surface distances are undefined when either mask is empty")
    sa, sb = surface_mask(a), surface_mask(b)
    zyx = _zyx(spacing)
    d_ab = np.sqrt(squared_edt(sb, zyx)[sa])
    d_ba = np.sqrt(squared_edt(sa, zyx)[sb])
    return d_ab, d_ba


def hd(a, b, spacing=(1.0, 1.0, 1.0)) -> float:
    """Symmetric (100th percentile) Hausdorff distance between mask surfaces, mm."""
    d_ab, d_ba = _surface_distances(_arr(a), _arr(b), spacing)
    return float(max(d_ab.max(), d_ba.max()))


def abd(a, b, spacing=(1.0, 1.0, 1.0)) -> float:
    """Pooled symmetric mean surface distance, mm."""
    d_ab, d_ba = _surface_distances(_arr(a), _arr(b), spacing)
    return float((d_ab.sum() + d_ba.sum()) / (d_ab.size + d_ba.size))


def region_split(gt) -> tuple[range, range, range]:
    """Apex / mid / base slice ranges over the ground-truth axial extent.

    Axial = first array axis.  Band sizes differ by at most one; leftover
    slices go to the earlier bands.
    """
    g = _arr(gt)
    zs = np.flatnonzero(g.reshape(g.shape[0], -1).any(axis=1))
    if zs.size == 0:
        raise MetricError("region split needs a non-empty ground truth")
    z0, n = int(zs[0]), int(zs[-1] - zs[0] + 1)
    q, r = divmod(n, 3)
    sizes = [q + (r > 0), q + (r > 1), q]
    bands, start = [], z0
    for s in sizes:
        bands.append(range(start, start + s))
        start += s
    return tuple(bands)


@dataclass
class RegionMetrics:
    dsc: Optional[float]
    hd_mm: Optional[float]
    abd_mm: Optional[float]
    arvd_pct: Optional[float]


@dataclass
class MetricReport:
    regions: dict = field(default_factory=dict)  # region name -> RegionMetrics or None

    def rows(self, case: str) -> list[list]:
        out = []
        for r in REGIONS:
            m = self.regions.get(r)
            vals = [None] * 4 if m is None else [m.dsc, m.hd_mm, m.abd_mm, m.arvd_pct]
            out.append([case, r] + vals)
        return out


def _region_metrics(p: np.ndarray, g: np.ndarray, spacing) -> Optional[RegionMetrics]:
    if not g.any() and not p.any():
        return None
    both = p.any() and g.any()
    return RegionMetrics(
        dsc(p, g),
        hd(p, g, spacing) if both else None,
        abd(p, g, spacing) if both else None,
        arvd(p, g) if g.any() else None,
    )


def evaluate_case(pred, gt, spacing=None) -> MetricReport:
    """Whole / base / apex metrics.  Regions restrict both masks to the band's
    slices; an empty band yields ``None``, as do surface distances when one of
    the restricted masks is empty."""
    if spacing is None:
        spacing = gt.spacing if isinstance(gt, Volume) else (1.0, 1.0, 1.0)
    p, g = _arr(pred), _arr(gt)
    _check(p, g)
    rep = MetricReport({"whole": _region_metrics(p, g, spacing)})
    if not g.any():
        rep.regions.update(base=None, apex=None)
        return rep
    apex, _, base = region_split(g)
    for name, band in (("base", base), ("apex", apex)):
        if len(band) == 0:
            rep.regions[name] = None
            continue
        sel = np.zeros(g.shape[0], bool)
        sel[band.start : band.stop] = True
        rep.regions[name] = _region_metrics(p & sel[:, None, None], g & sel[:, None, None], spacing)
    return rep


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def write_report_csv(path, reports: dict) -> None:
    """``reports`` maps case name to MetricReport."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_FIELDS)
        for case, rep in reports.items():
            for row in rep.rows(case):
                w.writerow(row[:2] + [_fmt(v) for v in row[2:]])


def aggregate(reports: dict) -> dict:
    """Per region and metric: (mean, std, n) over cases where the value exists."""
    out = {}
    for r in REGIONS:
        for k in ("dsc", "hd_mm", "abd_mm", "arvd_pct"):
            vals = [getattr(rep.regions[r], k) for rep in reports.values() if rep.regions.get(r) is not None]
            vals = [v for v in vals if v is not None]
            out[(r, k)] = (float(np.mean(vals)), float(np.std(vals)), len(vals)) if vals else (math.nan, math.nan, 0)
    return out


def format_table(reports: dict) -> str:
    lines = [f"{'case':<16}{'region':<8}{'DSC':>8}{'HD mm':>10}{'ABD mm':>10}{'aRVD %':>10}"]

    def cell(v, w, prec):
        return f"{'-':>{w}}" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:>{w}.{prec}f}"

    for case, rep in reports.items():
        for row in rep.rows(case):
            lines.append(
                f"{row[0]:<16}{row[1]:<8}{cell(row[2], 8, 4)}{cell(row[3], 10, 3)}{cell(row[4], 10, 3)}{cell(row[5], 10, 2)}"
            )
    agg = aggregate(reports)
    for r in REGIONS:
        vals = [agg[(r, k)][0] for k in ("dsc", "hd_mm", "abd_mm", "arvd_pct")]
        lines.append(f"{'mean':<16}{r:<8}{cell(vals[0], 8, 4)}{cell(vals[1], 10, 3)}{cell(vals[2], 10, 3)}{cell(vals[3], 10, 2)}")
    return "\n".join(lines)
