"""Sliding-window whole-volume prediction and attention-mask export."""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ops
from .data import Volume, save_volume
from .model import Model
from .tensor import ConfigError, Tensor, no_grad


@dataclass
class WindowPlan:
    patch: tuple
    stride: tuple
    extents: tuple  # extents after padding up to the patch size
    axis_origins: tuple  # per-axis origin lists

    @property
    def origins(self) -> list[tuple]:
        return list(itertools.product(*self.axis_origins))

    def __len__(self) -> int:
        n = 1
        for o in self.axis_origins:
            n *= len(o)
        return n


@dataclass
class ProbabilityMap:
    prob: np.ndarray
    coverage: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def to_volume(self) -> Volume:
        return Volume(self.prob.astype(np.float32), self.spacing, "image")


def _axis_origins(n: int, p: int, s: int) -> list[int]:
    if n <= p:
        return [0]
    out = list(range(0, n - p + 1, s))
    if out[-1] + p < n:
        out.append(n - p)
    return out


def plan_windows(volume_extents, patch, stride) -> WindowPlan:
    """Origins at multiples of the stride plus one clamped final window per axis."""
    extents = tuple(int(e) for e in volume_extents)
    patch = tuple(int(p) for p in patch)
    stride = tuple(int(s) for s in stride)
    if not len(extents) == len(patch) == len(stride):
        raise ConfigError(f"extents {extents}, patch {patch} and stride {stride} differ in rank")
    if any(s <= 0 for s in stride):
        raise ConfigError(f"stride must be positive, got {stride}")
    if any(p <= 0 for p in patch):
        raise ConfigError(f"patch must be positive, got {patch}")
    if any(s > p for s, p in zip(stride, patch)):
        raise ConfigError(f"stride {stride} larger than patch {patch} would leave gaps")
    padded = tuple(max(n, p) for n, p in zip(extents, patch))
    origins = tuple(_axis_origins(n, p, s) for n, p, s in zip(padded, patch, stride))
    return WindowPlan(patch, stride, padded, origins)


def _pad_widths(extents, patch):
    pads = []
    for n, p in zip(extents, patch):
        extra = max(0, p - n)
        pads.append((extra // 2, extra - extra // 2))
    return pads


def _reflect_pad(arr: np.ndarray, pads) -> np.ndarray:
    if not any(a or b for a, b in pads):
        return arr
    # 'reflect' needs at least two samples along an axis
    mode = "reflect" if min(arr.shape) > 1 else "symmetric"
    return np.pad(arr, pads, mode=mode)


def gaussian_weights(patch, sigma_scale: float = 0.125) -> np.ndarray:
    grids = []
    for p in patch:
        c = (p - 1) / 2.0
        g = np.exp(-0.5 * ((np.arange(p) - c) / (sigma_scale * p)) ** 2)
        grids.append(g / g.max())
    w = grids[0]
    for g in grids[1:]:
        w = np.multiply.outer(w, g)
    return w


def _run_windows(model: Model, arr: np.ndarray, patch, stride, collect, weighting: str = "uniform"):
    """Accumulate per-window outputs from ``collect(out_dict) -> list[array]``.

    Returns the averaged arrays cropped back to ``arr``'s extents and the
    coverage-count grid.
    """
    patch = tuple(int(p) for p in patch)
    plan = plan_windows(arr.shape, patch, stride)
    pads = _pad_widths(arr.shape, patch)
    work = _reflect_pad(arr, pads)
    if weighting == "uniform":
        w = None
    elif weighting == "gaussian":
        w = gaussian_weights(patch)
    else:
        raise ConfigError(f"weighting must be 'uniform' or 'gaussian', got {weighting!r}")
    sums = None
    count = np.zeros(work.shape)
    dtype = model.dtype
    with no_grad():
        for origin in plan.origins:
            sl = tuple(slice(o, o + p) for o, p in zip(origin, patch))
            x = Tensor(np.ascontiguousarray(work[sl], dtype=dtype)[None, None])
            outs = collect(model.forward(x, "eval"))
            if sums is None:
                sums = [np.zeros(work.shape) for _ in outs]
            for acc, o in zip(sums, outs):
                acc[sl] += o if w is None else o * w
            count[sl] += 1.0 if w is None else w
    crop = tuple(slice(a, a + n) for (a, _), n in zip(pads, arr.shape))
    cov = count[crop]
    return [(s[crop] / cov) for s in sums], cov


def predict_volume(model: Model, volume, patch, stride, weighting: str = "uniform") -> ProbabilityMap:
    """Per-voxel mean of the sigmoid outputs of all windows covering it."""
    arr = volume.voxels if isinstance(volume, Volume) else np.asarray(volume)
    spacing = volume.spacing if isinstance(volume, Volume) else (1.0, 1.0, 1.0)
    (prob,), cov = _run_windows(model, arr, patch, stride, lambda o: [o["main"].data[0, 0]], weighting)
    plan = plan_windows(arr.shape, patch, stride)
    if weighting == "uniform":
        cov = _coverage_counts(arr.shape, plan, patch)
    return ProbabilityMap(prob.astype(model.dtype), cov, spacing)


def _coverage_counts(shape, plan: WindowPlan, patch) -> np.ndarray:
    pads = _pad_widths(shape, patch)
    count = np.zeros(plan.extents, np.int64)
    for origin in plan.origins:
        count[tuple(slice(o, o + p) for o, p in zip(origin, patch))] += 1
    return count[tuple(slice(a, a + n) for (a, _), n in zip(pads, shape))]


def binarize(prob, threshold: float = 0.5, spacing=None) -> Volume:
    if isinstance(prob, ProbabilityMap):
        spacing = spacing or prob.spacing
        prob = prob.prob
    return Volume((np.asarray(prob) >= threshold).astype(np.uint8), spacing or (1.0, 1.0, 1.0), "label")


def _mask_arrays(out: dict) -> list[np.ndarray]:
    res = []
    for m in out["masks"]:
        cm = ops.channel_mean(m)
        full = out["main"].shape[2:]
        factor = tuple(f // c for f, c in zip(full, cm.shape[2:]))
        res.append(ops.upsample_nn(cm, factor).data[0, 0])
    return res


def attention_maps(model: Model, volume, patch, stride) -> list[np.ndarray]:
    """Channel-mean AM masks at input resolution, window-averaged."""
    if not model.config.has_attention:
        raise ConfigError(f"variant {model.config.variant} has no attention modules to export")
    arr = volume.voxels if isinstance(volume, Volume) else np.asarray(volume)
    maps, _ = _run_windows(model, arr, patch, stride, _mask_arrays)
    return maps


def write_pgm(path, image2d: np.ndarray) -> None:
    """8-bit binary PGM (P5) of values in [0, 1]; darker = larger value."""
    img = np.clip(np.round(255.0 * (1.0 - np.asarray(image2d, np.float64))), 0, 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(v) for v in m.groups())
    if maxval != 255:
        raise ValueError(f"{path}: maxval {maxval} unsupported")
    return np.frombuffer(raw, np.uint8, count=w * h, offset=m.end()).reshape(h, w)


def export_attention_masks(model: Model, volume, patch, stride, out_dir) -> list[Path]:
    """Write ``am{i}.svol`` (f32 mask volume) and ``am{i}_mid.pgm`` (middle slice)."""
    maps = attention_maps(model, volume, patch, stride)
    spacing = volume.spacing if isinstance(volume, Volume) else (1.0, 1.0, 1.0)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, m in enumerate(maps, 1):
        p = out_dir / f"am{i}.svol"
        save_volume(Volume(m.astype(np.float32), spacing, "image"), p)
        q = out_dir / f"am{i}_mid.pgm"
        write_pgm(q, m[m.shape[0] // 2])
        paths += [p, q]
    return paths
