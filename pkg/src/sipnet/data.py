"""Volumes, the SVOL container, preprocessing, patch sampling, augmentation
and synthetic phantoms."""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .tensor import ConfigError

SVOL_MAGIC = b"SVOL"
SVOL_VERSION = 1
SVOL_HEADER = 32
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_KINDS = {0: "image", 1: "label"}


class FormatError(ValueError):
    """Malformed SVOL / checkpoint / manifest content."""


class DataError(ValueError):
    """Dataset-level problem (missing files, empty splits, mismatched shapes)."""


@dataclass
class Volume:
    """Voxel grid in (depth, height, width) order with spacing given as (x, y, z) mm."""

    voxels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    kind: str = "image"

    def __post_init__(self):
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ConfigError(f"spacing must be three positive values, got {self.spacing}")
        if self.kind not in ("image", "label"):
            raise ConfigError(f"kind must be 'image' or 'label', got {self.kind!r}")
        if self.voxels.ndim != 3:
            raise ConfigError(f"volumes are 3-D, got shape {self.voxels.shape}")
        if self.kind == "label":
            v = np.asarray(self.voxels)
            if not np.isin(v, (0, 1)).all():
                raise ConfigError("label volumes may only contain 0 and 1")
            self.voxels = v.astype(np.uint8)

    @property
    def shape(self) -> tuple:
        return self.voxels.shape

    @property
    def spacing_zyx(self) -> tuple:
        """Spacing in array-axis order."""
        x, y, z = self.spacing
        return (z, y, x)


# ---------------------------------------------------------------------------
# SVOL container
# ---------------------------------------------------------------------------


def encode_volume(volume: Volume) -> bytes:
    if volume.kind == "label":
        code, payload = 1, np.ascontiguousarray(volume.voxels, dtype="u1")
    else:
        code, payload = 0, np.ascontiguousarray(volume.voxels, dtype="<f4")
    kind = 0 if volume.kind == "image" else 1
    header = SVOL_MAGIC + struct.pack("<BBBB", SVOL_VERSION, code, kind, 0)
    header += struct.pack("<3I", *volume.shape) + struct.pack("<3f", *volume.spacing)
    return header + payload.tobytes()


def decode_volume(buf: bytes) -> Volume:
    if len(buf) < SVOL_HEADER:
        raise FormatError(f"SVOL truncated: header needs {SVOL_HEADER} bytes, got {len(buf)}")
    if buf[:4] != SVOL_MAGIC:
        raise FormatError(f"bad SVOL magic {buf[:4]!r} at byte 0")
    version, code, kind, reserved = struct.unpack_from("<BBBB", buf, 4)
    if version != SVOL_VERSION:
        raise FormatError(f"unsupported SVOL version {version} at byte 4")
    if code not in _DTYPES:
        raise FormatError(f"unknown SVOL dtype code {code} at byte 5")
    if kind not in _KINDS:
        raise FormatError(f"unknown SVOL kind {kind} at byte 6")
    if reserved != 0:
        raise FormatError(f"reserved byte 7 must be 0, got {reserved}")
    dims = struct.unpack_from("<3I", buf, 8)
    spacing = struct.unpack_from("<3f", buf, 20)
    dt = _DTYPES[code]
    expected = math.prod(dims) * dt.itemsize
    actual = len(buf) - SVOL_HEADER
    if actual != expected:
        raise FormatError(
            f"SVOL payload at byte {SVOL_HEADER}: dims {dims} x {dt.itemsize} bytes "
            f"need {expected} bytes, found {actual}"
        )
    data = np.frombuffer(buf, dtype=dt, offset=SVOL_HEADER).reshape(dims)
    data = data.astype(np.float32) if code == 0 else data.copy()
    if _KINDS[kind] == "label" and code == 1 and data.max(initial=0) > 1:
        raise FormatError("label payload contains values other than 0/1")
    vol = Volume.__new__(Volume)
    vol.voxels = data
    vol.spacing = tuple(float(s) for s in spacing)
    vol.kind = _KINDS[kind]
    if vol.kind == "label" and code == 0:
        vol.voxels = data.astype(np.uint8)
    return vol


def save_volume(volume: Volume, path) -> None:
    Path(path).write_bytes(encode_volume(volume))


def load_volume(path) -> Volume:
    return decode_volume(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

SPLITS = ("train", "val", "test")


@dataclass
class Case:
    image: str
    label: str
    split: str = "train"

    @property
    def name(self) -> str:
        return Path(self.image).name.removesuffix(".svol").removesuffix("_image")


def read_manifest(path) -> list[Case]:
    path = Path(path)
    try:
        records = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None
    if not isinstance(records, list):
        raise FormatError(f"{path}: manifest must be a JSON list of records")
    cases = []
    for i, r in enumerate(records):
        if not isinstance(r, dict) or set(r) != {"image", "label", "split"}:
            raise FormatError(f"{path}: record {i} must have exactly image, label, split")
        if r["split"] not in SPLITS:
            raise FormatError(f"{path}: record {i} has unknown split {r['split']!r}")
        base = path.parent
        cases.append(Case(str(base / r["image"]), str(base / r["label"]), r["split"]))
    return cases


def write_manifest(cases: list[Case], path) -> None:
    path = Path(path)
    recs = []
    for c in cases:
        recs.append(
            {
                "image": os.path.relpath(c.image, path.parent),
                "label": os.path.relpath(c.label, path.parent),
                "split": c.split,
            }
        )
    path.write_text(json.dumps(recs, indent=2) + "\n")


@dataclass
class Dataset:
    """In-memory (image, label) pairs with split assignments."""

    images: list
    labels: list
    splits: list
    names: list = field(default_factory=list)

    def __post_init__(self):
        if not self.names:
            self.names = [f"case{i:03d}" for i in range(len(self.images))]
        if not (len(self.images) == len(self.labels) == len(self.splits) == len(self.names)):
            raise DataError("images, labels, splits and names must have equal length")
        for n, im, lb in zip(self.names, self.images, self.labels):
            if im.shape != lb.shape:
                raise DataError(f"{n}: image {im.shape} and label {lb.shape} differ")

    def indices(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s == split]

    def subset(self, split: str):
        return [(self.images[i], self.labels[i]) for i in self.indices(split)]

    @classmethod
    def from_manifest(cls, path, preprocess=None) -> "Dataset":
        images, labels, splits, names = [], [], [], []
        for c in read_manifest(path):
            for p in (c.image, c.label):
                if not Path(p).exists():
                    raise DataError(f"case {c.name}: missing file {p}")
            im, lb = load_volume(c.image), load_volume(c.label)
            if preprocess is not None:
                im, lb = preprocess(im, lb)
            images.append(im)
            labels.append(lb)
            splits.append(c.split)
            names.append(c.name)
        return cls(images, labels, splits, names)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def _interp_matrix(n_in: int, n_out: int, ratio: float, nearest: bool) -> np.ndarray:
    # output voxel centre i maps to input coordinate (i + 0.5) * ratio - 0.5
    src = (np.arange(n_out) + 0.5) * ratio - 0.5
    src = np.clip(src, 0, n_in - 1)
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    if nearest:
        m[rows, np.floor(src + 0.5).astype(int).clip(0, n_in - 1)] = 1.0
        return m
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = src - i0
    np.add.at(m, (rows, i0), 1 - t)
    np.add.at(m, (rows, i1), t)
    return m


def resample(volume: Volume, target_spacing) -> Volume:
    """Resample to ``target_spacing`` (x, y, z) mm keeping the field of view.

    Images use linear interpolation along each axis, labels nearest neighbour.
    """
    target = tuple(float(s) for s in target_spacing)
    if len(target) != 3 or any(s <= 0 for s in target):
        raise ConfigError(f"target spacing must be three positive values, got {target_spacing}")
    src_zyx = volume.spacing_zyx
    tgt_zyx = (target[2], target[1], target[0])
    out = volume.voxels.astype(np.float64)
    nearest = volume.kind == "label"
    new_shape = []
    for ax, (n, s, t) in enumerate(zip(volume.shape, src_zyx, tgt_zyx)):
        m_out = int(round(n * s / t))
        if m_out < 1:
            raise ConfigError(f"resampling axis {ax} from {n} voxels at {s} mm to {t} mm leaves no voxels")
        new_shape.append(m_out)
        if m_out == n and s == t:
            continue
        mat = _interp_matrix(n, m_out, t / s, nearest)
        out = np.moveaxis(np.tensordot(mat, out, axes=([1], [ax])), 0, ax)
    if nearest:
        return Volume(out.round().astype(np.uint8), target, "label")
    return Volume(out.astype(np.float32), target, "image")


def normalize_zscore(volume: Volume, std_floor: float = 1e-8) -> Volume:
    v = volume.voxels.astype(np.float64)
    mu = v.mean()
    sd = v.std()
    if sd < std_floor:
        return Volume(np.zeros(v.shape, np.float32), volume.spacing, "image")
    return Volume(((v - mu) / sd).astype(np.float32), volume.spacing, "image")


def truncate_intensity(volume: Volume, lo: float = -200.0, hi: float = 200.0) -> Volume:
    if lo >= hi:
        raise ConfigError(f"truncation needs lo < hi, got [{lo}, {hi}]")
    return Volume(np.clip(volume.voxels, lo, hi).astype(np.float32), volume.spacing, "image")


# ---------------------------------------------------------------------------
# patches and augmentation
# ---------------------------------------------------------------------------


def pad_to(arr: np.ndarray, extents) -> np.ndarray:
    """Symmetric edge padding so every axis reaches at least ``extents``."""
    pads = []
    for n, e in zip(arr.shape, extents):
        extra = max(0, int(e) - n)
        pads.append((extra // 2, extra - extra // 2))
    if not any(a or b for a, b in pads):
        return arr
    return np.pad(arr, pads, mode="edge")


def patch_origin(label: np.ndarray, extents, rng: np.random.Generator, fg_prob: float = 0.5) -> tuple:
    """Random crop origin; with probability ``fg_prob`` the crop is centred on a
    random foreground voxel (clamped to stay inside the volume)."""
    shape = label.shape
    hi = [n - e for n, e in zip(shape, extents)]
    if rng.random() < fg_prob:
        fg = np.flatnonzero(label)
        if fg.size:
            centre = np.unravel_index(fg[rng.integers(fg.size)], shape)
            return tuple(int(np.clip(c - e // 2, 0, h)) for c, e, h in zip(centre, extents, hi))
    return tuple(int(rng.integers(h + 1)) for h in hi)


def sample_patch(image, label, patch_extents, rng: np.random.Generator, fg_prob: float = 0.5, return_origin=False):
    """Aligned random crops of image and label arrays (or Volumes)."""
    im = image.voxels if isinstance(image, Volume) else np.asarray(image)
    lb = label.voxels if isinstance(label, Volume) else np.asarray(label)
    if im.shape != lb.shape:
        raise DataError(f"image {im.shape} and label {lb.shape} differ")
    extents = tuple(int(e) for e in patch_extents)
    im, lb = pad_to(im, extents), pad_to(lb, extents)
    origin = patch_origin(lb, extents, rng, fg_prob)
    sl = tuple(slice(o, o + e) for o, e in zip(origin, extents))
    out = (im[sl].copy(), lb[sl].copy())
    return out + (origin,) if return_origin else out


@dataclass
class AugmentParams:
    angle_deg: float = 0.0
    scale: float = 1.0
    flip_h: bool = False
    flip_w: bool = False

    def is_identity(self) -> bool:
        return self.angle_deg == 0.0 and self.scale == 1.0 and not self.flip_h and not self.flip_w


def draw_augment(rng: np.random.Generator, max_angle=10.0, scale_range=(0.9, 1.1), flip_prob=0.5) -> AugmentParams:
    return AugmentParams(
        float(rng.uniform(-max_angle, max_angle)),
        float(rng.uniform(*scale_range)),
        bool(rng.random() < flip_prob),
        bool(rng.random() < flip_prob),
    )


def apply_augment(arr: np.ndarray, params: AugmentParams, order: int) -> np.ndarray:
    """In-plane rotation + isotropic scaling about the centre, then flips.

    ``order`` 1 = linear (images), 0 = nearest (labels).  Extents unchanged.
    """
    out = arr
    if params.angle_deg != 0.0 or params.scale != 1.0:
        from scipy.ndimage import map_coordinates

        th = math.radians(params.angle_deg)
        c, s = math.cos(th), math.sin(th)
        inv = 1.0 / params.scale
        centre = (np.array(arr.shape) - 1) / 2.0
        zz, yy, xx = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in arr.shape], indexing="ij")
        dz, dy, dx = zz - centre[0], yy - centre[1], xx - centre[2]
        src = np.stack(
            [
                centre[0] + inv * dz,
                centre[1] + inv * (c * dy + s * dx),
                centre[2] + inv * (-s * dy + c * dx),
            ]
        )
        out = map_coordinates(arr.astype(np.float64), src, order=order, mode="nearest")
        out = out.astype(arr.dtype) if order == 0 else out.astype(np.float32)
    if params.flip_h:
        out = out[:, ::-1, :]
    if params.flip_w:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def augment(patch: np.ndarray, label_patch: np.ndarray, rng: np.random.Generator, params: AugmentParams | None = None):
    """Apply one random geometric transform identically to image and label."""
    p = params if params is not None else draw_augment(rng)
    if p.is_identity():
        return patch, label_patch
    return apply_augment(patch, p, 1), apply_augment(label_patch, p, 0)


# ---------------------------------------------------------------------------
# synthetic phantoms
# ---------------------------------------------------------------------------


@dataclass
class PhantomSpec:
    extents: tuple = (16, 64, 64)
    spacing: tuple = (1.0, 1.0, 1.0)
    ellipsoids: tuple = (1, 3)  # inclusive count range
    semi_axes_depth: tuple = (4.0, 6.5)
    semi_axes_plane: tuple = (9.0, 14.0)
    foreground: float = 0.7
    background: float = 0.2
    noise_sigma: float = 0.05
    distractor_prob: float = 0.5
    distractor_intensity: float = 0.6
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        import dataclasses

        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown phantom spec keys: {sorted(unknown)}")
        return cls(**d)


def _ellipsoid(shape, centre, axes, angle) -> np.ndarray:
    zz, yy, xx = np.ogrid[: shape[0], : shape[1], : shape[2]]
    c, s = math.cos(angle), math.sin(angle)
    dz = zz - centre[0]
    dy = yy - centre[1]
    dx = xx - centre[2]
    u = c * dy + s * dx
    v = -s * dy + c * dx
    return (dz / axes[0]) ** 2 + (u / axes[1]) ** 2 + (v / axes[2]) ** 2 <= 1.0


def generate_phantom(spec: PhantomSpec):
    """(image, label) Volumes: union of random ellipsoids over noisy background,
    plus optional same-intensity distractor blobs that are not labelled."""
    rng = np.random.default_rng(spec.seed)
    shape = tuple(int(e) for e in spec.extents)
    label = np.zeros(shape, bool)
    lo, hi = spec.ellipsoids
    n = int(rng.integers(lo, hi + 1)) if hi > 0 else 0
    for _ in range(n):
        axes = (
            rng.uniform(*spec.semi_axes_depth),
            rng.uniform(*spec.semi_axes_plane),
            rng.uniform(*spec.semi_axes_plane),
        )
        centre = [rng.uniform(0.3 * e, 0.7 * e) for e in shape]
        label |= _ellipsoid(shape, centre, axes, rng.uniform(0, math.pi))
    image = np.full(shape, spec.background)
    image[label] = spec.foreground
    if n and rng.random() < spec.distractor_prob:
        axes = (
            rng.uniform(1.5, 3.0),
            rng.uniform(2.0, 5.0),
            rng.uniform(2.0, 5.0),
        )
        # corners of the field of view, away from the organ-like blobs
        centre = [
            rng.uniform(0.25 * shape[0], 0.75 * shape[0]),
            rng.choice([0.12, 0.88]) * shape[1],
            rng.choice([0.12, 0.88]) * shape[2],
        ]
        blob = _ellipsoid(shape, centre, axes, 0.0) & ~label
        image[blob] = spec.distractor_intensity
    image = image + rng.normal(0.0, spec.noise_sigma, shape)
    return (
        Volume(image.astype(np.float32), spec.spacing, "image"),
        Volume(label.astype(np.uint8), spec.spacing, "label"),
    )
