"""Losses, SGD with momentum, the training loop and SIPC checkpoints."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import ops
from .data import Dataset, DataError, FormatError, augment, sample_patch
from .inference import binarize, predict_volume
from .metrics import dsc
from .model import Model, ModelConfig
from .tensor import ConfigError, ShapeError, Tensor, UsageError, backward, no_grad

# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def dice_loss(pred: Tensor, target, smooth: float = 1.0) -> Tensor:
    """1 - (2 sum(p t) + s) / (sum p + sum t + s) over every voxel of the batch."""
    t = target if isinstance(target, Tensor) else Tensor(np.asarray(target, pred.dtype))
    if pred.shape != t.shape:
        raise ShapeError(f"dice_loss: pred {pred.shape} vs target {t.shape}")
    inter = ops.sum(ops.mul(pred, t))
    denom = ops.add(ops.add(ops.sum(pred), ops.sum(t)), smooth)
    return ops.sub(1.0, ops.div(ops.add(ops.mul(inter, 2.0), smooth), denom))


AUX_WEIGHTS = (0.4, 0.2, 0.1)


def total_loss(main: Tensor, aux_list, target, weights=AUX_WEIGHTS, smooth: float = 1.0) -> Tensor:
    """Main Dice loss plus weighted Dice losses of the deep-supervision heads."""
    loss = dice_loss(main, target, smooth)
    if not aux_list:
        return loss
    if len(weights) != len(aux_list):
        raise ConfigError(f"{len(aux_list)} auxiliary outputs but {len(weights)} weights")
    for w, a in zip(weights, aux_list):
        if w:
            loss = ops.add(loss, ops.mul(dice_loss(a, target, smooth), float(w)))
    return loss


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-6
    batch_size: int = 4
    aux_loss_weights: tuple = AUX_WEIGHTS
    epochs: int = 1
    patch: tuple = (16, 96, 96)
    seed: int = 0
    # iterations per epoch; None = one pass over the training cases
    steps_per_epoch: Optional[int] = None
    lr_schedule: str = "constant"  # constant | poly
    poly_power: float = 0.9
    augment: bool = True
    fg_prob: float = 0.5
    val_stride: Optional[tuple] = None  # None = half patch
    threshold: float = 0.5
    dice_smooth: float = 1.0

    def __post_init__(self):
        self.aux_loss_weights = tuple(self.aux_loss_weights)
        self.patch = tuple(self.patch)
        if self.val_stride is not None:
            self.val_stride = tuple(self.val_stride)
        self.validate()

    def validate(self):
        if self.lr <= 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive, momentum and weight_decay non-negative")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch must be >= 1")
        if self.lr_schedule not in ("constant", "poly"):
            raise ConfigError(f"lr_schedule must be 'constant' or 'poly', got {self.lr_schedule!r}")
        if any(w < 0 for w in self.aux_loss_weights):
            raise ConfigError("aux_loss_weights must be non-negative")
        if not 0 <= self.fg_prob <= 1:
            raise ConfigError("fg_prob must be in [0, 1]")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class OptimizerState:
    velocity: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: dict) -> "OptimizerState":
        return cls({n: np.zeros_like(t.data) for n, t in params.items()})


def sgd_step(params: dict, grads: dict, state: OptimizerState, config: TrainConfig, lr: float | None = None):
    """v <- m v - lr (g + wd p);  p <- p + v   (in place)."""
    lr = config.lr if lr is None else lr
    m, wd = config.momentum, config.weight_decay
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise UsageError(f"no gradient for parameter {name!r}")
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(p.data)
        if v.shape != p.shape:
            raise ShapeError(f"velocity for {name} has shape {v.shape}, parameter {p.shape}")
        v *= p.data.dtype.type(m)
        v -= p.data.dtype.type(lr) * (g + p.data.dtype.type(wd) * p.data)
        p.data += v
    state.step += 1


def collect_grads(params: dict) -> dict:
    """Gradients of every parameter; parameters outside the graph get zeros."""
    return {n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in params.items()}


def scheduled_lr(config: TrainConfig, step: int, total_steps: int) -> float:
    if config.lr_schedule == "poly" and total_steps > 0:
        return config.lr * (1.0 - min(step, total_steps) / total_steps) ** config.poly_power
    return config.lr


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"SIPC"
CKPT_VERSION = 1


class CheckpointError(FormatError):
    pass


@dataclass
class Checkpoint:
    meta: dict  # model config, train config, epoch, rng state, log ...
    tensors: dict  # name -> float32 array (params, "buffer/..", "opt/..")


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(ckpt.meta, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(meta)), meta]
    for name, arr in ckpt.tensors.items():
        nb = name.encode()
        a = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    def need(off, n, what):
        if off + n > len(buf):
            raise CheckpointError(f"truncated checkpoint: {what} at byte {off} needs {n} bytes, {len(buf) - off} left")

    need(0, 10, "header")
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {buf[:4]!r} at byte 0")
    version, mlen = struct.unpack_from("<HI", buf, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"checkpoint version {version} (byte 4) unsupported; expected {CKPT_VERSION}")
    need(10, mlen, "config block")
    try:
        meta = json.loads(buf[10 : 10 + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupted config block at byte 10: {e}") from None
    off = 10 + mlen
    tensors = {}
    while off < len(buf):
        start = off
        need(off, 2, "record name length")
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        need(off, nlen + 1, "record name")
        try:
            name = buf[off : off + nlen].decode()
        except UnicodeDecodeError:
            raise CheckpointError(f"corrupted record name at byte {off}") from None
        off += nlen
        rank = buf[off]
        off += 1
        if rank > 8:
            raise CheckpointError(f"record {name!r} at byte {start}: implausible rank {rank}")
        need(off, 4 * rank, f"extents of {name!r}")
        shape = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        nbytes = 4 * math.prod(shape)
        need(off, nbytes, f"payload of {name!r}")
        if name in tensors:
            raise CheckpointError(f"duplicate record {name!r} at byte {start}")
        tensors[name] = np.frombuffer(buf, "<f4", math.prod(shape), off).reshape(shape).astype(np.float32)
        off += nbytes
    return Checkpoint(meta, tensors)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def capture(model: Model, opt: OptimizerState | None = None, **meta) -> Checkpoint:
    tensors = {n: t.data for n, t in model.named_parameters().items()}
    tensors.update({f"buffer/{n}": b for n, b in model.named_buffers().items()})
    if opt is not None:
        tensors.update({f"opt/{n}": v for n, v in opt.velocity.items()})
        meta.setdefault("opt_step", opt.step)
    meta = {"format_version": CKPT_VERSION, "model": model.config.to_dict(), **meta}
    return Checkpoint(meta, tensors)


def restore(ckpt: Checkpoint, model: Model | None = None, strict_opt: bool = False):
    """Load weights (and optimizer state, if present) into ``model``.

    Builds the model from the stored config when none is given.  Any mismatch
    between stored names and the model's parameter/buffer names is an error
    listing the offending names.
    """
    if model is None:
        model = Model(ModelConfig.from_dict(ckpt.meta["model"]))
    params = model.named_parameters()
    bufs = model.named_buffers()
    stored_p = {n for n in ckpt.tensors if not n.startswith(("buffer/", "opt/"))}
    stored_b = {n[7:] for n in ckpt.tensors if n.startswith("buffer/")}
    missing = sorted((set(params) - stored_p) | {f"buffer/{n}" for n in set(bufs) - stored_b})
    unexpected = sorted((stored_p - set(params)) | {f"buffer/{n}" for n in stored_b - set(bufs)})
    if missing or unexpected:
        msg = []
        if missing:
            msg.append(f"missing parameters: {', '.join(missing)}")
        if unexpected:
            msg.append(f"unexpected parameters: {', '.join(unexpected)}")
        raise CheckpointError("checkpoint does not match the model; " + "; ".join(msg))
    for n, t in params.items():
        a = ckpt.tensors[n]
        if a.shape != t.shape:
            raise CheckpointError(f"{n}: stored shape {a.shape}, model expects {t.shape}")
        t.data = a.astype(t.dtype)
        t.grad = None
    for n, b in bufs.items():
        a = ckpt.tensors[f"buffer/{n}"]
        if a.shape != b.shape:
            raise CheckpointError(f"buffer {n}: stored shape {a.shape}, model expects {b.shape}")
        b[...] = a
    opt = None
    vel = {n[4:]: a for n, a in ckpt.tensors.items() if n.startswith("opt/")}
    if vel:
        if set(vel) != set(params):
            raise CheckpointError("optimizer state names do not match the model parameters")
        opt = OptimizerState({n: v.astype(params[n].dtype) for n, v in vel.items()}, int(ckpt.meta.get("opt_step", 0)))
    elif strict_opt:
        raise CheckpointError("checkpoint carries no optimizer state")
    return model, opt


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

LOG_FIELDS = ("epoch", "train_loss", "val_loss", "val_dsc")


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from_state(state: dict) -> np.random.Generator:
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)


def make_batch(pairs, patch, rng, config: TrainConfig, dtype=np.float32):
    xs, ys = [], []
    for im, lb in pairs:
        x, y = sample_patch(im, lb, patch, rng, config.fg_prob)
        if config.augment:
            x, y = augment(x, y, rng)
        xs.append(x)
        ys.append(y)
    return np.stack(xs)[:, None].astype(dtype), np.stack(ys)[:, None].astype(dtype)


def train_step(model: Model, x: np.ndarray, y: np.ndarray, opt: OptimizerState, config: TrainConfig, rng, lr=None) -> float:
    params = model.named_parameters()
    model.zero_grad()
    out = model.forward(Tensor(x), "train", rng)
    loss = total_loss(out["main"], out["aux"], y, config.aux_loss_weights, config.dice_smooth)
    backward(loss)
    sgd_step(params, collect_grads(params), opt, config, lr)
    return float(loss.data)


def evaluate(model: Model, pairs, config: TrainConfig) -> tuple[float, float]:
    """(mean Dice loss of sliding-window probabilities, mean DSC after thresholding)."""
    patch = config.patch
    stride = config.val_stride or tuple(max(1, p // 2) for p in patch)
    losses, scores = [], []
    for im, lb in pairs:
        prob = predict_volume(model, im, patch, stride)
        lab = lb.voxels if hasattr(lb, "voxels") else lb
        with no_grad():
            losses.append(float(dice_loss(Tensor(prob.prob.astype(np.float64)), lab.astype(np.float64), config.dice_smooth).data))
        scores.append(dsc(binarize(prob, config.threshold).voxels, lab))
    return float(np.mean(losses)), float(np.mean(scores))


@dataclass
class TrainResult:
    log: list
    best_epoch: int
    best_val_loss: float


def _write_log(path: Path, log: list):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(LOG_FIELDS)
        for r in log:
            w.writerow([r["epoch"], repr(r["train_loss"]), repr(r["val_loss"]), repr(r["val_dsc"])])


def read_log(path) -> list[dict]:
    with open(path, newline="") as f:
        return [
            {"epoch": int(r["epoch"]), "train_loss": float(r["train_loss"]),
             "val_loss": float(r["val_loss"]), "val_dsc": float(r["val_dsc"])}
            for r in csv.DictReader(f)
        ]


def train(
    model: Model,
    dataset: Dataset,
    config: TrainConfig,
    out_dir=None,
    resume=None,
    callback: Optional[Callable[[dict], None]] = None,
    meta: Optional[dict] = None,
) -> TrainResult:
    """Train for ``config.epochs`` epochs.

    Writes ``log.csv``, ``best.sipc`` (lowest validation loss) and ``last.sipc``
    to ``out_dir`` when given.  ``resume`` is a checkpoint path or Checkpoint;
    training continues from its epoch with restored weights, velocities and rng.
    ``meta`` entries are stored verbatim in every checkpoint's config block.
    """
    train_pairs = dataset.subset("train")
    val_pairs = dataset.subset("val")
    if not train_pairs:
        raise DataError("dataset has no training cases")
    if not val_pairs:
        raise DataError("dataset has no validation cases")
    patch = tuple(config.patch)
    if len(patch) != model.config.dimensionality:
        raise ConfigError(f"patch {patch} does not match model dimensionality")
    steps = config.steps_per_epoch or math.ceil(len(train_pairs) / config.batch_size)
    total_steps = steps * config.epochs

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        _, opt = restore(ckpt, model, strict_opt=True)
        rng = _rng_from_state(ckpt.meta["rng_state"])
        start = int(ckpt.meta["epoch"])
        log = list(ckpt.meta.get("log", []))
        best_epoch = int(ckpt.meta.get("best_epoch", 0))
        best = float(ckpt.meta.get("best_val_loss", math.inf))
    else:
        opt = OptimizerState.for_params(model.named_parameters())
        rng = np.random.default_rng(config.seed)
        start, log, best_epoch, best = 0, [], 0, math.inf

    def snapshot(epoch):
        return capture(
            model, opt, train=config.to_dict(), epoch=epoch, rng_state=_rng_state(rng),
            log=log, best_epoch=best_epoch, best_val_loss=best, **(meta or {}),
        )

    for epoch in range(start + 1, config.epochs + 1):
        losses = []
        for _ in range(steps):
            idx = rng.permutation(len(train_pairs))[: config.batch_size]
            if len(idx) < config.batch_size:
                idx = rng.choice(len(train_pairs), config.batch_size, replace=True)
            x, y = make_batch([train_pairs[i] for i in idx], patch, rng, config, model.dtype)
            lr = scheduled_lr(config, opt.step, total_steps)
            losses.append(train_step(model, x, y, opt, config, rng, lr))
        train_loss = float(np.mean(losses))
        if not math.isfinite(train_loss):
            raise FloatingPointError(f"training loss became {train_loss} in epoch {epoch}")
        val_loss, val_dsc = evaluate(model, val_pairs, config)
        rec = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "val_dsc": val_dsc}
        log.append(rec)
        improved = val_loss < best
        if improved:
            best, best_epoch = val_loss, epoch
        if out is not None:
            _write_log(out / "log.csv", log)
            ck = snapshot(epoch)
            if improved:
                save_checkpoint(ck, out / "best.sipc")
            save_checkpoint(ck, out / "last.sipc")
        if callback is not None:
            callback(rec)
    return TrainResult(log, best_epoch, best)
