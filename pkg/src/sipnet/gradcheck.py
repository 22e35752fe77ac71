"""Central finite-difference verification of tape gradients (float64 shadow mode)."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import ops
from .tensor import Tensor, backward, no_grad, precision


def _coords(size: int, rng: np.random.Generator, max_coords: int | None) -> np.ndarray:
    if max_coords is None or size <= max_coords:
        return np.arange(size)
    return rng.choice(size, size=max_coords, replace=False)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs deviation scaled by the numeric gradient's infinity norm."""
    scale = max(float(np.max(np.abs(numeric))), float(np.max(np.abs(analytic))), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check_tensors(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-4,
    max_coords: int | None = 100,
    seed: int = 0,
) -> float:
    """Compare tape gradients of ``loss_fn()`` with central differences.

    ``tensors`` must be float64 leaves with ``requires_grad``; ``loss_fn`` must
    be deterministic (reseed any rng inside it).  Coordinates are checked
    exhaustively up to ``max_coords`` per tensor, otherwise a random subsample.
    Returns the relative error over all checked coordinates, scaled by one
    common infinity norm so tensors with vanishing gradients (e.g. biases
    feeding a normalization) are judged against the loss as a whole.
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    backward(loss)
    ana, num_all = [], []
    with no_grad():
        for t in tensors:
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            idx = _coords(flat.size, rng, max_coords)
            num = np.empty(idx.size)
            for j, i in enumerate(idx):
                old = flat[i]
                flat[i] = old + h
                fp = float(loss_fn().data)
                flat[i] = old - h
                fm = float(loss_fn().data)
                flat[i] = old
                num[j] = (fp - fm) / (2 * h)
            ana.append(g.reshape(-1)[idx])
            num_all.append(num)
    return relative_error(np.concatenate(ana), np.concatenate(num_all))


def grad_check(
    op: Callable[..., Tensor],
    input_shapes: Sequence[tuple],
    seed: int = 0,
    h: float = 1e-4,
    max_coords: int | None = 100,
    scale: float = 1.0,
) -> float:
    """Max relative error of ``op``'s gradients w.r.t. random inputs.

    The op's output is reduced to a scalar by a fixed random projection so
    every output coordinate contributes.  Runs entirely in float64.
    """
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        xs = [Tensor(rng.standard_normal(s) * scale, requires_grad=True) for s in input_shapes]
        with no_grad():
            out_shape = op(*xs).shape
        proj = Tensor(rng.standard_normal(out_shape))

        def loss_fn():
            return ops.sum(ops.mul(op(*xs), proj)) if out_shape else op(*xs)

        return check_tensors(loss_fn, xs, h=h, max_coords=max_coords, seed=seed)


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------

OPS_TOL = 1e-5
MODEL_TOL = 1e-4


def _fixed_rng_op(fn, seed=7):
    """Wrap an op needing an rng so every call sees the same draws."""
    return lambda *xs: fn(*xs, rng=np.random.default_rng(seed))


def _bn_op(mode):
    def op(x, g, b):
        c = x.shape[1]
        rm, rv = np.full(c, 0.1), np.full(c, 1.3)
        return ops.batch_norm(x, g, b, rm, rv, mode)

    return op


def op_cases() -> list[tuple[str, Callable, list]]:
    """(name, op, input shapes) for every differentiable primitive."""
    from .trainer import dice_loss

    v = (1, 2, 3, 4, 4)
    return [
        ("add", ops.add, [v, v]),
        ("sub", ops.sub, [v, v]),
        ("mul", ops.mul, [v, v]),
        ("div", lambda x, y: ops.div(x, ops.add(ops.mul(ops.mul(y, y), 1.0), 1.0)), [v, v]),
        ("scalar_arith", lambda x: ops.sub(2.0, ops.div(3.0, ops.add(ops.mul(ops.mul(x, x), 0.5), 1.0))), [v]),
        ("sum", ops.sum, [v]),
        ("mean", ops.mean, [v]),
        ("relu", ops.relu, [v]),
        ("sigmoid", ops.sigmoid, [v]),
        ("dropout", _fixed_rng_op(lambda x, rng: ops.dropout(x, 0.3, "train", rng)), [v]),
        ("concat_channels", lambda a, b: ops.concat_channels([a, b]), [v, (1, 3, 3, 4, 4)]),
        ("slice_channels", lambda x: ops.slice_channels(x, 1, 3), [(1, 4, 3, 4, 4)]),
        ("channel_mean", ops.channel_mean, [(2, 3, 2, 4, 4)]),
        ("conv3_k3", lambda x, w, b: ops.conv3(x, w, b, 1, 1), [(2, 2, 4, 5, 4), (3, 2, 3, 3, 3), (3,)]),
        ("conv3_stride2", lambda x, w, b: ops.conv3(x, w, b, 2, 1), [(1, 2, 5, 6, 4), (2, 2, 3, 3, 3), (2,)]),
        ("conv3_k1", lambda x, w, b: ops.conv3(x, w, b, 1, 0), [(2, 3, 2, 3, 4), (4, 3, 1, 1, 1), (4,)]),
        ("conv2_k3", lambda x, w, b: ops.conv(x, w, b, 1, 1), [(2, 2, 5, 6), (3, 2, 3, 3), (3,)]),
        ("transposed_conv3", lambda x, w, b: ops.transposed_conv3(x, w, b, 2), [(1, 3, 2, 3, 2), (3, 2, 3, 3, 3), (2,)]),
        ("transposed_conv3_depthwise", lambda x, w, b: ops.transposed_conv3(x, w, b, 2, groups=3), [(2, 3, 2, 2, 3), (3, 1, 3, 3, 3), (3,)]),
        ("transposed_conv2", lambda x, w, b: ops.transposed_conv(x, w, b, 2), [(1, 2, 3, 4), (2, 3, 3, 3), (3,)]),
        ("avg_pool3", ops.avg_pool3, [(2, 2, 4, 4, 6)]),
        ("upsample_nn", lambda x: ops.upsample_nn(x, (4, 2, 1)), [(1, 2, 2, 3, 2)]),
        ("upsample_linear", lambda x: ops.upsample_linear(x, (2, 4, 2)), [(1, 2, 2, 3, 3)]),
        ("batch_norm_train", _bn_op("train"), [(2, 3, 3, 4, 2), (3,), (3,)]),
        ("batch_norm_eval", _bn_op("eval"), [(2, 3, 3, 4, 2), (3,), (3,)]),
        ("dice_loss", lambda x: dice_loss(ops.sigmoid(x), (np.arange(x.size).reshape(x.shape) % 3 == 0).astype(np.float64)), [v]),
    ]


def block_cases() -> list[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    """(name, deterministic scalar loss, leaves) for every composite block, float64."""
    from . import blocks
    from .trainer import total_loss

    cases = []
    rng = np.random.default_rng(3)
    f64 = np.float64

    def leaf(shape, scale=1.0):
        return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)

    def projected(fn, shape_probe):
        proj = rng.standard_normal(shape_probe)
        return lambda: ops.sum(ops.mul(fn(), Tensor(proj)))

    def params_of(obj, prefix="p"):
        return [t for _, t in obj.parameters(prefix)]

    # dense layer
    x = leaf((2, 4, 4, 4, 4))
    dl = blocks.DenseLayerParams.create(rng, 4, 3, 5, 3, 0.3, f64)
    fn = lambda: blocks.dense_layer_forward(x, dl, "train", np.random.default_rng(1))
    cases.append(("dense_layer", projected(fn, (2, 3, 4, 4, 4)), [x] + params_of(dl)))

    # dense block
    x2 = leaf((2, 3, 4, 4, 2))
    layers = [blocks.DenseLayerParams.create(rng, 3 + i * 2, 2, 3, 3, 0.3, f64) for i in range(3)]
    fn = lambda: blocks.dense_block_forward(x2, layers, "train", np.random.default_rng(2))
    cases.append(("dense_block", projected(fn, (2, 9, 4, 4, 2)), [x2] + [t for l in layers for t in params_of(l)]))

    # DRB with and without residual
    for residual in (True, False):
        x3 = leaf((2, 3, 4, 2, 4))
        drb = blocks.DrbParams.create(rng, 3, 2, 2, 3, 4, 3, residual, 0.3, f64)
        fn = (lambda x3=x3, drb=drb: blocks.drb_forward(x3, drb, "train", np.random.default_rng(4)))
        name = "drb" if residual else "drb_no_residual"
        cases.append((name, projected(fn, (2, 4, 4, 2, 4)), [x3] + params_of(drb)))

    # transition alone (BN-ReLU-Conv1)
    x4 = leaf((2, 5, 2, 4, 4))
    tr = blocks.DrbParams.create(rng, 3, 1, 2, 3, 4, 3, False, 0.3, f64)
    fn = lambda: blocks.transition_forward(x4, tr, "train")
    cases.append(("transition", projected(fn, (2, 4, 2, 4, 4)), [x4] + params_of(tr)[-4:]))

    # attention module
    d, s = leaf((2, 3, 4, 4, 4)), leaf((2, 3, 4, 4, 4))
    cases.append(("attention_module", projected(lambda: blocks.am_forward(d, s), (2, 3, 4, 4, 4)), [d, s]))

    # deconvolutions
    for factorized in (True, False):
        x5 = leaf((1, 4, 2, 3, 2))
        dp = blocks.DeconvParams.create(rng, 4, 3, 3, factorized, f64)
        fn = (lambda x5=x5, dp=dp: blocks.deconv_forward(x5, dp))
        cases.append((f"deconv_{'factorized' if factorized else 'full'}", projected(fn, (1, 3, 4, 6, 4)), [x5] + params_of(dp)))

    # supervision heads
    for mode in ("nearest", "linear"):
        x6 = leaf((1, 3, 2, 2, 3))
        hp = blocks.SupervisionHeadParams.create(rng, 3, (4, 4, 4), 3, mode, f64)
        fn = (lambda x6=x6, hp=hp: blocks.supervision_head_forward(x6, hp))
        cases.append((f"supervision_head_{mode}", projected(fn, (1, 1, 8, 8, 12)), [x6] + params_of(hp)))

    # main + deep-supervision loss
    logits = [leaf((2, 1, 4, 4, 4)) for _ in range(4)]
    tgt = (rng.random((2, 1, 4, 4, 4)) < 0.3).astype(f64)
    fn = lambda: total_loss(ops.sigmoid(logits[0]), [ops.sigmoid(t) for t in logits[1:]], tgt)
    cases.append(("total_loss", fn, logits))
    return cases


def run_ops(seed: int = 0, max_coords: int = 60) -> list[tuple[str, float]]:
    return [(name, grad_check(op, shapes, seed=seed, max_coords=max_coords)) for name, op, shapes in op_cases()]


def run_blocks(max_coords: int = 30, h: float = 1e-6) -> list[tuple[str, float]]:
    with precision(np.float64):
        return [(name, check_tensors(fn, leaves, h=h, max_coords=max_coords)) for name, fn, leaves in block_cases()]


def run_model(variant: str = "SIP", growth_rate: int = 2, seed: int = 0, max_coords: int = 6, h: float = 1e-6) -> float:
    """Full-network check on a 16^3 toy input, all parameters, float64."""
    from .model import Model, ModelConfig
    from .trainer import total_loss

    with precision(np.float64):
        cfg = ModelConfig(variant=variant, growth_rate=growth_rate, encoder_layers=(1, 1, 1),
                          decoder_layers=(1, 1, 1), input_patch=(16, 16, 16))
        model = Model(cfg, seed=seed, dtype=np.float64)
        rng = np.random.default_rng(seed)
        x = Tensor(rng.standard_normal((2, 1, 16, 16, 16)), requires_grad=True)
        tgt = (rng.random((2, 1, 16, 16, 16)) < 0.3).astype(np.float64)

        def loss_fn():
            out = model.forward(x, "train", np.random.default_rng(seed + 1))
            return total_loss(out["main"], out["aux"], tgt)

        return check_tensors(loss_fn, [x] + model.parameters(), h=h, max_coords=max_coords, seed=seed)
