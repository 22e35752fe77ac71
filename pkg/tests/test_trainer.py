import math

import numpy as np
import pytest

from oracles import dice_value
from sipnet import ops
from sipnet.data import DataError, Dataset, PhantomSpec, generate_phantom
from sipnet.gradcheck import check_tensors
from sipnet.model import Model, ModelConfig
from sipnet.tensor import ConfigError, Tensor, UsageError, backward, no_grad, precision
from sipnet.trainer import (
    Checkpoint,
    CheckpointError,
    OptimizerState,
    TrainConfig,
    capture,
    collect_grads,
    decode_checkpoint,
    dice_loss,
    encode_checkpoint,
    load_checkpoint,
    read_log,
    restore,
    save_checkpoint,
    sgd_step,
    total_loss,
    train,
)


def tiny_cfg(variant="SIP", dropout=0.3):
    return ModelConfig(variant=variant, growth_rate=2, encoder_layers=(1, 1, 1), decoder_layers=(1, 1, 1),
                       input_patch=(8, 16, 16), dropout_rate=dropout)


def phantom_dataset(n_train=2, n_val=1):
    ims, lbs = [], []
    for s in range(n_train + n_val):
        im, lb = generate_phantom(PhantomSpec(seed=s, extents=(8, 24, 24), semi_axes_depth=(2, 4), semi_axes_plane=(3, 7)))
        ims.append(im)
        lbs.append(lb)
    return Dataset(ims, lbs, ["train"] * n_train + ["val"] * n_val)


def test_dice_loss_perfect_and_disjoint():
    t = (np.random.default_rng(0).random((1, 1, 4, 4, 4)) < 0.5).astype(np.float32)
    assert float(dice_loss(Tensor(t), t).data) == 0.0
    n = t.size
    v = float(dice_loss(Tensor(1 - t), t).data)
    assert v == pytest.approx(1 - 1 / (n + 1), abs=1e-6)
    p = np.random.default_rng(1).random(t.shape)
    assert float(dice_loss(Tensor(p.astype(np.float32)), t).data) == pytest.approx(dice_value(p, t), abs=1e-6)


def test_dice_loss_gradient_fd():
    with precision(np.float64):
        rng = np.random.default_rng(2)
        x = Tensor(rng.standard_normal((2, 1, 3, 4, 4)), requires_grad=True)
        t = (rng.random(x.shape) < 0.4).astype(np.float64)
        assert check_tensors(lambda: dice_loss(ops.sigmoid(x), t), [x], h=1e-6, max_coords=None) < 1e-6


def test_dice_loss_shape_mismatch():
    with pytest.raises(Exception, match="vs target"):
        dice_loss(Tensor(np.ones((1, 1, 2, 2, 2))), np.ones((1, 1, 2, 2, 3)))


def test_total_loss_linearity_and_zero_weights():
    rng = np.random.default_rng(3)
    p = Tensor(rng.random((1, 1, 4, 4, 4)))
    t = (rng.random(p.shape) < 0.5).astype(np.float32)
    main = float(dice_loss(p, t).data)
    assert float(total_loss(p, [p, p, p], t, (0, 0, 0)).data) == main
    assert float(total_loss(p, [p, p, p], t).data) == pytest.approx(1.7 * main, rel=1e-6)
    assert float(total_loss(p, [], t).data) == main
    with pytest.raises(ConfigError):
        total_loss(p, [p, p], t, (0.4, 0.2, 0.1))


def test_dropping_a_head_removes_its_gradient():
    m = Model(tiny_cfg(dropout=0.0), seed=0)
    x = Tensor(np.random.default_rng(0).standard_normal((2, 1, 8, 16, 16)).astype(np.float32))
    t = (np.random.default_rng(1).random((2, 1, 8, 16, 16)) < 0.3).astype(np.float32)
    out = m.forward(x, "train")
    backward(total_loss(out["main"], out["aux"], t, (0.4, 0.0, 0.1)))
    g = m.named_parameters()
    assert g["head2.conv.weight"].grad is None
    assert g["head1.conv.weight"].grad is not None and g["head3.conv.weight"].grad is not None
    assert not collect_grads(g)["head2.conv.weight"].any()


def test_sgd_zero_grad_unchanged_and_one_step_formula():
    p = Tensor(np.array([1.0, -2.0]))
    cfg = TrainConfig(weight_decay=0.0)
    st = OptimizerState()
    sgd_step({"p": p}, {"p": np.zeros(2, np.float32)}, st, cfg)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    cfg = TrainConfig(lr=0.1, weight_decay=0.01)
    st = OptimizerState()
    p0 = p.data.copy()
    g = np.array([0.5, 0.25], np.float32)
    sgd_step({"p": p}, {"p": g}, st, cfg)
    np.testing.assert_allclose(p.data, p0 - 0.1 * (g + 0.01 * p0), rtol=1e-6)


def test_sgd_missing_grad():
    with pytest.raises(UsageError):
        sgd_step({"p": Tensor(np.ones(2))}, {}, OptimizerState(), TrainConfig())


def test_sgd_quadratic_bowl():
    with precision(np.float64):
        p = Tensor(np.array([1.0]))
    cfg, st = TrainConfig(), OptimizerState()
    for _ in range(100_000):
        sgd_step({"p": p}, {"p": p.data.copy()}, st, cfg)
    assert abs(p.data[0]) < 1e-3


def test_weight_decay_alone_shrinks_norm():
    p = Tensor(np.random.default_rng(0).standard_normal(10).astype(np.float32))
    cfg, st = TrainConfig(lr=1e-2, weight_decay=0.5), OptimizerState()
    prev = np.linalg.norm(p.data)
    for _ in range(20):
        sgd_step({"p": p}, {"p": np.zeros(10, np.float32)}, st, cfg)
        cur = np.linalg.norm(p.data)
        assert cur < prev
        prev = cur


def test_small_step_decreases_loss_on_frozen_batch():
    with precision(np.float64):
        m = Model(tiny_cfg(dropout=0.0), seed=1, dtype=np.float64)
        rng = np.random.default_rng(2)
        x = Tensor(rng.standard_normal((2, 1, 8, 16, 16)))
        t = (rng.random((2, 1, 8, 16, 16)) < 0.3).astype(np.float64)

        def loss():
            out = m.forward(x, "train")
            return total_loss(out["main"], out["aux"], t)

        params = m.named_parameters()
        before = loss()
        backward(before)
        sgd_step(params, collect_grads(params), OptimizerState(), TrainConfig(lr=1e-6))
        with no_grad():
            after = loss()
    assert float(after.data) < float(before.data)


def test_checkpoint_round_trip_bitwise(tmp_path):
    m = Model(tiny_cfg(), seed=3)
    opt = OptimizerState.for_params(m.named_parameters())
    for v in opt.velocity.values():
        v += 0.25
    ck = capture(m, opt, epoch=3, rng_state=np.random.default_rng(0).bit_generator.state)
    save_checkpoint(ck, tmp_path / "a.sipc")
    raw = (tmp_path / "a.sipc").read_bytes()
    back = load_checkpoint(tmp_path / "a.sipc")
    assert encode_checkpoint(back) == raw
    m2, opt2 = restore(back)
    for n, t in m.named_parameters().items():
        assert t.data.tobytes() == m2.named_parameters()[n].data.tobytes()
    assert all(np.array_equal(opt.velocity[n], opt2.velocity[n]) for n in opt.velocity)


def test_checkpoint_name_mismatch_names_heads():
    d = capture(Model(tiny_cfg("D"), seed=0))
    with pytest.raises(CheckpointError, match="head1.conv.weight"):
        restore(d, Model(tiny_cfg("SIP")))


def test_checkpoint_corruption_and_version():
    raw = encode_checkpoint(capture(Model(tiny_cfg(), seed=0)))
    with pytest.raises(CheckpointError, match="byte"):
        decode_checkpoint(raw[:-7])
    bad = raw[:4] + (7).to_bytes(2, "little") + raw[6:]
    with pytest.raises(CheckpointError, match="version 7"):
        decode_checkpoint(bad)
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(b"NOPE" + raw[4:])


def test_train_smoke_and_log(tmp_path):
    cfg = TrainConfig(epochs=1, batch_size=2, patch=(8, 16, 16))
    res = train(Model(tiny_cfg(), seed=0), phantom_dataset(), cfg, tmp_path)
    assert math.isfinite(res.log[0]["train_loss"])
    assert (tmp_path / "best.sipc").exists() and (tmp_path / "last.sipc").exists()
    assert read_log(tmp_path / "log.csv") == res.log


def test_train_requires_splits():
    ds = phantom_dataset(2, 0)
    with pytest.raises(DataError):
        train(Model(tiny_cfg(), seed=0), ds, TrainConfig(epochs=1, patch=(8, 16, 16)))


def test_resume_reproduces_uninterrupted_run(tmp_path):
    ds = phantom_dataset()
    cfg = TrainConfig(epochs=4, batch_size=2, patch=(8, 16, 16), lr=0.05)
    full = train(Model(tiny_cfg(), seed=0), ds, cfg, tmp_path / "full")
    half = TrainConfig(**{**cfg.to_dict(), "epochs": 2})
    train(Model(tiny_cfg(), seed=0), ds, half, tmp_path / "part")
    resumed = train(Model(tiny_cfg(), seed=0), ds, cfg, tmp_path / "part", resume=tmp_path / "part" / "last.sipc")
    assert [r["train_loss"] for r in resumed.log] == [r["train_loss"] for r in full.log]
    assert resumed.log == full.log


def test_training_deterministic():
    ds = phantom_dataset()
    cfg = TrainConfig(epochs=2, batch_size=2, patch=(8, 16, 16))
    a = train(Model(tiny_cfg(), seed=0), ds, cfg).log
    b = train(Model(tiny_cfg(), seed=0), ds, cfg).log
    assert a == b
