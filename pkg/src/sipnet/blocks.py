"""Composite building blocks: dense layers, densely-connected residual blocks
(DRB), the parameter-free attention-focused module (AM), factorized
deconvolution and deep-supervision heads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import ops
from .tensor import ConfigError, ShapeError, Tensor

NamedTensors = Iterator[tuple[str, Tensor]]
NamedBuffers = Iterator[tuple[str, np.ndarray]]

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def he_normal(rng: np.random.Generator, shape: tuple, fan_in: float, dtype=np.float32) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


# ---------------------------------------------------------------------------
# leaf layers
# ---------------------------------------------------------------------------


@dataclass
class Conv:
    weight: Tensor
    bias: Optional[Tensor]
    padding: int = 0

    @classmethod
    def create(cls, rng, cin: int, cout: int, kernel: int, nsp: int, dtype=np.float32, bias: bool = True):
        shape = (cout, cin) + (kernel,) * nsp
        w = Tensor(he_normal(rng, shape, cin * kernel**nsp, dtype), requires_grad=True)
        b = Tensor(np.zeros(cout, dtype), requires_grad=True) if bias else None
        return cls(w, b, (kernel - 1) // 2)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv(x, self.weight, self.bias, 1, self.padding)

    def parameters(self, prefix: str) -> NamedTensors:
        yield f"{prefix}.weight", self.weight
        if self.bias is not None:
            yield f"{prefix}.bias", self.bias

    def buffers(self, prefix: str) -> NamedBuffers:
        return iter(())


@dataclass
class BatchNorm:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def create(cls, channels: int, dtype=np.float32):
        return cls(
            Tensor(np.ones(channels, dtype), requires_grad=True),
            Tensor(np.zeros(channels, dtype), requires_grad=True),
            np.zeros(channels, dtype),
            np.ones(channels, dtype),
        )

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return ops.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, mode, BN_MOMENTUM, BN_EPS
        )

    def parameters(self, prefix: str) -> NamedTensors:
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta

    def buffers(self, prefix: str) -> NamedBuffers:
        yield f"{prefix}.running_mean", self.running_mean
        yield f"{prefix}.running_var", self.running_var


# ---------------------------------------------------------------------------
# dense layer / dense block / DRB
# ---------------------------------------------------------------------------


@dataclass
class DenseLayerParams:
    """BN-ReLU-Conv1 (bottleneck) - BN-ReLU-Conv3 emitting ``growth`` channels."""

    bn1: BatchNorm
    bottleneck: Conv
    bn2: BatchNorm
    conv: Conv
    growth: int
    dropout_rate: float = 0.3

    @classmethod
    def create(cls, rng, cin: int, growth: int, bottleneck: int, nsp: int, dropout_rate=0.3, dtype=np.float32):
        return cls(
            BatchNorm.create(cin, dtype),
            Conv.create(rng, cin, bottleneck, 1, nsp, dtype),
            BatchNorm.create(bottleneck, dtype),
            Conv.create(rng, bottleneck, growth, 3, nsp, dtype),
            growth,
            dropout_rate,
        )

    def parameters(self, prefix: str) -> NamedTensors:
        yield from self.bn1.parameters(f"{prefix}.bn1")
        yield from self.bottleneck.parameters(f"{prefix}.bottleneck")
        yield from self.bn2.parameters(f"{prefix}.bn2")
        yield from self.conv.parameters(f"{prefix}.conv")

    def buffers(self, prefix: str) -> NamedBuffers:
        yield from self.bn1.buffers(f"{prefix}.bn1")
        yield from self.bn2.buffers(f"{prefix}.bn2")


def dense_layer_forward(x: Tensor, p: DenseLayerParams, mode: str = "train", rng=None) -> Tensor:
    h = p.bottleneck(ops.relu(p.bn1(x, mode)))
    h = p.conv(ops.relu(p.bn2(h, mode)))
    return ops.dropout(h, p.dropout_rate, mode, rng)


def dense_block_forward(x: Tensor, layers: list[DenseLayerParams], mode: str = "train", rng=None) -> Tensor:
    """Each layer sees the concatenation of the block input and all earlier outputs."""
    feats = [x]
    cur = x
    for layer in layers:
        feats.append(dense_layer_forward(cur, layer, mode, rng))
        cur = ops.concat_channels(feats)
    return cur


@dataclass
class DrbParams:
    layers: list[DenseLayerParams]
    transition_bn: BatchNorm
    transition: Conv
    residual: Optional[Conv]  # None for the plain dense-block variant

    @classmethod
    def create(
        cls, rng, cin: int, num_layers: int, growth: int, bottleneck: int, cout: int, nsp: int,
        residual: bool = True, dropout_rate=0.3, dtype=np.float32,
    ):
        layers = [
            DenseLayerParams.create(rng, cin + i * growth, growth, bottleneck, nsp, dropout_rate, dtype)
            for i in range(num_layers)
        ]
        cdense = cin + num_layers * growth
        return cls(
            layers,
            BatchNorm.create(cdense, dtype),
            Conv.create(rng, cdense, cout, 1, nsp, dtype),
            Conv.create(rng, cin, cout, 1, nsp, dtype) if residual else None,
        )

    @property
    def out_channels(self) -> int:
        return self.transition.weight.shape[0]

    def parameters(self, prefix: str) -> NamedTensors:
        for i, layer in enumerate(self.layers):
            yield from layer.parameters(f"{prefix}.layer{i}")
        yield from self.transition_bn.parameters(f"{prefix}.transition.bn")
        yield from self.transition.parameters(f"{prefix}.transition.conv")
        if self.residual is not None:
            yield from self.residual.parameters(f"{prefix}.residual")

    def buffers(self, prefix: str) -> NamedBuffers:
        for i, layer in enumerate(self.layers):
            yield from layer.buffers(f"{prefix}.layer{i}")
        yield from self.transition_bn.buffers(f"{prefix}.transition.bn")


def transition_forward(dense: Tensor, p: DrbParams, mode: str) -> Tensor:
    return p.transition(ops.relu(p.transition_bn(dense, mode)))


def drb_forward(x: Tensor, p: DrbParams, mode: str = "train", rng=None, trace: Optional[list] = None) -> Tensor:
    """transition(dense_block(x)) + residual_projection(x).

    ``trace``, when given, receives ("dense", t) and ("transition", t) entries.
    """
    dense = dense_block_forward(x, p.layers, mode, rng)
    out = transition_forward(dense, p, mode)
    if trace is not None:
        trace.append(("dense", dense))
        trace.append(("transition", out))
    if p.residual is not None:
        out = ops.add(out, p.residual(x))
    return out


# ---------------------------------------------------------------------------
# attention-focused module
# ---------------------------------------------------------------------------


def attention_mask(skip_features: Tensor) -> Tensor:
    return ops.sigmoid(skip_features)


def am_forward(decoder_features: Tensor, skip_features: Tensor, return_mask: bool = False):
    """decoder_features * sigmoid(skip_features); parameter free."""
    if decoder_features.shape != skip_features.shape:
        raise ShapeError(
            f"AM wiring: decoder {decoder_features.shape} vs skip {skip_features.shape}"
        )
    mask = attention_mask(skip_features)
    out = ops.mul(decoder_features, mask)
    return (out, mask) if return_mask else out


# ---------------------------------------------------------------------------
# up-sampling path pieces
# ---------------------------------------------------------------------------


@dataclass
class DeconvParams:
    """Stride-2 up-sampling: either a full transposed conv, or a pointwise channel
    reduction followed by a depthwise transposed conv (``factorized``)."""

    weight: Tensor
    bias: Tensor
    pointwise: Optional[Conv] = None

    @classmethod
    def create(cls, rng, cin: int, cout: int, nsp: int, factorized: bool = True, dtype=np.float32):
        k = 3
        taps = k**nsp / 2**nsp
        if factorized:
            pw = Conv.create(rng, cin, cout, 1, nsp, dtype)
            w = Tensor(he_normal(rng, (cout, 1) + (k,) * nsp, taps, dtype), requires_grad=True)
        else:
            pw = None
            w = Tensor(he_normal(rng, (cin, cout) + (k,) * nsp, cin * taps, dtype), requires_grad=True)
        return cls(w, Tensor(np.zeros(cout, dtype), requires_grad=True), pw)

    @property
    def out_channels(self) -> int:
        return self.bias.shape[0]

    def parameters(self, prefix: str) -> NamedTensors:
        if self.pointwise is not None:
            yield from self.pointwise.parameters(f"{prefix}.pointwise")
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias

    def buffers(self, prefix: str) -> NamedBuffers:
        return iter(())


def deconv_forward(x: Tensor, p: DeconvParams) -> Tensor:
    if p.pointwise is not None:
        h = p.pointwise(x)
        return ops.transposed_conv(h, p.weight, p.bias, 2, groups=h.shape[1])
    return ops.transposed_conv(x, p.weight, p.bias, 2)


@dataclass
class SupervisionHeadParams:
    factor: tuple
    conv: Conv
    upsample: str = "nearest"

    @classmethod
    def create(cls, rng, cin: int, factor, nsp: int, upsample="nearest", dtype=np.float32):
        factor = tuple(factor)
        if any((not float(f).is_integer()) or f < 1 for f in factor):
            raise ConfigError(f"supervision head factor must be positive integers, got {factor}")
        return cls(tuple(int(f) for f in factor), Conv.create(rng, cin, 1, 1, nsp, dtype), upsample)

    def parameters(self, prefix: str) -> NamedTensors:
        yield from self.conv.parameters(f"{prefix}.conv")

    def buffers(self, prefix: str) -> NamedBuffers:
        return iter(())


def supervision_head_forward(x: Tensor, p: SupervisionHeadParams) -> Tensor:
    """Sigmoid probability map at full input resolution."""
    # the 1x1 conv commutes with replication / interpolation, so run it at the
    # coarse resolution
    logits = p.conv(x)
    if p.upsample == "nearest":
        logits = ops.upsample_nn(logits, p.factor)
    elif p.upsample == "linear":
        logits = ops.upsample_linear(logits, p.factor)
    else:
        raise ConfigError(f"unknown head upsampling {p.upsample!r}")
    return ops.sigmoid(logits)
