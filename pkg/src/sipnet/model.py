"""Network assembly: SIP-Net (3-D and 2-D) and the D / DR / DRL ablation variants."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import blocks, ops
from .blocks import DeconvParams, DrbParams, SupervisionHeadParams
from .tensor import ConfigError, Tensor

VARIANTS = ("D", "DR", "DRL", "SIP")

# Feature sizes of the canonical network (k=32) for a single 16x96x96 patch,
# as (N, C, D, H, W).  Row names follow the layer table of the architecture.
LAYER_TABLE = [
    ("Input", (1, 1, 16, 96, 96)),
    ("Convolution1", (1, 64, 16, 96, 96)),
    ("Pooling1", (1, 64, 8, 48, 48)),
    ("DRB1", (1, 192, 8, 48, 48)),
    ("TransLayer1", (1, 128, 8, 48, 48)),
    ("Pooling2", (1, 128, 4, 24, 24)),
    ("DRB2", (1, 384, 4, 24, 24)),
    ("TransLayer2", (1, 256, 4, 24, 24)),
    ("Pooling3", (1, 256, 2, 12, 12)),
    ("DRB3", (1, 768, 2, 12, 12)),
    ("TransLayer3", (1, 512, 2, 12, 12)),
    ("Deconvolution1", (1, 256, 4, 24, 24)),
    ("DRB4", (1, 512, 4, 24, 24)),
    ("TransLayer4", (1, 256, 4, 24, 24)),
    ("Deconvolution2", (1, 128, 8, 48, 48)),
    ("DRB5", (1, 256, 8, 48, 48)),
    ("TransLayer5", (1, 128, 8, 48, 48)),
    ("Deconvolution3", (1, 64, 16, 96, 96)),
    ("DRB6", (1, 128, 16, 96, 96)),
    ("TransLayer6", (1, 64, 16, 96, 96)),
    ("Convolution2", (1, 1, 16, 96, 96)),
]
LAYER_TABLE_NAMES = {name for name, _ in LAYER_TABLE}


@dataclass
class ModelConfig:
    dimensionality: int = 3
    variant: str = "SIP"
    growth_rate: int = 32
    stem_channels: Optional[int] = None  # default 2k
    bottleneck_width: Optional[int] = None  # default round(1.25k)
    encoder_layers: tuple = (4, 8, 16)
    decoder_layers: tuple = (8, 4, 2)
    input_patch: tuple = (16, 96, 96)
    dropout_rate: float = 0.3
    deconv: str = "factorized"  # or "full"
    head_upsample: str = "nearest"  # or "linear"
    deep_supervision: Optional[bool] = None  # forced to (variant == "SIP")

    def __post_init__(self):
        self.encoder_layers = tuple(self.encoder_layers)
        self.decoder_layers = tuple(self.decoder_layers)
        self.input_patch = tuple(self.input_patch)
        if self.deep_supervision is None:
            self.deep_supervision = self.variant == "SIP"
        self.validate()

    def validate(self):
        if self.dimensionality not in (2, 3):
            raise ConfigError(f"dimensionality must be 2 or 3, got {self.dimensionality}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.growth_rate < 1:
            raise ConfigError("growth_rate must be >= 1")
        if len(self.encoder_layers) != 3 or len(self.decoder_layers) != 3:
            raise ConfigError("encoder_layers and decoder_layers need 3 entries each")
        if self.deep_supervision != (self.variant == "SIP"):
            raise ConfigError("deep supervision exists exactly for the SIP variant")
        if len(self.input_patch) != self.dimensionality:
            raise ConfigError(f"input_patch {self.input_patch} does not match dimensionality")
        check_patch(self.input_patch)
        if self.deconv not in ("factorized", "full"):
            raise ConfigError(f"deconv must be 'factorized' or 'full', got {self.deconv!r}")
        if self.head_upsample not in ("nearest", "linear"):
            raise ConfigError(f"head_upsample must be 'nearest' or 'linear'")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError("dropout_rate must be in [0, 1)")

    # channel plan, all in units of the growth rate at the canonical setting
    @property
    def stem(self) -> int:
        return self.stem_channels if self.stem_channels is not None else 2 * self.growth_rate

    @property
    def bottleneck(self) -> int:
        if self.bottleneck_width is not None:
            return self.bottleneck_width
        return max(1, round(1.25 * self.growth_rate))

    @property
    def encoder_channels(self) -> tuple:
        s = self.stem
        return (2 * s, 4 * s, 8 * s)

    @property
    def decoder_channels(self) -> tuple:
        s = self.stem
        return (4 * s, 2 * s, s)

    @property
    def has_residual(self) -> bool:
        return self.variant != "D"

    @property
    def has_long(self) -> bool:
        return self.variant in ("DRL", "SIP")

    @property
    def has_attention(self) -> bool:
        return self.variant == "SIP"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("encoder_layers", "decoder_layers", "input_patch"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def check_patch(extents) -> None:
    if any(int(e) % 8 or int(e) <= 0 for e in extents):
        raise ConfigError(f"patch extents {tuple(extents)} must be positive multiples of 8")


class Model:
    """Realized network: ordered parameter registry plus wiring per ``ModelConfig``."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        c = config
        nsp = c.dimensionality
        rng = np.random.default_rng(seed)
        k, bw, drop = c.growth_rate, c.bottleneck, c.dropout_rate

        self.stem = blocks.Conv.create(rng, 1, c.stem, 3, nsp, dtype)
        self.encoder: list[DrbParams] = []
        cin = c.stem
        for n, cout in zip(c.encoder_layers, c.encoder_channels):
            self.encoder.append(DrbParams.create(rng, cin, n, k, bw, cout, nsp, c.has_residual, drop, dtype))
            cin = cout
        self.deconvs: list[DeconvParams] = []
        self.decoder: list[DrbParams] = []
        self.heads: list[SupervisionHeadParams] = []
        for level, (n, cout) in enumerate(zip(c.decoder_layers, c.decoder_channels)):
            self.deconvs.append(DeconvParams.create(rng, cin, cout, nsp, c.deconv == "factorized", dtype))
            if c.deep_supervision:
                f = 2 ** (2 - level)
                self.heads.append(SupervisionHeadParams.create(rng, cout, (f,) * nsp, nsp, c.head_upsample, dtype))
            self.decoder.append(DrbParams.create(rng, cout, n, k, bw, cout, nsp, c.has_residual, drop, dtype))
            cin = cout
        self.final = blocks.Conv.create(rng, cin, 1, 1, nsp, dtype)

    # -- registry ---------------------------------------------------------------
    def _components(self):
        yield "stem", self.stem
        for i, p in enumerate(self.encoder):
            yield f"drb{i + 1}", p
        for i in range(3):
            yield f"deconv{i + 1}", self.deconvs[i]
            if self.heads:
                yield f"head{i + 1}", self.heads[i]
            yield f"drb{i + 4}", self.decoder[i]
        yield "final", self.final

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for prefix, comp in self._components():
            for name, t in comp.parameters(prefix):
                out[name] = t
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for prefix, comp in self._components():
            for name, b in comp.buffers(prefix):
                out[name] = b
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.parameters()))

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None

    def astype(self, dtype) -> "Model":
        """Cast parameters and buffers in place (float64 = shadow check mode)."""
        for t in self.parameters():
            t.data = t.data.astype(dtype)
            t.grad = None
        for _, comp in self._components():
            for _, obj in _bn_modules(comp):
                obj.running_mean = obj.running_mean.astype(dtype)
                obj.running_var = obj.running_var.astype(dtype)
        return self

    @property
    def dtype(self):
        return self.stem.weight.dtype

    # -- forward ----------------------------------------------------------------
    def forward(self, x: Tensor, mode: str = "eval", rng: np.random.Generator | None = None,
                trace: Optional[list] = None) -> dict:
        return forward(self, x, mode, rng, trace)

    __call__ = forward


def _bn_modules(comp):
    """Yield (name, BatchNorm) pairs inside a component."""
    if isinstance(comp, blocks.BatchNorm):
        yield "", comp
    elif isinstance(comp, DrbParams):
        for layer in comp.layers:
            yield "", layer.bn1
            yield "", layer.bn2
        yield "", comp.transition_bn


def build(config: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    return Model(config, seed, dtype)


def forward(model: Model, x: Tensor, mode: str = "eval", rng=None, trace: Optional[list] = None) -> dict:
    """Run the network.

    Returns ``{"main": probs, "aux": [head probs...], "masks": [AM masks...]}``;
    ``aux`` and ``masks`` are empty for variants without them.  ``trace``, when
    given, collects ``(row name, tensor)`` for every stage.
    """
    c = model.config
    if x.ndim != c.dimensionality + 2:
        raise ConfigError(f"expected a {c.dimensionality + 2}-D input, got shape {x.shape}")
    check_patch(x.shape[2:])

    def rec(name, t):
        if trace is not None:
            trace.append((name, t))
        return t

    rec("Input", x)
    h = rec("Convolution1", model.stem(x))
    skips = [h]
    for i, p in enumerate(model.encoder):
        h = rec(f"Pooling{i + 1}", ops.avg_pool(h))
        sub: list = []
        h = blocks.drb_forward(h, p, mode, rng, trace=sub)
        rec(f"DRB{i + 1}", sub[0][1])
        rec(f"TransLayer{i + 1}", h)
        skips.append(h)
    aux, masks = [], []
    for level in range(3):
        h = rec(f"Deconvolution{level + 1}", blocks.deconv_forward(h, model.deconvs[level]))
        skip = skips[2 - level]
        if c.has_attention:
            h, m = blocks.am_forward(h, skip, return_mask=True)
            masks.append(m)
            rec(f"AM{level + 1}", h)
        elif c.has_long:
            h = rec(f"Fuse{level + 1}", ops.add(h, skip))
        if model.heads:
            aux.append(rec(f"Head{level + 1}", blocks.supervision_head_forward(h, model.heads[level])))
        sub = []
        h = blocks.drb_forward(h, model.decoder[level], mode, rng, trace=sub)
        rec(f"DRB{level + 4}", sub[0][1])
        rec(f"TransLayer{level + 4}", h)
    logits = rec("Convolution2", model.final(h))
    main = rec("Output", ops.sigmoid(logits))
    return {"main": main, "aux": aux, "masks": masks}



def shape_trace(model_or_config, input_shape) -> list[tuple[str, tuple]]:
    """Symbolic shape propagation (no activations allocated)."""
    c = model_or_config.config if isinstance(model_or_config, Model) else model_or_config
    input_shape = tuple(int(v) for v in input_shape)
    if len(input_shape) != c.dimensionality + 2:
        raise ConfigError(f"input shape {input_shape} does not match dimensionality {c.dimensionality}")
    check_patch(input_shape[2:])
    N = input_shape[0]
    sp = input_shape[2:]
    k = c.growth_rate
    out = [("Input", input_shape), ("Convolution1", (N, c.stem) + sp)]

    def scaled(level):
        return tuple(e // 2**level for e in sp)

    cin = c.stem
    for i, (n, cout) in enumerate(zip(c.encoder_layers, c.encoder_channels)):
        s = scaled(i + 1)
        out.append((f"Pooling{i + 1}", (N, cin) + s))
        out.append((f"DRB{i + 1}", (N, cin + n * k) + s))
        out.append((f"TransLayer{i + 1}", (N, cout) + s))
        cin = cout
    for level, (n, cout) in enumerate(zip(c.decoder_layers, c.decoder_channels)):
        s = scaled(2 - level)
        out.append((f"Deconvolution{level + 1}", (N, cout) + s))
        if c.has_attention:
            out.append((f"AM{level + 1}", (N, cout) + s))
        elif c.has_long:
            out.append((f"Fuse{level + 1}", (N, cout) + s))
        if c.deep_supervision:
            out.append((f"Head{level + 1}", (N, 1) + sp))
        out.append((f"DRB{level + 4}", (N, cout + n * k) + s))
        out.append((f"TransLayer{level + 4}", (N, cout) + s))
        cin = cout
    out.append(("Convolution2", (N, 1) + sp))
    out.append(("Output", (N, 1) + sp))
    return out


def layer_table_rows(trace: list) -> list[tuple[str, tuple]]:
    return [(n, s) for n, s in trace if n in LAYER_TABLE_NAMES]


def layer_table_mismatches(trace: list) -> list[str]:
    """Human-readable differences between a trace and the canonical layer table."""
    got = layer_table_rows(trace)
    problems = []
    if [n for n, _ in got] != [n for n, _ in LAYER_TABLE]:
        problems.append(f"row names differ: {[n for n, _ in got]}")
        return problems
    for (name, shape), (_, want) in zip(got, LAYER_TABLE):
        if tuple(shape) != want:
            problems.append(f"{name}: got {tuple(shape)}, expected {want}")
    return problems


def is_canonical(config: ModelConfig) -> bool:
    ref = ModelConfig()
    return (
        config.dimensionality == 3
        and config.growth_rate == ref.growth_rate
        and config.stem == ref.stem
        and config.encoder_layers == ref.encoder_layers
        and config.decoder_layers == ref.decoder_layers
    )


def count_layers(config: ModelConfig) -> dict:
    """Layer bookkeeping (conv, pooling, dropout, deconv, ...) for reporting only."""
    n_dense = sum(config.encoder_layers) + sum(config.decoder_layers)
    convs = 1 + 2 * n_dense + 6 + 1 + (6 if config.has_residual else 0)
    deconv_convs = 3 * (2 if config.deconv == "factorized" else 1)
    return {
        "conv": convs,
        "deconv": deconv_convs,
        "pooling": 3,
        "dropout": n_dense,
        "batch_norm": 2 * n_dense + 6,
        "supervision_heads": 3 if config.deep_supervision else 0,
        "total": convs + deconv_convs + 3 + n_dense + 2 * n_dense + 6,
    }
