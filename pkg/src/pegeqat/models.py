"""Quantized layers and the reference architectures.

Every architecture keeps its first and last layer in full precision. The
layers in between quantize their input activations and their weights;
the optimizer only ever updates the latent full-precision weights ``w``
and the quantizer parameters, while the quantized weights are recomputed
on every forward pass.
"""

from __future__ import annotations

import enum
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import ops
from .curriculum import (
    Granularity,
    ReplacementState,
    ScheduleFamily,
    ScheduleSpec,
    mask_for,
    mu_at,
    replacement_rate_at,
)
from .errors import CheckpointError, ConfigError
from .estimators import EstimatorConfig, EstimatorKind
from .quantizer import ClipFamily, Quantizer, QuantizerSpec, RoundFamily
from .tensor import Tensor, no_grad


class Arch(str, enum.Enum):
    MLP = "MLP"
    SMALL_CNN = "SMALL_CNN"
    RESNET20_LITE = "RESNET20_LITE"


class Mode(str, enum.Enum):
    TRAIN = "TRAIN"
    EVAL = "EVAL"


@dataclass
class QuantConfig:
    """Quantization defaults for every quantizable layer. 32 bits = bypass."""

    clip_family: ClipFamily = ClipFamily.INTERVAL
    weight_round_family: RoundFamily = RoundFamily.WEIGHT
    bits_w: int = 2
    bits_a: int = 2
    pact_init_m: float = 8.0

    def __post_init__(self):
        self.clip_family = ClipFamily(str(self.clip_family).upper().split(".")[-1])
        self.weight_round_family = RoundFamily(str(self.weight_round_family).upper().split(".")[-1])

    def weight_spec(self) -> QuantizerSpec:
        # PACT's [0, m] range cannot hold signed weights; weights use the interval clip
        fam = ClipFamily.INTERVAL if self.clip_family is ClipFamily.PACT else self.clip_family
        return QuantizerSpec(bits=self.bits_w, clip_family=fam, round_family=self.weight_round_family)

    def act_spec(self) -> QuantizerSpec:
        return QuantizerSpec(
            bits=self.bits_a, clip_family=self.clip_family, round_family=RoundFamily.ACTIVATION, m=self.pact_init_m
        )


_DEFAULT_IN_SHAPE = {Arch.MLP: (1, 28, 28), Arch.SMALL_CNN: (3, 32, 32), Arch.RESNET20_LITE: (3, 32, 32)}
_DEFAULT_WIDTH = {Arch.MLP: 1.0, Arch.SMALL_CNN: 1.0, Arch.RESNET20_LITE: 0.25}


@dataclass
class ModelSpec:
    arch: Arch = Arch.MLP
    width: Optional[float] = None
    num_classes: int = 10
    in_shape: Optional[tuple] = None
    quant: QuantConfig = field(default_factory=QuantConfig)
    seed: int = 0

    def __post_init__(self):
        try:
            self.arch = Arch(str(self.arch).upper().split(".")[-1])
        except ValueError:
            raise ConfigError(f"unknown architecture {self.arch!r}") from None
        if self.width is None:
            self.width = _DEFAULT_WIDTH[self.arch]
        if not self.width > 0:
            raise ConfigError(f"width multiplier must be > 0, got {self.width}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        self.in_shape = tuple(self.in_shape or _DEFAULT_IN_SHAPE[self.arch])

    def descriptor(self) -> dict:
        return {
            "arch": self.arch.value,
            "width": self.width,
            "classes": self.num_classes,
            "in_shape": list(self.in_shape),
            "quant": {
                "clip_family": self.quant.clip_family.value,
                "weight_round_family": self.quant.weight_round_family.value,
                "bits_w": self.quant.bits_w,
                "bits_a": self.quant.bits_a,
                "pact_init_m": self.quant.pact_init_m,
            },
        }

    @classmethod
    def from_descriptor(cls, d: dict) -> "ModelSpec":
        return cls(
            arch=d["arch"],
            width=d["width"],
            num_classes=d["classes"],
            in_shape=tuple(d["in_shape"]),
            quant=QuantConfig(**d["quant"]),
        )


@dataclass
class StepContext:
    """Per-forward settings shared by all layers."""

    training: bool = False
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    mu: float = 0.0
    T: int = 0
    p_T: float = 1.0
    replacement: Optional[ReplacementState] = None
    replace_activations: bool = False
    record: bool = False
    bn_update: bool = True
    calibrate: bool = False

    def mask(self, layer: int, stream: int, shape) -> Optional[object]:
        """Replacement mask for one quantizer, or None for full replacement."""
        if self.replacement is None:
            return None
        if stream == 1 and not self.replace_activations:
            return None
        st = self.replacement
        return mask_for(st.rng_seed, st.granularity, self.p_T, self.T, layer, stream, shape)


def _he(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


class Layer:
    """Linear or convolution layer, optionally with weight and input quantizers."""

    def __init__(
        self,
        name: str,
        kind: str,
        w: np.ndarray,
        bias: bool,
        quant: Optional[QuantConfig] = None,
        stride: int = 1,
        pad: int = 0,
        index: int = -1,
    ):
        self.name, self.kind, self.stride, self.pad, self.index = name, kind, stride, pad, index
        dtype = w.dtype
        self.w = Tensor(w, requires_grad=True, name=f"{name}.w")
        self.b = Tensor(np.zeros(w.shape[0], dtype=dtype), requires_grad=True, name=f"{name}.b") if bias else None
        self.quantized = quant is not None
        if self.quantized:
            self.quant_w = Quantizer(quant.weight_spec(), dtype=dtype, name=f"{name}.qw")
            self.quant_a = Quantizer(quant.act_spec(), dtype=dtype, name=f"{name}.qa")
            self.quant_w.calibrate(w)

    def quantizers(self):
        return (self.quant_w, self.quant_a) if self.quantized else ()

    def __call__(self, x: Tensor, ctx: StepContext) -> Tensor:
        w = self.w
        if self.quantized:
            if ctx.calibrate and not self.quant_a.calibrated:
                self.quant_a.calibrate(x.data)
            est, mu = ctx.estimator, ctx.mu
            x = self.quant_a(x, est, mu, mask=ctx.mask(self.index, 1, x.shape), record=ctx.record)
            w = self.quant_w(w, est, mu, mask=ctx.mask(self.index, 0, w.shape), record=ctx.record)
        if self.kind == "conv":
            out = ops.conv2d(x, w, self.stride, self.pad)
            return ops.bias_add(out, self.b) if self.b is not None else out
        return ops.linear(x, w, self.b)


class BatchNorm:
    def __init__(self, name: str, channels: int, dtype):
        self.name = name
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True, name=f"{name}.beta")
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def __call__(self, x: Tensor, ctx: StepContext) -> Tensor:
        rm, rv = self.running_mean, self.running_var
        if ctx.training and not ctx.bn_update:
            rm, rv = rm.copy(), rv.copy()
        return ops.batchnorm(x, self.gamma, self.beta, rm, rv, training=ctx.training)


class Model:
    """Base class: parameter bookkeeping, state arrays and calibration."""

    def __init__(self, spec: ModelSpec, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.layers: "OrderedDict[str, Layer]" = OrderedDict()
        self.norms: "OrderedDict[str, BatchNorm]" = OrderedDict()
        self._rng = np.random.default_rng(spec.seed)
        self._n_quant = 0

    # -- construction helpers ------------------------------------------------
    def _conv(self, name, cin, cout, k=3, stride=1, pad=1, quantized=True, bias=False) -> Layer:
        w = _he(self._rng, (cout, cin, k, k), cin * k * k, self.dtype)
        return self._add(Layer(name, "conv", w, bias, self._qcfg(quantized), stride, pad, self._qindex(quantized)))

    def _linear(self, name, cin, cout, quantized=True) -> Layer:
        w = _he(self._rng, (cout, cin), cin, self.dtype)
        return self._add(Layer(name, "linear", w, True, self._qcfg(quantized), index=self._qindex(quantized)))

    def _bn(self, name, channels) -> BatchNorm:
        bn = BatchNorm(name, channels, self.dtype)
        self.norms[name] = bn
        return bn

    def _qcfg(self, quantized):
        return self.spec.quant if quantized else None

    def _qindex(self, quantized):
        if not quantized:
            return -1
        self._n_quant += 1
        return self._n_quant - 1

    def _add(self, layer: Layer) -> Layer:
        self.layers[layer.name] = layer
        return layer

    # -- introspection -------------------------------------------------------
    @property
    def quant_layers(self) -> list:
        return [l for l in self.layers.values() if l.quantized]

    def named_parameters(self) -> list:
        """``(name, tensor, group)`` with group in weight/bias/norm/quant."""
        out = []
        for l in self.layers.values():
            out.append((f"{l.name}.w", l.w, "weight"))
            if l.b is not None:
                out.append((f"{l.name}.b", l.b, "bias"))
        for n in self.norms.values():
            out.append((f"{n.name}.gamma", n.gamma, "norm"))
            out.append((f"{n.name}.beta", n.beta, "norm"))
        for l in self.quant_layers:
            for q in l.quantizers():
                for k, t in q.params.items():
                    out.append((f"{q.name}.{k}", t, "quant"))
        return out

    def parameters(self) -> list:
        return [t for _, t, _ in self.named_parameters()]

    def count_weights(self) -> int:
        """Weights and biases of the layers (quantizer and norm parameters excluded)."""
        return sum(t.size for _, t, g in self.named_parameters() if g in ("weight", "bias"))

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for name, t, _ in self.named_parameters():
            out[f"param/{name}"] = t.data.reshape(t.shape)
        for n in self.norms.values():
            out[f"buffer/{n.name}.running_mean"] = n.running_mean
            out[f"buffer/{n.name}.running_var"] = n.running_var
        for l in self.quant_layers:
            for q in l.quantizers():
                out[f"buffer/{q.name}.out_scale"] = np.asarray([q.spec.out_scale], dtype=self.dtype)
                out[f"buffer/{q.name}.calibrated"] = np.asarray([float(q.calibrated)], dtype=self.dtype)
        return out

    def load_state_arrays(self, arrays: dict, strict: bool = True, only: Optional[Callable[[str], bool]] = None) -> None:
        own = self.state_arrays()
        wanted = [k for k in own if only is None or only(k)]
        missing = [k for k in wanted if k not in arrays]
        extra = [k for k in arrays if k.startswith(("param/", "buffer/")) and k not in own]
        if missing or (strict and extra):
            raise CheckpointError(f"checkpoint does not match model: missing={missing[:3]} unexpected={extra[:3]}")
        for k in wanted:
            if k in arrays and arrays[k].shape != own[k].shape:
                raise CheckpointError(f"{k}: checkpoint shape {arrays[k].shape} != model shape {own[k].shape}")
        params = {n: t for n, t, _ in self.named_parameters()}
        norms = self.norms
        quants = {q.name: q for l in self.quant_layers for q in l.quantizers()}
        for k in wanted:
            if k not in arrays:
                continue
            v = np.asarray(arrays[k], dtype=self.dtype)
            kind, name = k.split("/", 1)
            if kind == "param":
                params[name].data = v.copy()
            else:
                owner, attr = name.rsplit(".", 1)
                if owner in norms:
                    getattr(norms[owner], attr)[...] = v
                elif attr == "out_scale":
                    quants[owner].spec.out_scale = float(v[0])
                elif attr == "calibrated":
                    quants[owner].calibrated = bool(v[0])
        for q in quants.values():
            q.sync()

    def calibrate(self, x: np.ndarray) -> None:
        """Warm-start activation intervals from one batch (batch-stat norms, no buffer updates)."""
        ctx = StepContext(training=True, calibrate=True, bn_update=False)
        with no_grad():
            self.forward(Tensor(np.asarray(x, dtype=self.dtype)), ctx)

    @property
    def calibrated(self) -> bool:
        return all(q.calibrated for l in self.quant_layers for q in l.quantizers())

    def discretization_errors(self) -> list:
        """Mean |x_c - x_q| of each quantizer at the last recorded step."""
        return [q.last_error for l in self.quant_layers for q in l.quantizers()]

    def forward(self, x: Tensor, ctx: StepContext) -> Tensor:  # pragma: no cover - abstract
        raise NotImplementedError

    def __call__(self, x: Tensor, ctx: Optional[StepContext] = None) -> Tensor:
        return self.forward(x, ctx or StepContext())


class MLP(Model):
    """784-256-128-10 perceptron (hidden sizes scale with width)."""

    def __init__(self, spec: ModelSpec, dtype=np.float32):
        super().__init__(spec, dtype)
        n_in = int(np.prod(spec.in_shape))
        h1, h2 = max(1, round(256 * spec.width)), max(1, round(128 * spec.width))
        self.fc1 = self._linear("fc1", n_in, h1, quantized=False)
        self.fc2 = self._linear("fc2", h1, h2)
        self.fc3 = self._linear("fc3", h2, spec.num_classes, quantized=False)

    def forward(self, x, ctx):
        x = ops.flatten(x)
        x = ops.relu(self.fc1(x, ctx))
        x = ops.relu(self.fc2(x, ctx))
        return self.fc3(x, ctx)


class SmallCNN(Model):
    """Three conv-BN-ReLU blocks (16/32/64 channels), pooling and a linear head."""

    def __init__(self, spec: ModelSpec, dtype=np.float32):
        super().__init__(spec, dtype)
        c = [max(1, round(v * spec.width)) for v in (16, 32, 64)]
        cin = spec.in_shape[0]
        self.conv1 = self._conv("conv1", cin, c[0], quantized=False)
        self.bn1 = self._bn("bn1", c[0])
        self.conv2 = self._conv("conv2", c[0], c[1])
        self.bn2 = self._bn("bn2", c[1])
        self.conv3 = self._conv("conv3", c[1], c[2])
        self.bn3 = self._bn("bn3", c[2])
        self.fc = self._linear("fc", c[2], spec.num_classes, quantized=False)

    def forward(self, x, ctx):
        x = ops.maxpool2d(ops.relu(self.bn1(self.conv1(x, ctx), ctx)))
        x = ops.maxpool2d(ops.relu(self.bn2(self.conv2(x, ctx), ctx)))
        x = ops.relu(self.bn3(self.conv3(x, ctx), ctx))
        return self.fc(ops.global_avgpool(x), ctx)


class ResNet20Lite(Model):
    """ResNet-20 topology (3 stages x 3 basic blocks) with parameter-free shortcuts."""

    def __init__(self, spec: ModelSpec, dtype=np.float32):
        super().__init__(spec, dtype)
        widths = [max(1, round(v * spec.width)) for v in (16, 32, 64)]
        self.stem = self._conv("stem", spec.in_shape[0], widths[0], quantized=False)
        self.stem_bn = self._bn("stem_bn", widths[0])
        self.blocks = []
        cin = widths[0]
        for s, cout in enumerate(widths):
            for b in range(3):
                stride = 2 if (s > 0 and b == 0) else 1
                name = f"s{s}b{b}"
                conv1 = self._conv(f"{name}.conv1", cin, cout, stride=stride)
                bn1 = self._bn(f"{name}.bn1", cout)
                conv2 = self._conv(f"{name}.conv2", cout, cout)
                bn2 = self._bn(f"{name}.bn2", cout)
                self.blocks.append((conv1, bn1, conv2, bn2, cout, stride))
                cin = cout
        self.fc = self._linear("fc", cin, spec.num_classes, quantized=False)

    def forward(self, x, ctx):
        x = ops.relu(self.stem_bn(self.stem(x, ctx), ctx))
        for conv1, bn1, conv2, bn2, cout, stride in self.blocks:
            h = ops.relu(bn1(conv1(x, ctx), ctx))
            h = bn2(conv2(h, ctx), ctx)
            sc = x if (stride == 1 and x.shape[1] == cout) else ops.channel_shortcut(x, cout, stride)
            x = ops.relu(ops.add(h, sc))
        return self.fc(ops.global_avgpool(x), ctx)


_ARCHS = {Arch.MLP: MLP, Arch.SMALL_CNN: SmallCNN, Arch.RESNET20_LITE: ResNet20Lite}


def build_model(spec: ModelSpec, dtype=np.float32) -> Model:
    return _ARCHS[spec.arch](spec, dtype)


def forward_quantized(
    model: Model,
    batch,
    T: int,
    mode: Mode = Mode.TRAIN,
    estimator: Optional[EstimatorConfig] = None,
    schedule: Optional[ScheduleSpec] = None,
    replacement: Optional[ReplacementState] = None,
    replace_activations: bool = False,
) -> Tensor:
    """Run the model at global step ``T``.

    TRAIN: draws the replacement masks at rate ``p_T`` from ``schedule``
    (no schedule means full replacement), uses ``mu_T`` for PEGE, records
    the graph and discretization errors and updates norm statistics.
    EVAL: fully quantized, running norm statistics, nothing recorded.
    """
    mode = Mode(str(mode).upper().split(".")[-1])
    estimator = estimator or EstimatorConfig()
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=model.dtype))
    if mode is Mode.EVAL:
        with no_grad():
            return model.forward(x, StepContext(training=False, estimator=estimator))
    p_T = replacement_rate_at(schedule, T) if schedule is not None else 1.0
    if estimator.kind is EstimatorKind.PEGE and schedule is not None:
        mu = mu_at(schedule, T)
    else:
        mu = estimator.mu
    use_masks = schedule is not None and schedule.family is not ScheduleFamily.NONE
    if use_masks and replacement is None:
        replacement = ReplacementState(rng_seed=model.spec.seed, granularity=Granularity.PER_LAYER)
    if replacement is not None:
        replacement.step = T
    ctx = StepContext(
        training=True,
        estimator=estimator,
        mu=mu,
        T=T,
        p_T=p_T,
        replacement=replacement if use_masks else None,
        replace_activations=replace_activations,
        record=True,
    )
    return model.forward(x, ctx)


def init_from_pretrained(model: Model, checkpoint_path: str) -> Model:
    """Load full-precision weights and norm state, then re-derive quantizer ranges.

    Weight intervals are recomputed from the loaded weights; activation
    intervals are re-calibrated on the first training batch.
    """
    from .checkpoint import check_compatible, load_checkpoint

    ck = load_checkpoint(checkpoint_path)
    check_compatible(model, ck)
    quant_keys = {f"param/{n}" for n, _, g in model.named_parameters() if g == "quant"}

    def is_weight_state(key: str) -> bool:
        if key in quant_keys:
            return False
        return key.startswith("param/") or key.endswith((".running_mean", ".running_var"))

    model.load_state_arrays(ck.arrays, strict=False, only=is_weight_state)
    for layer in model.quant_layers:
        layer.quant_w.calibrate(layer.w.data)
        layer.quant_a.calibrated = layer.quant_a.spec.bypass or layer.quant_a.spec.clip_family is not ClipFamily.INTERVAL
    return model
