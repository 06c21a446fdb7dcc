"""Small teacher/student networks with quantization sites and per-layer taps.

Every conv/linear layer is a :class:`QuantLayer`. In a student the layer
fake-quantizes its input (per-tensor) and its weight (per output channel);
feature noise is added to the quantized input, weight noise to the quantized
weight. Conv outputs, before normalization and nonlinearity, are recorded as
taps for distillation.

Normalization uses the statistics of the current batch in both training and
evaluation; there are no running averages.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tensor,
    conv2d,
    matmul,
    mean,
    relu,
    scale_shift,
    softplus,
    tanh,
    transpose,
)
from .distillation import standardize
from .perturbation import PerturbPolicy, maybe_perturb
from .quantizer import FakeQuantizer, QuantizedLayerConfig, QuantSpec

ARCHS = ("toy-cnn", "mini-resnet", "mlp")
NORM_EPS = 1e-5


class UnknownArchError(ValueError):
    pass


@dataclass
class ForwardContext:
    policy: PerturbPolicy | None = None
    rng: np.random.Generator | None = None
    training: bool = False
    perturbable: frozenset[int] = frozenset()
    feature_scales: dict | None = None
    weight_scales: dict | None = None
    taps: list[Tensor] = field(default_factory=list)

    def perturbs(self, layer: int, target: str) -> bool:
        return (
            self.training
            and self.policy is not None
            and layer in self.perturbable
            and self.policy.applies_to(layer, target)
        )


class QuantLayer:
    def __init__(self, kind: str, weight: Tensor, bias: Tensor | None = None, *,
                 stride: int = 1, padding: int = 0, index: int = 0, tap: bool = True):
        self.kind = kind
        self.weight = weight
        self.bias = bias
        self.stride = stride
        self.padding = padding
        self.index = index
        self.tap = tap
        self.act_quant: FakeQuantizer | None = None
        self.weight_quant: FakeQuantizer | None = None

    def quantized_weight(self) -> Tensor:
        return self.weight if self.weight_quant is None else self.weight_quant(self.weight)

    def _feature_scale(self, ctx: ForwardContext):
        if ctx.feature_scales is not None and self.index in ctx.feature_scales:
            return ctx.feature_scales[self.index]
        if self.act_quant is not None and self.act_quant.spec is not None:
            return float(self.act_quant.spec.scale.data.reshape(-1)[0])
        raise ValueError(f"layer {self.index}: no activation scale available for feature noise")

    def _weight_scale(self, ctx: ForwardContext):
        shape = (-1,) + (1,) * (self.weight.ndim - 1)
        if ctx.weight_scales is not None and self.index in ctx.weight_scales:
            return np.broadcast_to(np.reshape(ctx.weight_scales[self.index], shape), self.weight.shape)
        if self.weight_quant is not None and self.weight_quant.spec is not None:
            return self.weight_quant.spec.scale.data.reshape(shape)
        raise ValueError(f"layer {self.index}: no weight scale available for weight noise")

    def __call__(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        if self.act_quant is not None:
            x = self.act_quant(x)
        if ctx.perturbs(self.index, "features"):
            x = maybe_perturb(x, self._feature_scale(ctx), ctx.policy, ctx.rng)
        w = self.quantized_weight()
        if ctx.perturbs(self.index, "weights"):
            w = maybe_perturb(w, self._weight_scale(ctx), ctx.policy, ctx.rng)
        if self.kind == "conv":
            y = conv2d(x, w, self.stride, self.padding)
        else:
            y = matmul(x, transpose(w))
            if self.bias is not None:
                y = y + self.bias
        if self.tap:
            ctx.taps.append(y)
        return y


class ChannelNorm:
    """Standardize with batch statistics, then a learnable per-channel affine."""

    def __init__(self, channels: int):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return scale_shift(standardize(x, NORM_EPS), self.gamma, self.beta)


class LayeredModel:
    arch = "base"

    def __init__(self, num_classes: int, quantized: bool, qconfig: QuantizedLayerConfig | None,
                 activation: str = "relu"):
        self.num_classes = num_classes
        self.quantized = quantized
        self.qconfig = qconfig if qconfig is not None else QuantizedLayerConfig()
        self.activation = activation
        self.softplus_beta = 5.0
        self.training = False
        self.perturb_first = True
        self.layers: list[QuantLayer] = []
        self.norms: list[ChannelNorm] = []
        self.build_kwargs: dict = {}

    # -- structure -------------------------------------------------------
    def _attach_quantizers(self) -> None:
        n = len(self.layers)
        for layer in self.layers:
            wb, ab = self.qconfig.bits_for(layer.index, n)
            layer.weight_quant = FakeQuantizer(
                wb, "per-channel", 0,
                symmetric=self.qconfig.symmetric_weights,
                zero_from_min=self.qconfig.zero_from_min,
            )
            layer.act_quant = FakeQuantizer(ab, "per-tensor", zero_from_min=self.qconfig.zero_from_min)

    @property
    def conv_layers(self) -> list[QuantLayer]:
        return [l for l in self.layers if l.kind == "conv"]

    def perturbable_layers(self) -> frozenset[int]:
        eligible = [l.index for l in self.layers if l.kind == "conv"] or [l.index for l in self.layers]
        if not self.perturb_first:
            eligible = [i for i in eligible if i != self.layers[0].index]
        return frozenset(eligible)

    def weight_tensors(self) -> list[Tensor]:
        out = []
        for l in self.layers:
            out.append(l.weight)
            if l.bias is not None:
                out.append(l.bias)
        return out

    def parameters(self) -> list[Tensor]:
        out = self.weight_tensors()
        for n in self.norms:
            out += [n.gamma, n.beta]
        return out

    def quantizers(self) -> list[tuple[str, FakeQuantizer]]:
        out = []
        for l in self.layers:
            if l.weight_quant is not None:
                out.append((f"layer{l.index}.wq", l.weight_quant))
            if l.act_quant is not None:
                out.append((f"layer{l.index}.aq", l.act_quant))
        return out

    def scale_tensors(self) -> list[Tensor]:
        return [q.spec.scale for _, q in self.quantizers() if q.spec is not None]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "LayeredModel":
        self.training = mode
        return self

    def eval(self) -> "LayeredModel":
        return self.train(False)

    # -- forward ---------------------------------------------------------
    def act(self, x: Tensor) -> Tensor:
        if self.activation == "relu":
            return relu(x)
        if self.activation == "softplus":
            return softplus(x, self.softplus_beta)
        if self.activation == "tanh":
            return tanh(x)
        if self.activation == "none":
            return x
        raise ValueError(f"unknown activation {self.activation!r}")

    def forward_with_taps(self, x, policy: PerturbPolicy | None = None, rng=None, *,
                          feature_scales: dict | None = None, weight_scales: dict | None = None):
        x = x if isinstance(x, Tensor) else Tensor(x)
        if policy is not None and rng is None:
            rng = policy.rng
        ctx = ForwardContext(policy, rng, self.training, self.perturbable_layers(),
                             feature_scales, weight_scales)
        logits = self._forward(x, ctx)
        return logits, ctx.taps

    def __call__(self, x, policy: PerturbPolicy | None = None, rng=None) -> Tensor:
        return self.forward_with_taps(x, policy, rng)[0]

    def _forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        raise NotImplementedError

    # -- state -----------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        sd: dict[str, np.ndarray] = {}
        for l in self.layers:
            sd[f"layer{l.index}.weight"] = l.weight.data
            if l.bias is not None:
                sd[f"layer{l.index}.bias"] = l.bias.data
        for j, n in enumerate(self.norms):
            sd[f"norm{j}.gamma"] = n.gamma.data
            sd[f"norm{j}.beta"] = n.beta.data
        for name, q in self.quantizers():
            if q.spec is not None:
                sd[f"{name}.scale"] = q.spec.scale.data
                sd[f"{name}.zero_point"] = q.spec.zero_point
        return sd

    def load_state_dict(self, sd: dict[str, np.ndarray]) -> None:
        """Restore parameters and quantizer specs; unknown keys are an error."""
        expected = {f"layer{l.index}.weight" for l in self.layers}
        expected |= {f"layer{l.index}.bias" for l in self.layers if l.bias is not None}
        expected |= {f"norm{j}.{k}" for j in range(len(self.norms)) for k in ("gamma", "beta")}
        optional = {f"{name}.{k}" for name, _ in self.quantizers() for k in ("scale", "zero_point")}
        missing = expected - set(sd)
        extra = set(sd) - expected - optional
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for l in self.layers:
            l.weight.data = np.array(sd[f"layer{l.index}.weight"], dtype=np.float32)
            if l.bias is not None:
                l.bias.data = np.array(sd[f"layer{l.index}.bias"], dtype=np.float32)
        for j, n in enumerate(self.norms):
            n.gamma.data = np.array(sd[f"norm{j}.gamma"], dtype=np.float32)
            n.beta.data = np.array(sd[f"norm{j}.beta"], dtype=np.float32)
        for name, q in self.quantizers():
            if f"{name}.scale" not in sd:
                continue
            q.spec = QuantSpec(
                bits=q.bits,
                scale=Tensor(sd[f"{name}.scale"], requires_grad=True),
                zero_point=sd[f"{name}.zero_point"],
                granularity=q.granularity,
                axis=q.axis,
                signed=q.symmetric,
            )

    def copy_weights_from(self, other: "LayeredModel") -> None:
        """Copy conv/linear/norm parameters (not quantizer state) from ``other``."""
        for mine, theirs in zip(self.parameters(), other.parameters()):
            if mine.shape != theirs.shape:
                raise ValueError(f"topology mismatch: {mine.shape} vs {theirs.shape}")
            mine.data = theirs.data.copy()

    def clone(self) -> "LayeredModel":
        return copy.deepcopy(self)

    def smooth_twin(self, beta: float = 5.0, keep_act_quant: bool = False) -> "LayeredModel":
        """Copy that is twice differentiable in its weights.

        ReLU becomes softplus(beta). Weights are snapped to their current
        grid and weight quantizers disabled, so the copy's parameters are the
        effective quantized weights. Activation quantizers are disabled too
        unless ``keep_act_quant``; in that case second derivatives pass the
        rounding straight through, as the training gradient does.
        """
        twin = self.clone()
        if twin.activation == "relu":
            twin.activation = "softplus"
            twin.softplus_beta = beta
        for l in twin.layers:
            if l.weight_quant is not None and l.weight_quant.spec is not None:
                l.weight = Tensor(l.quantized_weight().data, requires_grad=True)
                l.weight_quant.enabled = False
            if l.act_quant is not None and not keep_act_quant:
                l.act_quant.enabled = False
        return twin


def _init(rng: np.random.Generator, shape: tuple, fan_in: int, gain: float) -> Tensor:
    bound = gain * np.sqrt(3.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _conv(rng, cin, cout, k, stride, pad, index, gain) -> QuantLayer:
    w = _init(rng, (cout, cin, k, k), cin * k * k, gain)
    return QuantLayer("conv", w, stride=stride, padding=pad, index=index)


def _linear(rng, fin, fout, index, gain, tap=False) -> QuantLayer:
    w = _init(rng, (fout, fin), fin, gain)
    b = Tensor(np.zeros(fout), requires_grad=True)
    return QuantLayer("linear", w, b, index=index, tap=tap)


_RELU_GAIN = np.sqrt(2.0)


class ToyCNN(LayeredModel):
    """Four 3x3 convs (the last three stride 2), global average pool, linear head."""

    arch = "toy-cnn"

    def __init__(self, num_classes=10, in_channels=1, widths=(8, 16, 32, 32), *,
                 quantized=False, qconfig=None, seed=0, activation="relu"):
        super().__init__(num_classes, quantized, qconfig, activation)
        rng = np.random.default_rng(seed)
        cin = in_channels
        for i, cout in enumerate(widths):
            self.layers.append(_conv(rng, cin, cout, 3, 1 if i == 0 else 2, 1, i, _RELU_GAIN))
            self.norms.append(ChannelNorm(cout))
            cin = cout
        self.layers.append(_linear(rng, cin, num_classes, len(widths), 1.0))
        if quantized:
            self._attach_quantizers()

    def _forward(self, x, ctx):
        h = x
        for conv, norm in zip(self.layers[:-1], self.norms):
            h = self.act(norm(conv(h, ctx)))
        h = mean(h, (2, 3))
        return self.layers[-1](h, ctx)


class MiniResNet(LayeredModel):
    """Stem conv, one identity block, one stride-2 block with a 1x1 downsample."""

    arch = "mini-resnet"

    def __init__(self, num_classes=10, in_channels=3, width=16, *,
                 quantized=False, qconfig=None, seed=0, activation="relu"):
        super().__init__(num_classes, quantized, qconfig, activation)
        rng = np.random.default_rng(seed)
        w, w2 = width, 2 * width
        g = _RELU_GAIN
        self.stem = _conv(rng, in_channels, w, 3, 1, 1, 0, g)
        self.b1a = _conv(rng, w, w, 3, 1, 1, 1, g)
        self.b1b = _conv(rng, w, w, 3, 1, 1, 2, g)
        self.b2a = _conv(rng, w, w2, 3, 2, 1, 3, g)
        self.b2b = _conv(rng, w2, w2, 3, 1, 1, 4, g)
        self.down = _conv(rng, w, w2, 1, 2, 0, 5, 1.0)
        self.fc = _linear(rng, w2, num_classes, 6, 1.0)
        self.layers = [self.stem, self.b1a, self.b1b, self.b2a, self.b2b, self.down, self.fc]
        self.norms = [ChannelNorm(c) for c in (w, w, w, w2, w2, w2)]
        if quantized:
            self._attach_quantizers()

    def _forward(self, x, ctx):
        n_stem, n1a, n1b, n2a, n2b, n_down = self.norms
        h = self.act(n_stem(self.stem(x, ctx)))
        r = self.act(n1a(self.b1a(h, ctx)))
        h = self.act(h + n1b(self.b1b(r, ctx)))
        r = self.act(n2a(self.b2a(h, ctx)))
        branch = n2b(self.b2b(r, ctx))
        h = self.act(n_down(self.down(h, ctx)) + branch)
        h = mean(h, (2, 3))
        return self.fc(h, ctx)


class MLP(LayeredModel):
    """Fully connected stack; hidden layer outputs are tapped."""

    arch = "mlp"

    def __init__(self, dims=(4, 16, 3), *, quantized=False, qconfig=None, seed=0, activation="tanh"):
        super().__init__(dims[-1], quantized, qconfig, activation)
        if len(dims) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        rng = np.random.default_rng(seed)
        gain = _RELU_GAIN if activation == "relu" else 1.0
        n = len(dims) - 1
        for i in range(n):
            self.layers.append(_linear(rng, dims[i], dims[i + 1], i, gain, tap=i < n - 1))
        if quantized:
            self._attach_quantizers()

    def _forward(self, x, ctx):
        h = x
        for layer in self.layers[:-1]:
            h = self.act(layer(h, ctx))
        return self.layers[-1](h, ctx)


def build(arch: str, num_classes: int = 10, quantized: bool = False, *, in_channels: int = 1,
          qconfig: QuantizedLayerConfig | None = None, seed: int = 0, **kwargs) -> LayeredModel:
    """Construct a model; identical arguments give identical initial weights."""
    if arch == "toy-cnn":
        model = ToyCNN(num_classes, in_channels, quantized=quantized, qconfig=qconfig, seed=seed, **kwargs)
    elif arch == "mini-resnet":
        model = MiniResNet(num_classes, in_channels, quantized=quantized, qconfig=qconfig, seed=seed, **kwargs)
    elif arch == "mlp":
        dims = tuple(kwargs.pop("dims", (in_channels, 16, num_classes)))
        if dims[-1] != num_classes:
            raise ValueError(f"MLP output width {dims[-1]} != num_classes {num_classes}")
        model = MLP(dims, quantized=quantized, qconfig=qconfig, seed=seed, **kwargs)
    else:
        raise UnknownArchError(f"unknown architecture {arch!r}; choose from {ARCHS}")
    model.build_kwargs = dict(arch=arch, num_classes=num_classes, in_channels=in_channels,
                              seed=seed, **({"dims": list(dims)} if arch == "mlp" else {}), **kwargs)
    return model
