"""Stochastic feature/weight perturbation and a Monte-Carlo bias estimator."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import DTYPE, NonFiniteError, Tensor, _const, as_tensor, no_grad

TARGETS = ("features", "weights", "off")


@dataclass
class PerturbPolicy:
    """Where and how often to inject U[-s/2, s/2] noise.

    One Bernoulli(p) coin is drawn per in-scope layer per forward pass; the
    noise itself is only sampled when the coin comes up heads.
    """

    p: float = 0.0
    target: str = "features"
    seed: int = 0
    scope: frozenset[int] | None = None
    rng: np.random.Generator = field(init=False, repr=False)
    draws: int = field(default=0, init=False)
    hits: int = field(default=0, init=False)

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"perturbation probability p must lie in [0, 1], got {self.p}")
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}, got {self.target!r}")
        if self.scope is not None:
            self.scope = frozenset(self.scope)
        self.rng = np.random.default_rng(self.seed)

    @classmethod
    def off(cls) -> "PerturbPolicy":
        return cls(p=0.0, target="off")

    def applies_to(self, layer: int, target: str) -> bool:
        if self.target != target or self.target == "off":
            return False
        return self.scope is None or layer in self.scope

    def get_state(self) -> dict:
        return {"bit_generator": self.rng.bit_generator.state, "draws": self.draws, "hits": self.hits}

    def set_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state["bit_generator"]
        self.draws = state["draws"]
        self.hits = state["hits"]


def sample_uniform_delta(shape, s_l, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. draws from U[-s_l/2, s_l/2]; ``s_l`` may broadcast against ``shape``."""
    s = np.asarray(s_l, dtype=np.float64)
    if not (s > 0).all():
        raise ValueError(f"noise scale must be positive, got {s_l}")
    half = s / 2.0
    return rng.uniform(-half, half, size=tuple(shape)).astype(DTYPE)


def maybe_perturb(x, s_l, policy: PerturbPolicy, rng: np.random.Generator | None = None) -> Tensor:
    """Return ``x + delta`` with probability ``policy.p``, else ``x`` itself."""
    x = as_tensor(x)
    rng = policy.rng if rng is None else rng
    policy.draws += 1
    if not rng.random() < policy.p:
        return x
    policy.hits += 1
    return x + _const(sample_uniform_delta(x.shape, s_l, rng))


@dataclass
class BiasReport:
    layer_bias: list[float]
    layer_stderr: list[float]
    output_bias: np.ndarray
    output_stderr: np.ndarray
    trials: int
    p: float

    @property
    def significant(self) -> bool:
        """True when some output entry's bias exceeds 3 standard errors."""
        return bool((np.abs(self.output_bias) > 3 * self.output_stderr).any())

    @property
    def output_bias_norm(self) -> float:
        return float(np.linalg.norm(self.output_bias))

    def to_dict(self) -> dict:
        return {
            "kind": "bias",
            "p": self.p,
            "trials": self.trials,
            "layer_bias": [float(v) for v in self.layer_bias],
            "layer_stderr": [float(v) for v in self.layer_stderr],
            "output_bias": np.asarray(self.output_bias, dtype=float).ravel().tolist(),
            "output_stderr": np.asarray(self.output_stderr, dtype=float).ravel().tolist(),
            "significant": self.significant,
        }


class BiasEstimationError(RuntimeError):
    pass


def estimate_accumulated_bias(net, x, policy: PerturbPolicy, trials: int, rng=None) -> BiasReport:
    """Monte-Carlo estimate of E[f(x; perturbed) - f(x)] at every tap and the output.

    ``net`` must provide ``forward_with_taps(x, policy, rng) -> (out, taps)``
    and honour an inert policy for the clean reference pass.
    """
    if trials < 100:
        raise ValueError(f"need at least 100 trials, got {trials}")
    rng = policy.rng if rng is None else rng
    with no_grad():
        clean_out, clean_taps = net.forward_with_taps(x, PerturbPolicy.off(), rng)
        clean_out = np.asarray(clean_out.data, dtype=np.float64)
        clean_taps = [np.asarray(t.data, dtype=np.float64) for t in clean_taps]
        out_sum = np.zeros_like(clean_out)
        out_sq = np.zeros_like(clean_out)
        tap_sum = [np.zeros_like(t) for t in clean_taps]
        tap_sq = [np.zeros_like(t) for t in clean_taps]
        for trial in range(trials):
            try:
                out, taps = net.forward_with_taps(x, policy, rng)
            except NonFiniteError as exc:
                raise BiasEstimationError(f"non-finite activations in trial {trial}: {exc}") from exc
            for name, t in [("output", out)] + [(f"tap {i}", t) for i, t in enumerate(taps)]:
                if not np.isfinite(t.data).all():
                    raise BiasEstimationError(f"non-finite activations at {name} in trial {trial}")
            d = out.data - clean_out
            out_sum += d
            out_sq += d * d
            for i, t in enumerate(taps):
                dt = t.data - clean_taps[i]
                tap_sum[i] += dt
                tap_sq[i] += dt * dt

    def mean_se(s, sq):
        m = s / trials
        v = np.maximum(sq / trials - m * m, 0.0) * trials / (trials - 1)
        return m, np.sqrt(v / trials)

    out_mean, out_se = mean_se(out_sum, out_sq)
    layer_bias, layer_se = [], []
    for s, sq in zip(tap_sum, tap_sq):
        m, se = mean_se(s, sq)
        layer_bias.append(float(np.linalg.norm(m)))
        layer_se.append(float(np.linalg.norm(se)))
    return BiasReport(layer_bias, layer_se, out_mean, out_se, trials, policy.p)


class LayerStack:
    """A chain of elementwise layers with noise injected before each one.

    Used as a fixture for the bias estimator: ``scales[l]`` is the width of
    the uniform noise entering layer ``l``.
    """

    def __init__(self, fns: Sequence[Callable[[Tensor], Tensor]], scales: Sequence[float]):
        if len(fns) != len(scales):
            raise ValueError("one noise scale per layer")
        self.fns = list(fns)
        self.scales = list(scales)

    def forward_with_taps(self, x, policy: PerturbPolicy, rng=None):
        h = as_tensor(x)
        taps = []
        for layer, (fn, s) in enumerate(zip(self.fns, self.scales)):
            if policy.applies_to(layer, "features"):
                h = maybe_perturb(h, s, policy, rng)
            h = fn(h)
            taps.append(h)
        return h, taps


def square_fixture(a: float, layers: int = 1) -> LayerStack:
    """``layers`` stacked x -> x**2 maps with noise U[-a, a] before each."""
    return LayerStack([lambda h: h * h] * layers, [2.0 * a] * layers)


def linear_fixture(a: float, weights: Sequence[float] = (0.7, -1.3, 2.0)) -> LayerStack:
    fns = [(lambda h, w=w: h * w + 0.1) for w in weights]
    return LayerStack(fns, [2.0 * a] * len(fns))


def weight_perturb_forward(net, x, s_per_layer: dict | None = None, rng=None, *, seed: int = 0):
    """One training-mode forward with U[-s/2, s/2] noise on every weight.

    ``s_per_layer`` maps layer index to a scale (scalar or one per output
    channel); ``None`` reads the live weight-quantizer scales. Layers whose
    scale is all zero are left unperturbed. Returns ``(logits, taps)``.
    """
    if s_per_layer is None:
        scope = None
    else:
        scope = frozenset(i for i, s in s_per_layer.items() if np.any(np.asarray(s) > 0))
    policy = PerturbPolicy(p=1.0, target="weights", seed=seed, scope=scope)
    was_training = net.training
    net.train()
    try:
        return net.forward_with_taps(x, policy, rng if rng is not None else policy.rng,
                                     weight_scales=s_per_layer)
    finally:
        net.train(was_training)
