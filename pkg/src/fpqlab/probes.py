"""Loss-landscape probes: Hessian trace, top eigenvalue, gradient norms, output stability.

Loss closures take no arguments and rebuild the loss from the current
``.data`` of the parameter tensors, so the probes can move parameters around
(finite differences) and put them back.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .autodiff import Tensor, cross_entropy, grad, no_grad, sum_
from .distillation import LayerTap, total_loss
from .perturbation import PerturbPolicy

LossClosure = Callable[[], Tensor]

MAX_EXACT_PARAMS = 2000
GRADNORM_MODES = ("none", "feature-perturb", "weight-perturb")


class ProbeError(RuntimeError):
    pass


@dataclass
class TraceEstimate:
    mean: float
    stderr: float
    probes: int
    samples: list[float] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {"mean": self.mean, "stderr": self.stderr, "probes": self.probes}


@dataclass
class StabilityReport:
    sigma: float
    variance: float
    trials: int
    per_sample: list[float] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {"kind": "stability", "sigma": self.sigma, "variance": self.variance, "trials": self.trials}


@dataclass
class DropBound:
    """Loss increase from snapping weights versus the curvature bound."""

    measured: float
    bound: float
    lambda_max: float
    sq_dist: float

    @property
    def holds(self) -> bool:
        return self.measured <= self.bound

    def to_dict(self) -> dict:
        return {**asdict(self), "holds": self.holds}


def _count(params: Sequence[Tensor]) -> int:
    return sum(p.size for p in params)


def _dot(xs: Sequence[Tensor], ys: Sequence) -> Tensor:
    out = None
    for x, y in zip(xs, ys):
        term = sum_(x * y)
        out = term if out is None else out + term
    return out


def hvp_fn(loss_closure: LossClosure, params: Sequence[Tensor]):
    """Return ``v -> H v`` (list of arrays) at the current parameters."""
    loss = loss_closure()
    g = grad(loss, params, create_graph=True)

    def hvp(vs: Sequence[np.ndarray]) -> list[np.ndarray]:
        gv = _dot(g, [Tensor(v) for v in vs])
        if not gv.requires_grad:
            return [np.zeros_like(p.data) for p in params]
        return [h.data.astype(np.float64) for h in grad(gv, params)]

    return hvp


def _mean_se(values: np.ndarray) -> tuple[float, float]:
    n = len(values)
    m = float(np.mean(values))
    se = float(np.std(values, ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
    return m, se


def hutchinson_trace(loss_closure: LossClosure, params: Sequence[Tensor], n_probes: int,
                     rng: np.random.Generator | int | None = None) -> TraceEstimate:
    """Average of v^T H v over Rademacher probes v, with H v by double backward."""
    if n_probes < 1:
        raise ValueError("n_probes must be >= 1")
    rng = np.random.default_rng(rng)
    params = list(params)
    hvp = hvp_fn(loss_closure, params)
    samples = np.empty(n_probes)
    for k in range(n_probes):
        vs = [rng.choice((-1.0, 1.0), size=p.shape) for p in params]
        hv = hvp(vs)
        val = sum(float(np.dot(v.ravel(), h.ravel())) for v, h in zip(vs, hv))
        if not math.isfinite(val):
            raise ProbeError(f"non-finite Hessian-vector product at probe {k}")
        samples[k] = val
    m, se = _mean_se(samples)
    return TraceEstimate(m, se, n_probes, samples.tolist())


def exact_hessian_trace(loss_closure: LossClosure, params: Sequence[Tensor], h: float = 1e-3,
                        max_params: int = MAX_EXACT_PARAMS) -> float:
    """Sum of central differences of the gradient along every coordinate."""
    params = list(params)
    d = _count(params)
    if d > max_params:
        raise ValueError(f"{d} parameters is too many for the exact trace (limit {max_params})")
    total = 0.0
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            gp = grad(loss_closure(), [p])[0].data.reshape(-1)[i]
            flat[i] = orig - h
            gm = grad(loss_closure(), [p])[0].data.reshape(-1)[i]
            flat[i] = orig
            total += (float(gp) - float(gm)) / (2 * h)
    return total


def hessian_max_eigenvalue(loss_closure: LossClosure, params: Sequence[Tensor], iters: int = 100,
                           rng: np.random.Generator | int | None = None, tol: float = 1e-6) -> float:
    """Power iteration on H; returns the Rayleigh quotient of the final vector."""
    rng = np.random.default_rng(rng)
    params = list(params)
    hvp = hvp_fn(loss_closure, params)
    vs = [rng.normal(size=p.shape) for p in params]
    lam = 0.0
    for _ in range(iters):
        norm = math.sqrt(sum(float(np.sum(v * v)) for v in vs))
        vs = [v / norm for v in vs]
        hv = hvp(vs)
        new = sum(float(np.sum(v * h)) for v, h in zip(vs, hv))
        vs = hv
        if abs(new - lam) <= tol * max(1.0, abs(new)):
            lam = new
            break
        lam = new
    return lam


def quantization_drop_bound(loss_closure: LossClosure, params: Sequence[Tensor],
                            snapped: Sequence[np.ndarray], iters: int = 100, rng=None) -> DropBound:
    """Compare L(w_hat) - L(w*) with 0.5 * |w_hat - w*|^2 * lambda_max(H(w*)).

    ``params`` hold w* on entry and are restored on exit.
    """
    params = list(params)
    lam = hessian_max_eigenvalue(loss_closure, params, iters, rng)
    originals = [p.data.copy() for p in params]
    with no_grad():
        base = float(loss_closure().data)
    sq = sum(float(np.sum((np.asarray(s, np.float64) - o) ** 2)) for s, o in zip(snapped, originals))
    try:
        for p, s in zip(params, snapped):
            p.data = np.asarray(s, dtype=np.float32).reshape(p.shape).copy()
        with no_grad():
            moved = float(loss_closure().data)
    finally:
        for p, o in zip(params, originals):
            p.data = o
    return DropBound(moved - base, 0.5 * sq * lam, lam, sq)


def student_loss_closure(student, x, labels, teacher=None, *, csd_weight: float = 1.0,
                         reduction: str = "mean", eps: float = 1e-5) -> LossClosure:
    """Training objective of ``student`` on one fixed batch, without noise.

    With a teacher the closure is CE + csd_weight * CSD; without one it is CE.
    """
    teacher_taps = None
    if teacher is not None and csd_weight != 0:
        with no_grad():
            _, teacher_taps = teacher.forward_with_taps(x)

    def closure() -> Tensor:
        logits, taps = student.forward_with_taps(x)
        if teacher_taps is None:
            return cross_entropy(logits, labels)
        pairs = [LayerTap(i, s, t) for i, (s, t) in enumerate(zip(taps, teacher_taps))]
        return total_loss(logits, labels, pairs, csd_weight, eps, reduction)[0]

    return closure


def student_trace(student, x, labels, teacher=None, *, n_probes: int = 50, seed: int = 0,
                  csd_weight: float = 1.0, reduction: str = "mean") -> TraceEstimate:
    """Hutchinson trace of the student's weight Hessian on its smooth twin."""
    twin = student.smooth_twin().eval()
    closure = student_loss_closure(twin, x, labels, teacher, csd_weight=csd_weight, reduction=reduction)
    return hutchinson_trace(closure, twin.weight_tensors(), n_probes, seed)


def grad_norm_trajectory(model, batches: Iterable, mode: str = "none", *, p: float = 1.0,
                         seed: int = 0) -> list[float]:
    """Per-batch L2 norm of d CE / d weights under the chosen perturbation.

    Weights are left untouched. Feature noise uses the live activation scales
    and weight noise the live per-channel weight scales.
    """
    if mode not in GRADNORM_MODES:
        raise ValueError(f"mode must be one of {GRADNORM_MODES}, got {mode!r}")
    target = {"none": "off", "feature-perturb": "features", "weight-perturb": "weights"}[mode]
    policy = PerturbPolicy(p=p if target != "off" else 0.0, target=target, seed=seed)
    was_training = model.training
    model.train()
    weights = model.weight_tensors()
    norms = []
    try:
        for x, y, *_ in batches:
            logits, _ = model.forward_with_taps(x, policy)
            gs = grad(cross_entropy(logits, y), weights)
            norms.append(math.sqrt(sum(float(np.sum(g.data.astype(np.float64) ** 2)) for g in gs)))
    finally:
        model.train(was_training)
    return norms


def stability_probe(model, inputs, sigma: float, trials: int = 20,
                    rng: np.random.Generator | int | None = None) -> StabilityReport:
    """Variance of the logits across Gaussian input-noise trials.

    Variance is taken per sample and class over trials, then averaged.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if trials < 2:
        raise ValueError("need at least 2 trials")
    rng = np.random.default_rng(rng)
    x = np.asarray(inputs.data if isinstance(inputs, Tensor) else inputs, dtype=np.float32)
    was_training = model.training
    model.eval()
    outs = []
    try:
        with no_grad():
            for _ in range(trials):
                noisy = x + rng.normal(0.0, sigma, size=x.shape).astype(np.float32) if sigma > 0 else x
                outs.append(model(noisy).data.astype(np.float64))
    finally:
        model.train(was_training)
    var = np.var(np.stack(outs), axis=0, ddof=1)
    return StabilityReport(float(sigma), float(var.mean()), trials, var.mean(axis=-1).tolist())
