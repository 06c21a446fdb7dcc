"""Channel-wise standardization distillation and the combined training loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, as_tensor, cross_entropy, mean, sqrt, square, sum_

DEFAULT_EPS = 1e-5


@dataclass
class LayerTap:
    index: int
    student: Tensor
    teacher: Tensor

    def __post_init__(self):
        if self.student.shape != self.teacher.shape:
            raise ShapeError(
                "csd_loss",
                f"layer {self.index}: student tap {self.student.shape} vs teacher tap {self.teacher.shape}",
            )


@dataclass
class LossBreakdown:
    ce: float
    csd: float
    total: float


def _stat_axes(ndim: int, channel_axis: int = 1) -> tuple[int, ...]:
    return tuple(a for a in range(ndim) if a != channel_axis % ndim)


def standardize(z, eps: float = DEFAULT_EPS, channel_axis: int = 1) -> Tensor:
    """(z - mean) / sqrt(var + eps) with statistics per channel.

    Mean and (population) variance pool every axis except ``channel_axis``.
    """
    z = as_tensor(z)
    axes = _stat_axes(z.ndim, channel_axis)
    centered = z - mean(z, axes, keepdims=True)
    v = mean(square(centered), axes, keepdims=True)
    return centered / sqrt(v + eps)


def csd_loss(taps: list[LayerTap], eps: float = DEFAULT_EPS, reduction: str = "sum") -> Tensor:
    """Squared distance between standardized teacher and student taps.

    ``reduction="sum"`` sums squared differences over every element of every
    channel and layer. ``"mean"`` divides each channel's squared norm by its
    element count (a per-channel MSE) before summing over channels and layers.
    Teacher taps are detached.
    """
    if reduction not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    total = None
    for tap in taps:
        if tap.student.shape != tap.teacher.shape:
            raise ShapeError("csd_loss", f"layer {tap.index}: {tap.student.shape} vs {tap.teacher.shape}")
        zs = standardize(tap.student, eps)
        zt = standardize(tap.teacher.detach(), eps)
        term = sum_(square(zt - zs))
        if reduction == "mean":
            term = term * (tap.student.shape[1] / tap.student.size)
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


def total_loss(
    student_logits,
    labels,
    taps: list[LayerTap] | None = None,
    csd_weight: float = 1.0,
    eps: float = DEFAULT_EPS,
    reduction: str = "sum",
) -> tuple[Tensor, LossBreakdown]:
    """Cross-entropy on the student output plus ``csd_weight`` times CSD.

    With ``csd_weight == 0`` (or no taps) the CSD term is never built, so the
    graph is exactly the plain cross-entropy graph.
    """
    logits = as_tensor(student_logits)
    labels = np.atleast_1d(np.asarray(labels))
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[-1]):
        raise ValueError(f"label out of range for {logits.shape[-1]} classes")
    ce = cross_entropy(logits, labels)
    if csd_weight == 0 or not taps:
        return ce, LossBreakdown(ce.item(), 0.0, ce.item())
    csd = csd_loss(taps, eps, reduction)
    total = ce + csd * csd_weight if csd_weight != 1.0 else ce + csd
    return total, LossBreakdown(ce.item(), csd.item(), total.item())
