"""Fake quantization with a learnable step size and frozen zero-points.

Forward::

    x_int = clip(round(x / s) + z, lo, hi)
    x_hat = (x_int - z) * s

``round`` is half-to-even. Gradients follow LSQ: straight-through for ``x``
inside the clip range, and for the scale

    d x_hat / d s = round(x/s) - x/s      inside the range
                  = bound - z             where clipped

multiplied by ``1 / sqrt(N * hi)`` with ``N`` the number of elements sharing
one scale entry.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .autodiff import DTYPE, ShapeError, Tensor, _const, as_tensor, sum_to

SCALE_FLOOR = 1e-8


class CalibrationError(RuntimeError):
    pass


class DegenerateCalibrationWarning(UserWarning):
    """Calibration range collapsed to a point; scale fell back to the floor."""


@dataclass
class QuantSpec:
    bits: int
    scale: Tensor
    zero_point: np.ndarray
    granularity: str = "per-tensor"
    axis: int = 0
    signed: bool = False

    def __post_init__(self):
        if self.bits < 2:
            raise ValueError(f"bit width must be >= 2, got {self.bits}")
        zp = np.array(self.zero_point, dtype=np.int64).reshape(self.scale.shape)
        zp.setflags(write=False)
        self.zero_point = zp

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bits - 1)) if self.signed else 0

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1 if self.signed else 2**self.bits - 1

    @property
    def learnable(self) -> bool:
        return self.scale.requires_grad

    def broadcast_shape(self, ndim: int) -> tuple:
        if self.granularity == "per-tensor":
            return (1,) * ndim
        shape = [1] * ndim
        shape[self.axis] = self.scale.size
        return tuple(shape)

    def clamp_scale(self) -> None:
        np.maximum(self.scale.data, SCALE_FLOOR, out=self.scale.data)


def _minmax(x: np.ndarray, granularity: str, axis: int) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot calibrate on an empty sample")
    if granularity == "per-tensor":
        return np.array([x.min()]), np.array([x.max()])
    if granularity != "per-channel":
        raise ValueError(f"unknown granularity {granularity!r}")
    moved = np.moveaxis(x, axis, 0).reshape(x.shape[axis], -1)
    return moved.min(axis=1), moved.max(axis=1)


def calibrate(
    samples,
    bits: int,
    granularity: str = "per-tensor",
    axis: int = 0,
    *,
    symmetric: bool = False,
    zero_from_min: bool = False,
    learnable: bool = True,
) -> QuantSpec:
    """Initialize scale and zero-point from observed min/max.

    Asymmetric (default): ``s = (max - min) / (2^q - 1)`` and
    ``z = round(q_max - max / s)``. ``zero_from_min=True`` uses the
    textbook ``z = round(-min / s)`` instead; the two agree up to rounding
    whenever the scale is not degenerate.

    Symmetric: signed grid, ``z = 0``, ``s = max|x| / (2^(q-1) - 1)``.
    """
    data = samples.data if isinstance(samples, Tensor) else samples
    lo, hi = _minmax(data, granularity, axis)
    return spec_from_range(
        lo, hi, bits, granularity, axis,
        symmetric=symmetric, zero_from_min=zero_from_min, learnable=learnable,
    )


def spec_from_range(
    lo: np.ndarray,
    hi: np.ndarray,
    bits: int,
    granularity: str = "per-tensor",
    axis: int = 0,
    *,
    symmetric: bool = False,
    zero_from_min: bool = False,
    learnable: bool = True,
) -> QuantSpec:
    if bits < 2:
        raise ValueError(f"bit width must be >= 2, got {bits}")
    lo = np.asarray(lo, dtype=np.float64).reshape(-1)
    hi = np.asarray(hi, dtype=np.float64).reshape(-1)
    if symmetric:
        qmax = 2 ** (bits - 1) - 1
        s = np.maximum(np.abs(lo), np.abs(hi)) / qmax
    else:
        qmax = 2**bits - 1
        s = (hi - lo) / qmax
    degenerate = s <= 0
    if degenerate.any():
        warnings.warn(
            f"degenerate calibration: {int(degenerate.sum())} of {s.size} scale entries "
            f"have zero range; using {SCALE_FLOOR}",
            DegenerateCalibrationWarning,
            stacklevel=3,
        )
        s = np.where(degenerate, SCALE_FLOOR, s)
    if symmetric:
        z = np.zeros_like(s, dtype=np.int64)
    else:
        z = np.round(-lo / s) if zero_from_min else np.round(qmax - hi / s)
        z = np.clip(z, 0, qmax).astype(np.int64)
    return QuantSpec(
        bits=bits,
        scale=Tensor(s.astype(DTYPE), requires_grad=learnable),
        zero_point=z,
        granularity=granularity,
        axis=axis,
        signed=symmetric,
    )


def _quantize_np(x: np.ndarray, s: np.ndarray, z: np.ndarray, lo: int, hi: int):
    v = x / s
    r = np.round(v)
    x_int = np.clip(r + z, lo, hi)
    return v, r, x_int


def fake_quantize(x, spec: QuantSpec, grad_scale: bool = True) -> Tensor:
    """Quantize-dequantize ``x`` on the grid described by ``spec``."""
    x = as_tensor(x)
    bshape = spec.broadcast_shape(x.ndim)
    if spec.granularity == "per-channel" and x.shape[spec.axis] != spec.scale.size:
        raise ShapeError(
            "fake_quantize", f"{spec.scale.size} channel scales for axis {spec.axis} of {x.shape}"
        )
    s = spec.scale.data.reshape(bshape)
    z = spec.zero_point.reshape(bshape).astype(DTYPE)
    lo, hi = spec.qmin, spec.qmax
    v, r, x_int = _quantize_np(x.data, s, z, lo, hi)
    out = (x_int - z) * s

    shifted = v + z
    in_range = (shifted >= lo) & (shifted <= hi)
    ds = np.where(in_range, r - v, x_int - z).astype(DTYPE)
    per_entry = x.size // spec.scale.size
    gscale = 1.0 / np.sqrt(per_entry * hi) if grad_scale else 1.0
    scale = spec.scale

    def bw(g):
        gx = g * _const(in_range) if x.requires_grad else None
        gs = None
        if scale.requires_grad:
            gs = sum_to(g * _const(ds), bshape).reshape(scale.shape) * float(gscale)
        return gx, gs

    return Tensor._make(out, (x, scale), bw, "fake_quantize")


def quantize_int(x, spec: QuantSpec) -> np.ndarray:
    """Integer codes ``x_int`` (no gradient)."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    bshape = spec.broadcast_shape(x.ndim)
    s = spec.scale.data.reshape(bshape)
    z = spec.zero_point.reshape(bshape).astype(DTYPE)
    return _quantize_np(x, s, z, spec.qmin, spec.qmax)[2].astype(np.int64)


@dataclass
class QuantizedLayerConfig:
    """Bit widths for one student network.

    With ``first_last_8bit`` the first and last quantized layers use 8 bits
    for both weights and activations regardless of ``w_bits``/``a_bits``.
    """

    w_bits: int = 4
    a_bits: int = 4
    first_last_8bit: bool = True
    symmetric_weights: bool = False
    zero_from_min: bool = False

    def bits_for(self, index: int, count: int) -> tuple[int, int]:
        if self.first_last_8bit and index in (0, count - 1):
            return 8, 8
        return self.w_bits, self.a_bits


@dataclass
class FakeQuantizer:
    """A quantization site: observes during calibration, then fake-quantizes.

    The QuantSpec is created once; afterwards the zero-point is frozen and a second
    calibration is refused.
    """

    bits: int
    granularity: str = "per-tensor"
    axis: int = 0
    symmetric: bool = False
    zero_from_min: bool = False
    spec: QuantSpec | None = None
    enabled: bool = True
    observing: bool = field(default=False, repr=False)
    _lo: np.ndarray | None = field(default=None, repr=False)
    _hi: np.ndarray | None = field(default=None, repr=False)

    @property
    def calibrated(self) -> bool:
        return self.spec is not None

    def calibrate(self, samples) -> QuantSpec:
        if self.spec is not None:
            raise CalibrationError("quantizer already calibrated; zero-points are frozen")
        self.spec = calibrate(
            samples,
            self.bits,
            self.granularity,
            self.axis,
            symmetric=self.symmetric,
            zero_from_min=self.zero_from_min,
        )
        return self.spec

    def observe(self, x) -> None:
        lo, hi = _minmax(x.data if isinstance(x, Tensor) else x, self.granularity, self.axis)
        self._lo = lo if self._lo is None else np.minimum(self._lo, lo)
        self._hi = hi if self._hi is None else np.maximum(self._hi, hi)

    def finish_observing(self) -> QuantSpec:
        if self.spec is not None:
            raise CalibrationError("quantizer already calibrated; zero-points are frozen")
        if self._lo is None:
            raise CalibrationError("no activations observed during calibration")
        self.spec = spec_from_range(
            self._lo, self._hi, self.bits, self.granularity, self.axis,
            symmetric=self.symmetric, zero_from_min=self.zero_from_min,
        )
        self.observing = False
        self._lo = self._hi = None
        return self.spec

    def __call__(self, x) -> Tensor:
        if self.observing:
            self.observe(x)
            return as_tensor(x)
        if not self.enabled or self.spec is None:
            return as_tensor(x)
        return fake_quantize(x, self.spec)

    @property
    def scale(self) -> Tensor | None:
        return None if self.spec is None else self.spec.scale
