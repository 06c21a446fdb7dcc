import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fpqlab.autodiff import Tensor, backward, grad, sum_
from fpqlab.quantizer import (
    CalibrationError,
    DegenerateCalibrationWarning,
    FakeQuantizer,
    QuantizedLayerConfig,
    QuantSpec,
    calibrate,
    fake_quantize,
    quantize_int,
)

from oracles import fake_quant_ref, fd_gradients, lsq_surrogate, rel_err


def spec(s, z, bits, granularity="per-tensor", learnable=True):
    s = np.atleast_1d(np.asarray(s, dtype=np.float32))
    return QuantSpec(bits, Tensor(s, requires_grad=learnable), np.atleast_1d(z), granularity)


# -- calibration ---------------------------------------------------------

def test_calibrate_symmetric_range_rounds_half_to_even():
    sp = calibrate(np.array([-1.0, 0.3, 1.0]), 4)
    assert float(sp.scale.data[0]) == pytest.approx(2 / 15, rel=1e-6)
    assert int(sp.zero_point[0]) == 8  # round(7.5) -> 8 under half-to-even


def test_calibrate_unsigned_range():
    sp = calibrate(np.linspace(0, 15, 31), 4)
    assert float(sp.scale.data[0]) == pytest.approx(1.0)
    assert int(sp.zero_point[0]) == 0


def test_calibrate_constant_input_falls_back_with_warning():
    with pytest.warns(DegenerateCalibrationWarning):
        sp = calibrate(np.full(10, 0.7), 4)
    assert float(sp.scale.data[0]) == pytest.approx(1e-8)


def test_calibrate_per_channel_uses_channel_ranges():
    w = np.stack([np.linspace(-1, 1, 9), np.linspace(0, 0.3, 9)]).reshape(2, 1, 3, 3)
    sp = calibrate(w, 4, "per-channel", axis=0)
    np.testing.assert_allclose(sp.scale.data, [2 / 15, 0.3 / 15], rtol=1e-6)
    assert sp.zero_point.tolist() == [8, 0]


def test_zero_from_min_alternative():
    x = np.array([-0.3, 1.0])
    a = calibrate(x, 4)
    b = calibrate(x, 4, zero_from_min=True)
    assert a.zero_point[0] == int(np.round(15 - 1.0 / (1.3 / 15)))
    assert b.zero_point[0] == int(np.round(0.3 / (1.3 / 15)))


def test_symmetric_mode_has_zero_zero_point():
    sp = calibrate(np.array([-0.5, 2.0]), 4, symmetric=True)
    assert sp.signed and sp.zero_point[0] == 0
    assert float(sp.scale.data[0]) == pytest.approx(2.0 / 7, rel=1e-6)


def test_bits_below_two_rejected():
    with pytest.raises(ValueError):
        calibrate(np.array([0.0, 1.0]), 1)


def test_zero_point_is_read_only():
    sp = calibrate(np.array([-1.0, 1.0]), 4)
    with pytest.raises(ValueError):
        sp.zero_point[0] = 3


def test_fake_quantizer_refuses_second_calibration():
    q = FakeQuantizer(4)
    q.calibrate(np.array([-1.0, 1.0]))
    with pytest.raises(CalibrationError):
        q.calibrate(np.array([-2.0, 2.0]))


def test_first_last_layers_use_eight_bits():
    cfg = QuantizedLayerConfig(w_bits=2, a_bits=4)
    assert [cfg.bits_for(i, 5) for i in range(5)] == [(8, 8), (2, 4), (2, 4), (2, 4), (8, 8)]
    assert QuantizedLayerConfig(2, 4, first_last_8bit=False).bits_for(0, 5) == (2, 4)


# -- forward ---------------------------------------------------------------

def test_fake_quantize_examples():
    sp = spec(0.1, 0, 4)
    out = fake_quantize(Tensor([0.0, 0.26, 100.0]), sp).data
    np.testing.assert_allclose(out, [0.0, 0.3, 1.5], rtol=1e-6)


def test_fake_quantize_matches_reference():
    rng = np.random.default_rng(1)
    x = rng.normal(size=1000) * 2
    out = fake_quantize(Tensor(x), spec(0.37, 5, 4)).data
    np.testing.assert_allclose(out, fake_quant_ref(x.astype(np.float32), np.float32(0.37), 5, 4), atol=1e-6)


def test_quantize_int_codes_in_range():
    codes = quantize_int(np.linspace(-5, 5, 101), spec(0.1, 7, 4))
    assert codes.min() == 0 and codes.max() == 15


@st.composite
def quant_case(draw):
    bits = draw(st.sampled_from([2, 4, 8]))
    s = draw(st.floats(1e-3, 10.0))
    z = draw(st.integers(0, 2**bits - 1))
    n = draw(st.integers(1, 50))
    x = draw(arrays(np.float64, n, elements=st.floats(-1e3, 1e3, allow_nan=False)))
    return bits, s, z, x


@settings(max_examples=200, deadline=None)
@given(quant_case())
def test_round_trip_idempotence_grid(case):
    bits, s, z, x = case
    sp = spec(s, z, bits)
    s32 = float(sp.scale.data[0])
    out = fake_quantize(Tensor(x), sp).data
    xf = x.astype(np.float32).astype(np.float64)
    in_range = (xf >= (0 - z) * s32) & (xf <= (2**bits - 1 - z) * s32)
    assert np.all(np.abs(out - xf)[in_range] <= s32 / 2 * (1 + 1e-5) + 1e-6)
    assert fake_quantize(Tensor(out), sp).data.tobytes() == out.tobytes()
    k = np.round(out / s32 + z)
    assert np.all((k >= 0) & (k <= 2**bits - 1))
    np.testing.assert_allclose((k - z) * s32, out, rtol=1e-5, atol=1e-6)


@settings(max_examples=200, deadline=None)
@given(quant_case())
def test_monotone(case):
    bits, s, z, x = case
    xs = np.sort(x)
    out = fake_quantize(Tensor(xs), spec(s, z, bits)).data
    assert np.all(np.diff(out) >= 0)


# -- backward --------------------------------------------------------------

def test_ste_passes_in_range_and_blocks_clipped():
    x = Tensor([0.0, 0.26, 1.0, 100.0, -5.0], requires_grad=True)
    backward(sum_(fake_quantize(x, spec(0.1, 0, 4))))
    np.testing.assert_array_equal(x.grad, [1, 1, 1, 0, 0])


def test_all_in_range_grad_is_ones():
    x = Tensor(np.linspace(-0.5, 0.5, 11), requires_grad=True)
    backward(sum_(fake_quantize(x, spec(0.1, 8, 4))))
    np.testing.assert_array_equal(x.grad, np.ones(11))


def _away_from_ties(x, s, margin=0.15):
    frac = np.abs(x / s - np.round(x / s))
    return np.abs(frac - 0.5) > margin


@pytest.mark.parametrize("bits", [2, 4, 8])
def test_scale_gradient_matches_surrogate_finite_differences(bits):
    rng = np.random.default_rng(bits)
    for trial in range(10):
        s0 = rng.uniform(0.05, 0.5)
        z = int(rng.integers(0, 2**bits))
        x = rng.uniform((-z - 2) * s0, (2**bits - z + 1) * s0, size=40)
        x = x[_away_from_ties(x, s0)]
        w = rng.uniform(0.5, 1.5, size=x.shape)
        sp = spec(s0, z, bits)
        s32 = float(sp.scale.data[0])
        (gs,) = grad(sum_(fake_quantize(Tensor(x), sp) * Tensor(w)), [sp.scale])
        fd = fd_gradients(lambda s: float(np.sum(w * lsq_surrogate(x, s[0], s32, z, bits))),
                          [np.array([s32])], h=1e-4 * s32)[0]
        expected = fd / np.sqrt(x.size * (2**bits - 1))
        assert rel_err(gs.data, expected) <= 1e-3


def test_scale_gradient_clipped_branch_equals_true_derivative():
    # where every entry is clipped the forward is exactly (bound - z) * s,
    # so the unsurrogated finite difference applies
    bits, z, s0 = 4, 3, 0.1
    x = np.array([5.0, 7.0, -3.0, -4.0])
    sp = spec(s0, z, bits)
    (gs,) = grad(sum_(fake_quantize(Tensor(x), sp, grad_scale=False)), [sp.scale])
    f = lambda s: float(np.sum(fake_quant_ref(x, s[0], z, bits)))
    fd = fd_gradients(f, [np.array([float(sp.scale.data[0])])], h=1e-4)[0]
    assert rel_err(gs.data, fd) <= 1e-3
    assert gs.data[0] == pytest.approx(2 * (15 - 3) + 2 * (0 - 3))


def test_lsq_rule_in_range_value():
    sp = spec(0.1, 0, 4)
    (gs,) = grad(sum_(fake_quantize(Tensor([0.26]), sp, grad_scale=False)), [sp.scale])
    assert gs.data[0] == pytest.approx(3 - 2.6, abs=1e-5)


def test_per_channel_scale_gradient_shape_and_scaling():
    w = np.random.default_rng(0).uniform(-1, 1, size=(3, 2, 3, 3))
    sp = calibrate(w, 4, "per-channel", axis=0)
    (g1,) = grad(sum_(fake_quantize(Tensor(w), sp)), [sp.scale])
    (g0,) = grad(sum_(fake_quantize(Tensor(w), sp, grad_scale=False)), [sp.scale])
    assert g1.shape == (3,)
    np.testing.assert_allclose(g1.data, g0.data / np.sqrt(18 * 15), rtol=1e-5)


def test_per_channel_shape_mismatch():
    sp = calibrate(np.random.default_rng(0).normal(size=(3, 2)), 4, "per-channel")
    from fpqlab.autodiff import ShapeError
    with pytest.raises(ShapeError):
        fake_quantize(Tensor(np.ones((4, 2))), sp)


def test_zero_point_never_receives_gradient_or_update():
    sp = spec(0.1, 3, 4)
    before = sp.zero_point.copy()
    backward(sum_(fake_quantize(Tensor(np.linspace(-1, 1, 9)), sp)))
    sp.scale.data -= 0.01 * sp.scale.grad
    np.testing.assert_array_equal(sp.zero_point, before)


def test_scale_floor():
    sp = spec(0.1, 0, 4)
    sp.scale.data[:] = -3.0
    sp.clamp_scale()
    assert sp.scale.data[0] == pytest.approx(1e-8)
