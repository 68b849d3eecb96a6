import math

import numpy as np
import pytest

from stochfv.models import ModelError
from stochfv.noise import (
    ClampNoise,
    EventStream,
    NoiseModel,
    NoiselessModel,
    StableLikeNoise,
    TanhNoise,
    ZeroNoise,
    compensator_integral,
    isometry_selftest,
    noise_increment,
    sample_event_stream,
    stream_for,
    validate_noise,
)

U = np.linspace(-3, 3, 61)


def _generic(model, method, u):
    """The base-class quadrature path, bypassing closed-form overrides."""
    return getattr(NoiseModel, method)(model, u)


def test_compensator_vanishes_at_zero_state():
    for m in (TanhNoise(4, 0.5), ClampNoise(4, 0.5, 0.4), StableLikeNoise(1.0, 0.8, 0.05, 0.5)):
        assert np.all(compensator_integral(m, 0.0) == 0)


def test_symmetric_tanh_compensator_zero_by_quadrature():
    m = TanhNoise(4.0, 0.5, symmetric=True)
    np.testing.assert_allclose(_generic(m, "compensator", U), 0.0, atol=1e-14)
    np.testing.assert_array_equal(m.compensator(U), 0.0)


def test_abs_mark_compensator_closed_form():
    m = TanhNoise(2.0, 0.5)
    expect = 0.5 * np.tanh(U)
    np.testing.assert_allclose(m.compensator(U), expect, rtol=1e-14)
    np.testing.assert_allclose(_generic(m, "compensator", U), expect, rtol=1e-13, atol=1e-15)


@pytest.mark.parametrize(
    "model",
    [TanhNoise(4.0, 0.5), TanhNoise(3.0, 0.3, symmetric=True), ClampNoise(4.0, 0.5, 0.25),
     StableLikeNoise(1.0, 0.8, 0.05, 0.5)],
)
def test_closed_forms_match_quadrature(model):
    np.testing.assert_allclose(_generic(model, "second_moment", U), model.second_moment(U), rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(_generic(model, "compensator", U), model.compensator(U), rtol=1e-10, atol=1e-13)
    z, w = model.mark_quadrature()
    assert float(w @ model.h1(z) ** 2) == pytest.approx(model.c_eta, rel=1e-10)
    assert float(w.sum()) == pytest.approx(model.rate, rel=1e-10)


def test_tanh_c_eta():
    assert TanhNoise(4.0, 0.5).c_eta == pytest.approx(4.0 / 3.0)


def test_poisson_event_count():
    m = TanhNoise(4.0, 0.5)
    T = 0.5  # Lambda T = 2
    n = 100_000
    counts = np.array([len(sample_event_stream(7, T, m, i)) for i in range(n)])
    assert abs(counts.mean() - 2.0) <= 3 * math.sqrt(2.0 / n)


def test_stream_is_deterministic_and_path_dependent():
    m = TanhNoise(40.0, 0.5)
    a = sample_event_stream(3, 1.0, m, 5)
    b = sample_event_stream(3, 1.0, m, 5)
    c = sample_event_stream(3, 1.0, m, 6)
    assert a.same_as(b) and not a.same_as(c)
    assert np.all(np.diff(a.times) >= 0)
    assert np.all((a.times > 0) & (a.times <= 1.0))
    assert np.all(np.abs(a.marks) <= 1.0)


def test_noiseless_model_signal():
    with pytest.raises(NoiselessModel):
        sample_event_stream(0, 1.0, ZeroNoise())
    assert len(stream_for(ZeroNoise(), 0, 1.0, 0)) == 0


def test_stable_marks_respect_truncation():
    m = StableLikeNoise(1.0, 0.8, 0.05, 0.5)
    s = sample_event_stream(1, 2.0, m)
    a = np.abs(s.marks)
    assert len(s) > 0 and np.all((a >= 0.05) & (a <= 1.0))


def _stream(times, marks, T=1.0):
    return EventStream(np.asarray(times, float), np.asarray(marks, float), T, 0, 0)


def test_increment_without_events_is_minus_compensator():
    m = TanhNoise(4.0, 0.5)
    inc = noise_increment(m, 0.7, (0.0, 0.1), _stream([0.5], [0.3]))
    assert inc == pytest.approx(-0.1 * 0.5 * math.tanh(0.7) * 2.0)


def test_increment_one_event_symmetric_model():
    m = TanhNoise(4.0, 0.5, symmetric=True)
    inc = noise_increment(m, 0.7, (0.0, 0.1), _stream([0.05], [-0.4]))
    assert inc == pytest.approx(0.5 * math.tanh(0.7) * -0.4, rel=1e-15)


def test_increment_zero_noise():
    assert noise_increment(ZeroNoise(), 1.3, (0.0, 0.1), _stream([0.05], [0.2])) == 0.0


def test_window_is_left_open_right_closed():
    s = _stream([0.1, 0.2], [1.0, 1.0])
    m = TanhNoise(1.0, 0.5, symmetric=True)
    first = noise_increment(m, 1.0, (0.0, 0.1), s)
    second = noise_increment(m, 1.0, (0.1, 0.2), s)
    assert first == pytest.approx(0.5 * math.tanh(1.0))
    assert second == pytest.approx(0.5 * math.tanh(1.0))


def test_increment_depends_on_frozen_state_only():
    m = TanhNoise(4.0, 0.5)
    s = sample_event_stream(11, 1.0, m)
    u = np.array([0.1, -0.4, 1.2])
    a = noise_increment(m, u, (0.2, 0.3), s)
    b = noise_increment(m, u.copy(), (0.2, 0.3), s)
    np.testing.assert_array_equal(a, b)


def test_isometry_zero_noise_exact():
    rep = isometry_selftest(ZeroNoise(), 1.0, 0.01, 10_000)
    assert rep.ok and rep.mean == 0 and rep.variance == 0


def test_isometry_tanh_abs_marks():
    m = TanhNoise(4.0, 0.5)
    rep = isometry_selftest(m, 1.0, 0.01, 100_000, seed=2024)
    assert rep.expected_variance == pytest.approx(0.01 * 0.25 * math.tanh(1.0) ** 2 * 4.0 / 3.0, rel=1e-14)
    assert rep.ok, rep.summary()


def test_isometry_doubling_dt_doubles_variance():
    m = TanhNoise(4.0, 0.5)
    a = isometry_selftest(m, 1.0, 0.01, 100_000, seed=1)
    b = isometry_selftest(m, 1.0, 0.02, 100_000, seed=2)
    se = math.hypot(2 * a.variance_stderr, b.variance_stderr)
    assert abs(b.variance - 2 * a.variance) <= 0.05 * b.expected_variance + 4 * se


def test_isometry_stable_noise():
    assert isometry_selftest(StableLikeNoise(1.0, 0.8, 0.05, 0.5), 0.8, 0.01, 50_000, seed=5).ok


def test_isometry_needs_enough_samples():
    with pytest.raises(ValueError):
        isometry_selftest(TanhNoise(4.0, 0.5), 1.0, 0.01, 100)


def test_validation_rejects_bad_models():
    validate_noise(TanhNoise(4.0, 0.5))
    validate_noise(ClampNoise(4.0, 0.5, 0.3))
    with pytest.raises(ModelError, match="lambda"):
        validate_noise(TanhNoise(4.0, 1.5))
    with pytest.raises(ModelError, match="C\\*"):
        validate_noise(TanhNoise(4.0, 0.5, C_star=0.1))
