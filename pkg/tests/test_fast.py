import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fstta.errors import DataValidityError, InsufficientWindowError
from fstta.fast import (
    FastConfig,
    FastPhaseState,
    GradientWindow,
    concordant_gradient,
    dynamic_lr,
    fast_step,
)


def dense_oracle(grads, phi_eps=1e-6):
    """Inverse-variance accumulation over a full LAPACK eigenbasis of the covariance."""
    g = np.asarray(grads, dtype=np.float64)
    mean = g.mean(axis=0)
    c = g - mean
    cov = c.T @ c / (g.shape[0] - 1)
    lam, u = np.linalg.eigh(cov)
    sigma = np.trace(cov)
    lam = np.where(lam > 1e-12 * sigma, lam, 0.0)
    out = u @ ((u.T @ mean) / (lam + phi_eps * sigma))
    return out * np.linalg.norm(mean) / np.linalg.norm(out), sigma


def test_worked_example():
    grad, sigma = concordant_gradient([[1, 0], [0, 1], [1, 1]])
    np.testing.assert_allclose(grad, [2 / 3, 2 / 3], atol=1e-14)
    assert sigma == pytest.approx(2 / 3, abs=1e-14)


def test_identical_gradients_return_mean_exactly():
    grad, sigma = concordant_gradient([[3.0, 4.0]] * 3)
    np.testing.assert_array_equal(grad, [3.0, 4.0])
    assert sigma == 0.0


def test_zero_mean_short_circuit():
    grad, sigma = concordant_gradient([[1.0, 0.0], [-1.0, 0.0]])
    np.testing.assert_array_equal(grad, [0.0, 0.0])
    assert sigma == pytest.approx(2.0)


def test_single_gradient_is_rejected():
    with pytest.raises(InsufficientWindowError):
        concordant_gradient([[1.0, 2.0]])


def test_matches_dense_oracle_on_rank_deficient_window():
    rng = np.random.default_rng(5)
    grads = rng.normal(size=(3, 12))
    got, sigma = concordant_gradient(grads)
    want, want_sigma = dense_oracle(grads)
    np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-9)
    assert sigma == pytest.approx(want_sigma, rel=1e-12)


def test_window_buffer():
    w = GradientWindow(2)
    w.append([1.0, 2.0])
    assert not w.full
    w.append([3.0, 4.0])
    assert w.full
    with pytest.raises(DataValidityError):
        w.append([0.0, 0.0])
    w.clear()
    assert w.count == 0
    with pytest.raises(DataValidityError):
        w.append([1.0, 2.0, 3.0])


def test_dynamic_lr_examples():
    cfg = FastConfig()
    state = FastPhaseState()
    assert dynamic_lr(0.3, state, cfg) == pytest.approx(6.6e-4)
    assert state.initialized and state.sigma_bar == 0.3
    assert dynamic_lr(0.3, state, cfg) == pytest.approx(6.6e-4)
    state = FastPhaseState(sigma_bar=1.0, initialized=True)
    assert dynamic_lr(1.8, state, cfg) == pytest.approx(5.4e-4)
    assert state.sigma_bar == pytest.approx(0.95 * 1.0 + 0.05 * 1.8)
    state = FastPhaseState(sigma_bar=1.0, initialized=True)
    assert dynamic_lr(6.0, state, cfg) == pytest.approx(5.4e-4)


def test_dynamic_lr_off_uses_base_rate():
    cfg = FastConfig(dlr=False)
    state = FastPhaseState(sigma_bar=0.0, initialized=True)
    assert dynamic_lr(10.0, state, cfg) == cfg.base_lr


def test_fast_step_examples():
    cfg = FastConfig()
    w = GradientWindow(3)
    for g in ([1, 0], [0, 1], [1, 1]):
        w.append(g)
    theta = fast_step([0.0, 0.0], w, FastPhaseState(), cfg)
    np.testing.assert_allclose(theta, -6.6e-4 * np.array([2 / 3, 2 / 3]), rtol=1e-12)
    assert w.count == 0

    theta = fast_step([0.5, -1.0], np.zeros((3, 2)), FastPhaseState(), cfg)
    np.testing.assert_array_equal(theta, [0.5, -1.0])

    cfg2 = FastConfig(M=2)
    g = np.array([0.3, -0.2, 0.7])
    theta = fast_step(np.ones(3), [g, g], FastPhaseState(), cfg2)
    np.testing.assert_allclose(theta, 1.0 - 6.6e-4 * g, rtol=1e-15)


def test_config_validation():
    with pytest.raises(DataValidityError):
        FastConfig(rho=1.0)
    with pytest.raises(DataValidityError):
        FastConfig(trunc_lo=1.2, trunc_hi=1.1)


windows = st.tuples(st.sampled_from([2, 3, 5]), st.sampled_from([4, 16, 128]), st.integers(0, 2**32 - 1), st.floats(1e-4, 1e2))


def make_window(m, d, seed, scale):
    return np.random.default_rng(seed).normal(size=(m, d)) * scale


@settings(max_examples=150, deadline=None)
@given(windows)
def test_calibration_exactness(w):
    g = make_window(*w)
    grad, _ = concordant_gradient(g)
    mean = g.mean(axis=0)
    assert np.linalg.norm(grad) == pytest.approx(np.linalg.norm(mean), rel=1e-9)


@settings(max_examples=150, deadline=None)
@given(windows, st.floats(1e-3, 1e3))
def test_constant_weights_degenerate_to_mean(w, c):
    g = make_window(*w)
    grad, _ = concordant_gradient(g, phi=lambda lam, sigma: (c, c))
    mean = g.mean(axis=0)
    np.testing.assert_allclose(grad, mean, rtol=1e-9, atol=1e-9 * np.linalg.norm(mean))


@settings(max_examples=150, deadline=None)
@given(windows, st.floats(1e-3, 1e3))
def test_weight_scale_invariance(w, c):
    g = make_window(*w)
    eps = 1e-6

    def phi(lam, sigma, k=1.0):
        return k / (lam + eps * sigma), k / (eps * sigma)

    a, _ = concordant_gradient(g, phi=phi)
    b, _ = concordant_gradient(g, phi=lambda lam, sigma: phi(lam, sigma, c))
    default, _ = concordant_gradient(g, phi_eps=eps)
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12 * np.linalg.norm(a))
    np.testing.assert_allclose(a, default, rtol=1e-9, atol=1e-12 * np.linalg.norm(a))


@settings(max_examples=50, deadline=None)
@given(st.sampled_from([2, 3, 5]), st.sampled_from([4, 128]), st.integers(0, 2**32 - 1))
def test_identical_windows_return_mean(m, d, seed):
    g = np.random.default_rng(seed).normal(size=d)
    grad, sigma = concordant_gradient(np.tile(g, (m, 1)))
    np.testing.assert_array_equal(grad, g)
    assert sigma == 0.0


@settings(max_examples=100, deadline=None)
@given(st.floats(0.05, 5.0), st.floats(0.05, 5.0), st.floats(0.1, 3.0))
def test_low_variance_axis_dominates(a, b, m):
    if abs(a - b) < 1e-3:
        return
    mean = np.array([m, m])
    grads = mean + np.array([[a, 0], [-a, 0], [0, b], [0, -b]])
    grad, _ = concordant_gradient(grads)
    low_axis = 0 if a < b else 1
    assert abs(grad[low_axis]) > abs(grad[1 - low_axis])


@settings(max_examples=300, deadline=None)
@given(st.floats(0, 1e4), st.floats(0, 1e4))
def test_lr_bounds(sigma, sigma_bar):
    cfg = FastConfig()
    state = FastPhaseState(sigma_bar, True)
    lr = dynamic_lr(sigma, state, cfg)
    assert 0.9 * cfg.base_lr <= lr <= 1.1 * cfg.base_lr


@given(st.floats(0, 1e3), st.integers(1, 50))
def test_sigma_bar_fixed_point(s, k):
    cfg = FastConfig()
    state = FastPhaseState()
    for _ in range(k):
        dynamic_lr(s, state, cfg)
    assert state.sigma_bar == s
