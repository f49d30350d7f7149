"""Detector checks: residual statistic, windowed test, evasion bound."""

import math

import numpy as np
import pytest
from scipy.stats import chi2

from gridveil.detection import (
    Detector,
    DetectorConfig,
    bias_transfer,
    calibrate_alpha_max,
    default_tau,
    residual,
    steady_state_filter,
)
from gridveil.errors import InvalidConfigError, NumericalError
from gridveil.kalman import LinearModel


def scalar_model(sigma=0.01, f=0.98, q=1e-8):
    # a stable state: for a pure random walk (f=1) the filter would absorb
    # any constant bias completely and no finite evasion bound exists
    return LinearModel(f=[[f]], b=[[0.0]], h=[[1.0]], c0=[[q]],
                       c1=[[sigma ** 2]])


# ---------------------------------------------------------------------------
# residual statistic
# ---------------------------------------------------------------------------

def test_residual_zero_when_matching():
    assert residual([1.0, 2.0], [1.0, 2.0], np.eye(2)) == 0.0


def test_residual_scalar_definition():
    sigma2 = 0.25
    d = 0.3
    assert residual([d], [0.0], [[sigma2]]) == pytest.approx(d * d / sigma2,
                                                             rel=1e-14)


def test_residual_sign_symmetric():
    s = np.array([[2.0, 0.3], [0.3, 1.0]])
    dev = np.array([0.4, -0.7])
    assert residual(dev, np.zeros(2), s) == pytest.approx(
        residual(-dev, np.zeros(2), s), rel=1e-14)


def test_residual_singular_covariance():
    with pytest.raises(NumericalError):
        residual([1.0, 1.0], [0.0, 0.0], np.zeros((2, 2)))


def test_residual_chi_square_mean():
    # normalized innovations are chi-square with m dof; sample mean ~ m
    rng = np.random.Generator(np.random.PCG64(19))
    m = 5
    a = rng.standard_normal((m, m))
    s = a @ a.T + np.eye(m)
    l_chol = np.linalg.cholesky(s)
    vals = [residual(l_chol @ rng.standard_normal(m), np.zeros(m), s)
            for _ in range(20_000)]
    mean = float(np.mean(vals))
    print(f"\n  residual sample mean {mean:.3f} vs dof {m}")
    assert abs(mean - m) / m < 0.05


# ---------------------------------------------------------------------------
# windowed detector
# ---------------------------------------------------------------------------

def test_detector_boundary_quiet():
    cfg = DetectorConfig(window=4, false_alarm_target=0.01, tau=2.0)
    det = Detector(cfg, n_meas=1)
    assert det.update(2.0) is False  # r == tau stays quiet
    assert det.update(2.0 + 1e-12) is True


def test_detector_zero_stream_never_alarms():
    cfg = DetectorConfig(window=8, tau=0.5)
    det = Detector(cfg, n_meas=1)
    assert not any(det.update(0.0) for _ in range(100))


def test_detector_false_alarm_rate_calibrated():
    # clean chi-square traffic against the default quantile threshold
    rng = np.random.Generator(np.random.PCG64(29))
    m, w = 4, 20
    cfg = DetectorConfig(window=w, false_alarm_target=0.01)
    det = Detector(cfg, n_meas=m)
    assert det.tau == pytest.approx(chi2.ppf(0.99, m * w) / w, rel=1e-12)
    alarms = 0
    total = 10_000 + w
    for k in range(total):
        alarm = det.update(float(chi2.rvs(m, random_state=rng)))
        if k >= w:
            alarms += alarm
    rate = alarms / 10_000
    print(f"\n  clean false-alarm rate {rate:.4f} over 1e4 windows")
    assert rate <= 0.015


def test_detector_config_validation():
    with pytest.raises(InvalidConfigError):
        DetectorConfig(window=0)
    with pytest.raises(InvalidConfigError):
        DetectorConfig(false_alarm_target=1.5)
    with pytest.raises(InvalidConfigError):
        DetectorConfig(tau=-1.0)


# ---------------------------------------------------------------------------
# steady-state filter and bias transfer
# ---------------------------------------------------------------------------

def test_steady_state_satisfies_riccati():
    model = scalar_model(sigma=0.1, f=0.98, q=1e-4)
    steady = steady_state_filter(model)
    p = steady.p_pred[0, 0]
    s = p + 0.01
    p_next = 0.98 ** 2 * (p - p * p / s) + 1e-4
    assert p_next == pytest.approx(p, rel=1e-9)


def test_bias_transfer_near_identity_for_stiff_filter():
    # negligible process noise keeps the gain tiny: the filter absorbs
    # almost none of a constant bias
    model = scalar_model(sigma=0.01, f=0.9, q=1e-14)
    t = bias_transfer(model)
    assert t[0, 0] == pytest.approx(1.0, abs=1e-3)


def test_bias_transfer_full_absorption_random_walk():
    # integrator state: the filter tracks a constant bias completely
    model = scalar_model(sigma=0.01, f=1.0, q=1e-8)
    t = bias_transfer(model)
    assert t[0, 0] == pytest.approx(0.0, abs=1e-9)


# ---------------------------------------------------------------------------
# alpha_max calibration
# ---------------------------------------------------------------------------

def test_calibrate_unbounded_without_threshold():
    model = scalar_model()
    cfg = DetectorConfig(window=20, tau=math.inf)
    cal = calibrate_alpha_max(model, cfg)
    assert cal.unbounded and math.isinf(cal.alpha_max)


def test_calibrate_zero_at_clean_mean():
    model = scalar_model()
    cfg = DetectorConfig(window=20, tau=1.0)  # tau equals the clean mean (m=1)
    cal = calibrate_alpha_max(model, cfg)
    assert cal.alpha_max == 0.0
    assert cal.warning is not None


def test_calibrate_monotone_in_tau_and_window():
    model = scalar_model()
    base = calibrate_alpha_max(model, DetectorConfig(window=20, tau=2.0))
    higher = calibrate_alpha_max(model, DetectorConfig(window=20, tau=3.0))
    assert higher.alpha_max >= base.alpha_max
    short = calibrate_alpha_max(
        model, DetectorConfig(window=10, false_alarm_target=0.01))
    long = calibrate_alpha_max(
        model, DetectorConfig(window=40, false_alarm_target=0.01))
    assert long.alpha_max <= short.alpha_max


def _simulate_windowed_mean(model, bias, rng, n_steps=4000, window=20):
    """Stationary filter + detector statistic under a constant sensor bias."""
    steady = steady_state_filter(model)
    f = model.f[0, 0]
    h = model.h[0, 0]
    k = steady.gain[0, 0]
    s = steady.s[0, 0]
    sigma = math.sqrt(model.c1[0, 0])
    sq = math.sqrt(model.c0[0, 0])
    x_true, x_hat = 0.0, 0.0
    rs = []
    for step in range(n_steps):
        x_true = f * x_true + sq * rng.standard_normal()
        z = h * x_true + sigma * rng.standard_normal() + bias
        x_pred = f * x_hat
        innovation = z - h * x_pred
        x_hat = x_pred + k * innovation
        rs.append(innovation * innovation / s)
    rs = np.array(rs[200:])
    means = np.convolve(rs, np.ones(window) / window, mode="valid")
    return float(means.mean())


def test_calibrated_alpha_max_matches_monte_carlo():
    # independent oracle: sweep constant biases through a simulated filter
    # and locate the expected-statistic crossing of tau
    sigma = 0.01
    model = scalar_model(sigma=sigma, q=1e-10)
    cfg = DetectorConfig(window=20, false_alarm_target=0.01)
    cal = calibrate_alpha_max(model, cfg)
    rng = np.random.Generator(np.random.PCG64(37))
    biases = np.linspace(0.2 * cal.alpha_max, 2.0 * cal.alpha_max, 10)
    stats = [_simulate_windowed_mean(model, b, rng, n_steps=60_000) for b in biases]
    crossing = float(np.interp(cal.tau, stats, biases))
    rel = abs(crossing - cal.alpha_max) / cal.alpha_max
    print(f"\n  alpha_max closed form {cal.alpha_max:.6g} vs "
          f"Monte-Carlo {crossing:.6g} (rel {rel:.3f})")
    assert rel < 0.05


def test_evasion_contract_at_alpha_max():
    # the calibration guarantee: expected windowed statistic stays <= tau
    model = scalar_model(sigma=0.01, q=1e-10)
    cfg = DetectorConfig(window=20, false_alarm_target=0.01)
    cal = calibrate_alpha_max(model, cfg)
    rng = np.random.Generator(np.random.PCG64(41))
    stat = _simulate_windowed_mean(model, 0.9 * cal.alpha_max, rng,
                                   n_steps=120_000)
    print(f"\n  E[windowed stat] at 0.9 alpha_max: {stat:.4f} "
          f"(tau {cal.tau:.4f})")
    assert stat <= cal.tau


def test_five_alpha_max_alarms_within_one_window():
    model = scalar_model(sigma=0.01, q=1e-10)
    cfg = DetectorConfig(window=20, false_alarm_target=0.01)
    cal = calibrate_alpha_max(model, cfg)
    steady = steady_state_filter(model)
    k = steady.gain[0, 0]
    s = steady.s[0, 0]
    sigma = 0.01
    rng = np.random.Generator(np.random.PCG64(43))
    hits = 0
    trials = 400
    for _ in range(trials):
        det = Detector(cfg, n_meas=1)
        x_hat = 0.0
        for _ in range(cfg.window):  # warm the window with clean traffic
            z = sigma * rng.standard_normal()
            innovation = z - x_hat
            x_hat += k * innovation
            det.update(innovation * innovation / s)
        alarmed = False
        bias = 5.0 * cal.alpha_max
        for _ in range(cfg.window):  # one window of biased traffic
            z = sigma * rng.standard_normal() + bias
            innovation = z - x_hat
            x_hat += k * innovation
            if det.update(innovation * innovation / s):
                alarmed = True
                break
        hits += alarmed
    rate = hits / trials
    print(f"\n  5x alpha_max alarm probability within one window: {rate:.3f}")
    assert rate >= 0.99
