"""Operator-side bad-data detector and the evasion bound it induces.

The detector is the standard chi-square test on the normalized Kalman
innovation: r = n' S^-1 n, aggregated as a rolling-window mean against a
threshold tau taken from the chi-square quantile at (sensors x window) degrees
of freedom. The largest per-sensor constant bias whose expected windowed
statistic stays at or below tau is the attacker-relevant alpha_max; the
closed form accounts for the bias partially absorbed by the filter.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, solve_discrete_are
from scipy.stats import chi2

from .errors import InvalidConfigError, InvalidInputError, NumericalError
from .kalman import LinearModel


@dataclass
class DetectorConfig:
    """Residual test parameters; tau=None derives the chi-square default."""

    window: int = 20
    false_alarm_target: float = 0.01
    tau: float | None = None

    def __post_init__(self):
        if self.window < 1:
            raise InvalidConfigError("window must be >= 1")
        if not 0.0 < self.false_alarm_target < 1.0:
            raise InvalidConfigError("false_alarm_target must be in (0, 1)")
        if self.tau is not None and self.tau <= 0:
            raise InvalidConfigError("tau must be positive")

    def resolve_tau(self, n_meas):
        if self.tau is not None:
            return float(self.tau)
        return default_tau(n_meas, self.window, self.false_alarm_target)


def default_tau(n_meas, window, false_alarm_target):
    """Per-step-mean threshold: chi-square quantile at m*w dof, scaled by 1/w."""
    return float(chi2.ppf(1.0 - false_alarm_target, n_meas * window) / window)


def residual(reported, expected, s_cov):
    """Normalized innovation squared r = (z - z_hat)' S^-1 (z - z_hat)."""
    reported = np.atleast_1d(np.asarray(reported, dtype=float))
    expected = np.atleast_1d(np.asarray(expected, dtype=float))
    s_cov = np.atleast_2d(np.asarray(s_cov, dtype=float))
    if reported.shape != expected.shape or s_cov.shape[0] != reported.shape[0]:
        raise InvalidInputError("residual inputs have inconsistent dimensions")
    dev = reported - expected
    try:
        sol = cho_solve(cho_factor(s_cov), dev)
    except (LinAlgError, np.linalg.LinAlgError) as exc:
        cond = float(np.linalg.cond(s_cov))
        raise NumericalError(
            f"innovation covariance is singular (cond ~ {cond:.3e})",
            condition=cond) from exc
    return float(dev @ sol)


class Detector:
    """Rolling-window mean test: alarm iff mean of the last `window` r > tau."""

    def __init__(self, cfg: DetectorConfig, n_meas):
        self.cfg = cfg
        self.tau = cfg.resolve_tau(n_meas)
        self._buf = deque(maxlen=cfg.window)

    def update(self, r):
        self._buf.append(float(r))
        return self.mean() > self.tau  # boundary r == tau stays quiet

    def mean(self):
        return sum(self._buf) / len(self._buf) if self._buf else 0.0

    def reset(self):
        self._buf.clear()


# ---------------------------------------------------------------------------
# steady-state filter and evasion bound
# ---------------------------------------------------------------------------

@dataclass
class SteadyFilter:
    """Stationary Kalman quantities: predicted covariance, S, and gain."""

    p_pred: np.ndarray
    s: np.ndarray
    gain: np.ndarray


def steady_state_filter(model: LinearModel) -> SteadyFilter:
    """Solve the filter DARE (iterative fallback) for stationary operation."""
    f, h, c0, c1 = model.f, model.h, model.c0, model.c1
    p = None
    try:
        p = solve_discrete_are(f.T, h.T, c0, c1)
        p = (p + p.T) / 2
        if not np.isfinite(p).all():
            p = None
    except Exception:
        p = None
    if p is None:
        p = c0 + np.eye(model.n_states)
        for _ in range(200000):
            s = h @ p @ h.T + c1
            k = np.linalg.solve(s, h @ p).T
            p_new = f @ (p - k @ h @ p) @ f.T + c0
            p_new = (p_new + p_new.T) / 2
            if np.max(np.abs(p_new - p)) <= 1e-13 * max(1.0, np.max(np.abs(p))):
                p = p_new
                break
            p = p_new
    s = h @ p @ h.T + c1
    gain = np.linalg.solve(s, h @ p).T
    return SteadyFilter(p_pred=p, s=(s + s.T) / 2, gain=gain)


def bias_transfer(model: LinearModel, steady: SteadyFilter | None = None):
    """Steady innovation response T to a constant unit measurement bias.

    With z = Hx + v + d held constant, the stationary filter absorbs part of
    d into its estimate; the innovation mean settles at T d with
    T = I - H F (I - (I - K H) F)^-1 K.
    """
    if steady is None:
        steady = steady_state_filter(model)
    f, h, k = model.f, model.h, steady.gain
    n = model.n_states
    m = model.n_meas
    closed = np.eye(n) - (np.eye(n) - k @ h) @ f
    return np.eye(m) - h @ f @ np.linalg.solve(closed, k)


@dataclass
class CalibrationResult:
    """alpha_max plus the context it was derived in."""

    alpha_max: float
    tau: float
    unbounded: bool = False
    warning: str | None = None
    per_sensor: tuple = ()


def calibrate_alpha_max(model: LinearModel, cfg: DetectorConfig) -> CalibrationResult:
    """Largest per-sensor constant bias whose expected windowed statistic <= tau.

    A bias of magnitude a on sensor j shifts the expected per-step residual by
    lambda_j(a) = a^2 * (T e_j)' S^-1 (T e_j); the bound keeps the worst
    single-sensor shift within tau - m and is located by bisection on that
    closed form. Simultaneous biases on several sensors stack their shifts, so
    multi-sensor vectors at alpha_max are not covered by this guarantee.
    """
    m = model.n_meas
    tau = cfg.resolve_tau(m)
    if not np.isfinite(tau):
        return CalibrationResult(alpha_max=np.inf, tau=tau, unbounded=True)
    steady = steady_state_filter(model)
    t = bias_transfer(model, steady)
    s_fac = cho_factor(steady.s)
    kappa = np.array([t[:, j] @ cho_solve(s_fac, t[:, j]) for j in range(m)])
    budget = tau - m
    if budget <= 0:
        return CalibrationResult(
            alpha_max=0.0, tau=tau,
            warning="tau is at or below the clean-data mean; any bias is expected "
                    "to raise the statistic", per_sensor=tuple(np.zeros(m)))
    kmax = float(kappa.max())
    if kmax <= 0:
        return CalibrationResult(alpha_max=np.inf, tau=tau, unbounded=True,
                                 per_sensor=tuple(np.full(m, np.inf)))

    def shift(a):
        return a * a * kmax

    lo, hi = 0.0, 1.0
    while shift(hi) <= budget:
        hi *= 2.0
        if hi > 1e12:
            return CalibrationResult(alpha_max=np.inf, tau=tau, unbounded=True)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if shift(mid) <= budget:
            lo = mid
        else:
            hi = mid
    per_sensor = tuple(np.sqrt(budget / k) if k > 0 else np.inf for k in kappa)
    return CalibrationResult(alpha_max=lo, tau=tau, per_sensor=per_sensor)


class OperatorPipeline:
    """Stationary-gain filter plus windowed detector over raw sensor reports."""

    def __init__(self, observer, cfg: DetectorConfig):
        self.observer = observer
        self.steady = steady_state_filter(observer.linear)
        self._s_fac = cho_factor(self.steady.s)
        self.detector = Detector(cfg, observer.linear.n_meas)
        self.x = np.zeros(observer.linear.n_states)

    @property
    def tau(self):
        return self.detector.tau

    def step(self, raw_values):
        """Consume one report vector; returns (r, alarm)."""
        model = self.observer.linear
        z = self.observer.deviations(raw_values)
        x_pred = model.f @ self.x
        innov = z - model.h @ x_pred
        self.x = x_pred + self.steady.gain @ innov
        r = float(innov @ cho_solve(self._s_fac, innov))
        return r, self.detector.update(r)
