"""Discrete-time linear Kalman filter with a gap-imputation pass.

Models:
    x(t+1) = F x(t) + B c(t) + n(t),   E[n n'] = C0
    m(t)   = H x(t) + v(t),            E[v v'] = C1

The covariance is symmetrized after every update; the innovation covariance is
inverted through a Cholesky solve (systems here stay small, n <= ~20).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .errors import InvalidConfigError, InvalidInputError, NumericalError

_PSD_TOL = -1e-9  # tolerance on the minimum eigenvalue of noise covariances


def _sym(a):
    return (a + a.T) / 2.0


@dataclass
class LinearModel:
    """System matrices (F, B, H, C0, C1) of a discrete-time linear model."""

    f: np.ndarray
    b: np.ndarray
    h: np.ndarray
    c0: np.ndarray
    c1: np.ndarray

    def __post_init__(self):
        self.f = np.atleast_2d(np.asarray(self.f, dtype=float))
        self.b = np.atleast_2d(np.asarray(self.b, dtype=float))
        self.h = np.atleast_2d(np.asarray(self.h, dtype=float))
        self.c0 = np.atleast_2d(np.asarray(self.c0, dtype=float))
        self.c1 = np.atleast_2d(np.asarray(self.c1, dtype=float))
        n = self.f.shape[0]
        if self.f.shape != (n, n):
            raise InvalidConfigError("F must be square")
        if self.b.shape[0] != n:
            raise InvalidConfigError("B row count must match state dimension")
        if self.h.shape[1] != n:
            raise InvalidConfigError("H column count must match state dimension")
        m = self.h.shape[0]
        if self.c0.shape != (n, n) or self.c1.shape != (m, m):
            raise InvalidConfigError("noise covariance dimensions inconsistent")
        for name, c in (("C0", self.c0), ("C1", self.c1)):
            if not np.allclose(c, c.T):
                raise InvalidConfigError(f"{name} must be symmetric")
            if np.linalg.eigvalsh(_sym(c)).min() < _PSD_TOL:
                raise InvalidConfigError(f"{name} must be positive semidefinite")
        if np.linalg.eigvalsh(_sym(self.c1)).min() <= 0:
            raise InvalidConfigError("C1 must be positive definite")

    @property
    def n_states(self):
        return self.f.shape[0]

    @property
    def n_meas(self):
        return self.h.shape[0]

    @property
    def n_controls(self):
        return self.b.shape[1]


@dataclass
class KalmanState:
    """State estimate x_hat and its covariance p_cov (kept symmetric PSD)."""

    x_hat: np.ndarray
    p_cov: np.ndarray

    def __post_init__(self):
        self.x_hat = np.atleast_1d(np.asarray(self.x_hat, dtype=float))
        self.p_cov = np.atleast_2d(np.asarray(self.p_cov, dtype=float))
        n = self.x_hat.shape[0]
        if self.p_cov.shape != (n, n):
            raise InvalidInputError("covariance shape must match state dimension")


def predict(model: LinearModel, ks: KalmanState, c=None):
    """Time update: returns (predicted KalmanState, predicted measurement)."""
    if ks.x_hat.shape[0] != model.n_states:
        raise InvalidInputError("state dimension does not match model")
    if c is None:
        c = np.zeros(model.n_controls)
    c = np.atleast_1d(np.asarray(c, dtype=float))
    if c.shape[0] != model.n_controls:
        raise InvalidInputError("control dimension does not match model")
    x_pred = model.f @ ks.x_hat + model.b @ c
    p_pred = _sym(model.f @ ks.p_cov @ model.f.T + model.c0)
    m_pred = model.h @ x_pred
    return KalmanState(x_pred, p_pred), m_pred


def _solve_s(s, rhs):
    try:
        return cho_solve(cho_factor(s), rhs)
    except (LinAlgError, np.linalg.LinAlgError) as exc:
        cond = float(np.linalg.cond(s))
        raise NumericalError(
            f"innovation covariance is singular (cond ~ {cond:.3e})",
            condition=cond) from exc


def update(model: LinearModel, ks_pred: KalmanState, m_obs):
    """Measurement update: returns (posterior KalmanState, innovation)."""
    m_obs = np.atleast_1d(np.asarray(m_obs, dtype=float))
    if m_obs.shape[0] != model.n_meas:
        raise InvalidInputError("measurement dimension does not match model")
    m_pred = model.h @ ks_pred.x_hat
    innovation = m_obs - m_pred
    s = _sym(model.h @ ks_pred.p_cov @ model.h.T + model.c1)
    # gain N = P H' S^-1 computed as (S^-1 (H P))'
    gain = _solve_s(s, model.h @ ks_pred.p_cov).T
    x_post = ks_pred.x_hat + gain @ innovation
    p_post = _sym(ks_pred.p_cov - gain @ s @ gain.T)
    return KalmanState(x_post, p_post), innovation


def innovation_covariance(model: LinearModel, ks_pred: KalmanState):
    """S = H P_pred H' + C1 for the given prediction."""
    return _sym(model.h @ ks_pred.p_cov @ model.h.T + model.c1)


def joseph_update(model: LinearModel, ks_pred: KalmanState, m_obs):
    """Joseph-stabilized covariance form; numerically agrees with `update`."""
    m_obs = np.atleast_1d(np.asarray(m_obs, dtype=float))
    m_pred = model.h @ ks_pred.x_hat
    innovation = m_obs - m_pred
    s = _sym(model.h @ ks_pred.p_cov @ model.h.T + model.c1)
    gain = _solve_s(s, model.h @ ks_pred.p_cov).T
    x_post = ks_pred.x_hat + gain @ innovation
    ikh = np.eye(model.n_states) - gain @ model.h
    p_post = _sym(ikh @ ks_pred.p_cov @ ikh.T + gain @ model.c1 @ gain.T)
    return KalmanState(x_post, p_post), innovation


@dataclass
class ImputedSeries:
    """Filtered-forward reconstruction of a gappy measurement series."""

    states: np.ndarray        # (T, n) filtered estimates x(t|t)
    measurements: np.ndarray  # (T, m) reconstructed H x(t|t)
    cov_trace: np.ndarray     # (T,) trace of P(t|t), per-step quality score
    observed: np.ndarray      # (T,) bool mask of steps that carried data
    covariances: list | None = None  # per-step P(t|t) when requested


def impute_series(model: LinearModel, measurements, controls=None,
                  ks0: KalmanState | None = None,
                  keep_covariances=False) -> ImputedSeries:
    """Run the filter over a series with explicit gaps (entries of None).

    Prediction runs at every step; the measurement update only at observed
    steps, so gaps are bridged by the model and the covariance trace records
    how stale each reconstructed point is.
    """
    seq = list(measurements)
    if not seq:
        raise InvalidInputError("measurement series is empty")
    observed = np.array([m is not None for m in seq], dtype=bool)
    if not observed.any():
        raise InvalidInputError("series needs at least one observed measurement")
    if controls is None:
        controls = [None] * len(seq)
    if len(controls) != len(seq):
        raise InvalidInputError("controls length must match measurement series")
    if ks0 is None:
        ks0 = KalmanState(np.zeros(model.n_states),
                          np.eye(model.n_states) * 1e3)
    ks = ks0
    states = np.empty((len(seq), model.n_states))
    recon = np.empty((len(seq), model.n_meas))
    trace = np.empty(len(seq))
    covs = [] if keep_covariances else None
    for t, m_obs in enumerate(seq):
        ks, _ = predict(model, ks, controls[t])
        if m_obs is not None:
            ks, _ = update(model, ks, m_obs)
        states[t] = ks.x_hat
        recon[t] = model.h @ ks.x_hat
        trace[t] = float(np.trace(ks.p_cov))
        if covs is not None:
            covs.append(ks.p_cov.copy())
    return ImputedSeries(states=states, measurements=recon,
                         cov_trace=trace, observed=observed, covariances=covs)
