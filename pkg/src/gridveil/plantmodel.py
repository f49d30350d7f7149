"""Linear plant models for the operator's detector and the attacker's replica.

The closed loop is linearized numerically around the islanded steady state in
reduced coordinates (relative angles, so the rotational symmetry of the common
phase is removed), discretized with the matrix exponential, and paired with
the exact linear sensor map. The operator and the attacker share the same
linearization; partial knowledge only removes sensor rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .errors import InvalidConfigError
from .kalman import LinearModel
from .microgrid import ControlBias, Microgrid
from .sensors import dg_sensor_ids, parse_dg_sensor

READOUT_KINDS = ("freq", "volt", "dp_p", "dq_q")


def readout_names(n_dg):
    """Names of the predicted-state entries: per-DG (freq, volt, dp*p, dq*q)."""
    return [f"dg{k}.{kind}" for k in range(1, n_dg + 1) for kind in READOUT_KINDS]


def settle(mg: Microgrid, duration=4.0, dt=1e-3) -> Microgrid:
    """Run the islanded closed loop to (near) steady state; returns a copy."""
    sim = mg.clone()
    if sim.network.pcc_closed:
        sim.set_breaker(True, label="settle")
    steps = int(round(duration / dt))
    for _ in range(steps):
        sim.step(dt)
    return sim


class ReducedPlant:
    """Reduced-coordinate view of a settled microgrid.

    State x = [theta_i - theta_1 (i >= 2), p_filt, q_filt, delta_omega,
    delta_v], expressed as deviations from the settled operating point.
    """

    def __init__(self, settled: Microgrid):
        if settled.network.pcc_closed:
            raise InvalidConfigError("linearization expects an islanded plant")
        self.mg = settled.clone()
        self.n_dg = settled.n_dg
        self.dim = 5 * self.n_dg - 1
        self._y_op = self.mg._pack()
        self._bias = ControlBias.zero(self.n_dg)

    def _full_from_reduced(self, x):
        n = self.n_dg
        y = list(self._y_op)
        for i in range(1, n):
            y[i] += x[i - 1]
        for k in range(4 * n):
            y[n + k] += x[(n - 1) + k]
        return y

    def rhs(self, x):
        """Reduced-state time derivative at deviation x from the operating point."""
        n = self.n_dg
        dy = self.mg.rhs(0.0, self._full_from_reduced(x), self._bias)
        out = [dy[i] - dy[0] for i in range(1, n)]
        out.extend(dy[n:5 * n])
        return np.array(out)

    def continuous_a(self):
        """Jacobian of the reduced dynamics by central finite differences."""
        n = self.n_dg
        scales = [1e-6] * (n - 1)
        for k in range(4 * n):
            scales.append(1e-6 * max(1.0, abs(self._y_op[n + k])))
        a = np.empty((self.dim, self.dim))
        for j in range(self.dim):
            h = scales[j]
            xp = np.zeros(self.dim)
            xp[j] = h
            a[:, j] = (self.rhs(xp) - self.rhs(-xp)) / (2 * h)
        return a

    def bus_load_direction(self):
        """d(reduced rhs)/d(common bus load_p), W^-1 units."""
        net = self.mg.network
        base = net.load_p
        h = max(1.0, 1e-6 * base)
        net.load_p = base + h
        up = self.rhs(np.zeros(self.dim))
        net.load_p = base - h
        down = self.rhs(np.zeros(self.dim))
        net.load_p = base
        return (up - down) / (2 * h)

    def local_load_direction(self, i):
        """d(reduced rhs)/d(local_load_p[i]), W^-1 units."""
        net = self.mg.network
        base = net.local_load_p[i]
        h = max(1.0, 1e-6 * base)
        net.local_load_p[i] = base + h
        up = self.rhs(np.zeros(self.dim))
        net.local_load_p[i] = base - h
        down = self.rhs(np.zeros(self.dim))
        net.local_load_p[i] = base
        return (up - down) / (2 * h)

    # -- exact linear output maps -------------------------------------------

    # reduced layout: [theta_rel (n-1) | p (n) | q (n) | d_omega (n) | d_v (n)]

    def _freq_row(self, i):
        n = self.n_dg
        row = np.zeros(self.dim)
        row[(n - 1) + i] = -self.mg.droop.d_p[i]        # p_filt block
        row[(n - 1) + 2 * n + i] = 1.0                  # delta_omega block
        return row

    def _volt_row(self, i):
        n = self.n_dg
        row = np.zeros(self.dim)
        row[(n - 1) + n + i] = -self.mg.droop.d_q[i]    # q_filt block
        row[(n - 1) + 3 * n + i] = 1.0                  # delta_v block
        return row

    def _p_row(self, i):
        n = self.n_dg
        row = np.zeros(self.dim)
        row[(n - 1) + i] = 1.0
        return row

    def _q_row(self, i):
        n = self.n_dg
        row = np.zeros(self.dim)
        row[(n - 1) + n + i] = 1.0
        return row

    def sensor_row(self, sensor_id):
        parsed = parse_dg_sensor(sensor_id)
        if parsed is None:
            raise InvalidConfigError(
                f"'{sensor_id}' is not a DG sensor; PCC channels are not modeled")
        i, kind = parsed
        if not 0 <= i < self.n_dg:
            raise InvalidConfigError(f"sensor '{sensor_id}' references a missing DG")
        return {"freq": self._freq_row, "volt": self._volt_row,
                "p": self._p_row, "q": self._q_row}[kind](i)

    def sensor_value(self, sensor_id):
        i, kind = parse_dg_sensor(sensor_id)
        s = self.mg.dgs[i]
        return {"freq": s.omega, "volt": s.v, "p": s.p_filt, "q": s.q_filt}[kind]

    def readout_matrix(self):
        """Rows mapping reduced state to per-DG (freq, volt, dp*p, dq*q)."""
        rows = []
        for i in range(self.n_dg):
            dp = self.mg.droop.d_p[i]
            dq = self.mg.droop.d_q[i]
            rows.append(self._freq_row(i))
            rows.append(self._volt_row(i))
            rows.append(dp * self._p_row(i))
            rows.append(dq * self._q_row(i))
        return np.vstack(rows)

    def readout_offsets(self):
        vals = []
        for i, s in enumerate(self.mg.dgs):
            dp = self.mg.droop.d_p[i]
            dq = self.mg.droop.d_q[i]
            vals.extend((s.omega, s.v, dp * s.p_filt, dq * s.q_filt))
        return np.array(vals)


@dataclass
class ObserverModel:
    """A discrete linear model tied to a named sensor subset.

    Measurement offsets m_op and readout offsets describe the operating point,
    so the Kalman filter runs on deviations while callers exchange raw values.
    """

    linear: LinearModel
    sensor_ids: tuple
    m_op: np.ndarray
    readout: np.ndarray
    readout_op: np.ndarray
    readout_labels: tuple
    dt: float
    state_scale: np.ndarray

    def deviations(self, values):
        return np.asarray(values, dtype=float) - self.m_op


def build_observer_model(settled: Microgrid, sensor_ids=None, dt=1e-3,
                         process_noise=1e-12, noise_sigmas=None,
                         load_disturbance=None) -> ObserverModel:
    """Discretize the plant linearization for the given sensor subset.

    process_noise scales a diagonal C0 matched to each state's magnitude.
    load_disturbance optionally shapes C0 along the physical load-fluctuation
    input directions: a dict with white-noise intensities (W^2*s)
    {"bus": S_w, "local": [S_w per DG]}, e.g. 2*sigma_abs^2*tau for an
    Ornstein-Uhlenbeck load. noise_sigmas maps sensor id to measurement noise
    sigma (required).
    """
    plant = ReducedPlant(settled)
    if sensor_ids is None:
        sensor_ids = dg_sensor_ids(settled.n_dg)
    sensor_ids = tuple(sorted(sensor_ids))
    if noise_sigmas is None:
        raise InvalidConfigError("noise_sigmas is required to size C1")
    a = plant.continuous_a()
    f = expm(a * dt)
    h = np.vstack([plant.sensor_row(s) for s in sensor_ids])
    n = plant.dim
    scale = np.ones(n)
    n_dg = plant.n_dg
    for k in range(4 * n_dg):
        scale[(n_dg - 1) + k] = max(1.0, abs(plant._y_op[n_dg + k]))
    c0 = process_noise * np.diag(scale ** 2)
    if load_disturbance:
        s_bus = float(load_disturbance.get("bus", 0.0))
        if s_bus > 0:
            b = plant.bus_load_direction()
            c0 = c0 + dt * s_bus * np.outer(b, b)
        for i, s_loc in enumerate(load_disturbance.get("local", [])):
            if s_loc > 0:
                b = plant.local_load_direction(i)
                c0 = c0 + dt * float(s_loc) * np.outer(b, b)
    sig = np.array([float(noise_sigmas[s]) for s in sensor_ids])
    c1 = np.diag(sig ** 2)
    model = LinearModel(f=f, b=np.zeros((n, 1)), h=h, c0=c0, c1=c1)
    m_op = np.array([plant.sensor_value(s) for s in sensor_ids])
    return ObserverModel(linear=model, sensor_ids=sensor_ids, m_op=m_op,
                         readout=plant.readout_matrix(),
                         readout_op=plant.readout_offsets(),
                         readout_labels=tuple(readout_names(settled.n_dg)),
                         dt=dt, state_scale=scale)
