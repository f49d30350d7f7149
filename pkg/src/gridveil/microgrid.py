"""Droop-controlled AC microgrid with consensus secondary control.

Plant model: each DG is an ideal controllable voltage source E_i = v_i * e^(j*theta_i)
behind a complex line impedance to a single common bus carrying a
constant-impedance load. Primary control is P-f / Q-V droop; secondary control
is a distributed consensus law with a pinned leader that restores frequency to
nominal and equalizes the per-DG droop-power products. The closed loop is
advanced by fixed-step RK4 with the network solved algebraically at every stage.

Per-DG reductions use math.fsum so trajectories are invariant (bit-exact) under
a joint permutation of DG indices and graph rows/columns.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field, replace

from .errors import (
    DivergenceError,
    InvalidConfigError,
    InvalidInputError,
    NoSolutionError,
)

TWO_PI = 2.0 * math.pi


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass
class DroopParams:
    """Droop gains and nominal references for an N-DG microgrid.

    d_p : list of float
        Frequency-droop gain per DG (Hz per W).
    d_q : list of float
        Voltage-droop gain per DG (V per var).
    omega_n, v_n : float
        Nominal frequency (Hz) and voltage magnitude (V).
    delta_omega_th, delta_v_th : float
        Maximum permissible frequency / voltage deviation.
    """

    d_p: list
    d_q: list
    omega_n: float
    v_n: float
    delta_omega_th: float
    delta_v_th: float

    def __post_init__(self):
        if len(self.d_p) != len(self.d_q):
            raise InvalidConfigError("d_p and d_q must have the same length")
        if any(g <= 0 for g in self.d_p) or any(g <= 0 for g in self.d_q):
            raise InvalidConfigError("droop gains must be strictly positive")

    @property
    def n_dg(self):
        return len(self.d_p)


def droop_gains_from_ratings(p_rated, q_rated, delta_omega_th, delta_v_th,
                             omega_n=50.0, v_n=311.0) -> DroopParams:
    """Size droop gains so every DG hits the permissible deviation at rated power.

    d_p[i] = delta_omega_th / p_rated[i] and d_q[i] = delta_v_th / q_rated[i],
    which makes all rated droop-power products equal by construction.
    """
    if len(p_rated) != len(q_rated):
        raise InvalidConfigError("p_rated and q_rated must have the same length")
    if delta_omega_th <= 0 or delta_v_th <= 0:
        raise InvalidConfigError("deviation thresholds must be strictly positive")
    for r in list(p_rated) + list(q_rated):
        if r <= 0:
            raise InvalidConfigError(f"ratings must be strictly positive, got {r}")
    d_p = [delta_omega_th / r for r in p_rated]
    d_q = [delta_v_th / r for r in q_rated]
    return DroopParams(d_p=d_p, d_q=d_q, omega_n=omega_n, v_n=v_n,
                       delta_omega_th=delta_omega_th, delta_v_th=delta_v_th)


@dataclass
class DGState:
    """Electrical and control state of one DG."""

    theta: float = 0.0        # inverter phase angle (rad)
    omega: float = 0.0        # operating frequency (Hz)
    v: float = 0.0            # voltage magnitude setpoint (V)
    p_filt: float = 0.0       # low-pass-filtered active power (W)
    q_filt: float = 0.0       # low-pass-filtered reactive power (var)
    delta_omega: float = 0.0  # secondary frequency correction (Hz)
    delta_v: float = 0.0      # secondary voltage correction (V)


@dataclass
class CommGraph:
    """Secondary-control communication graph.

    adjacency : N x N list of lists, symmetric, zero diagonal, nonnegative.
    pinning : length-N pinning gains; at least one strictly positive.
    k1, k2 : secondary frequency / voltage gains.
    """

    adjacency: list
    pinning: list
    k1: float
    k2: float

    def __post_init__(self):
        n = len(self.adjacency)
        if any(len(row) != n for row in self.adjacency):
            raise InvalidConfigError("adjacency must be square")
        if len(self.pinning) != n:
            raise InvalidConfigError("pinning length must match adjacency size")
        for i in range(n):
            if self.adjacency[i][i] != 0.0:
                raise InvalidConfigError("adjacency diagonal must be zero")
            for j in range(n):
                a = self.adjacency[i][j]
                if a < 0:
                    raise InvalidConfigError("adjacency weights must be nonnegative")
                if a != self.adjacency[j][i]:
                    raise InvalidConfigError("adjacency must be symmetric")
        if not any(g > 0 for g in self.pinning):
            raise InvalidConfigError("at least one pinning gain must be positive")
        if any(g < 0 for g in self.pinning):
            raise InvalidConfigError("pinning gains must be nonnegative")
        if not self._pinned_connected():
            raise InvalidConfigError(
                "communication graph with pinned leader is not connected")

    def _pinned_connected(self):
        # every node must reach a pinned node through positive-weight edges
        n = len(self.pinning)
        seen = {i for i in range(n) if self.pinning[i] > 0}
        frontier = list(seen)
        while frontier:
            i = frontier.pop()
            for j in range(n):
                if self.adjacency[i][j] > 0 and j not in seen:
                    seen.add(j)
                    frontier.append(j)
        return len(seen) == n

    @property
    def n_dg(self):
        return len(self.pinning)


@dataclass
class NetworkModel:
    """Reduced-order network: DG lines into one common bus plus a PCC breaker.

    line_impedance : per-DG complex coupling impedance (ohm), all nonzero.
    load_p, load_q : constant-impedance common-bus load sized to draw
        (load_p, load_q) at nominal bus voltage.
    local_load_p/q : optional constant-impedance loads at each DG terminal,
        sized the same way (drawn straight from the source, so they add to
        that DG's output power).
    pcc_closed : True while grid-connected; the grid then fixes the bus phasor.
    grid_voltage, grid_frequency : stiff-grid boundary values.
    filter_cutoff : power-measurement low-pass cutoff (rad/s).
    """

    line_impedance: list
    load_p: float
    load_q: float
    pcc_closed: bool
    grid_voltage: float
    grid_frequency: float
    filter_cutoff: float = 31.416
    local_load_p: list | None = None
    local_load_q: list | None = None

    def __post_init__(self):
        self.line_impedance = [complex(z) for z in self.line_impedance]
        for z in self.line_impedance:
            if abs(z) <= 0 or not (math.isfinite(z.real) and math.isfinite(z.imag)):
                raise InvalidConfigError("line impedances must be finite and nonzero")
        if self.load_p < 0 or self.load_q < 0:
            raise InvalidConfigError("loads must be nonnegative")
        n = len(self.line_impedance)
        if self.local_load_p is None:
            self.local_load_p = [0.0] * n
        if self.local_load_q is None:
            self.local_load_q = [0.0] * n
        if len(self.local_load_p) != n or len(self.local_load_q) != n:
            raise InvalidConfigError("local load lists must match the DG count")
        if any(p < 0 for p in self.local_load_p) \
                or any(q < 0 for q in self.local_load_q):
            raise InvalidConfigError("local loads must be nonnegative")

    @property
    def n_dg(self):
        return len(self.line_impedance)


@dataclass
class ControlBias:
    """Additive/multiplicative manipulations seen by the controllers.

    omega_ref : per-DG bias added to the nominal-frequency reference consumed
        by that DG's primary setpoint and pinning term.
    q_meas : per-DG bias added to that DG's reactive-power measurement
        (propagates to its droop term and every consensus sum that consumes it).
    droop_p_scale : per-DG factor on the droop-power product the controller
        reports into the frequency consensus sums (local droop unaffected).
    """

    omega_ref: list
    q_meas: list
    droop_p_scale: list

    @classmethod
    def zero(cls, n):
        return cls(omega_ref=[0.0] * n, q_meas=[0.0] * n, droop_p_scale=[1.0] * n)


@dataclass
class BreakerEvent:
    t: float
    open: bool
    label: str


class PowerFlowResult:
    __slots__ = ("p_inst", "q_inst", "v_bus", "i_pcc")

    def __init__(self, p_inst, q_inst, v_bus, i_pcc):
        self.p_inst = p_inst
        self.q_inst = q_inst
        self.v_bus = v_bus
        self.i_pcc = i_pcc


# ---------------------------------------------------------------------------
# simulator
# ---------------------------------------------------------------------------

_STATE_FIELDS = ("theta", "p_filt", "q_filt", "delta_omega", "delta_v")


class Microgrid:
    """Deterministic fixed-step simulator of the droop/consensus closed loop.

    One `step` call mutates exactly this instance; `clone` produces an
    independent copy for parallel scenario runs.
    """

    def __init__(self, droop: DroopParams, graph: CommGraph, network: NetworkModel,
                 states=None, t=0.0):
        n = droop.n_dg
        if graph.n_dg != n or network.n_dg != n:
            raise InvalidConfigError("droop, graph and network DG counts disagree")
        self.droop = droop
        self.graph = graph
        self.network = network
        self.t = float(t)
        self.events: list[BreakerEvent] = []
        if states is None:
            states = [DGState(theta=0.0, omega=droop.omega_n, v=droop.v_n)
                      for _ in range(n)]
        if len(states) != n:
            raise InvalidInputError("state vector length must equal DG count")
        self.dgs = states
        self._refresh_outputs(ControlBias.zero(n))

    @property
    def n_dg(self):
        return len(self.dgs)

    def clone(self) -> "Microgrid":
        mg = Microgrid.__new__(Microgrid)
        mg.droop = self.droop
        mg.graph = self.graph
        mg.network = replace(self.network,
                             line_impedance=list(self.network.line_impedance),
                             local_load_p=list(self.network.local_load_p),
                             local_load_q=list(self.network.local_load_q))
        mg.t = self.t
        mg.events = list(self.events)
        mg.dgs = [replace(s) for s in self.dgs]
        return mg

    # -- control laws -------------------------------------------------------

    def primary_setpoints(self, i, bias=None):
        """Droop setpoints (omega_star, v_star) of DG i under the current state."""
        if not 0 <= i < self.n_dg:
            raise InvalidInputError(f"DG index {i} out of range")
        s = self.dgs[i]
        return self._setpoints(i, s.p_filt, s.q_filt, s.delta_omega, s.delta_v, bias)

    def _setpoints(self, i, p_filt, q_filt, d_omega, d_v, bias):
        dp = self.droop
        w_ref = dp.omega_n + (bias.omega_ref[i] if bias else 0.0)
        q_meas = q_filt + (bias.q_meas[i] if bias else 0.0)
        omega_star = w_ref - dp.d_p[i] * p_filt + d_omega
        v_star = dp.v_n - dp.d_q[i] * q_meas + d_v
        return omega_star, v_star

    def secondary_rates(self, omegas=None, p_filt=None, q_filt=None, bias=None):
        """Consensus correction rates (d_delta_omega, d_delta_v) per DG.

        Defaults to the stored state; explicit vectors let the integrator
        evaluate intermediate stages.
        """
        n = self.n_dg
        if omegas is None:
            omegas = [s.omega for s in self.dgs]
        if p_filt is None:
            p_filt = [s.p_filt for s in self.dgs]
        if q_filt is None:
            q_filt = [s.q_filt for s in self.dgs]
        if not (len(omegas) == len(p_filt) == len(q_filt) == n):
            raise InvalidInputError("state vectors must match DG count")
        dp, g = self.droop, self.graph
        # values each controller reports into the consensus sums
        rep_p = [dp.d_p[j] * p_filt[j] * (bias.droop_p_scale[j] if bias else 1.0)
                 for j in range(n)]
        rep_q = [dp.d_q[j] * (q_filt[j] + (bias.q_meas[j] if bias else 0.0))
                 for j in range(n)]
        d_domega = []
        d_dv = []
        for i in range(n):
            w_ref = dp.omega_n + (bias.omega_ref[i] if bias else 0.0)
            row = g.adjacency[i]
            freq_terms = [row[j] * (omegas[j] - omegas[i]) for j in range(n)]
            freq_terms.append(g.pinning[i] * (w_ref - omegas[i]))
            freq_terms.extend(row[j] * (rep_p[j] - rep_p[i]) for j in range(n))
            d_domega.append(g.k1 * math.fsum(freq_terms))
            d_dv.append(g.k2 * math.fsum(
                row[j] * (rep_q[j] - rep_q[i]) for j in range(n)))
        return d_domega, d_dv

    # -- network -------------------------------------------------------------

    def _load_admittance(self):
        s_load = complex(self.network.load_p, self.network.load_q)
        if s_load == 0:
            return 0j
        return s_load.conjugate() / (self.droop.v_n ** 2)

    def solve_power_flow(self, phasors=None, t=None) -> PowerFlowResult:
        """Solve the single-bus node equation for the given DG phasors.

        phasors : per-DG (v, theta) pairs; defaults to the stored state.
        Islanded: V_bus solves sum_i (E_i - V_bus)/Z_i = V_bus * Y_load.
        Grid-connected: V_bus is pinned to the rotating grid phasor.
        Returns source-end per-DG injections, so sum(p_inst) covers the load
        plus line losses exactly.
        """
        net = self.network
        if phasors is None:
            phasors = [(s.v, s.theta) for s in self.dgs]
        if len(phasors) != self.n_dg:
            raise InvalidInputError("phasor count must equal DG count")
        if t is None:
            t = self.t
        e = [v * cmath.exp(1j * th) for v, th in phasors]
        z = net.line_impedance
        y_load = self._load_admittance()
        if net.pcc_closed:
            v_bus = net.grid_voltage * cmath.exp(1j * TWO_PI * net.grid_frequency * t)
        else:
            inj = [ei / zi for ei, zi in zip(e, z)]
            num = complex(math.fsum(c.real for c in inj),
                          math.fsum(c.imag for c in inj))
            den = complex(math.fsum((1 / zi).real for zi in z) + y_load.real,
                          math.fsum((1 / zi).imag for zi in z) + y_load.imag)
            if abs(den) < 1e-15:
                raise NoSolutionError("network node equation is singular")
            v_bus = num / den
        currents = [(ei - v_bus) / zi for ei, zi in zip(e, z)]
        s_inj = [ei * ii.conjugate() for ei, ii in zip(e, currents)]
        v_n2 = self.droop.v_n ** 2
        s_inj = [s + (abs(ei) ** 2 / v_n2) * complex(pl, ql)
                 for s, ei, pl, ql in zip(s_inj, e, net.local_load_p,
                                          net.local_load_q)]
        if net.pcc_closed:
            i_src = complex(math.fsum(c.real for c in currents),
                            math.fsum(c.imag for c in currents))
            i_pcc = v_bus * y_load - i_src
        else:
            i_pcc = 0j
        return PowerFlowResult([s.real for s in s_inj], [s.imag for s in s_inj],
                               v_bus, i_pcc)

    def set_breaker(self, open_, label="operator"):
        """Toggle the PCC breaker; idempotent calls are still logged."""
        self.network.pcc_closed = not open_
        self.events.append(BreakerEvent(t=self.t, open=bool(open_), label=label))

    # -- dynamics ------------------------------------------------------------

    def _pack(self):
        y = []
        for name in _STATE_FIELDS:
            y.extend(getattr(s, name) for s in self.dgs)
        return y

    def _unpack(self, y):
        n = self.n_dg
        for k, name in enumerate(_STATE_FIELDS):
            for i in range(n):
                setattr(self.dgs[i], name, y[k * n + i])

    def rhs(self, t, y, bias):
        """Time derivative of the packed state [theta, p_filt, q_filt, d_omega, d_v]."""
        n = self.n_dg
        theta = y[0:n]
        p_filt = y[n:2 * n]
        q_filt = y[2 * n:3 * n]
        d_omega = y[3 * n:4 * n]
        d_v = y[4 * n:5 * n]
        omega_star = []
        v_star = []
        for i in range(n):
            w, v = self._setpoints(i, p_filt[i], q_filt[i], d_omega[i], d_v[i], bias)
            omega_star.append(w)
            v_star.append(v)
        pf = self.solve_power_flow(list(zip(v_star, theta)), t=t)
        wc = self.network.filter_cutoff
        dd_omega, dd_v = self.secondary_rates(omega_star, p_filt, q_filt, bias)
        dy = [TWO_PI * w for w in omega_star]
        dy.extend(wc * (pf.p_inst[i] - p_filt[i]) for i in range(n))
        dy.extend(wc * (pf.q_inst[i] - q_filt[i]) for i in range(n))
        dy.extend(dd_omega)
        dy.extend(dd_v)
        return dy

    def step(self, dt, bias=None):
        """Advance one RK4 step; the network is re-solved at every stage."""
        if dt <= 0:
            raise InvalidInputError("dt must be strictly positive")
        n = self.n_dg
        if bias is None:
            bias = ControlBias.zero(n)
        y0 = self._pack()
        t = self.t
        k1 = self.rhs(t, y0, bias)
        k2 = self.rhs(t + dt / 2, [a + dt / 2 * b for a, b in zip(y0, k1)], bias)
        k3 = self.rhs(t + dt / 2, [a + dt / 2 * b for a, b in zip(y0, k2)], bias)
        k4 = self.rhs(t + dt, [a + dt * b for a, b in zip(y0, k3)], bias)
        y1 = [a + dt / 6 * (b1 + 2 * b2 + 2 * b3 + b4)
              for a, b1, b2, b3, b4 in zip(y0, k1, k2, k3, k4)]
        for k, name in enumerate(_STATE_FIELDS):
            for i in range(n):
                val = y1[k * n + i]
                if not math.isfinite(val):
                    raise DivergenceError(
                        f"non-finite {name} at DG {i + 1} (t={t:.6f})",
                        dg_index=i, quantity=name)
        self._unpack(y1)
        self.t = t + dt
        self._refresh_outputs(bias)
        return self

    def _refresh_outputs(self, bias):
        for i, s in enumerate(self.dgs):
            s.omega, s.v = self._setpoints(
                i, s.p_filt, s.q_filt, s.delta_omega, s.delta_v, bias)

    # -- metrics -------------------------------------------------------------

    def convergence_metrics(self):
        """(freq_residual, p_share_residual, q_share_residual) per the control targets."""
        return convergence_metrics(self.dgs, self.droop)


def convergence_metrics(states, droop: DroopParams):
    """Secondary-control residuals over a DG state collection.

    freq_residual = max_i |omega_i - omega_n|;
    share residuals are the max pairwise droop-power product spread
    (0 by convention for a single DG).
    """
    n = len(states)
    freq = max(abs(s.omega - droop.omega_n) for s in states)
    pp = [droop.d_p[i] * states[i].p_filt for i in range(n)]
    qq = [droop.d_q[i] * states[i].q_filt for i in range(n)]
    if n < 2:
        return freq, 0.0, 0.0
    p_res = max(abs(a - b) for a in pp for b in pp)
    q_res = max(abs(a - b) for a in qq for b in qq)
    return freq, p_res, q_res
