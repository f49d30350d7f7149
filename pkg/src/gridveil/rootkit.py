"""Adversary engine: eavesdropping, target selection, injection, and masking.

The rootkit runs inline with the simulation in a fixed hook order
(eavesdrop -> inject -> plant step -> mask -> report). Injections are
controller/sensor biases realizing three campaign objectives; masking replaces
the influenced sensors' reports with the replica's predicted-normal
trajectory. A report-bias mode additionally supports blunt measurement
falsification for detector stress runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CapabilityError,
    InfeasibleObjectiveError,
    InvalidConfigError,
    InvalidPlanError,
    StealthViolationError,
)
from .microgrid import ControlBias, DroopParams
from .sensors import (
    controller_id,
    dg_sensor_id,
    validate_controller_ids,
    validate_sensor_ids,
)
from .vddm import (
    AttackVector,
    MeasurementSeries,
    MeasurementVector,
    PredictionQuery,
    VddmModel,
    evaluate_attack,
    predict_state,
)


# ---------------------------------------------------------------------------
# infection set and objectives
# ---------------------------------------------------------------------------

@dataclass
class InfectionSet:
    """Sensors the rootkit reads/writes, controllers it biases, PCC access."""

    sensors: frozenset
    controllers: frozenset
    pcc_access: bool = False

    def __post_init__(self):
        self.sensors = frozenset(self.sensors)
        self.controllers = frozenset(self.controllers)
        if not (self.sensors or self.controllers or self.pcc_access):
            raise InvalidConfigError("infection set is empty")

    def validate(self, n_dg):
        validate_sensor_ids(self.sensors, n_dg)
        validate_controller_ids(self.controllers, n_dg)


@dataclass
class FrequencyManipulation:
    """Shift the steady-state frequency by biasing nominal-frequency references."""

    offset_hz: float

    kind = "frequency"

    def required_effect(self):
        return abs(self.offset_hz)

    def candidates(self, zeta: InfectionSet, n_dg):
        return [k for k in range(1, n_dg + 1)
                if controller_id(k) in zeta.controllers]

    def probe_sensor(self, dg):
        return dg_sensor_id(dg, "freq")


@dataclass
class VoltageManipulation:
    """Ramp one DG's voltage by biasing its reactive-power sensor."""

    target_dg: int
    ramp_v_per_s: float

    kind = "voltage"

    def required_effect(self):
        # rise accumulated over one second of ramp
        return abs(self.ramp_v_per_s)

    def candidates(self, zeta: InfectionSet, n_dg):
        return [k for k in range(1, n_dg + 1)
                if dg_sensor_id(k, "q") in zeta.sensors]

    def probe_sensor(self, dg):
        return dg_sensor_id(dg, "q")


@dataclass
class LoadSharingDisruption:
    """Skew consensus load sharing by scaling a reported droop-power product."""

    target_dg: int
    scale: float = 1.5
    ramp_s: float = 1.0

    kind = "load_sharing"

    def required_effect(self):
        return abs(self.scale - 1.0)

    def candidates(self, zeta: InfectionSet, n_dg):
        return [k for k in range(1, n_dg + 1)
                if controller_id(k) in zeta.controllers]

    def probe_sensor(self, dg):
        return dg_sensor_id(dg, "p")


# ---------------------------------------------------------------------------
# plan and schedule
# ---------------------------------------------------------------------------

@dataclass
class AttackPlan:
    """Objective, targets, window, masking policy, stealth budget."""

    objective: object
    targets: tuple
    window: tuple              # (t_start, t_alpha)
    mask: bool
    alpha_max: float | None
    ramp_s: float = 0.5
    requires_islanded: bool = True

    def active(self, t):
        return self.window[0] <= t < self.window[1]

    def ramp_fraction(self, t):
        if t < self.window[0]:
            return 0.0
        if self.ramp_s <= 0:
            return 1.0
        return min(1.0, (t - self.window[0]) / self.ramp_s)


def build_plan(objective, targets, window, zeta: InfectionSet, droop: DroopParams,
               mask=False, alpha_max=None, ramp_s=0.5,
               requires_islanded=True) -> AttackPlan:
    """Validate a campaign against capabilities and the stealth budget."""
    n_dg = droop.n_dg
    targets = tuple(int(k) for k in targets)
    if not targets:
        raise InvalidPlanError("plan needs at least one target")
    for k in targets:
        if not 1 <= k <= n_dg:
            raise InvalidPlanError(f"target DG {k} does not exist")
    t_start, t_alpha = float(window[0]), float(window[1])
    if t_alpha <= t_start:
        raise InvalidPlanError("attack window must end after it starts")
    if isinstance(objective, (FrequencyManipulation, LoadSharingDisruption)):
        for k in targets:
            if controller_id(k) not in zeta.controllers:
                raise CapabilityError(f"no controller access at DG {k}")
    if isinstance(objective, VoltageManipulation):
        for k in targets:
            if dg_sensor_id(k, "q") not in zeta.sensors:
                raise CapabilityError(f"no reactive-power sensor access at DG {k}")
    if mask:
        if alpha_max is None:
            raise InvalidPlanError("masked plans need a calibrated alpha_max")
        needed = {dg_sensor_id(k, kind) for k in targets
                  for kind in ("freq", "volt", "p", "q")}
        missing = needed - zeta.sensors
        if missing:
            raise CapabilityError(f"masking needs write access to {sorted(missing)}")
        peak = _peak_alpha(objective, droop, t_alpha - t_start)
        if peak > alpha_max:
            raise StealthViolationError(
                f"peak |alpha| = {peak:.6g} exceeds alpha_max = {alpha_max:.6g}")
    return AttackPlan(objective=objective, targets=targets,
                      window=(t_start, t_alpha), mask=mask, alpha_max=alpha_max,
                      ramp_s=ramp_s, requires_islanded=requires_islanded)


def _peak_alpha(objective, droop: DroopParams, duration):
    if isinstance(objective, FrequencyManipulation):
        return abs(objective.offset_hz)
    if isinstance(objective, VoltageManipulation):
        dq = droop.d_q[objective.target_dg - 1]
        return abs(objective.ramp_v_per_s) / dq * duration
    if isinstance(objective, LoadSharingDisruption):
        # reported product tops out at the permissible deviation
        return abs(objective.scale - 1.0) * droop.delta_omega_th
    raise InvalidPlanError(f"unknown objective {objective!r}")


@dataclass
class FixedWindowPolicy:
    t_start: float = 5.0
    duration: float = 4.0


@dataclass
class SettleTriggeredPolicy:
    """Start once the frequency residual settles below tol (plus a delay)."""

    tol: float = 1e-3
    delay: float = 0.0
    duration: float = 4.0


def schedule(policy, residual_series=None, islanded_at=None,
             requires_islanded=True):
    """Resolve a policy into a concrete [t_start, t_alpha] window.

    residual_series : iterable of (t, freq_residual), needed by triggered
    policies. islanded_at : time the breaker opened, if it did.
    """
    if isinstance(policy, FixedWindowPolicy):
        t_start = policy.t_start
        t_alpha = policy.t_start + policy.duration
    elif isinstance(policy, SettleTriggeredPolicy):
        if residual_series is None:
            raise InvalidPlanError("triggered policy needs a residual series")
        t_start = None
        for t, res in residual_series:
            if islanded_at is not None and t < islanded_at:
                continue
            if res < policy.tol:
                t_start = t + policy.delay
                break
        if t_start is None:
            raise InvalidPlanError("frequency never settled below the trigger")
        t_alpha = t_start + policy.duration
    else:
        raise InvalidPlanError(f"unknown schedule policy {policy!r}")
    if t_alpha <= t_start:
        raise InvalidPlanError("attack window must end after it starts")
    if requires_islanded:
        if islanded_at is None or t_start < islanded_at:
            raise InvalidPlanError("window opens before the microgrid is islanded")
    return (t_start, t_alpha)


# ---------------------------------------------------------------------------
# PCC fault forging
# ---------------------------------------------------------------------------

@dataclass
class PccFault:
    """Spoofed overcurrent signature written to the PCC current sensor."""

    t_fault: float
    duration: float
    magnitude_a: float

    def override(self, t):
        if self.t_fault <= t < self.t_fault + self.duration:
            return self.magnitude_a
        return None


def forge_fault(zeta: InfectionSet, t_fault, rated_current_a,
                magnitude_multiple=3.0, duration=0.1) -> PccFault:
    """Fabricate a PCC overcurrent the protection relay will trip on."""
    if not zeta.pcc_access:
        raise CapabilityError("forging a PCC fault requires PCC access")
    return PccFault(t_fault=float(t_fault), duration=float(duration),
                    magnitude_a=magnitude_multiple * rated_current_a)


# ---------------------------------------------------------------------------
# eavesdropping
# ---------------------------------------------------------------------------

class Eavesdropper:
    """Read-only tap on the sensor stream, restricted to the infection set.

    Collection dropouts (deterministic from the seed) mark explicit gaps so
    downstream imputation has something honest to fill.
    """

    def __init__(self, zeta: InfectionSet, sample_every=1, dropout=0.0, seed=0):
        if not zeta.sensors:
            raise InvalidConfigError("eavesdropping needs at least one sensor")
        self.sensor_ids = tuple(sorted(zeta.sensors))
        self.sample_every = int(sample_every)
        self.dropout = float(dropout)
        self._rng = np.random.Generator(np.random.PCG64(seed))
        self._rows = []
        self._times = []
        self._observed = []
        self._step = 0

    def capture(self, t, noisy_values):
        """Offer one full sensor sample; stores the zeta projection or a gap."""
        take = self._step % self.sample_every == 0
        self._step += 1
        if not take:
            return
        hit = self.dropout > 0 and self._rng.random() < self.dropout
        self._times.append(t)
        if hit:
            self._rows.append([0.0] * len(self.sensor_ids))
            self._observed.append(False)
        else:
            self._rows.append([noisy_values[s] for s in self.sensor_ids])
            self._observed.append(True)

    def series(self, dt) -> MeasurementSeries:
        if not self._rows:
            raise InvalidConfigError("nothing captured yet")
        return MeasurementSeries(sensor_ids=self.sensor_ids,
                                 t0=self._times[0],
                                 dt=dt * self.sample_every,
                                 values=np.array(self._rows, dtype=float),
                                 observed=np.array(self._observed, dtype=bool))

    def latest_before(self, t) -> MeasurementVector | None:
        best = None
        for ts, row, obs in zip(self._times, self._rows, self._observed):
            if obs and ts < t:
                best = (ts, row)
        if best is None:
            return None
        return MeasurementVector(values=np.array(best[1]),
                                 sensor_ids=self.sensor_ids, timestamp=best[0])


# ---------------------------------------------------------------------------
# target identification
# ---------------------------------------------------------------------------

def identify_targets(objective, model: VddmModel, zeta: InfectionSet,
                     alpha_max, baseline: MeasurementVector, droop: DroopParams,
                     horizon=None, required_effect=None, coverage=0.9):
    """Probe the replica per candidate agent and pick a minimal target prefix.

    Each reachable agent gets a test injection of magnitude alpha_max on its
    objective-relevant sensor; the score is the predicted objective deviation
    per unit bias. Candidates are ranked by score (ties to the lower DG
    number). A replica trained on normal operation resolves relative agent
    sensitivities, not absolute closed-loop attainment, so by default the
    prefix is the shortest one contributing `coverage` of the total predicted
    effect; pass required_effect (readout units) for an absolute feasibility
    gate instead.
    """
    n_dg = droop.n_dg
    cands = objective.candidates(zeta, n_dg)
    cands = [k for k in cands if objective.probe_sensor(k) in model.sensor_ids]
    if not cands:
        raise InfeasibleObjectiveError(
            "no agents for this objective are reachable through the infection set")
    if horizon is None:
        horizon = min(model.horizons)
    base = predict_state(model, PredictionQuery(m=baseline, horizon=horizon))
    scores = []
    for k in cands:
        probe = AttackVector(deltas=[alpha_max],
                             target_ids=[objective.probe_sensor(k)])
        hit = evaluate_attack(
            model, PredictionQuery(m=baseline, horizon=horizon, alpha=probe),
            alpha_max)
        dev = _objective_deviation(objective, base.values, hit.values,
                                   model.readout_labels, n_dg)
        scores.append((k, dev / alpha_max))
    scores.sort(key=lambda item: (-item[1], item[0]))
    total = math.fsum(score * alpha_max for _, score in scores)
    if total <= 0:
        raise InfeasibleObjectiveError(
            "the replica predicts no influence for any reachable agent")
    goal = required_effect if required_effect is not None else coverage * total
    chosen = []
    combined = 0.0
    for k, score in scores:
        chosen.append(k)
        combined += score * alpha_max
        if combined >= goal:
            return tuple(chosen), scores
    raise InfeasibleObjectiveError(
        f"predicted combined effect {combined:.6g} cannot reach "
        f"{goal:.6g} within alpha_max")


def _objective_deviation(objective, base, hit, labels, n_dg):
    delta = {lab: hit[i] - base[i] for i, lab in enumerate(labels)}
    if isinstance(objective, FrequencyManipulation):
        return math.fsum(abs(delta[f"dg{k}.freq"]) for k in range(1, n_dg + 1)) / n_dg
    if isinstance(objective, VoltageManipulation):
        return abs(delta[f"dg{objective.target_dg}.volt"])
    if isinstance(objective, LoadSharingDisruption):
        shifts = [delta[f"dg{k}.dp_p"] for k in range(1, n_dg + 1)]
        return max(abs(a - b) for a in shifts for b in shifts)
    raise InvalidPlanError(f"unknown objective {objective!r}")


# ---------------------------------------------------------------------------
# inline rootkit
# ---------------------------------------------------------------------------

@dataclass
class ReportBias:
    """Constant falsification added to reported sensors inside a window."""

    deltas: dict               # sensor id -> bias
    window: tuple              # (t_start, t_stop)

    def active(self, t):
        return self.window[0] <= t < self.window[1]


class Rootkit:
    """Inline adversary: capture, bias the controls, and rewrite reports.

    Hook order per simulation step is fixed: `capture` (eavesdrop) and
    `control_bias` (inject) before the plant step, `doctor_reports` (mask)
    after it.
    """

    def __init__(self, zeta: InfectionSet, droop: DroopParams,
                 plan: AttackPlan | None = None, model: VddmModel | None = None,
                 fault: PccFault | None = None,
                 eavesdropper: Eavesdropper | None = None,
                 report_bias: ReportBias | None = None):
        self.zeta = zeta
        self.droop = droop
        self.plan = plan
        self.model = model
        self.fault = fault
        self.eavesdropper = eavesdropper
        self.report_bias = report_bias
        self.log = []
        self._anchor = None
        if plan is not None and plan.mask and model is None:
            raise InvalidPlanError("masking needs a trained replica model")

    # -- pre-step hooks ------------------------------------------------------

    def capture(self, t, noisy_values):
        if self.eavesdropper is not None:
            self.eavesdropper.capture(t, noisy_values)

    def pcc_override(self, t):
        value = self.fault.override(t) if self.fault is not None else None
        if value is not None:
            self.log.append((t, "pcc_spoof", "pcc.current", value))
        return value

    def control_bias(self, t, n_dg) -> ControlBias | None:
        """Injection realized as a ControlBias for the coming plant step."""
        plan = self.plan
        if plan is None or not plan.active(t):
            return None
        bias = ControlBias.zero(n_dg)
        frac = plan.ramp_fraction(t)
        obj = plan.objective
        if isinstance(obj, FrequencyManipulation):
            for k in plan.targets:
                value = obj.offset_hz * frac
                bias.omega_ref[k - 1] = value
                self._assert_stealth(abs(value))
                self.log.append((t, "inject", f"dg{k}.omega_ref", value))
        elif isinstance(obj, VoltageManipulation):
            k = obj.target_dg
            dq = self.droop.d_q[k - 1]
            value = -(obj.ramp_v_per_s / dq) * (t - plan.window[0])
            bias.q_meas[k - 1] = value
            self._assert_stealth(abs(value))
            self.log.append((t, "inject", f"dg{k}.q_meas", value))
        elif isinstance(obj, LoadSharingDisruption):
            k = obj.target_dg
            ramp = min(1.0, (t - plan.window[0]) / obj.ramp_s) if obj.ramp_s > 0 else 1.0
            scale = 1.0 + (obj.scale - 1.0) * ramp
            bias.droop_p_scale[k - 1] = scale
            self.log.append((t, "inject", f"dg{k}.droop_p_scale", scale))
        else:
            raise InvalidPlanError(f"unknown objective {obj!r}")
        return bias

    def _assert_stealth(self, magnitude):
        plan = self.plan
        if plan.mask and plan.alpha_max is not None and magnitude > plan.alpha_max:
            raise StealthViolationError(
                f"injected |alpha| = {magnitude:.6g} exceeds "
                f"alpha_max = {plan.alpha_max:.6g}")

    # -- post-step hook ------------------------------------------------------

    def doctor_reports(self, t, reported):
        """Rewrite the operator-bound report dict; returns a new dict."""
        out = dict(reported)
        plan = self.plan
        if plan is not None and plan.mask and plan.active(t):
            self._apply_mask(t, out)
        if self.report_bias is not None and self.report_bias.active(t):
            for sensor, delta in sorted(self.report_bias.deltas.items()):
                if sensor in out:
                    out[sensor] = out[sensor] + delta
                    self.log.append((t, "report_bias", sensor, delta))
        return out

    def _apply_mask(self, t, out):
        plan = self.plan
        if self._anchor is None:
            if self.eavesdropper is None:
                raise InvalidPlanError("masking needs an eavesdropped anchor")
            self._anchor = self.eavesdropper.latest_before(plan.window[0])
            if self._anchor is None:
                raise InvalidPlanError("no clean measurement before the window")
        lead = t - self._anchor.timestamp
        lead = min(max(lead, min(self.model.horizons)), self.model.max_horizon)
        predicted = predict_state(
            self.model, PredictionQuery(m=self._anchor, horizon=lead))
        values = predicted.as_dict()
        for k in plan.targets:
            dp = self.droop.d_p[k - 1]
            dq = self.droop.d_q[k - 1]
            spoof = {
                dg_sensor_id(k, "freq"): values[f"dg{k}.freq"],
                dg_sensor_id(k, "volt"): values[f"dg{k}.volt"],
                dg_sensor_id(k, "p"): values[f"dg{k}.dp_p"] / dp,
                dg_sensor_id(k, "q"): values[f"dg{k}.dq_q"] / dq,
            }
            for sensor, value in spoof.items():
                if sensor in out:
                    out[sensor] = value
                    self.log.append((t, "mask", sensor, value))
