"""Scenario execution: wiring, telemetry, verdicts, and reproduction artifacts.

A run advances the plant step by step with the fixed hook order
eavesdrop -> inject -> plant step -> mask -> detect, writing one telemetry row
per step. All verdicts are recomputed from the logged series alone so an
independent script can audit them from the CSVs.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .detection import DetectorConfig, OperatorPipeline, calibrate_alpha_max
from .errors import (
    DivergenceError,
    InvalidConfigError,
    InvalidPlanError,
    SchemaError,
)
from .microgrid import Microgrid
from .plantmodel import ObserverModel, build_observer_model, settle
from .rootkit import (
    Eavesdropper,
    FrequencyManipulation,
    InfectionSet,
    LoadSharingDisruption,
    PccFault,
    ReportBias,
    Rootkit,
    VoltageManipulation,
    build_plan,
    forge_fault,
)
from .scenario import Scenario
from .sensors import all_sensor_ids, dg_sensor_ids
from .vddm import (
    Corpus,
    MeasurementSeries,
    VddmModel,
    build_corpus,
    fidelity_report,
    load_bundle,
    save_bundle,
    train_vddm,
)
from .neural import TrainConfig

TELEMETRY_FILE = "telemetry.csv"
ALARM_FILE = "alarm_log.csv"
ATTACK_FILE = "attack_log.csv"
EVENT_FILE = "events.csv"
REPORT_FILE = "run_report.json"


def _fmt(x):
    if isinstance(x, float):
        return format(x, ".17g")
    return str(x)


class ProtectionRelay:
    """Overcurrent relay on the reported PCC current: pickup held for a dwell."""

    def __init__(self, pickup_a, dwell_s):
        self.pickup_a = pickup_a
        self.dwell_s = dwell_s
        self._above_since = None
        self.tripped_at = None

    def update(self, t, reported_current, dt):
        if self.tripped_at is not None:
            return False
        if reported_current >= self.pickup_a:
            if self._above_since is None:
                self._above_since = t
            if t + dt - self._above_since >= self.dwell_s:
                self.tripped_at = t
                return True
        else:
            self._above_since = None
        return False


@dataclass
class RunArtifacts:
    """In-memory run outputs prior to verdict evaluation."""

    times: np.ndarray
    columns: dict
    sensor_ids: list
    operator_ids: list
    events: list
    attack_log: list
    alpha_max: float | None
    diverged: bool
    divergence_note: str | None


@dataclass
class RunReport:
    scenario: dict
    verdicts: dict
    alpha_max: float | None
    exit_code: int
    out_dir: str
    files: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# model preparation shared by run / train / calibrate
# ---------------------------------------------------------------------------

# settling + linearization is deterministic per configuration, so models are
# memoized in-process (they are immutable once built)
_MODEL_CACHE = {}


def _model_key(scn: Scenario, ids, dt, process_noise, disturbance=None):
    return json.dumps({"microgrid": scn.microgrid, "noise": scn.sensors["noise"],
                       "settle": scn.estimator["settle_time"], "dt": dt,
                       "q": process_noise, "ids": list(ids),
                       "sim_dt": scn.dt, "dist": disturbance},
                      sort_keys=True)


def _settled_plant(scn: Scenario) -> Microgrid:
    key = _model_key(scn, (), scn.dt, 0.0)
    if key not in _MODEL_CACHE:
        _MODEL_CACHE[key] = settle(scn.build_microgrid(),
                                   duration=scn.estimator["settle_time"],
                                   dt=scn.dt)
    return _MODEL_CACHE[key]


def _cached_model(scn: Scenario, ids, dt, process_noise) -> ObserverModel:
    key = _model_key(scn, ids, dt, process_noise)
    if key not in _MODEL_CACHE:
        suite = scn.build_sensor_suite()
        _MODEL_CACHE[key] = build_observer_model(
            _settled_plant(scn), ids, dt=dt, process_noise=process_noise,
            noise_sigmas={s: suite.sigma(s) for s in ids})
    return _MODEL_CACHE[key]


def operator_model(scn: Scenario) -> ObserverModel:
    """Operator-side linear model over all DG sensors at the islanded set point."""
    return _cached_model(scn, dg_sensor_ids(scn.n_dg), scn.dt,
                         scn.estimator["process_noise"])


def attacker_model(scn: Scenario, sensor_ids) -> ObserverModel:
    """Attacker replica model restricted to the infected sensor subset."""
    ids = sorted(s for s in sensor_ids if not s.startswith("pcc."))
    if not ids:
        raise InvalidConfigError("attacker model needs at least one DG sensor")
    dt_eff = scn.dt * scn.vddm["eavesdrop_every"]
    return _cached_model(scn, ids, dt_eff,
                         scn.estimator["attacker_process_noise"])


def detector_config(scn: Scenario) -> DetectorConfig:
    return DetectorConfig(window=scn.detector["window"],
                          false_alarm_target=scn.detector["false_alarm_target"],
                          tau=scn.detector["tau"])


def calibrate(scn: Scenario, observer: ObserverModel | None = None):
    observer = observer or operator_model(scn)
    return calibrate_alpha_max(observer.linear, detector_config(scn))


# ---------------------------------------------------------------------------
# attack wiring
# ---------------------------------------------------------------------------

def _resolve_objective(att, alpha_max, droop):
    kind = att["objective"]
    if kind == "frequency":
        offset = att["frequency_offset"]
        if offset is None:
            offset = att["alpha_max_fraction"] * alpha_max
        return FrequencyManipulation(offset_hz=float(offset))
    if kind == "voltage":
        return VoltageManipulation(target_dg=att["targets"][0],
                                   ramp_v_per_s=float(att["ramp_v_per_s"]))
    if kind == "load_sharing":
        return LoadSharingDisruption(target_dg=att["targets"][0],
                                     scale=float(att["scale"] or 1.5),
                                     ramp_s=float(att["skew_ramp"]))
    raise SchemaError("attack.objective", f"unsupported objective '{kind}'")


def _build_rootkit(scn: Scenario, alpha_max, bundle_path, seeds):
    """Assemble the inline rootkit from the scenario tables (or return None)."""
    if scn.infection is None and scn.attack is None:
        return None, None
    droop = scn.droop_params()
    zeta = None
    eaves = None
    if scn.infection is not None:
        zeta = InfectionSet(sensors=frozenset(scn.infection["sensors"]),
                            controllers=frozenset(scn.infection["controllers"]),
                            pcc_access=scn.infection["pcc_access"])
        zeta.validate(scn.n_dg)
        if zeta.sensors:
            eaves = Eavesdropper(zeta, sample_every=scn.vddm["eavesdrop_every"],
                                 dropout=scn.vddm["eavesdrop_dropout"],
                                 seed=seeds[1])
    att = scn.attack
    if att is None:
        return Rootkit(zeta, droop, eavesdropper=eaves), None

    fault = None
    if att["forge_fault"]:
        rated = scn.protection["rated_current"]
        fault = forge_fault(zeta, att["fault_time"], rated,
                            magnitude_multiple=att["fault_multiple"],
                            duration=att["fault_duration"])

    if att["objective"] == "report_bias":
        delta = att.get("report_delta")
        if delta is None:
            delta = att["alpha_max_fraction"] * alpha_max
        rb = ReportBias(deltas={att["report_sensor"]: float(delta)},
                        window=(att["start"], att["stop"]))
        return Rootkit(zeta, droop, fault=fault, eavesdropper=eaves,
                       report_bias=rb), None

    objective = _resolve_objective(att, alpha_max, droop)
    model = None
    if att["mask"]:
        path = bundle_path or scn.vddm["bundle"]
        if path is None:
            raise InvalidPlanError("masked attack needs a trained model bundle")
        model = load_bundle(path)
    plan = build_plan(objective, att["targets"], (att["start"], att["stop"]),
                      zeta, droop, mask=att["mask"], alpha_max=alpha_max,
                      ramp_s=att["ramp"])
    islanding_expected = None
    if att["forge_fault"]:
        islanding_expected = att["fault_time"] + scn.protection["dwell"]
    elif scn.island_at is not None:
        islanding_expected = scn.island_at
    if islanding_expected is None:
        raise InvalidPlanError(
            "attack plan requires islanded operation but nothing islands the grid")
    if plan.window[0] < islanding_expected:
        raise InvalidPlanError("attack window opens before the expected islanding")
    return Rootkit(zeta, droop, plan=plan, model=model, fault=fault,
                   eavesdropper=eaves), plan


# ---------------------------------------------------------------------------
# main run loop
# ---------------------------------------------------------------------------

def simulate(scn: Scenario, bundle_path=None) -> RunArtifacts:
    """Execute the scenario deterministically and collect every series."""
    n = scn.n_dg
    mg = scn.build_microgrid()
    suite = scn.build_sensor_suite()
    sensor_ids = suite.ids
    operator_ids = dg_sensor_ids(n)
    seeds = np.random.SeedSequence(scn.seed).spawn(3)
    rng_sensor = np.random.Generator(np.random.PCG64(seeds[0]))
    rng_load = np.random.Generator(np.random.PCG64(seeds[2]))
    load_sigma = scn.microgrid["load_sigma"]
    load_tau = scn.microgrid["load_tau"]
    load_p0 = scn.microgrid["load_p"]
    load_state = 0.0
    local_sigma = scn.microgrid["local_load_sigma"]
    local_p0 = list(scn.microgrid["local_load_p"])
    local_states = [0.0] * n

    obs = operator_model(scn)
    det_cfg = detector_config(scn)
    cal = calibrate_alpha_max(obs.linear, det_cfg)
    pipeline = OperatorPipeline(obs, det_cfg)
    rootkit, plan = _build_rootkit(scn, cal.alpha_max, bundle_path, seeds)
    relay = ProtectionRelay(
        pickup_a=scn.protection["pickup_multiple"] * scn.protection["rated_current"],
        dwell_s=scn.protection["dwell"])

    steps = int(round(scn.duration / scn.dt))
    det_start = scn.detector["start_time"]

    columns = {}

    def col(name):
        return columns.setdefault(name, [])

    times = []
    diverged = False
    divergence_note = None
    for k in range(steps):
        t = k * scn.dt
        if scn.island_at is not None and mg.network.pcc_closed and t >= scn.island_at:
            mg.set_breaker(True, label="operator")
        decay = math.exp(-scn.dt / load_tau)
        kick = math.sqrt(1 - decay * decay)
        if load_sigma > 0:
            load_state = (decay * load_state
                          + load_sigma * kick * rng_load.standard_normal())
            mg.network.load_p = load_p0 * (1.0 + load_state)
        if local_sigma > 0:
            for i in range(n):
                local_states[i] = (decay * local_states[i]
                                   + local_sigma * kick
                                   * rng_load.standard_normal())
                mg.network.local_load_p[i] = max(
                    0.0, local_p0[i] * (1.0 + local_states[i]))
        pf = mg.solve_power_flow()
        true_vals, noisy = suite.read(mg, pf, rng_sensor)

        # eavesdrop
        if rootkit is not None:
            rootkit.capture(t, noisy)
            spoof = rootkit.pcc_override(t)
            if spoof is not None:
                noisy = dict(noisy)
                noisy["pcc.current"] = spoof
        # protection acts on the reported PCC current
        if mg.network.pcc_closed and relay.update(t, noisy["pcc.current"], scn.dt):
            mg.set_breaker(True, label="fault")

        # inject, then advance the plant
        bias = rootkit.control_bias(t, n) if rootkit is not None else None
        try:
            mg.step(scn.dt, bias)
        except DivergenceError as exc:
            diverged = True
            divergence_note = str(exc)
        # mask / falsify reports
        reported = rootkit.doctor_reports(t, noisy) if rootkit is not None else noisy

        # detect
        r_val, alarm = (math.nan, 0)
        if t >= det_start:
            z = np.array([reported[s] for s in operator_ids])
            r_val, alarm_flag = pipeline.step(z)
            alarm = int(alarm_flag)

        times.append(t)
        for i, s in enumerate(mg.dgs):
            key = f"dg{i + 1}"
            col(f"{key}.freq").append(s.omega)
            col(f"{key}.volt").append(s.v)
            col(f"{key}.p").append(s.p_filt)
            col(f"{key}.q").append(s.q_filt)
            col(f"{key}.delta_omega").append(s.delta_omega)
            col(f"{key}.delta_v").append(s.delta_v)
        col("pcc.current").append(true_vals["pcc.current"])
        col("pcc.voltage").append(true_vals["pcc.voltage"])
        col("v_bus").append(abs(pf.v_bus))
        for sid in sensor_ids:
            col(f"rep.{sid}").append(reported[sid])
        col("r").append(r_val)
        col("alarm").append(alarm)
        col("islanded").append(0 if mg.network.pcc_closed else 1)
        if diverged:
            break

    return RunArtifacts(
        times=np.array(times),
        columns={k: np.array(v) for k, v in columns.items()},
        sensor_ids=list(sensor_ids), operator_ids=list(operator_ids),
        events=[(e.t, e.open, e.label) for e in mg.events],
        attack_log=(rootkit.log if rootkit is not None else []),
        alpha_max=cal.alpha_max, diverged=diverged,
        divergence_note=divergence_note)


# ---------------------------------------------------------------------------
# verdicts
# ---------------------------------------------------------------------------

def evaluate_verdicts(scn: Scenario, art: RunArtifacts) -> dict:
    """Derive every verdict from the logged series only."""
    n = scn.n_dg
    t = art.times
    cols = art.columns
    omega_n = scn.microgrid["nominal_frequency"]
    droop = scn.droop_params()

    def share_residual():
        prods = np.vstack([droop.d_p[i] * cols[f"dg{i + 1}.p"] for i in range(n)])
        return prods.max(axis=0) - prods.min(axis=0)

    freqs = np.vstack([cols[f"dg{i + 1}.freq"] for i in range(n)])
    freq_residual = np.abs(freqs - omega_n).max(axis=0)
    residual = share_residual()

    verdicts = {
        "diverged": art.diverged,
        "divergence_note": art.divergence_note,
        "final_freq_residual_hz": float(freq_residual[-1]),
        "final_share_residual_hz": float(residual[-1]),
    }

    att = scn.attack
    det_start = scn.detector["start_time"]
    if att is None:
        verdicts["nominal"] = bool(not art.diverged
                                   and freq_residual[-1] < 1e-3)
        active = t >= det_start
        verdicts["clean_alarm_rate"] = (
            float(cols["alarm"][active].mean()) if active.any() else None)
        return verdicts

    start, stop = att["start"], att["stop"]
    pre = (t >= det_start) & (t < start)
    win = (t >= start) & (t < stop)
    clean_rate = float(cols["alarm"][pre].mean()) if pre.any() else None
    attack_rate = float(cols["alarm"][win].mean()) if win.any() else None
    verdicts["clean_alarm_rate"] = clean_rate
    verdicts["attack_alarm_rate"] = attack_rate
    if att["mask"] and clean_rate is not None and attack_rate is not None:
        verdicts["stealth_maintained"] = bool(attack_rate <= clean_rate + 0.02)

    kind = att["objective"]
    if kind == "frequency" and not art.diverged:
        offset = att["frequency_offset"]
        if offset is None:
            offset = att["alpha_max_fraction"] * art.alpha_max
        last = t >= (t[-1] - 1.0)
        per_dg = [float(np.mean(cols[f"dg{i + 1}.freq"][last])) for i in range(n)]
        target = omega_n + offset
        verdicts["objective"] = "frequency"
        verdicts["target_frequency_hz"] = target
        verdicts["last_second_mean_hz"] = per_dg
        verdicts["objective_met"] = bool(
            all(abs(f - target) <= 0.005 for f in per_dg))
    elif kind == "voltage" and not art.diverged:
        k = att["targets"][0]
        v = cols[f"dg{k}.volt"][win]
        rises = np.diff(v)
        frac_nondecreasing = float((rises >= 0).mean()) if rises.size else 0.0
        rel_rise = float((v[-1] - v[0]) / v[0]) if v.size else 0.0
        verdicts["objective"] = "voltage"
        verdicts["voltage_rise_rel"] = rel_rise
        verdicts["fraction_nondecreasing"] = frac_nondecreasing
        verdicts["objective_met"] = bool(rel_rise >= 0.02
                                         and frac_nondecreasing >= 0.99)
    elif kind == "load_sharing" and not art.diverged:
        pre_window = (t >= max(det_start, start - 1.0)) & (t < start)
        pre_res = float(residual[pre_window].max()) if pre_window.any() else 0.0
        after = (t >= start) & (t < start + 1.0)
        hit = residual[after] > 10.0 * max(pre_res, 1e-15)
        t_hit = float(t[after][hit.argmax()]) if hit.any() else None
        verdicts["objective"] = "load_sharing"
        verdicts["pre_attack_share_residual_hz"] = pre_res
        verdicts["disruption_time_s"] = t_hit
        verdicts["objective_met"] = bool(hit.any())
    elif kind == "report_bias":
        verdicts["objective"] = "report_bias"
        verdicts["objective_met"] = None
    return verdicts


# ---------------------------------------------------------------------------
# artifact files
# ---------------------------------------------------------------------------

def write_artifacts(scn: Scenario, art: RunArtifacts, out_dir) -> RunReport:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    header = ["t"]
    for i in range(scn.n_dg):
        key = f"dg{i + 1}"
        header += [f"{key}.freq", f"{key}.volt", f"{key}.p", f"{key}.q",
                   f"{key}.delta_omega", f"{key}.delta_v"]
    header += ["pcc.current", "pcc.voltage", "v_bus"]
    header += [f"rep.{sid}" for sid in art.sensor_ids]
    header += ["r", "alarm", "islanded"]

    with open(out / TELEMETRY_FILE, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row_idx, t in enumerate(art.times):
            row = [_fmt(float(t))]
            for name in header[1:]:
                value = art.columns[name][row_idx]
                if name == "r" and math.isnan(value):
                    row.append("")
                elif name in ("alarm", "islanded"):
                    row.append(str(int(value)))
                else:
                    row.append(_fmt(float(value)))
            writer.writerow(row)

    with open(out / ALARM_FILE, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t", "r", "tau", "alarm"])
        det_cfg = detector_config(scn)
        tau = det_cfg.resolve_tau(len(art.operator_ids))
        for row_idx, t in enumerate(art.times):
            r = art.columns["r"][row_idx]
            if math.isnan(r):
                continue
            writer.writerow([_fmt(float(t)), _fmt(float(r)), _fmt(tau),
                             str(int(art.columns["alarm"][row_idx]))])

    with open(out / ATTACK_FILE, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t", "event", "channel", "value"])
        for t, event, channel, value in art.attack_log:
            writer.writerow([_fmt(float(t)), event, channel, _fmt(float(value))])

    with open(out / EVENT_FILE, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t", "breaker_open", "label"])
        for t, is_open, label in art.events:
            writer.writerow([_fmt(float(t)), str(int(is_open)), label])

    verdicts = evaluate_verdicts(scn, art)
    exit_code = 3 if art.diverged else 0
    report = RunReport(scenario=scn.resolved, verdicts=verdicts,
                       alpha_max=art.alpha_max, exit_code=exit_code,
                       out_dir=str(out),
                       files={"telemetry": TELEMETRY_FILE, "alarms": ALARM_FILE,
                              "attack": ATTACK_FILE, "events": EVENT_FILE})
    with open(out / REPORT_FILE, "w", encoding="utf-8") as fh:
        json.dump({"scenario": report.scenario, "verdicts": report.verdicts,
                   "alpha_max": report.alpha_max, "exit_code": report.exit_code,
                   "files": report.files}, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return report


def run_scenario(scn: Scenario, out_dir, bundle_path=None) -> RunReport:
    art = simulate(scn, bundle_path=bundle_path)
    return write_artifacts(scn, art, out_dir)


# ---------------------------------------------------------------------------
# telemetry access + training entry
# ---------------------------------------------------------------------------

def read_telemetry(path):
    """Telemetry CSV -> dict of float arrays ('r' gaps become NaN).

    Malformed rows raise with the line number and byte offset of the fault.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    lines = blob.split(b"\n")
    if not lines or not lines[0]:
        raise InvalidConfigError(f"telemetry file {path} is empty")
    header = lines[0].decode("utf-8").split(",")
    rows = []
    offset = len(lines[0]) + 1
    for line_no, raw_line in enumerate(lines[1:], start=2):
        if not raw_line:
            offset += 1
            continue
        row = raw_line.decode("utf-8", errors="replace").split(",")
        if len(row) != len(header):
            raise InvalidConfigError(
                f"telemetry {path}: malformed row at line {line_no} "
                f"(byte offset {offset})")
        rows.append((line_no, offset, row))
        offset += len(raw_line) + 1
    data = {}
    for j, name in enumerate(header):
        vals = np.empty(len(rows))
        for i, (line_no, off, row) in enumerate(rows):
            cell = row[j]
            if cell == "":
                vals[i] = np.nan
                continue
            try:
                vals[i] = float(cell)
            except ValueError:
                raise InvalidConfigError(
                    f"telemetry {path}: bad number {cell!r} in column "
                    f"'{name}' at line {line_no} (byte offset {off})") from None
        data[name] = vals
    return data


def eavesdrop_from_trace(scn: Scenario, trace, sensor_ids) -> MeasurementSeries:
    """Rebuild the attacker's capture from a recorded clean trace.

    Uses the same spawned seed as the in-run eavesdropper, so offline training
    sees exactly the stream the implanted rootkit would have collected.
    """
    seeds = np.random.SeedSequence(scn.seed).spawn(3)
    rng = np.random.Generator(np.random.PCG64(seeds[1]))
    every = scn.vddm["eavesdrop_every"]
    dropout = scn.vddm["eavesdrop_dropout"]
    ids = tuple(sorted(sensor_ids))
    start = int(round(scn.vddm["train_start"] / scn.dt))
    if start >= trace["t"].size:
        raise InvalidConfigError("train_start is beyond the end of the trace")
    take = np.arange(start, trace["t"].size, every)
    values = np.column_stack([trace[f"rep.{s}"][take] for s in ids])
    observed = np.ones(take.size, dtype=bool)
    if dropout > 0:
        observed = rng.random(take.size) >= dropout
    values = np.where(observed[:, None], values, 0.0)
    return MeasurementSeries(sensor_ids=ids, t0=float(trace["t"][take[0]]),
                             dt=scn.dt * every, values=values, observed=observed)


def trace_readout(scn: Scenario, trace):
    """True per-DG (freq, volt, dp*p, dq*q) matrix from a telemetry trace."""
    droop = scn.droop_params()
    cols = []
    for k in range(1, scn.n_dg + 1):
        cols.append(trace[f"dg{k}.freq"])
        cols.append(trace[f"dg{k}.volt"])
        cols.append(droop.d_p[k - 1] * trace[f"dg{k}.p"])
        cols.append(droop.d_q[k - 1] * trace[f"dg{k}.q"])
    return np.column_stack(cols)


def train_model(scn: Scenario, trace_path, out_bundle, eval_trace_path=None,
                raw_corpus=False):
    """Build the corpus from a recorded trace, train, and persist the bundle.

    Returns (bundle path, FidelityReport). The fidelity test split uses
    eval_trace_path when given (a held-out run), else the training trace.
    """
    trace = read_telemetry(trace_path)
    if scn.infection is None:
        raise InvalidConfigError("training needs an infection table (sensor set)")
    zeta_sensors = [s for s in scn.infection["sensors"] if not s.startswith("pcc.")]
    observer = attacker_model(scn, zeta_sensors)
    series = eavesdrop_from_trace(scn, trace, observer.sensor_ids)
    builder = build_corpus if not raw_corpus else _raw_corpus
    corpus = builder(series, observer, scn.vddm["horizons"],
                     min_samples=scn.vddm["min_samples"],
                     max_gap_steps=scn.vddm["max_gap_steps"])
    cfg = TrainConfig(eta=scn.vddm["eta"], epochs=scn.vddm["epochs"],
                      batch_size=scn.vddm["batch_size"], seed=scn.seed,
                      patience=scn.vddm["patience"])
    model = train_vddm(corpus, cfg, hidden=tuple(scn.vddm["hidden"]),
                       activation=scn.vddm["activation"])
    save_bundle(model, out_bundle)
    eval_trace = read_telemetry(eval_trace_path) if eval_trace_path else trace
    start = int(round(scn.vddm["train_start"] / scn.dt))
    take = np.arange(start, eval_trace["t"].size, scn.vddm["eavesdrop_every"])
    reported = np.column_stack(
        [eval_trace[f"rep.{s}"][take] for s in observer.sensor_ids])
    truth = trace_readout(scn, eval_trace)[take]
    fid = fidelity_report(model, corpus, reported, truth)
    fid_path = Path(out_bundle).with_suffix(".fidelity.json")
    with open(fid_path, "w", encoding="utf-8") as fh:
        json.dump({"train_mse": fid.train_mse, "val_mse": fid.val_mse,
                   "test_mse": fid.test_mse,
                   "per_horizon": {str(k): v for k, v in fid.per_horizon.items()},
                   "model_version": fid.model_version},
                  fh, indent=1, sort_keys=True)
        fh.write("\n")
    return str(out_bundle), fid


def _raw_corpus(series, observer, horizons, min_samples, max_gap_steps):
    from .vddm import build_raw_corpus
    return build_raw_corpus(series, observer, horizons, min_samples=min_samples)


# ---------------------------------------------------------------------------
# figure extraction
# ---------------------------------------------------------------------------

FIGURES = {
    "frequency": ("fig_frequency.csv", "freq"),
    "voltage": ("fig_voltage.csv", "volt"),
    "load_sharing": ("fig_load_sharing.csv", "p"),
}


def extract_figures(run_dir):
    """Write plot-ready per-figure CSV extracts next to the telemetry."""
    run_dir = Path(run_dir)
    telem = run_dir / TELEMETRY_FILE
    if not telem.exists():
        raise InvalidConfigError(f"{run_dir} has no telemetry series")
    trace = read_telemetry(telem)
    report_path = run_dir / REPORT_FILE
    with open(report_path, "r", encoding="utf-8") as fh:
        report = json.load(fh)
    n = report["scenario"]["microgrid"]["n_dg"]
    written = {}
    for fig_id, (fname, kind) in FIGURES.items():
        cols = [f"dg{k}.{kind}" for k in range(1, n + 1)]
        for c in cols:
            if c not in trace:
                raise InvalidConfigError(f"figure '{fig_id}': series {c} missing")
        with open(run_dir / fname, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["t"] + cols)
            for idx in range(trace["t"].size):
                writer.writerow([_fmt(float(trace["t"][idx]))]
                                + [_fmt(float(trace[c][idx])) for c in cols])
        written[fig_id] = fname
    return written, report
