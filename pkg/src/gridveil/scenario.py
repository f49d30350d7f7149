"""Scenario files: TOML schema, validation, and default materialization.

A scenario fully determines a run: microgrid build, sensor noise, detector,
infection set, optional attack plan, and the seed. `parse_scenario` validates
and echoes every applied default so reports can embed the exact resolved
configuration.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import SchemaError
from .microgrid import CommGraph, DroopParams, Microgrid, NetworkModel, droop_gains_from_ratings
from .sensors import (
    SensorSuite,
    all_sensor_ids,
    controller_ids,
    dg_sensor_ids,
    validate_controller_ids,
    validate_sensor_ids,
)

SCHEMA_VERSION = 1

_RING4 = [[0.0, 1.0, 0.0, 1.0],
          [1.0, 0.0, 1.0, 0.0],
          [0.0, 1.0, 0.0, 1.0],
          [1.0, 0.0, 1.0, 0.0]]


def _ring_adjacency(n):
    adj = [[0.0] * n for _ in range(n)]
    for i in range(n):
        adj[i][(i + 1) % n] = 1.0
        adj[(i + 1) % n][i] = 1.0
    if n == 2:
        adj[0][1] = adj[1][0] = 1.0
    return adj


@dataclass
class Scenario:
    """Validated, fully-resolved run configuration."""

    name: str
    duration: float
    dt: float
    seed: int
    microgrid: dict
    sensors: dict
    protection: dict
    detector: dict
    estimator: dict
    vddm: dict
    infection: dict | None
    attack: dict | None
    island_at: float | None
    resolved: dict = field(default_factory=dict)

    @property
    def n_dg(self):
        return self.microgrid["n_dg"]

    def build_microgrid(self) -> Microgrid:
        mg = self.microgrid
        droop = droop_gains_from_ratings(
            mg["p_rated"], mg["q_rated"], mg["max_freq_deviation"],
            mg["max_volt_deviation"], omega_n=mg["nominal_frequency"],
            v_n=mg["nominal_voltage"])
        graph = CommGraph(adjacency=mg["adjacency"], pinning=mg["pinning"],
                          k1=mg["k1"], k2=mg["k2"])
        line_z = [complex(r, x) for r, x in
                  zip(mg["line_resistance"], mg["line_reactance"])]
        network = NetworkModel(
            line_impedance=line_z, load_p=mg["load_p"], load_q=mg["load_q"],
            pcc_closed=not mg["start_islanded"], grid_voltage=mg["grid_voltage"],
            grid_frequency=mg["grid_frequency"], filter_cutoff=mg["filter_cutoff"],
            local_load_p=list(mg["local_load_p"]),
            local_load_q=list(mg["local_load_q"]))
        return Microgrid(droop, graph, network)

    def build_sensor_suite(self) -> SensorSuite:
        return SensorSuite(n_dg=self.n_dg, noise=dict(self.sensors["noise"]))

    def droop_params(self) -> DroopParams:
        mg = self.microgrid
        return droop_gains_from_ratings(
            mg["p_rated"], mg["q_rated"], mg["max_freq_deviation"],
            mg["max_volt_deviation"], omega_n=mg["nominal_frequency"],
            v_n=mg["nominal_voltage"])


def _need(table, key, kind, where, default=None):
    if key not in table:
        if default is not None:
            return default
        raise SchemaError(f"{where}.{key}", "missing required field")
    value = table[key]
    if kind is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if kind is int and isinstance(value, int) and not isinstance(value, bool):
        return int(value)
    if kind is bool and isinstance(value, bool):
        return value
    if kind is str and isinstance(value, str):
        return value
    if kind is list and isinstance(value, list):
        return value
    raise SchemaError(f"{where}.{key}", f"expected {kind.__name__}")


def _float_list(table, key, where, n, default=None):
    value = _need(table, key, list, where, default)
    if len(value) != n:
        raise SchemaError(f"{where}.{key}", f"expected {n} entries, got {len(value)}")
    out = []
    for v in value:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise SchemaError(f"{where}.{key}", "entries must be numbers")
        out.append(float(v))
    return out


def parse_scenario(path) -> Scenario:
    """Load, validate, and resolve a scenario file."""
    path = Path(path)
    if not path.exists():
        raise SchemaError("path", f"scenario file {path} does not exist")
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise SchemaError("toml", str(exc)) from exc
    return resolve_scenario(raw, name_default=path.stem)


def resolve_scenario(raw: dict, name_default="scenario") -> Scenario:
    version = _need(raw, "schema_version", int, "", default=SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise SchemaError("schema_version", f"unsupported version {version}")
    name = _need(raw, "name", str, "", default=name_default)
    duration = _need(raw, "duration", float, "")
    if duration <= 0:
        raise SchemaError("duration", "must be positive")
    dt = _need(raw, "dt", float, "", default=1e-3)
    if dt <= 0:
        raise SchemaError("dt", "must be positive")
    seed = _need(raw, "seed", int, "", default=42)

    mg_raw = raw.get("microgrid", {})
    n_dg = _need(mg_raw, "n_dg", int, "microgrid", default=4)
    if n_dg < 1:
        raise SchemaError("microgrid.n_dg", "must be >= 1")
    v_n = _need(mg_raw, "nominal_voltage", float, "microgrid", default=311.0)
    microgrid = {
        "n_dg": n_dg,
        "p_rated": _float_list(mg_raw, "p_rated", "microgrid", n_dg,
                               default=[10e3] * n_dg),
        "q_rated": _float_list(mg_raw, "q_rated", "microgrid", n_dg,
                               default=[5e3] * n_dg),
        "nominal_frequency": _need(mg_raw, "nominal_frequency", float,
                                   "microgrid", default=50.0),
        "nominal_voltage": v_n,
        "max_freq_deviation": _need(mg_raw, "max_freq_deviation", float,
                                    "microgrid", default=0.5),
        "max_volt_deviation": _need(mg_raw, "max_volt_deviation", float,
                                    "microgrid", default=0.04 * v_n),
        "k1": _need(mg_raw, "k1", float, "microgrid", default=40.0),
        "k2": _need(mg_raw, "k2", float, "microgrid", default=20.0),
        "filter_cutoff": _need(mg_raw, "filter_cutoff", float, "microgrid",
                               default=31.416),
        "adjacency": mg_raw.get("adjacency",
                                _RING4 if n_dg == 4 else _ring_adjacency(n_dg)),
        "pinning": _float_list(mg_raw, "pinning", "microgrid", n_dg,
                               default=[1.0] + [0.0] * (n_dg - 1)),
        "line_resistance": _float_list(mg_raw, "line_resistance", "microgrid",
                                       n_dg, default=[0.05] * n_dg),
        "line_reactance": _float_list(
            mg_raw, "line_reactance", "microgrid", n_dg,
            default=[0.28, 0.30, 0.32, 0.30] if n_dg == 4 else [0.30] * n_dg),
        "load_p": _need(mg_raw, "load_p", float, "microgrid", default=8000.0),
        "load_q": _need(mg_raw, "load_q", float, "microgrid", default=2000.0),
        "grid_voltage": _need(mg_raw, "grid_voltage", float, "microgrid",
                              default=v_n),
        "grid_frequency": _need(mg_raw, "grid_frequency", float, "microgrid",
                                default=50.0),
        "start_islanded": _need(mg_raw, "start_islanded", bool, "microgrid",
                                default=False),
        # seeded Ornstein-Uhlenbeck load fluctuation (relative sigma, time const)
        "load_sigma": _need(mg_raw, "load_sigma", float, "microgrid", default=0.0),
        "load_tau": _need(mg_raw, "load_tau", float, "microgrid", default=1.0),
        # per-DG terminal loads with independent seeded fluctuation
        "local_load_p": _float_list(mg_raw, "local_load_p", "microgrid", n_dg,
                                    default=[0.0] * n_dg),
        "local_load_q": _float_list(mg_raw, "local_load_q", "microgrid", n_dg,
                                    default=[0.0] * n_dg),
        "local_load_sigma": _need(mg_raw, "local_load_sigma", float,
                                  "microgrid", default=0.0),
    }
    if microgrid["load_sigma"] < 0:
        raise SchemaError("microgrid.load_sigma", "must be nonnegative")
    if microgrid["local_load_sigma"] < 0:
        raise SchemaError("microgrid.local_load_sigma", "must be nonnegative")
    if microgrid["load_tau"] <= 0:
        raise SchemaError("microgrid.load_tau", "must be positive")
    adj = microgrid["adjacency"]
    if (not isinstance(adj, list) or len(adj) != n_dg
            or any(not isinstance(r, list) or len(r) != n_dg for r in adj)):
        raise SchemaError("microgrid.adjacency", f"must be a {n_dg}x{n_dg} matrix")
    microgrid["adjacency"] = [[float(v) for v in row] for row in adj]

    sensors_raw = raw.get("sensors", {})
    noise_raw = sensors_raw.get("noise", {})
    if not isinstance(noise_raw, dict):
        raise SchemaError("sensors.noise", "must be a table")
    sensors = {
        "sample_period": _need(sensors_raw, "sample_period", float, "sensors",
                               default=dt),
        "noise": {
            "freq": _need(noise_raw, "freq", float, "sensors.noise", default=0.05),
            "volt": _need(noise_raw, "volt", float, "sensors.noise", default=0.5),
            "p": _need(noise_raw, "p", float, "sensors.noise", default=50.0),
            "q": _need(noise_raw, "q", float, "sensors.noise", default=50.0),
            "pcc.current": _need(noise_raw, "pcc_current", float, "sensors.noise",
                                 default=0.2),
            "pcc.voltage": _need(noise_raw, "pcc_voltage", float, "sensors.noise",
                                 default=0.5),
        },
    }
    for key, value in sensors["noise"].items():
        if value <= 0:
            raise SchemaError(f"sensors.noise.{key}", "must be positive")

    prot_raw = raw.get("protection", {})
    rated_current = _need(
        prot_raw, "rated_current", float, "protection",
        default=sum(microgrid["p_rated"]) / microgrid["nominal_voltage"])
    protection = {
        "rated_current": rated_current,
        "pickup_multiple": _need(prot_raw, "pickup_multiple", float, "protection",
                                 default=2.0),
        "dwell": _need(prot_raw, "dwell", float, "protection", default=0.05),
    }

    det_raw = raw.get("detector", {})
    detector = {
        "window": _need(det_raw, "window", int, "detector", default=20),
        "false_alarm_target": _need(det_raw, "false_alarm_target", float,
                                    "detector", default=0.01),
        "tau": det_raw.get("tau"),
        "start_time": _need(det_raw, "start_time", float, "detector", default=3.0),
    }
    if detector["window"] < 1:
        raise SchemaError("detector.window", "must be >= 1")
    if not 0 < detector["false_alarm_target"] < 1:
        raise SchemaError("detector.false_alarm_target", "must be in (0, 1)")

    est_raw = raw.get("estimator", {})
    estimator = {
        "process_noise": _need(est_raw, "process_noise", float, "estimator",
                               default=1e-12),
        "attacker_process_noise": _need(est_raw, "attacker_process_noise", float,
                                        "estimator", default=1e-5),
        "settle_time": _need(est_raw, "settle_time", float, "estimator",
                             default=4.0),
    }

    vddm_raw = raw.get("vddm", {})
    vddm = {
        "horizons": _need(vddm_raw, "horizons", list, "vddm",
                          default=[0.05, 0.2, 0.5, 1.0, 2.0, 3.5]),
        "min_samples": _need(vddm_raw, "min_samples", int, "vddm", default=1000),
        "max_gap_steps": _need(vddm_raw, "max_gap_steps", int, "vddm", default=100),
        "hidden": _need(vddm_raw, "hidden", list, "vddm", default=[32, 32]),
        "activation": _need(vddm_raw, "activation", str, "vddm", default="tanh"),
        "eta": _need(vddm_raw, "eta", float, "vddm", default=0.01),
        "epochs": _need(vddm_raw, "epochs", int, "vddm", default=200),
        "batch_size": _need(vddm_raw, "batch_size", int, "vddm", default=32),
        "patience": _need(vddm_raw, "patience", int, "vddm", default=20),
        "bundle": vddm_raw.get("bundle"),
        "eavesdrop_every": _need(vddm_raw, "eavesdrop_every", int, "vddm",
                                 default=1),
        "eavesdrop_dropout": _need(vddm_raw, "eavesdrop_dropout", float, "vddm",
                                   default=0.0),
        "train_start": _need(vddm_raw, "train_start", float, "vddm", default=2.0),
    }
    if vddm["train_start"] < 0:
        raise SchemaError("vddm.train_start", "must be nonnegative")
    for t in vddm["horizons"]:
        if isinstance(t, bool) or not isinstance(t, (int, float)) or t <= 0:
            raise SchemaError("vddm.horizons", "horizons must be positive numbers")
    if not 0 <= vddm["eavesdrop_dropout"] < 1:
        raise SchemaError("vddm.eavesdrop_dropout", "must be in [0, 1)")

    infection = None
    if "infection" in raw:
        inf_raw = raw["infection"]
        sensor_ids = inf_raw.get("sensors", "all")
        if sensor_ids == "all":
            sensor_ids = all_sensor_ids(n_dg)
        elif sensor_ids == "dg":
            sensor_ids = dg_sensor_ids(n_dg)
        if not isinstance(sensor_ids, list):
            raise SchemaError("infection.sensors", "must be a list, 'all' or 'dg'")
        ctrl_ids = inf_raw.get("controllers", "all")
        if ctrl_ids == "all":
            ctrl_ids = controller_ids(n_dg)
        if not isinstance(ctrl_ids, list):
            raise SchemaError("infection.controllers", "must be a list or 'all'")
        try:
            validate_sensor_ids(sensor_ids, n_dg)
            validate_controller_ids(ctrl_ids, n_dg)
        except Exception as exc:
            raise SchemaError("infection", str(exc)) from exc
        infection = {
            "sensors": sorted(sensor_ids),
            "controllers": sorted(ctrl_ids),
            "pcc_access": _need(inf_raw, "pcc_access", bool, "infection",
                                default=False),
        }

    island_at = None
    if "island" in raw:
        island_at = _need(raw["island"], "open_at", float, "island")
        if island_at < 0:
            raise SchemaError("island.open_at", "must be nonnegative")

    attack = None
    if "attack" in raw:
        att_raw = raw["attack"]
        objective = _need(att_raw, "objective", str, "attack")
        if objective not in ("frequency", "voltage", "load_sharing",
                             "report_bias"):
            raise SchemaError("attack.objective", f"unknown objective '{objective}'")
        attack = {
            "objective": objective,
            "targets": [int(k) for k in _need(att_raw, "targets", list, "attack",
                                              default=[1])],
            "start": _need(att_raw, "start", float, "attack", default=5.0),
            "stop": _need(att_raw, "stop", float, "attack", default=duration),
            "mask": _need(att_raw, "mask", bool, "attack", default=False),
            "ramp": _need(att_raw, "ramp", float, "attack", default=0.5),
            "forge_fault": _need(att_raw, "forge_fault", bool, "attack",
                                 default=False),
            "fault_time": _need(att_raw, "fault_time", float, "attack",
                                default=1.0),
            "fault_duration": _need(att_raw, "fault_duration", float, "attack",
                                    default=0.1),
            "fault_multiple": _need(att_raw, "fault_multiple", float, "attack",
                                    default=3.0),
            # objective parameters (absolute or alpha_max-relative)
            "frequency_offset": att_raw.get("frequency_offset"),
            "alpha_max_fraction": att_raw.get("alpha_max_fraction"),
            "ramp_v_per_s": att_raw.get("ramp_v_per_s"),
            "scale": att_raw.get("scale"),
            "skew_ramp": _need(att_raw, "skew_ramp", float, "attack", default=1.0),
            "report_sensor": att_raw.get("report_sensor"),
            "report_delta": att_raw.get("report_delta"),
        }
        if attack["stop"] <= attack["start"]:
            raise SchemaError("attack.stop", "attack window must end after it starts")
        for k in attack["targets"]:
            if not 1 <= k <= n_dg:
                raise SchemaError("attack.targets", f"DG {k} does not exist")
        if objective == "frequency" and attack["frequency_offset"] is None \
                and attack["alpha_max_fraction"] is None:
            raise SchemaError("attack.frequency_offset",
                              "frequency objective needs an offset")
        if objective == "voltage" and attack["ramp_v_per_s"] is None:
            raise SchemaError("attack.ramp_v_per_s",
                              "voltage objective needs a ramp rate")
        if objective == "report_bias":
            if attack["report_sensor"] is None:
                raise SchemaError("attack.report_sensor",
                                  "report_bias objective needs a sensor id")
            if attack["report_delta"] is None and attack["alpha_max_fraction"] is None:
                raise SchemaError("attack.report_delta",
                                  "report_bias needs a delta or alpha_max fraction")
        if attack["mask"] or attack["forge_fault"]:
            if infection is None:
                raise SchemaError("infection",
                                  "attack with mask/forged fault needs an "
                                  "infection table")

    resolved = {
        "schema_version": SCHEMA_VERSION,
        "name": name,
        "duration": duration,
        "dt": dt,
        "seed": seed,
        "microgrid": microgrid,
        "sensors": sensors,
        "protection": protection,
        "detector": detector,
        "estimator": estimator,
        "vddm": vddm,
        "infection": infection,
        "island": ({"open_at": island_at} if island_at is not None else None),
        "attack": attack,
    }
    return Scenario(name=name, duration=duration, dt=dt, seed=seed,
                    microgrid=microgrid, sensors=sensors, protection=protection,
                    detector=detector, estimator=estimator, vddm=vddm,
                    infection=infection, attack=attack, island_at=island_at,
                    resolved=resolved)
