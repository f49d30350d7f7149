"""Sensor registry: ids, noise levels, and per-step readings.

Sensor ids follow "dg<k>.<kind>" (k is the 1-based DG number, kind one of
freq/volt/p/q) plus "pcc.current" and "pcc.voltage". The canonical ordering of
any id collection is plain lexicographic sort; every consumer relies on it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import InvalidConfigError

DG_KINDS = ("freq", "volt", "p", "q")
PCC_SENSORS = ("pcc.current", "pcc.voltage")

DEFAULT_NOISE = {
    "freq": 0.05,        # Hz
    "volt": 0.5,         # V
    "p": 50.0,           # W
    "q": 50.0,           # var
    "pcc.current": 0.2,  # A
    "pcc.voltage": 0.5,  # V
}


def dg_sensor_id(dg, kind):
    return f"dg{dg}.{kind}"


def dg_sensor_ids(n_dg):
    """All DG-attached sensor ids in canonical order."""
    ids = [dg_sensor_id(k, kind) for k in range(1, n_dg + 1) for kind in DG_KINDS]
    return sorted(ids)


def all_sensor_ids(n_dg):
    return sorted(dg_sensor_ids(n_dg) + list(PCC_SENSORS))


def controller_id(dg):
    return f"dg{dg}.ctrl"


def controller_ids(n_dg):
    return sorted(controller_id(k) for k in range(1, n_dg + 1))


def parse_dg_sensor(sensor_id):
    """(dg index 0-based, kind) for a DG sensor id, else None for PCC ids."""
    if sensor_id in PCC_SENSORS:
        return None
    head, _, kind = sensor_id.partition(".")
    if not head.startswith("dg") or kind not in DG_KINDS:
        raise InvalidConfigError(f"unknown sensor id '{sensor_id}'")
    try:
        dg = int(head[2:])
    except ValueError:
        raise InvalidConfigError(f"unknown sensor id '{sensor_id}'") from None
    return dg - 1, kind


@dataclass
class SensorSuite:
    """Reads the plant into named channels with seeded Gaussian noise."""

    n_dg: int
    noise: dict

    def __post_init__(self):
        merged = dict(DEFAULT_NOISE)
        merged.update(self.noise or {})
        self.noise = merged
        self.ids = all_sensor_ids(self.n_dg)

    def sigma(self, sensor_id):
        if sensor_id in PCC_SENSORS:
            return float(self.noise[sensor_id])
        _, kind = parse_dg_sensor(sensor_id)
        return float(self.noise[kind])

    def sigmas(self, ids):
        return [self.sigma(s) for s in ids]

    def true_values(self, mg, pf):
        """Noise-free channel values from a microgrid state and its power flow."""
        vals = {}
        for i, s in enumerate(mg.dgs):
            k = i + 1
            vals[dg_sensor_id(k, "freq")] = s.omega
            vals[dg_sensor_id(k, "volt")] = s.v
            vals[dg_sensor_id(k, "p")] = s.p_filt
            vals[dg_sensor_id(k, "q")] = s.q_filt
        vals["pcc.current"] = abs(pf.i_pcc)
        vals["pcc.voltage"] = abs(pf.v_bus)
        return vals

    def read(self, mg, pf, rng):
        """One noisy sample of every channel; draws in canonical id order."""
        true = self.true_values(mg, pf)
        noisy = {}
        for sensor_id in self.ids:  # fixed draw order keeps runs reproducible
            noisy[sensor_id] = true[sensor_id] + self.sigma(sensor_id) * rng.standard_normal()
        return true, noisy


def validate_sensor_ids(ids, n_dg):
    known = set(all_sensor_ids(n_dg))
    for s in ids:
        if s not in known:
            raise InvalidConfigError(f"unknown sensor id '{s}'")


def validate_controller_ids(ids, n_dg):
    known = set(controller_ids(n_dg))
    for c in ids:
        if c not in known:
            raise InvalidConfigError(f"unknown controller id '{c}'")


def finite_or_raise(name, value):
    if not math.isfinite(value):
        raise InvalidConfigError(f"{name} must be finite")
    return value
