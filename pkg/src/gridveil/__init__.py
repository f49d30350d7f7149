"""Droop-controlled microgrid simulator with a process-level rootkit adversary."""

from importlib import resources
from pathlib import Path

__version__ = "0.1.0"


def bundled_scenario(name) -> Path:
    """Path of a bundled reference scenario (nominal, freq_attack, ...)."""
    base = resources.files(__name__) / "scenarios" / f"{name}.toml"
    return Path(str(base))


def bundled_scenarios():
    base = resources.files(__name__) / "scenarios"
    return sorted(p.name[:-5] for p in Path(str(base)).glob("*.toml"))
