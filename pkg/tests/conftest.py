"""Shared fixtures: reference runs, trained bundles, and settled plants.

The heavy artifacts (scenario runs, replica training) are session-scoped so
the acceptance suite and the module tests share them.
"""

import time

import pytest

import gridveil
from gridveil.plantmodel import settle
from gridveil.runner import run_scenario, simulate, train_model, write_artifacts
from gridveil.scenario import parse_scenario


def load_scenario(name, seed=None, rename=None):
    scn = parse_scenario(gridveil.bundled_scenario(name))
    if seed is not None:
        scn.seed = seed
        scn.resolved["seed"] = seed
    if rename is not None:
        scn.name = rename
        scn.resolved["name"] = rename
    return scn


@pytest.fixture(scope="session")
def out_root(tmp_path_factory):
    return tmp_path_factory.mktemp("runs")


@pytest.fixture(scope="session")
def nominal_run(out_root):
    scn = load_scenario("nominal")
    t0 = time.perf_counter()
    art = simulate(scn)
    wall = time.perf_counter() - t0
    report = write_artifacts(scn, art, out_root / "nominal")
    return {"scenario": scn, "artifacts": art, "report": report,
            "dir": out_root / "nominal", "wall_s": wall}


@pytest.fixture(scope="session")
def freq_attack_run(out_root):
    scn = load_scenario("freq_attack")
    report = run_scenario(scn, out_root / "freq_attack")
    return {"scenario": scn, "report": report, "dir": out_root / "freq_attack"}


@pytest.fixture(scope="session")
def volt_attack_run(out_root):
    scn = load_scenario("volt_attack")
    report = run_scenario(scn, out_root / "volt_attack")
    return {"scenario": scn, "report": report, "dir": out_root / "volt_attack"}


@pytest.fixture(scope="session")
def loadshare_attack_run(out_root):
    scn = load_scenario("loadshare_attack")
    report = run_scenario(scn, out_root / "loadshare_attack")
    return {"scenario": scn, "report": report,
            "dir": out_root / "loadshare_attack"}


@pytest.fixture(scope="session")
def train_trace_run(out_root):
    scn = load_scenario("vddm_train")
    report = run_scenario(scn, out_root / "vddm_train")
    return {"scenario": scn, "report": report, "dir": out_root / "vddm_train"}


@pytest.fixture(scope="session")
def heldout_trace_run(out_root):
    scn = load_scenario("vddm_train", seed=1234, rename="vddm_heldout")
    report = run_scenario(scn, out_root / "vddm_heldout")
    return {"scenario": scn, "report": report, "dir": out_root / "vddm_heldout"}


@pytest.fixture(scope="session")
def vddm_bundle(out_root, train_trace_run, heldout_trace_run):
    scn = load_scenario("vddm_train")
    bundle_path = out_root / "vddm.bundle.json"
    path, fid = train_model(
        scn, train_trace_run["dir"] / "telemetry.csv", bundle_path,
        eval_trace_path=heldout_trace_run["dir"] / "telemetry.csv")
    return {"scenario": scn, "path": path, "fidelity": fid}


@pytest.fixture(scope="session")
def stealth_masked_run(out_root, vddm_bundle):
    scn = load_scenario("stealth_masked")
    report = run_scenario(scn, out_root / "stealth_masked",
                          bundle_path=vddm_bundle["path"])
    return {"scenario": scn, "report": report, "dir": out_root / "stealth_masked"}


@pytest.fixture(scope="session")
def settled_plant():
    scn = load_scenario("nominal")
    return scn, settle(scn.build_microgrid(), duration=4.0, dt=scn.dt)
