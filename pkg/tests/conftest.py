import json
import re
import time
from dataclasses import dataclass
from pathlib import Path

import pytest

from hybridinv import pipeline as pl

FIXTURES = Path(__file__).parent / "fixtures"

CRITERIA = {
    1: "NNLS matches enumeration oracle and KKT on 500 instances",
    2: "fingerprinting equals double-loop oracle on 50 voxels",
    3: "exact recovery of noiseless in-dictionary voxels",
    4: "stage-1 residual <= fingerprinting residual on every test voxel",
    5: "backprop matches central differences",
    6: "split branches are independent",
    7: "accuracy trends on the desk test set",
    8: "inference time ordering and scaling",
    9: "rerun from manifest reproduces CSV outputs",
    10: "Rician noise statistics",
}


@pytest.fixture(scope="session")
def calibration():
    return json.loads((FIXTURES / "calibration.json").read_text())


@dataclass
class DeskRun:
    cfg: object
    train: object
    test: object
    stage1: dict
    fingerprint: dict
    hybrid: dict
    full: object
    reports: dict
    seconds: float


@pytest.fixture(scope="session")
def desk_run():
    """The default desk-scale experiment, run once through the library API."""
    t0 = time.perf_counter()
    cfg = pl.ExperimentConfig()
    train = pl.gen_dataset(cfg, "train")
    test = pl.gen_dataset(cfg, "test")
    model, _ = pl.train_hybrid(cfg, train, pl.stage1_dataset(cfg, train))
    stage1, fp, hyb, reports = {}, {}, {}, {}
    for scn in cfg.scenarios:
        stage1[scn] = pl.stage1_dataset(cfg, test, scn)
        hyb[scn] = pl.predict_hybrid(cfg, model, test, stage1[scn], scn)
        fp[scn] = pl.run_fingerprint(cfg, test, scn)
        reports["hybrid", scn] = pl.evaluate(hyb[scn], test, cfg)
        reports["fingerprint", scn] = pl.evaluate(fp[scn], test, cfg)
    _, _, full, reports["full", "n/a"] = pl.run_full(cfg, train, test)
    return DeskRun(cfg, train, test, stage1, fp, hyb, full, reports, time.perf_counter() - t0)


_outcomes = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)", report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    ok = report.passed or (report.when != "call" and not report.failed)
    if report.when == "call" or report.failed:
        prev = _outcomes.get(n, True)
        _outcomes[n] = prev and ok


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, text in CRITERIA.items():
        if n in _outcomes:
            status = "PASS" if _outcomes[n] else "FAIL"
        else:
            status = "NOT RUN"
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {text}")
