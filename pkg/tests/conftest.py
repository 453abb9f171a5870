import numpy as np
import pytest
import torch

from bifp.config import RunConfig
from bifp.synthetic import SyntheticSpec, generate

TINY = {
    "backbone.family": "tiny3d",
    "backbone.feature_dim": "16",
    "backbone.proj_hidden": "16",
    "backbone.proj_dim": "16",
    "backbone.width": "4",
    "augment.crop_size": "28",
    "partition.max_stride": "1",
    "train.batch_size": "8",
    "train.epochs": "2",
    "finetune.batch_size": "8",
    "finetune.stride": "1",
    "finetune.epochs": "1",
    "probe.batch_size": "8",
    "probe.epochs": "1",
}


def tiny_config(**overrides) -> RunConfig:
    values = dict(TINY)
    values.update({k.replace("__", "."): str(v) for k, v in overrides.items()})
    return RunConfig.from_flat(values)


@pytest.fixture
def tiny():
    return tiny_config


@pytest.fixture(scope="session")
def drift_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("drift")
    return generate(SyntheticSpec(n_clips=32, frames=40, size=32, velocity=0.5), out, seed=3)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


# -- acceptance summary --------------------------------------------------------

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (report.when != "call" and not report.failed):
        return
    entry = _CRITERIA.setdefault(mark.args[0], {"ok": True, "tests": []})
    entry["ok"] &= report.passed
    if report.when == "call":
        entry["tests"].append(item.name)
    detail = getattr(item, "acceptance_detail", None)
    if detail and report.when == "call":
        entry.setdefault("details", []).append(detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        entry = _CRITERIA[n]
        line = f"criterion {n}: {'PASS' if entry['ok'] else 'FAIL'}"
        if entry.get("details"):
            line += "  (" + "; ".join(entry["details"]) + ")"
        terminalreporter.write_line(line)
