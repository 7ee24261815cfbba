import json
import time
from pathlib import Path

import numpy as np
import pytest

from stepquant.diffusion import Architecture, DenoiserParams

FIXTURES = Path(__file__).parent / "oracles" / "fixtures.json"


@pytest.fixture(scope="session")
def oracle():
    return json.loads(FIXTURES.read_text())


def params_from_lists(emb_dim, hidden, weights, biases, data_dim=2):
    arch = Architecture(data_dim=data_dim, emb_dim=emb_dim, hidden=tuple(hidden))
    return DenoiserParams(arch, [np.array(w, dtype=np.float64) for w in weights],
                          [np.array(b, dtype=np.float64) for b in biases])


@pytest.fixture(scope="session")
def pretrained():
    """The default pipeline's full-precision checkpoint (seed 0), trained once per session."""
    from stepquant.harness import pipeline
    from stepquant.harness.config import ExperimentConfig

    start = time.perf_counter()
    ckpt, losses = pipeline.train(ExperimentConfig(seed=0))
    return {"checkpoint": ckpt, "losses": losses, "seconds": time.perf_counter() - start}


# -- acceptance reporting -----------------------------------------------------

CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.fixture
def detail(request):
    """Lets an acceptance test attach a one-line measurement to its summary line."""
    marker = request.node.get_closest_marker("criterion")
    entry = CRITERIA.setdefault(marker.args[0], {"title": marker.args[1]})

    def note(text):
        entry["detail"] = text

    return note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and not report.failed):
        return
    entry = CRITERIA.setdefault(marker.args[0], {"title": marker.args[1]})
    entry["passed"] = report.passed and entry.get("passed", True)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        entry = CRITERIA[number]
        status = "PASS" if entry.get("passed") else "FAIL"
        line = f"criterion {number:2d} {status}  {entry['title']}"
        if entry.get("detail"):
            line += f"  [{entry['detail']}]"
        terminalreporter.write_line(line)
