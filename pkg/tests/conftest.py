import numpy as np
import pytest
import torch

from modlens.rasterdata import SynthConfig, generate_synthetic


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth_small")
    cfg = SynthConfig(num_samples=24, height=32, width=32, seed=3, val_fraction=0.25)
    return generate_synthetic(cfg, root)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): numbered acceptance criterion")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    expected_failure = hasattr(report, "wasxfail")
    if report.skipped and not expected_failure:
        return
    if report.when == "call" or (report.when == "setup" and (report.failed or expected_failure)):
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        # an xfail-marked criterion that fails is reported as skipped; it is still a FAIL here
        passed = report.passed and not (expected_failure and report.skipped)
        item.config._criteria[mark.args[0]] = (mark.args[1], passed, detail)


def pytest_terminal_summary(terminalreporter, config):
    criteria = getattr(config, "_criteria", {})
    if not criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(criteria):
        title, passed, detail = criteria[number]
        line = f"criterion {number} {'PASS' if passed else 'FAIL'}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
