import numpy as np
import pytest

from ebwm.nn import ModelConfig

_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        detail = getattr(item, "acceptance_detail", "")
        prev = _ACCEPTANCE.get(n)
        # a criterion with several tests passes only if all of them pass
        if prev is not None and prev[0] == "FAIL":
            status = "FAIL"
        _ACCEPTANCE[n] = (status, title, "; ".join(filter(None, [prev[2] if prev else "", detail])))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        status, title, detail = _ACCEPTANCE[n]
        line = f"criterion {n:>2} {status}: {title}"
        if detail:
            line += f" [{detail}]"
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(d_model=16, n_heads=2, n_layers=2, context_length=8, feature_dim=4,
                       dtype="float64", init_std=0.3)


@pytest.fixture
def tiny_discrete_cfg():
    return ModelConfig(d_model=16, n_heads=2, n_layers=1, context_length=8, mode="discrete",
                       vocab_size=256, feature_dim=None, dtype="float64", init_std=0.3)
