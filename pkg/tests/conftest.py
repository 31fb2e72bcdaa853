import numpy as np
import pytest

from capsdetect import datio, nets

_criteria: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_logreport(report):
    crit = getattr(report, "_criterion", None)
    if crit is None:
        return
    number, title = crit
    if report.when == "call" or report.outcome != "passed":
        prev = _criteria.get(number)
        if prev and prev[1] == "FAIL":
            return
        detail = ""
        if report.outcome != "passed" and report.longrepr is not None:
            detail = str(getattr(report.longrepr, "reprcrash", None) and report.longrepr.reprcrash.message
                         or report.longrepr).splitlines()[0][:160]
        _criteria[number] = (title, "PASS" if report.outcome == "passed" else "FAIL", detail)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result()._criterion = marker.args


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, status, detail = _criteria[number]
        line = f"criterion {number:2d} {status}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))


# ----------------------------------------------------------------- fixtures
@pytest.fixture(scope="session")
def digits():
    train = datio.load_digits("train")
    test = datio.load_digits("test")
    return train, test


@pytest.fixture(scope="session")
def tiny_models(digits):
    """One small model per architecture, trained briefly on the digits set."""
    train, _ = digits
    tr, val = datio.split(train, 0.1, seed=0)
    models = {}
    for arch in nets.ARCHITECTURES:
        m = nets.ModelBundle.create(nets.preset("tiny", arch), seed=0)
        nets.train(m, tr.images, tr.labels, epochs=5, batch_size=64, rng=np.random.default_rng(0))
        models[arch] = m
    return models, val


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
