import numpy as np
import pytest

from binet.data import default_mnist_dir, load_mnist

_RESULTS: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    num, title = mark.args
    entry = _RESULTS.setdefault(num, {"title": title, "status": "PASS", "detail": []})
    if rep.skipped:
        entry["status"] = "SKIP"
        if isinstance(rep.longrepr, tuple):
            entry["detail"].append(str(rep.longrepr[-1]))
    elif rep.failed:
        entry["status"] = "FAIL"
    if rep.when == "call":
        entry["detail"] += [f"{k}={v}" for k, v in item.user_properties]


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_RESULTS):
        r = _RESULTS[num]
        line = f"criterion {num:>2} {r['status']:<4} {r['title']}"
        if r["detail"]:
            line += f"  [{', '.join(r['detail'])}]"
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def mnist_dir():
    d = default_mnist_dir()
    if d is None:
        pytest.skip("MNIST not found (set BINET_MNIST_DIR)")
    return d


@pytest.fixture(scope="session")
def mnist_loader(mnist_dir):
    cache = {}

    def load(n_train, n_test=None):
        key = (n_train, n_test)
        if key not in cache:
            cache[key] = load_mnist(mnist_dir, n_train, n_test)
        return cache[key]

    return load


@pytest.fixture
def rng():
    return np.random.default_rng(0)
