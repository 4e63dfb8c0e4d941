import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from canadv import canlog, featurize, zoo  # noqa: E402


@pytest.fixture(scope="session")
def tiny_corpus():
    """Three small synthetic vehicles: {vehicle: (train, test)}."""
    out = {}
    for p in canlog.default_profiles(seed=5, frames_per_class=120):
        full = featurize.extract_features(canlog.synthesize(p), 1.0, p.vehicle_name)
        out[p.vehicle_name] = featurize.split(featurize.balance(full, 1), 0.8, 2)
    return out


@pytest.fixture(scope="session")
def tiny_models(tiny_corpus):
    """DNN and CNN per vehicle, briefly trained: {(arch, vehicle): TrainedModel}."""
    models = {}
    for arch, epochs in ((zoo.ModelArchitecture.DNN, 15), (zoo.ModelArchitecture.CNN, 4)):
        for v, (train, _) in tiny_corpus.items():
            models[(arch, v)] = zoo.train(arch, train, zoo.TrainConfig(epochs=epochs, seed=3))
    return models


_CRITERIA: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): test belongs to acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        _CRITERIA.setdefault(marker.args[0], []).append(rep.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        outcomes = _CRITERIA[n]
        if "failed" in outcomes:
            verdict = "FAIL"
        elif all(o == "skipped" for o in outcomes):
            verdict = "SKIP"
        else:
            verdict = "PASS"
        counts = ", ".join(f"{outcomes.count(o)} {o}" for o in ("passed", "failed", "skipped") if outcomes.count(o))
        terminalreporter.write_line(f"CRITERION {n}: {verdict} ({counts})")
