import numpy as np
import pytest
import torch

from inpaintloc.backbone import FeatureCache
from inpaintloc.data import load_manifest
from inpaintloc.fixtures import make_toy_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def toy_manifest_path(tmp_path_factory):
    """The bundled 8-image fixture: 8 fake images with blob masks."""
    return make_toy_dataset(tmp_path_factory.mktemp("toy"), n_fake=8, seed=0)


@pytest.fixture(scope="session")
def toy_manifest(toy_manifest_path):
    return load_manifest(toy_manifest_path)


@pytest.fixture(scope="session")
def feature_cache(tmp_path_factory):
    return FeatureCache(tmp_path_factory.mktemp("features"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance bookkeeping ---------------------------------------------------

ACCEPTANCE = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        ACCEPTANCE[n] = (status, title, getattr(item, "criterion_note", ""))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, title, note = ACCEPTANCE[n]
        line = f"criterion {n}: {status} - {title}"
        terminalreporter.write_line(line + (f" ({note})" if note else ""))
