import numpy as np
import pytest

from lgseg.catalog import UNLABELED
from lgseg.scene import NONE, Scene
from lgseg.synthetic import SyntheticSpec, generate_corpus, synthetic_catalog

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    number, title = marker
    ok = report.passed if report.when == "call" else not report.failed
    prev = _CRITERIA.get(number, (title, True))
    _CRITERIA[number] = (title, prev[1] and ok)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        report.criterion = mark.args
        if report.when == "call":
            status = "PASS" if report.passed else "FAIL"
            print(f"\nCRITERION {mark.args[0]:>2} {status}  {mark.args[1]}")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok = _CRITERIA[number]
        terminalreporter.write_line(f"CRITERION {number:>2} {'PASS' if ok else 'FAIL'}  {title}")


@pytest.fixture(scope="session")
def small_catalog():
    return synthetic_catalog(8)


@pytest.fixture(scope="session")
def small_corpus(small_catalog):
    spec = SyntheticSpec(n_categories=8, extent=(3.0, 3.0), density=600.0, objects_per_scene=8.0)
    scenes, log = generate_corpus(spec, small_catalog, 4, 3)
    return scenes, log


def toy_scene(rng, n=200, n_inst=4, n_cat=5, unlabeled_frac=0.1):
    """Random valid scene with dense instance ids and some unlabeled points."""
    pos = rng.uniform(0, 2, (n, 3))
    inst = rng.integers(0, n_inst, n)
    cat_of = rng.integers(0, n_cat, n_inst)
    sem = cat_of[inst]
    unl = rng.random(n) < unlabeled_frac
    sem = np.where(unl, UNLABELED, sem)
    inst = np.where(unl, NONE, inst)
    used = np.unique(inst[inst != NONE])
    remap = np.full(n_inst, -1)
    remap[used] = np.arange(len(used))
    inst = np.where(inst == NONE, NONE, remap[np.where(inst == NONE, 0, inst)])
    col = rng.integers(0, 256, (n, 3))
    return Scene(pos, col, sem, inst)
