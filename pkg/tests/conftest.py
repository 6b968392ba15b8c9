import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from replift import datagen
from replift.skeleton import DEFAULT_SKELETON

settings.register_profile(
    "replift", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("replift")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def spec():
    return DEFAULT_SKELETON


def random_poses(rng, count, n=DEFAULT_SKELETON.n_joints, scale=300.0):
    return rng.normal(size=(count, 3, n)) * scale


def random_rotation(rng, count=None):
    R = datagen.random_rotations(rng, 1 if count is None else count)
    return R[0] if count is None else R


@pytest.fixture(scope="session")
def small_splits():
    cfg = datagen.SyntheticPoseConfig(seed=7, count=256, test_count=64)
    return datagen.make_splits(cfg)


# ---------------------------------------------------------------------------
# one pass/fail line per acceptance criterion in the terminal summary

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    # an expected failure that does fail is still a failed criterion
    failed = rep.failed or (rep.skipped and hasattr(rep, "wasxfail"))
    if (rep.when == "setup" and rep.failed) or rep.when == "call":
        detail = dict(item.user_properties).get("detail", "")
        _CRITERIA[number] = (title, "FAIL" if failed else "PASS", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[number]
        line = f"criterion {number:>2} {status}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
