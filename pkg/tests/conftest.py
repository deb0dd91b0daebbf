import numpy as np
import pytest

from splatlab.core import FLAT2D, PERSPECTIVE3D, SceneModel
from splatlab.harness import tune_allocator

tune_allocator()


def random_flat_scene(rng, n, width, height, scale=(1.0, 6.0), margin=0.0):
    return SceneModel(
        FLAT2D,
        rng.uniform(-margin, [width + margin, height + margin], (n, 2)),
        rng.uniform(-3, 3, (n, 1)),
        np.log(rng.uniform(*scale, (n, 2))),
        rng.normal(0, 1.5, n),
        rng.uniform(0, 1, (n, 3)),
        depth=rng.uniform(0, 10, n),
    )


def random_3d_scene(rng, n, spread=0.5, scale=(0.05, 0.3)):
    return SceneModel(
        PERSPECTIVE3D,
        rng.normal(0, spread, (n, 3)),
        rng.normal(size=(n, 4)),
        np.log(rng.uniform(*scale, (n, 3))),
        rng.normal(0, 1.5, n),
        rng.uniform(0, 1, (n, 3)),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_acceptance: dict[str, tuple[str, list]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::" not in report.nodeid:
        return
    name = report.nodeid.split("::", 1)[1]
    if report.when == "call" or report.outcome != "passed":
        # a setup error or call failure overrides an earlier pass
        if report.when == "call" or name not in _acceptance:
            _acceptance[name] = (report.outcome, list(report.user_properties))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_acceptance):
        outcome, props = _acceptance[name]
        verdict = {"passed": "PASS", "skipped": "SKIP"}.get(outcome, "FAIL")
        detail = ", ".join(f"{k}={v:.3g}" if isinstance(v, float) else f"{k}={v}" for k, v in props)
        terminalreporter.write_line(f"{verdict} {name}" + (f"  [{detail}]" if detail else ""))
