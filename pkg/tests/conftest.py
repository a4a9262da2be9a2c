import numpy as np
import pytest

from wbsde.flows import make_drift, simulate_flow, time_grid
from wbsde.measures import DiscreteMeasure

# criterion number -> (passed, detail), filled by the acceptance tests
CRITERIA: dict[int, tuple[bool, str]] = {}

DRIFT_CORPUS = [("zero", {}), ("constant", {"c": 0.5}), ("tanh", {}), ("sin-tanh", {}), ("piecewise", {})]


def base_measure() -> DiscreteMeasure:
    return DiscreteMeasure([-1.0, 0.2, 1.0], [0.3, 0.4, 0.3])


def flow_corpus(n_paths: int = 10_000, dt: float = 1e-2, T: float = 1.0, seed: int = 3, names=None):
    ts = time_grid(0.0, T, dt)
    out = []
    for i, (name, kw) in enumerate(DRIFT_CORPUS):
        if names is not None and name not in names:
            continue
        out.append(simulate_flow(make_drift(name, **kw), base_measure(), 0.0, ts, n_paths, seed=seed + i))
    return out


@pytest.fixture(scope="session")
def corpus():
    return flow_corpus()


@pytest.fixture(scope="session")
def small_corpus():
    return flow_corpus(n_paths=2000)


@pytest.fixture
def record():
    def _record(k: int, ok: bool, detail: str) -> None:
        CRITERIA[k] = (bool(ok), detail)
        print(f"criterion {k}: {'PASS' if ok else 'FAIL'} | {detail}")
    return _record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(CRITERIA):
        ok, detail = CRITERIA[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'} | {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
