import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=100,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# criterion number -> list of (passed, detail) parts, printed after the run
ACCEPTANCE: dict[int, list[tuple[bool, str]]] = {}


@pytest.fixture
def record():
    def _record(criterion: int, ok, detail: str) -> bool:
        ok = bool(ok)
        ACCEPTANCE.setdefault(criterion, []).append((ok, detail))
        print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[n]
        verdict = "PASS" if all(ok for ok, _ in parts) else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d}: {verdict}  " + "; ".join(d for _, d in parts))
