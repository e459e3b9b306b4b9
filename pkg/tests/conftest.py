import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def disk_image(n=128, radius=20.0, level=200.0, background=20.0):
    """Smooth off-centre blob pattern used as a registration target."""
    y, x = np.mgrid[0:n, 0:n].astype(np.float64)
    img = np.full((n, n), background)
    for cx, cy, r, a in ((0.35, 0.4, radius, 1.0), (0.7, 0.3, radius / 2, 0.6), (0.55, 0.75, radius / 1.5, 0.8)):
        d2 = (x - cx * n) ** 2 + (y - cy * n) ** 2
        img += a * (level - background) * np.exp(-d2 / (2 * r * r))
    return img


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'} - {detail}")
