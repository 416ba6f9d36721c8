from collections import deque

import numpy as np
import pytest

from carotidseg.phantom import VesselSpec, generate_case


def bfs_components(mask: np.ndarray, eight: bool = True) -> int:
    """Plain flood-fill component count, independent of scipy.ndimage."""
    mask = np.asarray(mask, bool)
    seen = np.zeros_like(mask)
    h, w = mask.shape
    steps = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]
    if not eight:
        steps = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    n = 0
    for y in range(h):
        for x in range(w):
            if mask[y, x] and not seen[y, x]:
                n += 1
                seen[y, x] = True
                q = deque([(y, x)])
                while q:
                    cy, cx = q.popleft()
                    for dy, dx in steps:
                        ny, nx = cy + dy, cx + dx
                        if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            q.append((ny, nx))
    return n


@pytest.fixture
def straight_case():
    spec = VesselSpec(center=(16.0, 16.0), radius=3.0, wall_thickness=1.0)
    return generate_case(spec, dims=(32, 32, 32), spacing=(1, 1, 1), interval=4, noise_sigma=0.0)


@pytest.fixture
def drift_case():
    spec = VesselSpec(center=(32.0, 32.0), radius=4.0, wall_thickness=2.0,
                      drift_amplitude=(0.0, 6.0), drift_period=24.0)
    return generate_case(spec, dims=(32, 64, 64), spacing=(1, 1, 1), interval=4,
                         noise_sigma=0.03, seed=3)


@pytest.fixture
def stenotic_case():
    spec = VesselSpec(center=(32.0, 32.0), radius=4.5, wall_thickness=2.0,
                      drift_amplitude=(3.0, 5.0), drift_period=20.0,
                      stenosis_center=14.0, stenosis_width=3.0, stenosis_depth=0.5)
    return generate_case(spec, dims=(32, 64, 64), spacing=(1, 1, 1), interval=4,
                         noise_sigma=0.03, seed=5)


# --- acceptance summary ------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion."""
    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
