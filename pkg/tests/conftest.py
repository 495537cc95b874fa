import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from emsi.mesh import Mesh, box_mesh, rectangle_mesh

settings.register_profile("emsi", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("emsi")


UNIT_SQUARE = """\
# two triangles
emsimesh 2 4 2 4
0 0
1 0
1 1
0 1
0 1 2 1
0 2 3 2
0 1 1
1 2 2
2 3 3
3 0 4
"""

UNIT_CUBE = """\
emsimesh 3 8 6 0
0 0 0
1 0 0
0 1 0
1 1 0
0 0 1
1 0 1
0 1 1
1 1 1
0 1 3 7 0
1 0 5 7 0
2 0 3 7 0
0 2 6 7 0
0 4 5 7 0
4 0 6 7 0
"""


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def unit_square_grid(n: int, region=None) -> Mesh:
    xs = np.linspace(0.0, 1.0, n + 1)
    return rectangle_mesh(xs, xs, region=region)


def block_in_cube(n: int = 4) -> Mesh:
    """Unit cube with the inner block [0.25, 0.75]^3 marked as region 1."""
    xs = np.linspace(0.0, 1.0, n + 1)

    def region(c):
        inside = np.all((c > 0.25) & (c < 0.75), axis=1)
        return np.where(inside, 1, 0)

    return box_mesh(xs, xs, xs, region=region)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
