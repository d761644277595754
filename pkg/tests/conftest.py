import numpy as np
import pytest

from nvf.geometry import TriangleMesh

# filled by the acceptance tests, echoed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][3:])):
            terminalreporter.write_line(line)


def random_mesh(rng: np.random.Generator, n_faces: int, n_verts: int | None = None) -> TriangleMesh:
    """Triangle soup inside the unit cube with every face comfortably non-degenerate."""
    n_verts = n_verts or max(3, n_faces)
    verts = rng.uniform(-0.5, 0.5, (n_verts, 3))
    faces = []
    while len(faces) < n_faces:
        f = rng.choice(n_verts, 3, replace=False)
        a, b, c = verts[f]
        if 0.5 * np.linalg.norm(np.cross(b - a, c - a)) > 1e-4:
            faces.append(f)
    return TriangleMesh(verts, np.array(faces))


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function of an array, one entry at a time."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
