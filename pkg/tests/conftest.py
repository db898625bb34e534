import numpy as np
import pytest

from morphokit.fields import GridSpec, Transformation


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def smooth_displacement(grid: GridSpec, amplitude: float, seed: int = 0) -> Transformation:
    """Sum of a few sine modes vanishing on the boundary."""
    r = np.random.default_rng(seed)
    pts = grid.coordinates()
    lengths = grid.lengths
    comps = []
    for _ in range(grid.dim):
        acc = np.zeros(grid.shape)
        for _ in range(3):
            k = r.integers(1, 3, size=grid.dim)
            term = r.uniform(-1, 1)
            for b in range(grid.dim):
                term = term * np.sin(np.pi * k[b] * pts[b] / lengths[b])
            acc = acc + term
        comps.append(acc)
    comps = np.stack(comps)
    comps *= amplitude / np.max(np.abs(comps))
    comps[:, grid.boundary_mask()] = 0.0
    return Transformation(grid, comps)
