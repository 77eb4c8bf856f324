import sys

import numpy as np
import pytest
from hypothesis import settings

from fracheat.core import Field, SpaceTimeGrid

settings.register_profile("default", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("default")

# Reference torus used throughout: the bump below sits well inside one period.
L_REF, T_REF = 8.0, 4.0


def bump_values(grid: SpaceTimeGrid, center=(4.0, 2.0), radii=(1.5, 1.2)) -> np.ndarray:
    """``exp(-1/(1-r^2))`` with ``r`` the scaled distance from ``center`` in (x, t)."""
    X, T = grid.mesh()
    r2 = ((X - center[0]) / radii[0]) ** 2 + ((T - center[1]) / radii[1]) ** 2
    inside = r2 < 1
    out = np.zeros(grid.shape)
    out[inside] = np.exp(-1.0 / (1.0 - r2[inside]))
    return out


def bump_field(grid: SpaceTimeGrid, **kw) -> Field:
    return Field(grid, bump_values(grid, **kw), real=True)


def mode_field(grid: SpaceTimeGrid, kx: int = 1, kt: int = 1, phase: float = 0.0) -> Field:
    X, T = grid.mesh()
    return Field(grid, np.cos(2 * np.pi * kx * X / grid.L + 2 * np.pi * kt * T / grid.T + phase), real=True)


def mode_symbol(grid: SpaceTimeGrid, kx: int, kt: int, s: float) -> complex:
    """``(|xi|^2 - i tau)^s`` for the mode ``exp(i(2 pi kx x/L + 2 pi kt t/T))`` (tau = -omega)."""
    xi = 2 * np.pi * kx / grid.L
    omega = 2 * np.pi * kt / grid.T
    return complex(xi * xi + 1j * omega) ** s


def rel_l2(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(np.ravel(a - b)) / np.linalg.norm(np.ravel(b)))


@pytest.fixture
def ref_grid() -> SpaceTimeGrid:
    return SpaceTimeGrid(1, L_REF, 64, T_REF, 32)


@pytest.fixture
def small_grid() -> SpaceTimeGrid:
    return SpaceTimeGrid(1, L_REF, 16, T_REF, 8)


def heat_reference(f: Field, grid, top: np.ndarray, theta: float, substeps: int = 1) -> np.ndarray:
    """Independent monolithic solve of ``u_t = u_yy + u_xx`` on the nodes of ``grid``.

    Assembles the full periodic space-time system of the theta-scheme with
    3-point stencils (finite-volume form in ``y``) and solves it directly; used
    as the constant-coefficient reference when ``a = 0``.  ``top`` holds the
    Dirichlet values at ``y = Y_max`` on the base grid.
    """
    from scipy.sparse import csc_matrix, diags, identity, kron
    from scipy.sparse.linalg import spsolve

    from fracheat.extension import upsample_time

    b = grid.base
    y = grid.y_nodes
    J = grid.J
    Nx, Nt, h = b.Nx, b.Nt * substeps, b.ht / substeps
    dy = np.diff(y)
    m = J - 1
    vol = 0.5 * (y[2:] - y[:-2])
    Ay = diags([-1 / dy[1:m], 1 / dy[:m] + 1 / dy[1 : m + 1], -1 / dy[1:m]], [-1, 0, 1], shape=(m, m))
    Dx = diags([-np.ones(Nx - 1), 2 * np.ones(Nx), -np.ones(Nx - 1)], [-1, 0, 1], shape=(Nx, Nx)).tolil()
    Dx[0, -1] = Dx[-1, 0] = -1
    Dx = Dx.tocsr() / b.hx**2
    V = diags(vol)
    A = kron(identity(Nx), Ay) + kron(Dx, V)
    shift = diags([np.ones(Nt - 1)], [-1], shape=(Nt, Nt)).tolil()
    shift[0, -1] = 1
    Vx = kron(identity(Nx), V)
    big = kron(identity(Nt), Vx / h + theta * A) + kron(shift.tocsr(), -Vx / h + (1 - theta) * A)
    top = upsample_time(top, substeps)
    fv = upsample_time(f.values.real, substeps)
    bk = np.zeros((Nt, Nx, m))
    bk[:, :, 0] = (fv / dy[0]).T
    bk[:, :, -1] += (top / dy[m]).T
    rhs = theta * bk + (1 - theta) * np.roll(bk, 1, axis=0)
    u = spsolve(csc_matrix(big), rhs.ravel()).reshape(Nt, Nx, m)
    full = np.empty((Nx, J + 1, Nt))
    full[:, 0] = fv
    full[:, J] = top
    full[:, 1:J] = np.transpose(u, (1, 2, 0))
    return full[..., ::substeps]


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion that ran in this session."""
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.format_line(k))
