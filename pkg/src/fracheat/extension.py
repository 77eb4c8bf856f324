"""The local degenerate problem ``y^a u_t = div(y^a grad u)`` on the upper half-space.

Discretization: finite volumes on a graded mesh in the extra variable ``y``,
periodic finite differences (or a Fourier collocation operator) in ``x``, and
a theta-scheme in time run to a time-periodic state.  The conormal flux at
``y = 0`` recovers the fractional heat operator of the boundary data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded
from scipy.sparse import diags, identity, kron
from scipy.sparse.linalg import LinearOperator, cg, splu

from .core import (
    PROVENANCE_PREFIX,
    DomainError,
    Field,
    FracParams,
    NumericalError,
    ShapeError,
    SpaceTimeGrid,
    fmt,
)
from .fracop import apply_spectral, calibrate_neumann, correction_exponents, neumann_constant_exact
from .kernels import convolve_extension

_PROFILE_EPS = 1e-300


# --- grids and fields ----------------------------------------------------------


def grading_exponent(a: float) -> float:
    return max(2.0, 2.0 / (1.0 - max(a, 0.0)))


@dataclass(frozen=True, eq=False)
class ExtensionGrid:
    """Tensor grid ``base x y_nodes``.

    ``y_nodes`` start at 0 for a half-space grid.  A mirrored grid (produced by
    :func:`even_reflect`) holds the symmetric nodes ``-Y_max .. Y_max``.
    """

    base: SpaceTimeGrid
    y_nodes: np.ndarray
    mirrored: bool = False

    def __post_init__(self):
        y = np.array(self.y_nodes, dtype=float)
        if y.ndim != 1 or np.any(np.diff(y) <= 0):
            raise DomainError("y_nodes must be a strictly increasing 1-D array")
        if self.mirrored:
            if not np.array_equal(y, -y[::-1]) or len(y) % 2 == 0:
                raise DomainError("mirrored y_nodes must be symmetric about 0")
            half = len(y) // 2
        else:
            if y[0] != 0.0:
                raise DomainError("y_nodes must start at 0")
            half = len(y) - 1
        if half < 16:
            raise DomainError(f"need J >= 16 cells in y, got {half}")
        y.setflags(write=False)
        object.__setattr__(self, "y_nodes", y)

    @classmethod
    def graded(cls, base: SpaceTimeGrid, J: int = 64, Y_max: float = 1.0, a: float = 0.0) -> "ExtensionGrid":
        """``y_j = Y_max (j/J)^g`` with ``g = max(2, 2/(1-a+))``."""
        if not Y_max > 0:
            raise DomainError("Y_max must be positive")
        j = np.arange(J + 1, dtype=float)
        return cls(base, Y_max * (j / J) ** grading_exponent(a))

    @property
    def J(self) -> int:
        return len(self.y_nodes) // 2 if self.mirrored else len(self.y_nodes) - 1

    @property
    def Y_max(self) -> float:
        return float(self.y_nodes[-1])

    @property
    def trace_index(self) -> int:
        return self.J if self.mirrored else 0

    @property
    def shape(self) -> tuple[int, ...]:
        b = self.base
        return (b.Nx,) * b.n + (len(self.y_nodes), b.Nt)

    @property
    def y_axis(self) -> int:
        return self.base.n


@dataclass(frozen=True, eq=False)
class ExtensionField:
    """Real values on an :class:`ExtensionGrid`, indexed ``(x..., y, t)``."""

    grid: ExtensionGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != self.grid.shape:
            raise ShapeError(f"values shape {v.shape} does not match grid shape {self.grid.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def height(self, j: int) -> Field:
        """Slice at node ``j`` as a core :class:`Field`."""
        return Field(self.grid.base, np.take(self.values, j, axis=self.grid.y_axis), real=True)

    def trace(self) -> Field:
        return self.height(self.grid.trace_index)

    def to_csv(self) -> str:
        g = self.grid
        b = g.base
        lines = [
            f"# extgrid {b.n} {b.Nx} {b.Nt} {g.J}",
            f"# L {fmt(b.L)} T {fmt(b.T)} mirrored {int(g.mirrored)}",
            "# y " + " ".join(fmt(y) for y in g.y_nodes),
        ]
        for idx in np.ndindex(*self.values.shape):
            lines.append(",".join(str(i) for i in idx) + "," + fmt(self.values[idx]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "ExtensionField":
        rows = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith(PROVENANCE_PREFIX)]
        head = rows[0].split()
        if head[:2] != ["#", "extgrid"]:
            raise ShapeError("missing '# extgrid' header")
        n, Nx, Nt, _ = (int(v) for v in head[2:6])
        meta = rows[1].split()
        L, T, mirrored = float(meta[2]), float(meta[4]), bool(int(meta[6]))
        y = np.array([float(v) for v in rows[2].split()[2:]])
        grid = ExtensionGrid(SpaceTimeGrid(n, L, Nx, T, Nt), y, mirrored=mirrored)
        values = np.zeros(grid.shape)
        for ln in rows[3:]:
            parts = ln.split(",")
            values[tuple(int(v) for v in parts[:-1])] = float(parts[-1])
        return cls(grid, values)


# --- weighted finite-volume stencil ---------------------------------------------


def weight_integral(lo, hi, a: float, power: int = 0) -> np.ndarray:
    """``int_lo^hi |y|^a y^power dy`` for intervals not straddling 0."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    e = a + power + 1.0
    sign = np.where(hi <= 0, -1.0, 1.0) ** power
    alo, ahi = np.abs(lo), np.abs(hi)
    lo_, hi_ = np.minimum(alo, ahi), np.maximum(alo, ahi)
    return sign * (hi_**e - lo_**e) / e


@dataclass(frozen=True, eq=False)
class WeightedStencil:
    """Finite-volume coefficients in ``y`` for the weight ``y^a``.

    ``mu[j]`` couples nodes ``j`` and ``j+1``.  The default ``interface="flux"``
    uses ``1 / int y^-a dy`` over the interval, which makes the flux of the
    one-dimensional profile ``y^(1-a)`` exact; ``"midpoint"`` uses
    ``y_mid^a / dy``.  ``volumes[j]`` is ``int y^a dy`` over the dual cell of
    node ``j`` (a half cell at both ends), and ``spatial = volumes / hx^2``.
    """

    grid: ExtensionGrid
    a: float
    interface: str = "flux"
    mu: np.ndarray = field(init=False, repr=False)
    volumes: np.ndarray = field(init=False, repr=False)
    spatial: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.grid.mirrored:
            raise DomainError("stencil is defined on half-space grids")
        y = self.grid.y_nodes
        a = self.a
        lo, hi = y[:-1], y[1:]
        if self.interface == "flux":
            mu = (1.0 - a) / (hi ** (1.0 - a) - lo ** (1.0 - a))
        elif self.interface == "midpoint":
            mu = (0.5 * (lo + hi)) ** a / (hi - lo)
        else:
            raise DomainError(f"unknown interface rule {self.interface!r}")
        edges = np.concatenate([[0.0], 0.5 * (lo + hi), [y[-1]]])
        vol = weight_integral(edges[:-1], edges[1:], a)
        if not (np.all(np.isfinite(mu)) and np.all(mu > 0) and np.all(vol > 0)):
            raise NumericalError("non-positive finite-volume coefficients")
        for arr in (mu, vol):
            arr.setflags(write=False)
        sp = vol / self.grid.base.hx**2
        sp.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "volumes", vol)
        object.__setattr__(self, "spatial", sp)


# --- the kernel representation ----------------------------------------------------


def poisson_extend(f: Field, p: FracParams, grid: ExtensionGrid) -> ExtensionField:
    """``u(., y_j, .) = Gamma_{y_j} * f`` at every positive height; row 0 holds ``f``."""
    if f.grid != grid.base:
        raise ShapeError("f does not live on the base grid")
    if grid.mirrored:
        raise DomainError("poisson_extend needs a half-space grid")
    rows = [f.values.real]
    for y in grid.y_nodes[1:]:
        rows.append(convolve_extension(f, float(y), p).values.real)
    return ExtensionField(grid, np.stack(rows, axis=grid.y_axis))


# --- the PDE solver ---------------------------------------------------------------

SCHEMES = {"backward-euler": 1.0, "crank-nicolson": 0.5}


def upsample_time(values: np.ndarray, factor: int) -> np.ndarray:
    """Trigonometric interpolation of periodic samples (last axis) onto a ``factor``-times finer grid."""
    if factor == 1:
        return np.array(values, dtype=float)
    Nt = values.shape[-1]
    M = Nt * factor
    c = np.fft.fft(values, axis=-1)
    C = np.zeros(values.shape[:-1] + (M,), dtype=complex)
    h = Nt // 2
    C[..., :h] = c[..., :h]
    C[..., M - h + 1 :] = c[..., h + 1 :]
    C[..., h] = 0.5 * c[..., h]
    C[..., M - h] = 0.5 * c[..., h]
    return np.fft.ifft(C, axis=-1).real * factor


@dataclass(frozen=True)
class SolveReport:
    periods: int
    periodicity_residual: float
    max_cg_iterations: int


class _SpatialOperator:
    """``-Laplacian`` in x: 3-point periodic differences or Fourier collocation."""

    def __init__(self, base: SpaceTimeGrid, kind: str):
        self.n = base.n
        self.kind = kind
        self.hx = base.hx
        if kind == "fd":
            self.diag = 2.0 * base.n / base.hx**2
        elif kind == "spectral":
            self.xi2 = base.xi_squared()[..., 0]
            self.diag = float(self.xi2.mean())
        else:
            raise DomainError(f"unknown x operator {kind!r}")

    def __call__(self, u: np.ndarray) -> np.ndarray:
        axes = tuple(range(self.n))
        if self.kind == "fd":
            out = 2.0 * self.n * u
            for ax in axes:
                out = out - np.roll(u, 1, axis=ax) - np.roll(u, -1, axis=ax)
            return out / self.hx**2
        sym = self.xi2.reshape(self.xi2.shape + (1,) * (u.ndim - self.n))
        return np.fft.ifftn(sym * np.fft.fftn(u, axes=axes), axes=axes).real

    def symbol(self, base: SpaceTimeGrid) -> np.ndarray:
        """Eigenvalues on the discrete Fourier modes, shape ``(Nx,)*n``."""
        if self.kind == "spectral":
            return self.xi2
        xi = base.xi_axis()
        one = (2.0 - 2.0 * np.cos(xi * self.hx)) / self.hx**2
        return one if self.n == 1 else one[:, None] + one[None, :]

    def sparse(self, Nx: int):
        e = np.ones(Nx)
        if self.kind != "fd":
            raise DomainError("sparse assembly is available for the 'fd' x operator only")
        D = diags([-e[:-1], 2 * e, -e[:-1]], [-1, 0, 1], shape=(Nx, Nx), format="lil")
        D[0, Nx - 1] = -1.0
        D[Nx - 1, 0] = -1.0
        D = D.tocsr() / self.hx**2
        if self.n == 1:
            return D
        I = identity(Nx, format="csr")
        return kron(D, I) + kron(I, D)


def _periodic_fourier_solve(
    data: np.ndarray,
    top_vals: np.ndarray | None,
    V: np.ndarray,
    diag_y: np.ndarray,
    off_y: np.ndarray,
    mu_bottom: float,
    mu_top: float,
    kappa: np.ndarray,
    theta: float,
    h: float,
) -> np.ndarray:
    """Exact time-periodic solution of the theta-scheme, one tridiagonal solve per ``(xi, omega)``.

    With ``u_k = U exp(i omega k h)`` the scheme
    ``V (u_{k+1} - u_k)/h + A (theta u_{k+1} + (1-theta) u_k) = theta b_{k+1} + (1-theta) b_k``
    becomes ``(sigma V + A) U = B`` with ``sigma = (z - 1) / (h (theta z + 1 - theta))``,
    ``z = exp(i omega h)``.  Frequencies where the denominator vanishes (the
    crank-nicolson Nyquist bin) carry no periodic response.  Returns samples of
    shape ``(x..., m, nsub)``.
    """
    n = kappa.ndim
    nsub = data.shape[-1]
    m = V.size
    bottom = np.fft.fftn(data)
    topc = np.fft.fftn(top_vals) if top_vals is not None else None
    omega = 2 * np.pi * np.fft.fftfreq(nsub, d=h)
    z = np.exp(1j * omega * h)
    den = theta * z + 1.0 - theta
    live = np.abs(den) > 1e-12
    sigma = np.where(live, (z - 1.0) / (h * np.where(live, den, 1.0)), 0.0)
    out = np.zeros(kappa.shape + (m, nsub), dtype=complex)
    kap = kappa[..., None]
    for k in np.flatnonzero(live):
        d = (sigma[k] + kap) * V + diag_y  # (x..., m)
        r = np.zeros(kappa.shape + (m,), dtype=complex)
        r[..., 0] = mu_bottom * bottom[..., k]
        if topc is not None:
            r[..., m - 1] += mu_top * topc[..., k]
        # Thomas algorithm along y, vectorized over the spatial frequencies
        cp = np.empty_like(d)
        dp = np.empty_like(d)
        cp[..., 0] = off_y[0] / d[..., 0] if m > 1 else 0.0
        dp[..., 0] = r[..., 0] / d[..., 0]
        for j in range(1, m):
            piv = d[..., j] - off_y[j - 1] * cp[..., j - 1]
            if j < m - 1:
                cp[..., j] = off_y[j] / piv
            dp[..., j] = (r[..., j] - off_y[j - 1] * dp[..., j - 1]) / piv
        sol = out[..., k]
        sol[..., m - 1] = dp[..., m - 1]
        for j in range(m - 2, -1, -1):
            sol[..., j] = dp[..., j] - cp[..., j] * sol[..., j + 1]
    axes = tuple(range(n)) + (n + 1,)
    return np.fft.ifftn(out, axes=axes).real


def solve_extension_pde(
    f: Field,
    p: FracParams,
    grid: ExtensionGrid,
    *,
    scheme: str = "crank-nicolson",
    substeps: int = 4,
    x_operator: str = "spectral",
    top: str = "dirichlet",
    solver: str = "fourier",
    rtol: float = 1e-13,
    periodicity_tol: float = 1e-10,
    max_periods: int = 400,
    interface: str = "flux",
    initial: ExtensionField | None = None,
    return_report: bool = False,
):
    """Time-periodic solution of ``y^a u_t = div(y^a grad u)`` with ``u(., 0, .) = f``.

    The theta-scheme (``scheme``) advances ``substeps`` steps per grid interval and
    is repeated over whole periods until the state at the start of a period is
    reproduced to ``periodicity_tol`` (relative to ``max |f|``).  The top row is
    either Dirichlet data from :func:`poisson_extend` or a no-flux wall.

    ``x_operator="spectral"`` (default) uses the Fourier symbol of ``-Lap``;
    ``"fd"`` uses 3-point differences, which together with
    ``scheme="backward-euler"`` gives an M-matrix and hence a discrete maximum
    and comparison principle.

    ``solver="fourier"`` (default) computes the discrete time-periodic solution
    directly: the coefficients do not depend on ``x`` or ``t``, so the scheme
    decouples into one tridiagonal system in ``y`` per space-time frequency.
    The transient solvers march whole periods instead, each implicit step solved
    with conjugate gradients preconditioned by exact tridiagonal solves along
    ``y`` (``solver="cg"``) or by a sparse LU factorization reused for every step
    (``solver="direct"``, ``fd`` only).  Crank-nicolson damps stiff modes only
    weakly, so the transient solvers may need many periods with that scheme.
    """
    if f.grid != grid.base:
        raise ShapeError("f does not live on the base grid")
    if grid.mirrored:
        raise DomainError("solve on a half-space grid")
    if scheme not in SCHEMES:
        raise DomainError(f"unknown scheme {scheme!r}")
    if top not in ("dirichlet", "neumann"):
        raise DomainError(f"unknown top closure {top!r}")
    if substeps < 1:
        raise DomainError("substeps must be >= 1")
    theta = SCHEMES[scheme]
    base = grid.base
    st = WeightedStencil(grid, p.a, interface)
    Kx = _SpatialOperator(base, x_operator)
    J = grid.J
    h = base.ht / substeps
    nsub = base.Nt * substeps
    yax = base.n

    data = upsample_time(f.values.real, substeps)  # (x..., nsub)
    fsup = max(1.0, float(np.abs(f.values).max()))
    if top == "dirichlet":
        top_vals = upsample_time(convolve_extension(f, grid.Y_max, p).values.real, substeps)
        hi_idx = J  # unknowns 1..J-1
    else:
        top_vals = None
        hi_idx = J + 1  # unknowns 1..J
    m = hi_idx - 1
    V = st.volumes[1:hi_idx]
    mu = st.mu
    mu_lo = mu[0:m]  # coupling to the node below
    mu_hi = np.array(mu[1 : m + 1]) if top == "dirichlet" else np.concatenate([mu[1:m], [0.0]])
    vshape = (1,) * base.n + (m,)
    Vb = V.reshape(vshape)
    mlo = mu_lo.reshape(vshape)
    mhi = mu_hi.reshape(vshape)

    def apply_A(u: np.ndarray) -> np.ndarray:
        """Operator on interior unknowns with zero boundary values; u shape (x..., m)."""
        out = (mlo + mhi) * u
        below = np.zeros_like(u)
        below[..., 1:] = u[..., :-1]
        above = np.zeros_like(u)
        above[..., :-1] = u[..., 1:]
        out -= mlo * below + mhi * above
        return out + Vb * Kx(u)

    def boundary(k: int) -> np.ndarray:
        b = np.zeros((base.Nx,) * base.n + (m,))
        b[..., 0] = mu[0] * data[..., k]
        if top_vals is not None:
            b[..., m - 1] += mu[m] * top_vals[..., k]
        return b

    if solver == "fourier":
        diag_y = mu_lo + mu_hi
        samples = _periodic_fourier_solve(
            data, top_vals, V, diag_y, -np.asarray(mu[1:m]), mu[0], mu[m] if top == "dirichlet" else 0.0,
            Kx.symbol(base), theta, h,
        )[..., ::substeps]
        report = SolveReport(0, 0.0, 0)
    else:
        xshape = (base.Nx,) * base.n + (m,)
        size = int(np.prod(xshape))
        lhs = LinearOperator((size, size), matvec=lambda v: (Vb / h * v.reshape(xshape) + theta * apply_A(v.reshape(xshape))).ravel(), dtype=float)
        # line preconditioner: exact solve of the y-coupling in every x column, with
        # the x operator reduced to its diagonal
        band = np.zeros((3, m))
        band[1] = V / h + theta * (mu_lo + mu_hi + V * Kx.diag)
        band[0, 1:] = -theta * mu[1:m]
        band[2, :-1] = -theta * mu[1:m]

        def line_solve(v: np.ndarray) -> np.ndarray:
            cols = v.reshape(-1, m).T
            return solve_banded((1, 1), band, cols).T.ravel()

        precond = LinearOperator((size, size), matvec=line_solve, dtype=float)
        lu = None
        if solver == "direct":
            Ky = diags([-mu[1:m], mu_lo + mu_hi, -mu[1:m]], [-1, 0, 1], shape=(m, m), format="csr")
            Ix = identity(base.Nx**base.n, format="csr")
            A = kron(Ix, Ky) + kron(Kx.sparse(base.Nx), diags(V))
            lu = splu((diags(np.tile(V, base.Nx**base.n)) / h + theta * A).tocsc())
        elif solver != "cg":
            raise DomainError(f"unknown solver {solver!r}")

        iters = [0]

        def solve_step(rhs: np.ndarray, guess: np.ndarray) -> np.ndarray:
            if lu is not None:
                return lu.solve(rhs.ravel()).reshape(xshape)
            count = [0]

            def cb(_):
                count[0] += 1

            sol, info = cg(lhs, rhs.ravel(), x0=guess.ravel(), rtol=rtol, atol=0.0, maxiter=20 * size, M=precond, callback=cb)
            if info != 0:
                res = float(np.linalg.norm(lhs.matvec(sol) - rhs.ravel()) / max(np.linalg.norm(rhs), _PROFILE_EPS))
                raise NumericalError("conjugate gradients did not converge", residual=res, iterations=count[0])
            iters[0] = max(iters[0], count[0])
            return sol.reshape(xshape)

        if initial is not None:
            state = np.take(initial.values, 0, axis=-1)[..., 1:hi_idx].copy()
        elif top == "dirichlet":
            state = np.take(poisson_extend(Field(base, np.take(f.values.real, [0], axis=-1).repeat(base.Nt, axis=-1), real=True), p, grid).values, 0, axis=-1)[..., 1:hi_idx].copy()
        else:
            state = np.repeat(data[..., :1], m, axis=-1)

        samples = np.empty(xshape + (base.Nt,))

        def run_period(start: np.ndarray) -> np.ndarray:
            state = start.copy()
            b_old = boundary(0)
            for k in range(nsub):
                if k % substeps == 0:
                    samples[..., k // substeps] = state
                b_new = boundary((k + 1) % nsub)
                rhs = Vb / h * state + theta * b_new
                if theta < 1.0:
                    rhs += (1.0 - theta) * (b_old - apply_A(state))
                state = solve_step(rhs, state)
                b_old = b_new
            return state

        residual = math.inf
        periods = 0
        while periods < max_periods:
            end = run_period(state)
            periods += 1
            residual = float(np.abs(end - state).max()) / fsup
            state = end
            if residual < periodicity_tol:
                break
        else:
            raise NumericalError("time-periodic state not reached", residual=residual, periods=periods)
        report = SolveReport(periods, residual, iters[0])

    full = np.empty(grid.shape)
    idx = [slice(None)] * full.ndim
    idx[yax] = 0
    full[tuple(idx)] = f.values.real
    idx[yax] = slice(1, hi_idx)
    full[tuple(idx)] = np.moveaxis(samples, -2, yax)
    if top == "dirichlet":
        idx[yax] = J
        full[tuple(idx)] = convolve_extension(f, grid.Y_max, p).values.real
    out = ExtensionField(grid, full)
    if return_report:
        return out, report
    return out


def slab_mass(u: ExtensionField, a: float, interface: str = "flux") -> np.ndarray:
    """``sum_j V_j u_j`` summed over x (times ``hx^n``) for every time sample, nodes ``j >= 1``."""
    st = WeightedStencil(u.grid, a, interface)
    base = u.grid.base
    w = st.volumes[1:].reshape((1,) * base.n + (-1, 1))
    interior = np.take(u.values, np.arange(1, u.grid.J + 1), axis=base.n)
    return (w * interior).sum(axis=tuple(range(base.n + 1))) * base.hx**base.n


# --- Neumann data -------------------------------------------------------------------


def neumann_trace(
    u: ExtensionField,
    p: FracParams,
    *,
    method: str = "richardson",
    heights: int = 6,
    terms: int = 3,
    neumann_constant: float | None = None,
    interface: str = "flux",
) -> Field:
    """Calibrated conormal derivative ``C lim -(u(y) - u(0)) / y^(1-a)`` at ``y = 0``.

    ``method="richardson"`` fits the difference quotients at the ``heights``
    lowest positive nodes against the expansion in ``y^(2-2s), y^2, ...``
    (least squares with ``terms`` correction terms).  ``method="flux"`` uses the
    finite-volume balance of the bottom half cell,
    ``-y^a u_y(0) = -mu_0 (u_1 - u_0) + V_0 (d_t - Lap) u_0``, divided by ``2s``.
    ``C`` defaults to the calibration used by the extension route.
    """
    g = u.grid
    if g.mirrored:
        raise DomainError("neumann_trace needs a half-space field")
    s = p.s
    y = g.y_nodes
    f = u.trace()
    C = neumann_constant if neumann_constant is not None else calibrate_neumann(p, g.base)
    if method == "richardson":
        usable = int(np.sum((y > 0) & (y < 0.25 * g.Y_max)))
        if usable < 3 or heights < 3:
            raise NumericalError("need at least three heights below Y_max/4", usable=usable)
        k = min(heights, usable)
        ys = y[1 : k + 1]
        terms = min(terms, k - 1)
        ex = correction_exponents(s, terms)
        scale = ys[-1]
        Vm = np.column_stack([np.ones(k)] + [(ys / scale) ** e for e in ex])
        w = np.linalg.pinv(Vm)[0]
        acc = np.zeros(g.base.shape)
        for c, j, yj in zip(w, range(1, k + 1), ys):
            acc += c * (-(u.height(j).values.real - f.values.real) / yj ** (2.0 * s))
        if not np.all(np.isfinite(acc)):
            raise NumericalError("Neumann extrapolation diverged")
        return Field(g.base, C * acc, real=True)
    if method == "flux":
        st = WeightedStencil(g, p.a, interface)
        heat = _heat_operator(f)
        flux = -st.mu[0] * (u.height(1).values.real - f.values.real) + st.volumes[0] * heat
        return Field(g.base, C * flux / (2.0 * s), real=True)
    raise DomainError(f"unknown Neumann method {method!r}")


def _heat_operator(f: Field) -> np.ndarray:
    from .fracop import apply_power

    return apply_power(f, 1.0).values.real


# --- reflection and weak form ----------------------------------------------------------


def even_reflect(u: ExtensionField) -> ExtensionField:
    """Extend to ``y < 0`` by ``u(x, -y, t) = u(x, y, t)``; reflecting a mirrored field undoes it."""
    g = u.grid
    yax = g.y_axis
    if g.mirrored:
        J = g.J
        half = np.take(u.values, np.arange(J, 2 * J + 1), axis=yax)
        return ExtensionField(ExtensionGrid(g.base, g.y_nodes[J:]), half)
    y = g.y_nodes
    ym = np.concatenate([-y[:0:-1], y])
    below = np.flip(np.take(u.values, np.arange(1, g.J + 1), axis=yax), axis=yax)
    vals = np.concatenate([below, u.values], axis=yax)
    return ExtensionField(ExtensionGrid(g.base, ym, mirrored=True), vals)


def smooth_profile(z) -> np.ndarray:
    """``exp(-1/(1-z^2))`` on ``|z| < 1``, zero outside."""
    z = np.asarray(z, dtype=float)
    out = np.zeros_like(z)
    m = np.abs(z) < 1
    out[m] = np.exp(-1.0 / (1.0 - z[m] ** 2))
    return out


def smooth_profile_derivative(z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    out = np.zeros_like(z)
    m = np.abs(z) < 1
    zm = z[m]
    out[m] = np.exp(-1.0 / (1.0 - zm**2)) * (-2.0 * zm / (1.0 - zm**2) ** 2)
    return out


@dataclass(frozen=True)
class TestBump:
    """Product bump ``prod_k rho((X_k - c_k)/r_k)`` in ``(x..., y, t)``."""

    center: tuple[float, ...]
    radii: tuple[float, ...]

    __test__ = False  # not a pytest class

    def __post_init__(self):
        if len(self.center) != len(self.radii) or any(r <= 0 for r in self.radii):
            raise DomainError("bump needs one positive radius per coordinate")

    def factors(self, k: int, coord: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        z = (coord - self.center[k]) / self.radii[k]
        return smooth_profile(z), smooth_profile_derivative(z) / self.radii[k]


def _periodic_offset(x: np.ndarray, c: float, L: float) -> np.ndarray:
    return (x - c + 0.5 * L) % L - 0.5 * L + c


def _spectral_derivative(samples: np.ndarray, period: float) -> np.ndarray:
    N = len(samples)
    k = 2 * np.pi * np.fft.fftfreq(N, d=period / N)
    k[N // 2] = 0.0
    return np.fft.ifft(1j * k * np.fft.fft(samples)).real


def weak_residual(u: ExtensionField, theta: TestBump, p: FracParams) -> float:
    """Absolute value of the weak form with ``lambda = |y|^a`` and ``a_ij = |y|^a delta_ij``.

    Evaluates ``int int |y|^a grad u . grad theta - int int |y|^a u theta_t`` plus the
    two time-boundary terms, over one full period ``[0, T]``: the boundary terms
    ``int |y|^a u theta`` at ``t = T`` and ``t = 0`` coincide by periodicity and
    cancel.

    Quadrature: rectangle rule on the periodic ``(x, t)`` grid, where the ``x``
    and ``t`` derivatives of ``theta`` are taken spectrally from its samples (so
    summation by parts is exact for grid functions).  In ``y`` each cell carries
    its exact weight ``int |y|^a dy``; ``u`` is linearly interpolated and
    ``theta`` sampled at the cell's weighted centroid, and ``u_y`` is the cell
    difference quotient.
    """
    g = u.grid
    base = g.base
    n = base.n
    if len(theta.center) != n + 2:
        raise DomainError(f"test bump needs {n + 2} coordinates")
    a = p.a
    y = g.y_nodes
    cy, ry = theta.center[n], theta.radii[n]
    if cy - ry < y[0] or cy + ry > y[-1]:
        raise DomainError("test bump leaves the y range of the grid")
    if not g.mirrored and cy - ry < 0:
        raise DomainError("test bump crosses y = 0 on a half-space grid")
    if any(r >= 0.5 * base.L for r in theta.radii[:n]) or theta.radii[-1] >= 0.5 * base.T:
        raise DomainError("test bump wider than half a period")

    lo, hi = y[:-1], y[1:]
    W = weight_integral(lo, hi, a)
    ybar = weight_integral(lo, hi, a, power=1) / W
    frac = (ybar - lo) / (hi - lo)

    xfac = []
    for k in range(n):
        xk = _periodic_offset(base.x_axis(), theta.center[k], base.L)
        v = theta.factors(k, xk)[0]
        xfac.append((v, _spectral_derivative(v, base.L)))
    yv, yd = theta.factors(n, ybar)
    tv = theta.factors(n + 1, _periodic_offset(base.t_axis(), theta.center[-1], base.T))[0]
    td = _spectral_derivative(tv, base.T)

    vals = u.values
    u_lo = np.take(vals, np.arange(len(y) - 1), axis=n)
    u_hi = np.take(vals, np.arange(1, len(y)), axis=n)
    cell_shape = (1,) * n + (-1, 1)
    ubar = u_lo + frac.reshape(cell_shape) * (u_hi - u_lo)
    uy = (u_hi - u_lo) / (hi - lo).reshape(cell_shape)
    wcell = W.reshape(cell_shape)

    def outer(*parts):
        out = parts[0]
        for q in parts[1:]:
            out = np.multiply.outer(out, q)
        return out

    xv = [v for v, _ in xfac]
    total = (wcell * uy * outer(*xv, yd, tv)).sum()
    for k in range(n):
        parts = [xfac[i][1] if i == k else xfac[i][0] for i in range(n)]
        uk = _spectral_derivative_axis(ubar, base.L, k)
        total += (wcell * uk * outer(*parts, yv, tv)).sum()
    total -= (wcell * ubar * outer(*xv, yv, td)).sum()
    return abs(total * base.hx**n * base.ht)


def _spectral_derivative_axis(values: np.ndarray, period: float, axis: int) -> np.ndarray:
    N = values.shape[axis]
    k = 2 * np.pi * np.fft.fftfreq(N, d=period / N)
    k[N // 2] = 0.0
    shape = [1] * values.ndim
    shape[axis] = N
    return np.fft.ifft(1j * k.reshape(shape) * np.fft.fft(values, axis=axis), axis=axis).real


# --- data whose operator vanishes on a patch --------------------------------------------


def zero_set_patch(
    grid: SpaceTimeGrid,
    p: FracParams,
    sources: list[tuple[tuple[float, ...], tuple[float, ...], float]],
) -> Field:
    """Band-limited ``f`` with ``(d_t - Lap)^s f = h`` for ``h = sum w_k bump_k``.

    The source weights must sum to zero (so ``h`` has zero mean up to the
    bumps' equal masses when radii coincide); ``f`` is obtained by dividing
    ``h`` by the symbol away from the zero mode.  Wherever all source bumps
    vanish the operator of ``f`` vanishes.
    """
    xs = grid.mesh()
    h = np.zeros(grid.shape)
    for center, radii, weight in sources:
        term = np.ones(grid.shape)
        for k, c in enumerate(center):
            period = grid.L if k < grid.n else grid.T
            z = _periodic_offset(xs[k], c, period) - c
            term *= smooth_profile(z / radii[k])
        h += weight * term
    hf = Field(grid, h, real=True)
    hhat = hf.hat()
    if abs(hhat.flat[0]) > 1e-12 * max(1.0, np.abs(hhat).max()):
        raise DomainError("sources must have zero total mass")
    sym = apply_spectral_symbol(grid, p)
    fhat = np.zeros_like(hhat)
    nz = sym != 0
    fhat[nz] = hhat[nz] / sym[nz]
    return Field.from_hat(grid, fhat, real=True)


def apply_spectral_symbol(grid: SpaceTimeGrid, p: FracParams) -> np.ndarray:
    from .fracop import Multiplier

    return Multiplier(p, grid).table


__all__ = [
    "ExtensionGrid",
    "ExtensionField",
    "WeightedStencil",
    "SolveReport",
    "TestBump",
    "poisson_extend",
    "solve_extension_pde",
    "neumann_trace",
    "even_reflect",
    "weak_residual",
    "slab_mass",
    "zero_set_patch",
    "upsample_time",
    "weight_integral",
    "smooth_profile",
    "grading_exponent",
    "neumann_constant_exact",
    "apply_spectral",
]
