"""Three evaluators of the fractional heat operator and a brute-force oracle.

Fourier convention: a field is a sum of modes ``exp(i(xi.x - tau t))`` and the
operator multiplies each by ``(|xi|^2 - i tau)^s``.  In FFT terms ``tau = -omega``
where ``omega`` is the usual angular frequency, so ``lam = |xi|^2 + i omega`` and
``s = 1`` gives exactly ``d/dt - Laplacian``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

from .core import (
    DomainError,
    Field,
    FracParams,
    NumericalError,
    RouteReport,
    SpaceTimeGrid,
    trig_interpolate,
)
from .kernels import convolve_extension, extension_symbol, gamma, symbol_on_grid

ROUTES = ("spectral", "singular", "extension")


# --- spectral route ----------------------------------------------------------


def _power_symbol(lam: np.ndarray, s: float) -> np.ndarray:
    lam = np.asarray(lam, dtype=complex)
    out = np.zeros_like(lam)
    nz = lam != 0
    out[nz] = lam[nz] ** s
    return out


@dataclass(frozen=True, eq=False)
class Multiplier:
    """``m(xi, tau) = (|xi|^2 - i tau)^s`` tabulated on the FFT layout of a grid."""

    params: FracParams
    grid: SpaceTimeGrid
    table: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "table", _multiplier_table(self.grid, self.params.s))

    @property
    def tau(self) -> np.ndarray:
        return -self.grid.omega()


def _multiplier_table(grid: SpaceTimeGrid, s: float) -> np.ndarray:
    return symbol_on_grid(grid, lambda lam: _power_symbol(lam, s))


def apply_power(f: Field, s: float) -> Field:
    """Multiply by ``(|xi|^2 - i tau)^s`` for any ``s > 0``.

    ``apply_spectral`` restricts ``s`` to (0,1); this entry point also admits
    ``s = 1`` (where the operator is ``d/dt - Laplacian``) and sums of exponents.
    """
    if not s > 0:
        raise DomainError("exponent must be positive")
    return Field.from_hat(f.grid, _multiplier_table(f.grid, s) * f.hat(), real=f.real)


def apply_spectral(f: Field, p: FracParams) -> Field:
    """Apply ``(d/dt - Laplacian)^s`` by multiplication with its symbol on the torus."""
    return apply_power(f, p.s)


# --- hypersingular route -----------------------------------------------------


def reciprocal_gamma_neg(p: FracParams) -> float:
    """``1/Gamma(-s)``; negative on (0,1)."""
    return 1.0 / gamma(-p.s)


@dataclass(frozen=True)
class SingularQuadRule:
    """Graded lag quadrature for ``int_0^T_cut (...) tau'^(-1-s) dtau'``.

    Panel edges are ``T_cut (k/K)^grading``; each panel carries ``gauss``
    Gauss-Legendre points except the first, which uses Gauss-Jacobi nodes for
    the weight ``tau'^(-s)``.  ``R_cut`` is the spatial truncation, in units of
    the heat-kernel width ``sqrt(tau')``, used by the brute-force oracle.
    """

    T_cut: float
    grading: float
    K: int = 200
    gauss: int = 6
    R_cut: float = 12.7

    def __post_init__(self):
        if not self.T_cut > 0:
            raise DomainError("T_cut must be positive")
        if self.grading < 1:
            raise DomainError("grading exponent must be >= 1")
        if self.K < 1 or self.gauss < 1:
            raise DomainError("K and gauss must be positive")

    @classmethod
    def default(cls, p: FracParams, T_cut: float, K: int = 200) -> "SingularQuadRule":
        return cls(T_cut=T_cut, grading=max(2.0, 2.0 / (1.0 - p.s)), K=K)

    @classmethod
    def for_grid(cls, p: FracParams, grid: SpaceTimeGrid, T_cut: float | None = None) -> "SingularQuadRule":
        """Default rule with ``K`` large enough to resolve the fastest mode of ``grid``.

        Panels at lag ``u`` have relative width ``grading/k`` with
        ``k = K (u/T_cut)^(1/grading)``; ``K`` is chosen so that ``k >= 2*grading``
        at ``u = 0.1/|lam|_max``.
        """
        T_cut = grid.T if T_cut is None else T_cut
        grading = max(2.0, 2.0 / (1.0 - p.s))
        lam_max = float(np.abs(grid.heat_symbol_argument()).max())
        K = int(math.ceil(2 * grading * (T_cut * lam_max / 0.1) ** (1.0 / grading)))
        return cls(T_cut=T_cut, grading=grading, K=max(200, K))

    def refined(self) -> "SingularQuadRule":
        return SingularQuadRule(self.T_cut, self.grading, 2 * self.K, self.gauss, self.R_cut)

    def edges(self) -> np.ndarray:
        return self.T_cut * (np.arange(self.K + 1) / self.K) ** self.grading

    def jacobi_edge(self) -> int:
        """Index of the edge closing the Jacobi panel.

        Graded panels near zero have end ratios up to ``2^grading``; they are
        merged into the singular panel until consecutive edges differ by at most
        a factor two, where Gauss-Legendre is accurate again.
        """
        k0 = int(math.ceil(1.0 / (2.0 ** (1.0 / self.grading) - 1.0)))
        return max(1, min(k0, self.K // 2))

    def nodes(self, s: float) -> tuple[np.ndarray, np.ndarray, int]:
        """Lag nodes and weights for ``int g(u) u^(-1-s) du``.

        Weights already include ``u^(-1-s)``.  The first ``gauss`` nodes belong
        to the Jacobi panel, whose weights integrate ``g(u)/u`` against ``u^(-s)``;
        that count is returned so callers can divide by ``u`` there.
        """
        e = self.edges()
        k0 = self.jacobi_edge()
        xg, wg = roots_legendre(self.gauss)
        a, b = e[k0:-1], e[k0 + 1 :]
        mid, half = 0.5 * (a + b), 0.5 * (b - a)
        u_rest = (mid[:, None] + half[:, None] * xg[None, :]).ravel()
        w_rest = (half[:, None] * wg[None, :]).ravel() * u_rest ** (-1.0 - s)
        xj, wj = roots_jacobi(self.gauss, 0.0, -s)
        u1 = e[k0]
        u_first = 0.5 * u1 * (1.0 + xj)
        w_first = (0.5 * u1) ** (1.0 - s) * wj
        return np.concatenate([u_first, u_rest]), np.concatenate([w_first, w_rest]), self.gauss


_TAIL_STEP = 0.1


def lag_tail(lam, s: float, T_cut: float) -> np.ndarray:
    """``int_{T_cut}^inf exp(-lam u) u^(-1-s) du`` for ``Re lam >= 0``.

    The ray ``u = T_cut + rho exp(-i arg lam)`` makes the exponential real and
    decaying; the remaining integral is taken by the trapezoidal rule in ``log rho``.
    """
    lam = np.asarray(lam, dtype=complex)
    flat = lam.ravel()
    out = np.empty(flat.shape, dtype=complex)
    zero = flat == 0
    out[zero] = T_cut ** (-s) / s
    nz = ~zero
    if np.any(nz):
        lz = flat[nz]
        mag = np.abs(lz)
        rot = np.exp(-1j * np.angle(lz))
        w_lo = min(-math.log(mag.max()), math.log(T_cut)) - 40.0
        w_hi = math.log(60.0 / mag.min())
        w = np.arange(w_lo, w_hi + _TAIL_STEP, _TAIL_STEP)
        rho = np.exp(w)
        base = T_cut + rho[None, :] * rot[:, None]
        integrand = rho[None, :] * np.exp(-mag[:, None] * rho[None, :]) * base ** (-1.0 - s)
        out[nz] = np.exp(-lz * T_cut) * rot * _TAIL_STEP * integrand.sum(axis=1)
    return out.reshape(lam.shape)


def singular_symbol(lam, p: FracParams, rule: SingularQuadRule) -> np.ndarray:
    """Per-mode value of the hypersingular integral with prefactor ``-1/Gamma(-s)``.

    Near field: graded quadrature of ``(1 - exp(-lam u)) u^(-1-s)`` on
    ``[0, T_cut]``.  Far field: the local term integrates in closed form to
    ``T_cut^(-s)/s`` and the heat-flow term is :func:`lag_tail`.
    """
    s = p.s
    lam = np.asarray(lam, dtype=complex)
    flat = lam.ravel()
    u, w, nj = rule.nodes(s)
    diff = -np.expm1(-np.outer(flat, u))
    diff[:, :nj] /= u[None, :nj]
    near = diff @ w
    far = rule.T_cut ** (-s) / s - lag_tail(flat, s, rule.T_cut)
    return (-reciprocal_gamma_neg(p) * (near + far)).reshape(lam.shape)


def apply_singular(
    f: Field,
    p: FracParams,
    rule: SingularQuadRule | None = None,
    tol: float = 1e-6,
) -> Field:
    """Evaluate the parabolic hypersingular integral on the torus.

    The inner spatial integral against ``W`` is the heat semigroup, applied
    exactly on the torus together with the time lag, so each mode carries
    ``exp(-lam u)``; what remains is a one-dimensional lag integral evaluated
    with ``rule`` and once more with ``rule.refined()``.  The two must agree
    to ``tol`` in relative L2 norm, otherwise :class:`NumericalError` is raised.

    The prefactor is ``-1/Gamma(-s) > 0`` with the difference ``f(x,t) - f(x',t')``;
    this is the sign for which the integral reproduces the multiplier.
    """
    grid = f.grid
    if rule is None:
        rule = SingularQuadRule.for_grid(p, grid)
    fhat = f.hat()
    coarse = symbol_on_grid(grid, lambda lam: singular_symbol(lam, p, rule)) * fhat
    fine = symbol_on_grid(grid, lambda lam: singular_symbol(lam, p, rule.refined())) * fhat
    den = max(np.linalg.norm(fine), 1e-300)
    gap = float(np.linalg.norm(fine - coarse) / den)
    if gap > tol:
        raise NumericalError(
            "hypersingular quadrature not converged",
            coarse=Field.from_hat(grid, coarse, real=f.real),
            fine=Field.from_hat(grid, fine, real=f.real),
            relative_gap=gap,
        )
    return Field.from_hat(grid, fine, real=f.real)


# --- extension (Dirichlet-to-Neumann) route ----------------------------------


def correction_exponents(s: float, count: int) -> list[float]:
    """Exponents of the small-height expansion of ``(u(y) - f) / y^(2s)``.

    The extension symbol is ``A(y^2 lam) - k y^(2s) B(y^2 lam)`` with ``A, B``
    power series, so after division the corrections are ``y^(2j - 2s)`` and
    ``y^(2j)``, ``j >= 1``; the leading one is ``y^(2 - 2s)``.
    """
    exps: list[float] = []
    j = 1
    while len(exps) < count:
        exps.extend([2 * j - 2 * s, 2.0 * j])
        j += 1
    return exps[:count]


def richardson_weights(ys, s: float, terms: int | None = None) -> np.ndarray:
    """Weights ``c_k`` with ``sum c_k D(y_k) ~ D(0)``.

    Least-squares fit of ``D(y) = D0 + sum_j c_j y^e_j`` using
    :func:`correction_exponents`; with ``terms = len(ys) - 1`` it interpolates.
    """
    ys = np.asarray(ys, dtype=float)
    if terms is None:
        terms = len(ys) - 1
    if terms < 1 or terms > len(ys) - 1:
        raise DomainError("need at least one more probe height than correction terms")
    scale = ys.max()
    exps = correction_exponents(s, terms)
    V = np.column_stack([np.ones_like(ys)] + [(ys / scale) ** e for e in exps])
    pinv = np.linalg.pinv(V)
    if not np.all(np.isfinite(pinv)):
        raise NumericalError("Richardson system is singular", heights=ys.tolist())
    return pinv[0]


def default_probes(grid: SpaceTimeGrid, count: int = 6, z_max: float = 0.5) -> list[float]:
    """Geometric probe heights with ``y_0 sqrt(|lam|_max) = z_max``."""
    lam_max = float(np.abs(grid.heat_symbol_argument()).max())
    y0 = z_max / math.sqrt(lam_max)
    return [y0 * 2.0**-k for k in range(count)]


def _check_probes(y_probe) -> list[float]:
    ys = [float(y) for y in y_probe]
    if len(ys) < 2 or any(y <= 0 for y in ys) or any(b >= a for a, b in zip(ys, ys[1:])):
        raise DomainError("y_probe must hold >= 2 positive, strictly decreasing heights")
    return ys


def raw_flux_quotient(f: Field, p: FracParams, y: float) -> Field:
    """``-(u(y) - f) / y^(1-a)`` with ``u(y) = Gamma_y * f``."""
    u = convolve_extension(f, y, p)
    return (u - f) * (-(y ** (-2.0 * p.s)))


def extrapolated_flux(f: Field, p: FracParams, y_probe) -> Field:
    ys = _check_probes(y_probe)
    cw = richardson_weights(ys, p.s)
    acc = np.zeros(f.grid.shape, dtype=complex)
    for c, y in zip(cw, ys):
        acc += c * raw_flux_quotient(f, p, y).values
    out = Field(f.grid, acc.real if f.real else acc, real=f.real)
    if not np.all(np.isfinite(out.values)):
        raise NumericalError("flux extrapolation diverged", heights=ys)
    return out


def neumann_constant_exact(p: FracParams) -> float:
    """``4^s Gamma(1+s) / Gamma(1-s)``: the constant the calibration should recover.

    Follows from the small-argument expansion of the extension symbol,
    ``G = 1 - Gamma(1-s)/Gamma(1+s) (y^2 lam / 4)^s + ...``.
    """
    return 4.0**p.s * gamma(1.0 + p.s) / gamma(1.0 - p.s)


def fit_constant(raw: Field, target: Field) -> float:
    """Least-squares real ``C`` minimizing ``|C raw - target|``."""
    num = np.vdot(raw.values, target.values).real
    den = np.vdot(raw.values, raw.values).real
    if den == 0:
        raise NumericalError("cannot calibrate on a field with zero flux")
    return float(num / den)


def calibration_mode(grid: SpaceTimeGrid, kx: int = 1, kt: int = 1) -> Field:
    xs = grid.mesh()
    phase = 2 * np.pi * kx * xs[0] / grid.L + 2 * np.pi * kt * xs[-1] / grid.T
    return Field(grid, np.cos(phase), real=True)


@lru_cache(maxsize=64)
def _calibrate_cached(s: float, grid: SpaceTimeGrid, probes: tuple[float, ...], kx: int, kt: int) -> float:
    from .core import make_params

    p = make_params(s)
    mode = calibration_mode(grid, kx, kt)
    return fit_constant(extrapolated_flux(mode, p, probes), apply_spectral(mode, p))


def calibrate_neumann(
    p: FracParams,
    grid: SpaceTimeGrid,
    y_probe=None,
    calibration_field: Field | None = None,
) -> float:
    """Fit the Neumann constant ``C(s)`` against the spectral route.

    By default the fit uses the fixed mode ``cos(2 pi x/L + 2 pi t/T)`` and is
    cached per ``(s, grid, probes)``; passing ``calibration_field`` fits on that
    field instead.
    """
    probes = tuple(_check_probes(y_probe if y_probe is not None else default_probes(grid)))
    if calibration_field is None:
        return _calibrate_cached(p.s, grid, probes, 1, 1)
    return fit_constant(
        extrapolated_flux(calibration_field, p, probes), apply_spectral(calibration_field, p)
    )


def apply_extension_route(
    f: Field,
    p: FracParams,
    y_probe=None,
    neumann_constant: float | None = None,
) -> Field:
    """Evaluate the operator as the Neumann trace of the extension ``u = Gamma_y * f``.

    Forms ``D(y) = -(u(y) - f)/y^(1-a)`` at each probe height, extrapolates to
    ``y = 0`` and scales by the Neumann constant (calibrated when not given).
    """
    ys = _check_probes(y_probe if y_probe is not None else default_probes(f.grid))
    if neumann_constant is None:
        neumann_constant = calibrate_neumann(p, f.grid, ys)
    return extrapolated_flux(f, p, ys) * neumann_constant


# --- brute-force oracle ------------------------------------------------------


def _slice_coefficients(f: Field, t: float) -> np.ndarray:
    """Spatial Fourier coefficients of ``f(., t)`` at an arbitrary time (trig interpolation in t)."""
    grid = f.grid
    coef = np.fft.fft(f.values, axis=-1) / grid.Nt
    k = np.fft.fftfreq(grid.Nt, d=1.0 / grid.Nt)
    ph = np.exp(2j * np.pi * k * t / grid.T)
    ph[grid.Nt // 2] = math.cos(2 * np.pi * (grid.Nt // 2) * t / grid.T)
    slab = coef @ ph
    return np.fft.fftn(slab) / grid.Nx**grid.n


def _eval_spatial(coef: np.ndarray, grid: SpaceTimeGrid, pts: np.ndarray) -> np.ndarray:
    """Trig interpolant with coefficients ``coef`` at points ``pts`` (shape (m, n))."""
    k = np.fft.fftfreq(grid.Nx, d=1.0 / grid.Nx)
    nyq = grid.Nx // 2
    mats = []
    for d in range(grid.n):
        ph = np.exp(2j * np.pi * np.outer(pts[:, d], k) / grid.L)
        ph[:, nyq] = np.cos(2 * np.pi * pts[:, d] * nyq / grid.L)
        mats.append(ph)
    if grid.n == 1:
        return mats[0] @ coef
    return np.einsum("pi,pj,ij->p", mats[0], mats[1], coef)


def _gauss_panel_nodes(lo: float, hi: float, width: float, m: int) -> tuple[np.ndarray, np.ndarray]:
    npan = max(1, int(math.ceil((hi - lo) / width)))
    e = np.linspace(lo, hi, npan + 1)
    xg, wg = roots_legendre(m)
    mid, half = 0.5 * (e[:-1] + e[1:]), 0.5 * (e[1:] - e[:-1])
    return (mid[:, None] + half[:, None] * xg).ravel(), (half[:, None] * wg).ravel()


def _heat_average(f: Field, x: np.ndarray, t: float, u: float, R_cut: float, m: int) -> complex:
    """``int f(x - x', t) W(x', u) dx'`` by tensor Gauss quadrature over R^n."""
    grid = f.grid
    coef = _slice_coefficients(f, t)
    R = R_cut * math.sqrt(u)
    width = min(grid.hx, 2.0 * math.sqrt(u))
    if R <= grid.L / 2:
        z, wz = _gauss_panel_nodes(-R, R, width, m)
        kern = np.exp(-z * z / (4 * u)) / math.sqrt(4 * np.pi * u)
    else:
        # one period against the periodized Gaussian
        z, wz = _gauss_panel_nodes(-grid.L / 2, grid.L / 2, width, m)
        reps = int(math.ceil(R / grid.L)) + 1
        shifts = grid.L * np.arange(-reps, reps + 1)
        zz = z[:, None] + shifts[None, :]
        kern = (np.exp(-zz * zz / (4 * u)) / math.sqrt(4 * np.pi * u)).sum(axis=1)
    w1 = wz * kern
    if grid.n == 1:
        pts = (x[0] - z)[:, None]
        vals = _eval_spatial(coef, grid, pts)
        return complex(np.dot(w1, vals))
    Z1, Z2 = np.meshgrid(z, z, indexing="ij")
    pts = np.column_stack([(x[0] - Z1).ravel(), (x[1] - Z2).ravel()])
    vals = _eval_spatial(coef, grid, pts)
    return complex(np.dot(np.outer(w1, w1).ravel(), vals))


def oracle_singular(
    f: Field,
    p: FracParams,
    point,
    rule: SingularQuadRule | None = None,
    periods: int | None = None,
    gauss_x: int = 8,
) -> complex:
    """Brute-force hypersingular integral at one point ``(x..., t)``.

    Lags ``u`` in ``[0, T_cut]`` use the graded rule; ``[T_cut, periods*T]``
    uses uniform Gauss panels no wider than the time step.  For each lag the
    spatial integral against ``W(., u)`` is a direct tensor Gauss quadrature of
    the trigonometric interpolant of ``f``.  Past ``U = periods*T`` the local
    term integrates to ``f(x,t) U^(-s)/s``; the heat term has become its
    spatial mean ``g(t - u)`` (up to ``exp(-|xi|^2 U)``), whose tail is
    integrated by parts twice using periodic antiderivatives.

    Slow; meant only as ground truth at a handful of points.
    """
    grid = f.grid
    s = p.s
    *xs, t = (float(c) for c in point)
    x = np.asarray(xs)
    if rule is None:
        rule = SingularQuadRule.default(p, T_cut=grid.T, K=100)
    if periods is None:
        # nonzero spatial modes must have decayed below ~1e-11 by the horizon
        xi_min = 2 * np.pi / grid.L
        periods = max(3, int(math.ceil(25.0 / (xi_min**2 * grid.T))))
    U = periods * grid.T
    if U < rule.T_cut:
        raise DomainError("oracle horizon must cover the near-field cutoff")
    f0 = complex(trig_interpolate(f, tuple(np.array([c]) for c in (*xs, t)))[0])
    u_near, w_near, nj = rule.nodes(s)
    u_far, w_far = _gauss_panel_nodes(rule.T_cut, U, grid.ht, rule.gauss)
    w_far = w_far * u_far ** (-1.0 - s)
    total = 0.0 + 0.0j
    for idx, (u, w) in enumerate(zip(np.concatenate([u_near, u_far]), np.concatenate([w_near, w_far]))):
        diff = f0 - _heat_average(f, x, t - u, u, rule.R_cut, gauss_x)
        if idx < nj:
            diff /= u
        total += w * diff
    # tail beyond U
    spatial_mean = f.values.mean(axis=tuple(range(grid.n)))
    om = grid.omega_axis()
    ghat = np.fft.fft(spatial_mean) / grid.Nt
    mean = ghat[0]
    g1 = np.zeros_like(ghat)
    g2 = np.zeros_like(ghat)
    nzo = om != 0
    g1[nzo] = ghat[nzo] / (1j * om[nzo])
    g2[nzo] = g1[nzo] / (1j * om[nzo])
    nyq = grid.Nt // 2
    k = np.fft.fftfreq(grid.Nt, d=1.0 / grid.Nt)
    ph = np.exp(2j * np.pi * k * (t - U) / grid.T)
    ph[nyq] = math.cos(2 * np.pi * nyq * (t - U) / grid.T)
    G1 = complex(np.dot(g1, ph))
    G2 = complex(np.dot(g2, ph))
    h = U ** (-1.0 - s)
    dh = (-1.0 - s) * U ** (-2.0 - s)
    heat_tail = mean * U ** (-s) / s + G1 * h + G2 * dh
    total += f0 * U ** (-s) / s - heat_tail
    out = -reciprocal_gamma_neg(p) * total
    return out


# --- certification -------------------------------------------------------------


def consistency_report(
    f: Field,
    p: FracParams,
    rule: SingularQuadRule | None = None,
    y_probe=None,
    neumann_constant: float | None = None,
) -> RouteReport:
    """Run all three routes on ``f`` and tabulate their pairwise discrepancies."""
    ys = _check_probes(y_probe if y_probe is not None else default_probes(f.grid))
    C = neumann_constant if neumann_constant is not None else calibrate_neumann(p, f.grid, ys)
    outputs = {
        "spectral": apply_spectral(f, p),
        "singular": apply_singular(f, p, rule),
        "extension": apply_extension_route(f, p, ys, neumann_constant=C),
    }
    return RouteReport.build(outputs, {"extension": C})
