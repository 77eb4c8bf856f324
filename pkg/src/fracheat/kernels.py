"""Heat kernel ``W`` and the extension (Poisson-type) kernel ``Gamma_y``.

The extension kernel is

    Gamma_y(x, t) = c_s * y^(2s) * t^(-1-s) * W(x, t) * exp(-y^2 / (4t)),  t > 0,

and vanishes for ``t <= 0``.  The normalization is ``c_s = 1 / (4^s Gamma(s))``,
which makes the kernel positive with unit space-time mass for every height
``y > 0``.  (The prefactor ``1 / (4^s Gamma(-s))`` that appears in the source
formula is negative on (0,1) and does not give unit mass.)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import roots_genlaguerre

from .core import DomainError, Field, FracParams, NumericalError, SpaceTimeGrid

# Lanczos approximation, g = 7, 9 terms; relative accuracy ~1e-15 on the real line.
_LANCZOS_G = 7.0
_LANCZOS_COEF = (
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
)


def gamma(x: float) -> float:
    """Gamma function via the Lanczos approximation (reflection for ``x < 1/2``)."""
    x = float(x)
    if x == math.floor(x) and x <= 0:
        raise DomainError(f"Gamma has a pole at {x}")
    if x < 0.5:
        return math.pi / (math.sin(math.pi * x) * gamma(1.0 - x))
    z = x - 1.0
    acc = _LANCZOS_COEF[0]
    for i, c in enumerate(_LANCZOS_COEF[1:], start=1):
        acc += c / (z + i)
    t = z + _LANCZOS_G + 0.5
    return math.sqrt(2 * math.pi) * t ** (z + 0.5) * math.exp(-t) * acc


def extension_constant(p: FracParams) -> float:
    """Normalization ``1 / (4^s Gamma(s))`` of the extension kernel."""
    return 1.0 / (4.0**p.s * gamma(p.s))


def source_constant(p: FracParams) -> float:
    """The prefactor ``1 / (4^s Gamma(-s))`` as written in the source formula (negative)."""
    return 1.0 / (4.0**p.s * gamma(-p.s))


def _sqnorm(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x * x if x.ndim == 0 else np.sum(x * x, axis=-1)


@dataclass(frozen=True)
class HeatKernelEval:
    """Gauss-Weierstrass kernel on R^n, extended by zero for ``t <= 0``."""

    n: int

    def __call__(self, x, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        r2 = _sqnorm(x) if self.n > 1 else np.asarray(x, dtype=float) ** 2
        pos = t > 0
        tt = np.where(pos, t, 1.0)
        val = (4 * np.pi * tt) ** (-self.n / 2) * np.exp(-r2 / (4 * tt))
        return np.where(pos, val, 0.0)


def eval_W(x, t, n: int = 1) -> np.ndarray:
    """``W(x,t) = (4 pi t)^(-n/2) exp(-|x|^2/(4t))`` for ``t > 0``, zero otherwise.

    For ``n = 2`` the last axis of ``x`` holds the two coordinates.
    """
    return HeatKernelEval(n)(x, t)


@dataclass(frozen=True)
class ExtensionKernelEval:
    params: FracParams
    n: int = 1
    normalization_constant: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "normalization_constant", extension_constant(self.params))

    def __call__(self, y: float, x, t) -> np.ndarray:
        if not y > 0:
            raise DomainError(f"extension height must be positive, got {y}")
        s = self.params.s
        t = np.asarray(t, dtype=float)
        pos = t > 0
        tt = np.where(pos, t, 1.0)
        w = HeatKernelEval(self.n)(x, tt)
        val = self.normalization_constant * y ** (2 * s) * tt ** (-1 - s) * w * np.exp(-y * y / (4 * tt))
        return np.where(pos, val, 0.0)


def eval_Gamma(y: float, x, t, p: FracParams, n: int = 1) -> np.ndarray:
    """Extension kernel ``Gamma_y(x,t)`` with unit-mass normalization."""
    return ExtensionKernelEval(p, n)(y, x, t)


def _mass_quadrature(y: float, s: float, npts: int) -> float:
    # t = y^2/(4u) turns the time profile into u^(s-1) e^(-u) times a y-free factor
    u, w = roots_genlaguerre(npts, s - 1.0)
    t = y * y / (4.0 * u)
    jac = y * y / (4.0 * u * u)
    profile = y ** (2 * s) * t ** (-1 - s) * np.exp(-y * y / (4 * t)) * jac
    return float(np.sum(w * profile / (u ** (s - 1.0) * np.exp(-u))))


def kernel_mass(y: float, p: FracParams, npts: int = 64, tol: float = 1e-12) -> float:
    """Total space-time mass of ``Gamma_y``.

    The spatial integral of ``W`` is one; the remaining time integral is mapped
    by ``u = y^2/(4t)`` onto generalized Gauss-Laguerre nodes (weight
    ``u^(s-1) e^(-u)``).  ``npts`` and ``2*npts`` nodes must agree to ``tol``.
    """
    if not y > 0:
        raise DomainError(f"extension height must be positive, got {y}")
    if npts < 64:
        raise ValueError("kernel_mass needs at least 64 nodes")
    c = extension_constant(p)
    coarse = c * _mass_quadrature(y, p.s, npts)
    fine = c * _mass_quadrature(y, p.s, 2 * npts)
    if abs(fine - coarse) > tol:
        raise NumericalError("kernel mass quadrature did not converge", coarse=coarse, fine=fine)
    return fine


# --- Fourier symbol of Gamma_y ------------------------------------------------

_W_STEP = 0.1
_W_MARGIN = math.log(60.0)


def extension_symbol(y: float, lam, p: FracParams) -> np.ndarray:
    """Fourier symbol of ``Gamma_y`` at ``lam = |xi|^2 - i tau`` (``Re lam >= 0``).

    ``(Gamma_y * e)(x,t) = G(y; lam) e(x,t)`` for ``e = exp(i(xi.x - tau t))``, where

        G(y; lam) = c_s y^(2s) int_0^inf t^(-1-s) exp(-y^2/(4t) - lam t) dt.

    The time integral is rotated onto the ray ``arg t = -arg(lam)/2``, on which both
    exponentials decay, and then evaluated with the trapezoidal rule in ``log t``
    (double-exponential decay at both ends, exponentially convergent).
    """
    if not y > 0:
        raise DomainError(f"extension height must be positive, got {y}")
    s = p.s
    lam = np.asarray(lam, dtype=complex)
    flat = lam.ravel()
    out = np.empty(flat.shape, dtype=complex)
    zero = flat == 0
    out[zero] = kernel_mass(y, p)
    nz = ~zero
    if np.any(nz):
        lz = flat[nz]
        mag = np.abs(lz)
        phi = np.angle(lz)
        rot = np.exp(0.5j * phi)
        alpha = 0.25 * y * y
        w_lo = math.log(alpha) - _W_MARGIN
        w_hi = max(-math.log(mag.min()) + _W_MARGIN, w_lo + 1.0)
        nodes = np.arange(w_lo, w_hi + _W_STEP, _W_STEP)
        ew = np.exp(nodes)
        # (modes, nodes)
        expo = -(alpha / ew)[None, :] * rot[:, None] - (mag[:, None] * ew[None, :]) * rot[:, None]
        integrand = np.exp(-s * nodes)[None, :] * np.exp(expo)
        integral = _W_STEP * integrand.sum(axis=1)
        out[nz] = extension_constant(p) * y ** (2 * s) * np.exp(0.5j * phi * s) * integral
    return out.reshape(lam.shape)


def symbol_on_grid(grid: SpaceTimeGrid, func) -> np.ndarray:
    """Tabulate a radial symbol ``func(lam)`` on the FFT layout of ``grid``.

    ``func`` is evaluated once per distinct ``(|xi|^2, omega)``.  In the time
    Nyquist bin only the real part is kept: there the sampled mode is
    ``cos(omega t)`` and the ``sin`` partner vanishes on the grid.
    """
    xi2 = grid.xi_squared()
    om = grid.omega_axis()
    uniq, inv = np.unique(np.round(xi2.ravel(), 12), return_inverse=True)
    lam = uniq[:, None] + 1j * om[None, :]
    table = np.asarray(func(lam), dtype=complex)
    nyq = grid.Nt // 2
    table[:, nyq] = table[:, nyq].real
    full = table[inv.reshape(xi2.shape[: grid.n]), :]
    return full.reshape(grid.shape)


def convolve_extension(f: Field, y: float, p: FracParams) -> Field:
    """Space-time convolution ``Gamma_y * f`` on the torus, done spectrally."""
    table = symbol_on_grid(f.grid, lambda lam: extension_symbol(y, lam, p))
    return Field.from_hat(f.grid, table * f.hat(), real=f.real)


def delta_limit_check(f: Field, y_sequence, p: FracParams) -> list[float]:
    """Sup-norm distance between ``Gamma_y * f`` and ``f`` along decreasing heights."""
    ys = [float(y) for y in y_sequence]
    if any(y <= 0 for y in ys) or any(b >= a for a, b in zip(ys, ys[1:])):
        raise DomainError("y_sequence must be positive and strictly decreasing")
    return [(convolve_extension(f, y, p) - f).sup() for y in ys]
