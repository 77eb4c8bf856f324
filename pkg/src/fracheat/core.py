"""Parameters, periodic space-time grids, sampled fields and discrepancy norms."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

EPS_FLOOR = 1e-300
REAL_TOL = 1e-10


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ShapeError(ValueError):
    """Two fields do not live on the same grid."""


class NumericalError(RuntimeError):
    """A numerical procedure failed to reach its tolerance.

    ``estimates`` carries whatever the procedure achieved (residuals, the two
    refinement levels, ...) so callers can report it.
    """

    def __init__(self, message: str, **estimates):
        super().__init__(message)
        self.estimates = estimates


def thread_count() -> int:
    """Parallelism cap taken from ``FRACHEAT_THREADS`` (default: cpu count)."""
    raw = os.environ.get("FRACHEAT_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return os.cpu_count() or 1


@dataclass(frozen=True)
class FracParams:
    s: float
    a: float

    def __post_init__(self):
        if not 0.0 < self.s < 1.0:
            raise DomainError(f"s must lie in the open interval (0,1), got {self.s}")
        if self.a != 1.0 - 2.0 * self.s:
            raise DomainError("a is derived: a = 1 - 2s")
        assert -1.0 < self.a < 1.0


def make_params(s: float) -> FracParams:
    """Exponent ``s`` in (0,1) together with the weight exponent ``a = 1 - 2s``."""
    s = float(s)
    if not (0.0 < s < 1.0) or math.isnan(s):
        raise DomainError(f"s must lie in the open interval (0,1), got {s}")
    return FracParams(s=s, a=1.0 - 2.0 * s)


@dataclass(frozen=True)
class SpaceTimeGrid:
    """Uniform periodic lattice on the torus ``[0,L)^n x [0,T)``."""

    n: int
    L: float
    Nx: int
    T: float
    Nt: int
    periodic: bool = True

    def __post_init__(self):
        if self.n not in (1, 2):
            raise DomainError(f"spatial dimension must be 1 or 2, got {self.n}")
        for name, N in (("Nx", self.Nx), ("Nt", self.Nt)):
            if N < 4 or N % 2:
                raise DomainError(f"{name} must be even and >= 4, got {N}")
        if not (self.L > 0 and self.T > 0):
            raise DomainError("periods L and T must be positive")
        if not self.periodic:
            raise DomainError("only periodic grids are supported")

    @property
    def hx(self) -> float:
        return self.L / self.Nx

    @property
    def ht(self) -> float:
        return self.T / self.Nt

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.Nx,) * self.n + (self.Nt,)

    @property
    def size(self) -> int:
        return self.Nx**self.n * self.Nt

    @property
    def cell_volume(self) -> float:
        return self.hx**self.n * self.ht

    def x_axis(self) -> np.ndarray:
        return np.arange(self.Nx) * self.hx

    def t_axis(self) -> np.ndarray:
        return np.arange(self.Nt) * self.ht

    def mesh(self) -> tuple[np.ndarray, ...]:
        """Coordinate arrays ``(x1[, x2], t)`` broadcast to :attr:`shape`."""
        axes = [self.x_axis()] * self.n + [self.t_axis()]
        return tuple(np.meshgrid(*axes, indexing="ij"))

    def xi_axis(self) -> np.ndarray:
        return 2 * np.pi * np.fft.fftfreq(self.Nx, d=self.hx)

    def omega_axis(self) -> np.ndarray:
        return 2 * np.pi * np.fft.fftfreq(self.Nt, d=self.ht)

    def xi_squared(self) -> np.ndarray:
        """|xi|^2 on the FFT layout, shaped to broadcast against :attr:`shape`."""
        xi = self.xi_axis()
        if self.n == 1:
            return (xi**2)[:, None]
        return (xi[:, None] ** 2 + xi[None, :] ** 2)[:, :, None]

    def omega(self) -> np.ndarray:
        """Angular time frequencies ``omega`` (mode ``exp(i omega t)``), broadcastable."""
        return self.omega_axis().reshape((1,) * self.n + (self.Nt,))

    def heat_symbol_argument(self) -> np.ndarray:
        """``lam = |xi|^2 + i omega``, the symbol of ``d/dt - Laplacian`` on the FFT layout.

        With the convention ``f(x,t) = sum fhat exp(i(xi.x - tau t))`` used for the
        multiplier, ``tau = -omega`` and ``lam = |xi|^2 - i tau``.
        """
        return self.xi_squared() + 1j * self.omega()

    def nyquist_time_mask(self) -> np.ndarray:
        mask = np.zeros(self.Nt, dtype=bool)
        mask[self.Nt // 2] = True
        return mask.reshape((1,) * self.n + (self.Nt,))

    def refined(self, factor: int = 2) -> "SpaceTimeGrid":
        return SpaceTimeGrid(self.n, self.L, self.Nx * factor, self.T, self.Nt * factor)


@dataclass(frozen=True, eq=False)
class Field:
    """Complex samples on a :class:`SpaceTimeGrid`; ``real`` marks real-valued data."""

    grid: SpaceTimeGrid
    values: np.ndarray
    real: bool = False

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=complex)
        if vals.size != self.grid.size:
            raise ShapeError(f"expected {self.grid.size} samples, got {vals.size}")
        vals = vals.reshape(self.grid.shape)
        if self.real and np.any(np.abs(vals.imag) > REAL_TOL * max(1.0, np.abs(vals).max())):
            raise ValueError("field flagged real has non-negligible imaginary part")
        if self.real:
            vals = vals.real.astype(complex)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_function(cls, grid: SpaceTimeGrid, func, real: bool = True) -> "Field":
        return cls(grid, func(*grid.mesh()), real=real)

    @classmethod
    def zeros(cls, grid: SpaceTimeGrid) -> "Field":
        return cls(grid, np.zeros(grid.shape), real=True)

    def hat(self) -> np.ndarray:
        return np.fft.fftn(self.values)

    @classmethod
    def from_hat(cls, grid: SpaceTimeGrid, fhat: np.ndarray, real: bool) -> "Field":
        vals = np.fft.ifftn(fhat)
        if real:
            scale = max(1.0, float(np.abs(vals).max()))
            leak = float(np.abs(vals.imag).max()) if vals.size else 0.0
            if leak > REAL_TOL * scale:
                raise NumericalError("real route produced complex output", imag=leak)
            vals = vals.real
        return cls(grid, vals, real=real)

    def with_values(self, values: np.ndarray, real: bool | None = None) -> "Field":
        return Field(self.grid, values, self.real if real is None else real)

    def __add__(self, other: "Field") -> "Field":
        _same_grid(self, other)
        return Field(self.grid, self.values + other.values, self.real and other.real)

    def __sub__(self, other: "Field") -> "Field":
        _same_grid(self, other)
        return Field(self.grid, self.values - other.values, self.real and other.real)

    def __mul__(self, c) -> "Field":
        c = complex(c)
        return Field(self.grid, self.values * c, self.real and c.imag == 0)

    __rmul__ = __mul__

    def sup(self) -> float:
        return float(np.abs(self.values).max())

    def l2(self) -> float:
        return float(np.sqrt(np.sum(np.abs(self.values) ** 2) * self.grid.cell_volume))


def _same_grid(f: Field, g: Field) -> None:
    if f.grid != g.grid:
        raise ShapeError(f"grid mismatch: {f.grid} vs {g.grid}")


def norms(f: Field, g: Field) -> tuple[float, float]:
    """Relative sup and L2 discrepancy of ``f`` against reference ``g``."""
    _same_grid(f, g)
    d = f - g
    return d.sup() / max(g.sup(), EPS_FLOOR), d.l2() / max(g.l2(), EPS_FLOOR)


def trig_interpolate(f: Field, points: tuple[np.ndarray, ...]) -> np.ndarray:
    """Evaluate the trigonometric interpolant of ``f`` at arbitrary points.

    ``points`` holds one array per axis (x1[, x2], t), all of one shape. Nyquist
    bins are split symmetrically so real samples give a real interpolant.
    """
    grid = f.grid
    coef = f.hat() / grid.size
    periods = [grid.L] * grid.n + [grid.T]
    sizes = [grid.Nx] * grid.n + [grid.Nt]
    out = coef
    # contract one axis at a time: coef[k0,k1,..] -> value at points
    pts = [np.asarray(p, dtype=float) for p in points]
    flat = [p.ravel() for p in pts]
    # first axis produces (npts, rest...)
    for axis, (P, N, x) in enumerate(zip(periods, sizes, flat)):
        k = np.fft.fftfreq(N, d=1.0 / N)
        phase = np.exp(2j * np.pi * np.outer(x, k) / P)
        nyq = N // 2
        phase[:, nyq] = np.cos(2 * np.pi * x * nyq / P)
        if axis == 0:
            out = np.tensordot(phase, out, axes=([1], [0]))
        else:
            out = np.einsum("pk,pk...->p...", phase, out)
    return out.reshape(pts[0].shape)


def parabolic_rescale(f: Field, r: float) -> Field:
    """Return ``f_r(x,t) = f(r x, r^2 t)`` sampled on the same periodic grid.

    Samples are taken from the trigonometric interpolant at the wrapped points.
    For integer ``r`` the result is again periodic on the torus and the map
    is exact for band-limited fields (mode ``(xi, tau)`` goes to ``(r xi, r^2 tau)``).
    """
    r = float(r)
    if not r > 0:
        raise DomainError(f"rescaling factor must be positive, got {r}")
    grid = f.grid
    if r == 1.0:
        return f
    coords = grid.mesh()
    pts = tuple(np.mod(r * c, grid.L) for c in coords[:-1]) + (np.mod(r * r * coords[-1], grid.T),)
    vals = trig_interpolate(f, pts)
    if f.real:
        vals = vals.real
    return Field(grid, vals, real=f.real)


@dataclass(frozen=True)
class Cylinder:
    """Parabolic cylinder ``C_r(x,t) = B(x,r) x (t - r^2, t + r^2)``."""

    x: tuple[float, ...]
    t: float
    r: float

    def __post_init__(self):
        if not self.r > 0:
            raise DomainError("cylinder radius must be positive")

    @property
    def half_time(self) -> float:
        return self.r * self.r

    def contains(self, points: tuple[np.ndarray, ...], grid: SpaceTimeGrid | None = None) -> np.ndarray:
        """Membership of ``points = (x1[, x2], t)``; with a grid, distances wrap on the torus."""
        *xs, t = (np.asarray(p, dtype=float) for p in points)
        if len(xs) != len(self.x):
            raise ShapeError("point dimension does not match the cylinder")
        dist2 = np.zeros(np.broadcast(*xs, t).shape)
        for xc, c in zip(xs, self.x):
            d = xc - c
            if grid is not None:
                d = (d + grid.L / 2) % grid.L - grid.L / 2
            dist2 = dist2 + d * d
        dt = t - self.t
        if grid is not None:
            dt = (dt + grid.T / 2) % grid.T - grid.T / 2
        return (dist2 < self.r**2) & (np.abs(dt) < self.half_time)


@dataclass
class RouteReport:
    """Outputs of several operator routes together with their pairwise discrepancies."""

    outputs: dict[str, Field]
    pairwise_error: dict[tuple[str, str], dict[str, float]] = field(default_factory=dict)
    calibration: dict[str, float] = field(default_factory=dict)

    @classmethod
    def build(cls, outputs: Mapping[str, Field], calibration: Mapping[str, float] | None = None) -> "RouteReport":
        names = list(outputs)
        pairs: dict[tuple[str, str], dict[str, float]] = {}
        for i, a in enumerate(names):
            for b in names[i + 1 :]:
                sab, lab = norms(outputs[a], outputs[b])
                sba, lba = norms(outputs[b], outputs[a])
                entry = {"sup_rel": max(sab, sba), "l2_rel": max(lab, lba)}
                pairs[(a, b)] = entry
                pairs[(b, a)] = entry
        return cls(dict(outputs), pairs, dict(calibration or {}))

    def max_error(self, kind: str = "l2_rel") -> float:
        return max((e[kind] for e in self.pairwise_error.values()), default=0.0)

    def to_json(self) -> dict:
        seen = set()
        rows = []
        for (a, b), e in self.pairwise_error.items():
            key = tuple(sorted((a, b)))
            if key in seen:
                continue
            seen.add(key)
            rows.append({"routes": list(key), **e})
        return {
            "routes": sorted(self.outputs),
            "pairwise_error": rows,
            "calibration": dict(self.calibration),
            "max_l2_rel": self.max_error("l2_rel"),
            "max_sup_rel": self.max_error("sup_rel"),
        }


# --- CSV serialization -------------------------------------------------------


PROVENANCE_PREFIX = "# provenance "


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def field_to_csv(f: Field) -> str:
    g = f.grid
    lines = [f"# grid {g.n} {g.Nx} {g.Nt} {fmt(g.L)} {fmt(g.T)}"]
    vals = f.values
    for idx in np.ndindex(*g.shape):
        v = vals[idx]
        lines.append(",".join(str(i) for i in idx) + f",{fmt(v.real)},{fmt(v.imag)}")
    return "\n".join(lines) + "\n"


def field_from_csv(text: str, real: bool | None = None) -> Field:
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith(PROVENANCE_PREFIX)]
    head = lines[0].split()
    if head[:2] != ["#", "grid"]:
        raise ValueError("missing '# grid' header")
    n, Nx, Nt = int(head[2]), int(head[3]), int(head[4])
    L, T = float(head[5]), float(head[6])
    grid = SpaceTimeGrid(n, L, Nx, T, Nt)
    vals = np.zeros(grid.shape, dtype=complex)
    for ln in lines[1:]:
        if ln.startswith("#"):
            continue
        parts = ln.split(",")
        idx = tuple(int(p) for p in parts[: n + 1])
        vals[idx] = complex(float(parts[n + 1]), float(parts[n + 2]))
    if real is None:
        real = bool(np.all(vals.imag == 0))
    return Field(grid, vals, real=real)


def write_atomic(path: str | os.PathLike, text: str) -> None:
    """Write via a temporary sibling and rename, so failures leave nothing behind."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    try:
        tmp.write_text(text)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()
