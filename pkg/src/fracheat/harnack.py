"""Boundary behaviour of non-negative solutions of ``lambda u_t = div(A grad u)``.

Spatial domains are sheared slabs in the plane,

    D = {(x, y) : x_lo < x < x_hi,  y_lo + phi(x) < y < y_hi + phi(x)},

with ``phi`` piecewise linear and the weight ``lambda = |y|^a``.  For ``phi = 0``
this is the product ``(x_lo, x_hi) x (y_lo, y_hi)``.  Solutions vanish on the
whole spatial boundary (the lateral part of the parabolic boundary) and are
driven by non-negative initial data.

Two discretizations are provided: Shortley-Weller finite differences on the
sheared domain itself, and bilinear finite elements on the flattened rectangle
``z = y - phi(x)``, where the operator acquires the full coefficient matrix
``a_hat = lambda_hat D^T D``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy.sparse import coo_matrix, csc_matrix, diags
from scipy.sparse.linalg import splu

from .core import DomainError, FracParams, NumericalError, make_params

_BISECT_STEPS = 60


# --- domain ------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LipschitzCylinder:
    """Sheared slab ``D x (0, T)`` with a uniform background mesh of its bounding box."""

    knots: np.ndarray
    phi_values: np.ndarray
    slab: tuple[float, float]
    T: float
    Nx: int
    Ny: int
    r0: float

    def __post_init__(self):
        k = np.array(self.knots, dtype=float)
        v = np.array(self.phi_values, dtype=float)
        if k.ndim != 1 or k.shape != v.shape or len(k) < 2 or np.any(np.diff(k) <= 0):
            raise DomainError("phi needs >= 2 strictly increasing knots with matching values")
        lo, hi = (float(t) for t in self.slab)
        if not lo < hi:
            raise DomainError(f"degenerate slab ({lo}, {hi})")
        if not (self.T > 0 and self.r0 > 0):
            raise DomainError("T and r0 must be positive")
        if self.Nx < 4 or self.Ny < 4:
            raise DomainError("mesh needs at least 4 cells per direction")
        for arr in (k, v):
            arr.setflags(write=False)
        object.__setattr__(self, "knots", k)
        object.__setattr__(self, "phi_values", v)
        object.__setattr__(self, "slab", (lo, hi))

    # geometry
    @property
    def x_lo(self) -> float:
        return float(self.knots[0])

    @property
    def x_hi(self) -> float:
        return float(self.knots[-1])

    @property
    def slopes(self) -> np.ndarray:
        return np.diff(self.phi_values) / np.diff(self.knots)

    @property
    def M(self) -> float:
        return float(np.abs(self.slopes).max())

    def phi(self, x) -> np.ndarray:
        return np.interp(x, self.knots, self.phi_values)

    def dphi(self, x) -> np.ndarray:
        """Slope of ``phi`` (the segment containing ``x``; right-continuous at knots)."""
        idx = np.clip(np.searchsorted(self.knots, x, side="right") - 1, 0, len(self.knots) - 2)
        return self.slopes[idx]

    def level(self, x, y) -> np.ndarray:
        """Positive inside ``D``, zero on its boundary, negative outside."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        ph = self.phi(x)
        lo, hi = self.slab
        return np.minimum.reduce([x - self.x_lo, self.x_hi - x, y - lo - ph, hi + ph - y])

    # mesh
    @property
    def hx(self) -> float:
        return (self.x_hi - self.x_lo) / self.Nx

    @property
    def y_range(self) -> tuple[float, float]:
        lo, hi = self.slab
        return lo + float(self.phi_values.min()), hi + float(self.phi_values.max())

    @property
    def hy(self) -> float:
        a, b = self.y_range
        return (b - a) / self.Ny

    def x_nodes(self) -> np.ndarray:
        return self.x_lo + self.hx * np.arange(self.Nx + 1)

    def y_nodes(self) -> np.ndarray:
        return self.y_range[0] + self.hy * np.arange(self.Ny + 1)

    def node_coordinates(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.x_nodes(), self.y_nodes(), indexing="ij")

    def interior_mask(self) -> np.ndarray:
        X, Y = self.node_coordinates()
        return self.level(X, Y) > 1e-12 * min(self.hx, self.hy)

    def lipschitz_check(self) -> float:
        """Largest difference quotient of ``phi`` over all pairs of mesh x-nodes."""
        x = self.x_nodes()
        ph = self.phi(x)
        dx = np.abs(x[:, None] - x[None, :])
        dp = np.abs(ph[:, None] - ph[None, :])
        with np.errstate(divide="ignore", invalid="ignore"):
            q = np.where(dx > 0, dp / dx, 0.0)
        return float(q.max())

    def boundary_polyline(self, density: int = 4000) -> np.ndarray:
        """Dense sampling of the spatial boundary (walls and both graphs)."""
        lo, hi = self.slab
        xs = np.unique(np.concatenate([np.linspace(self.x_lo, self.x_hi, density), self.knots]))
        bottom = np.column_stack([xs, lo + self.phi(xs)])
        top = np.column_stack([xs, hi + self.phi(xs)])
        ts = np.linspace(0.0, 1.0, density // 4)
        left = np.column_stack([np.full_like(ts, self.x_lo), lo + self.phi(self.x_lo) + ts * (hi - lo)])
        right = np.column_stack([np.full_like(ts, self.x_hi), lo + self.phi(self.x_hi) + ts * (hi - lo)])
        return np.vstack([bottom, top, left, right])

    def distance_to_boundary(self, points: np.ndarray) -> np.ndarray:
        poly = self.boundary_polyline()
        pts = np.atleast_2d(points)
        d = np.sqrt(((pts[:, None, :] - poly[None, :, :]) ** 2).sum(-1)).min(axis=1)
        return d

    def classify(self, x, y, t) -> np.ndarray:
        """Label space-time points: 'lateral', 'initial', 'top', 'interior' or 'outside'."""
        x, y, t = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (x, y, t)))
        tol = 1e-12 * max(1.0, self.T)
        lev = self.level(x, y)
        htol = 1e-12 * min(self.hx, self.hy)
        out = np.full(x.shape, "interior", dtype=object)
        out[lev < -htol] = "outside"
        on_bd = np.abs(lev) <= htol
        out[(np.abs(t) <= tol) & (lev >= -htol)] = "initial"
        out[on_bd & (t > tol) & (t < self.T - tol)] = "lateral"
        out[(t >= self.T - tol) & (lev > htol)] = "top"
        out[(t < -tol) | (t > self.T + tol)] = "outside"
        return out

    def to_dict(self) -> dict:
        return {
            "knots": self.knots.tolist(),
            "phi": self.phi_values.tolist(),
            "slab": list(self.slab),
            "T": self.T,
            "mesh": [self.Nx, self.Ny],
            "r0": self.r0,
            "M": self.M,
        }


def build_domain(
    phi_spec: Mapping | None,
    slab: tuple[float, float],
    T: float,
    mesh: tuple[int, int],
    x_range: tuple[float, float] = (-1.0, 1.0),
    r0: float | None = None,
) -> LipschitzCylinder:
    """Mesh a sheared slab.

    ``phi_spec`` is ``None``/``{"kind": "flat"}``, ``{"kind": "wedge", "M": m,
    "vertex": x0}`` for ``m |x - x0|``, or ``{"kind": "piecewise", "x": [...],
    "phi": [...]}``.  ``r0`` defaults to a quarter of the smaller side.
    """
    spec = dict(phi_spec or {"kind": "flat"})
    kind = spec.get("kind", "flat")
    x_lo, x_hi = (float(v) for v in x_range)
    if not x_lo < x_hi:
        raise DomainError("degenerate x range")
    if kind == "flat":
        knots, vals = [x_lo, x_hi], [0.0, 0.0]
    elif kind == "wedge":
        M = float(spec.get("M", 1.0))
        x0 = float(spec.get("vertex", 0.5 * (x_lo + x_hi)))
        if not (math.isfinite(M) and M >= 0):
            raise DomainError("wedge slope must be finite and >= 0")
        if not x_lo < x0 < x_hi:
            raise DomainError("wedge vertex must lie inside the x range")
        knots = [x_lo, x0, x_hi]
        vals = [M * abs(x_lo - x0), 0.0, M * abs(x_hi - x0)]
    elif kind == "piecewise":
        knots, vals = list(spec["x"]), list(spec["phi"])
        if knots[0] != x_lo or knots[-1] != x_hi:
            x_lo, x_hi = knots[0], knots[-1]
    else:
        raise DomainError(f"unknown phi kind {kind!r}")
    lo, hi = slab
    if r0 is None:
        r0 = 0.25 * min(x_hi - x_lo, hi - lo) if hi > lo else 1.0
    return LipschitzCylinder(np.array(knots, float), np.array(vals, float), (lo, hi), T, int(mesh[0]), int(mesh[1]), r0)


# --- corkscrew points ----------------------------------------------------------------


@dataclass(frozen=True)
class CorkscrewPoint:
    """Interior point ``A_r`` at scale ``r`` for the boundary point ``x_hat``.

    ``constant`` is the comparability constant ``K`` in
    ``r/K < |x_hat - A_r| < r`` and ``dist(A_r, boundary) >= r/K``.
    """

    x_hat: tuple[float, float]
    r: float
    point: tuple[float, float]
    constant: float
    distance: float
    boundary_distance: float

    def satisfies_bounds(self) -> bool:
        K = self.constant
        return self.r / K < self.distance < self.r and self.boundary_distance >= self.r / K


def corkscrew_constant(M: float) -> float:
    """``max(M, 2 sqrt(1 + M^2))``; the plain ``M`` degenerates for flat walls."""
    return max(M, 2.0 * math.sqrt(1.0 + M * M))


def corkscrew_point(domain: LipschitzCylinder, x_hat, r: float) -> CorkscrewPoint:
    """Search the interior mesh nodes for the best corkscrew point at scale ``r``."""
    xh = np.asarray(x_hat, dtype=float)
    if abs(float(domain.level(xh[0], xh[1]))) > 1e-9:
        raise DomainError("x_hat is not on the spatial boundary")
    if not 0 < r < domain.r0:
        raise DomainError(f"scale r must lie in (0, r0={domain.r0})")
    K = corkscrew_constant(domain.M)
    X, Y = domain.node_coordinates()
    mask = domain.interior_mask()
    pts = np.column_stack([X[mask], Y[mask]])
    dist = np.sqrt(((pts - xh) ** 2).sum(axis=1))
    cand = (dist > r / K) & (dist < r)
    if not np.any(cand):
        raise NumericalError("no mesh node in the corkscrew annulus; refine the mesh", r=r)
    pts, dist = pts[cand], dist[cand]
    bd = domain.distance_to_boundary(pts)
    ok = bd >= r / K
    if not np.any(ok):
        raise NumericalError("no mesh node satisfies the corkscrew bounds; refine the mesh", r=r)
    # prefer the node closest to x_hat + (r/2) n, n the inward normal of the level function
    eps = 1e-7 * r
    grad = np.array([
        domain.level(xh[0] + eps, xh[1]) - domain.level(xh[0] - eps, xh[1]),
        domain.level(xh[0], xh[1] + eps) - domain.level(xh[0], xh[1] - eps),
    ], dtype=float)
    norm = float(np.hypot(*grad))
    target = xh + (0.5 * r * grad / norm if norm > 0 else 0.0)
    gap = np.where(ok, ((pts - target) ** 2).sum(axis=1), np.inf)
    best = int(np.argmin(gap))
    cp = CorkscrewPoint(tuple(xh), r, tuple(pts[best]), K, float(dist[best]), float(bd[best]))
    if not cp.satisfies_bounds():
        raise NumericalError("corkscrew bounds violated on this mesh", point=cp.point, boundary_distance=cp.boundary_distance)
    return cp


# --- data --------------------------------------------------------------------------------


@dataclass(frozen=True)
class BoundaryData:
    """Data on the parabolic boundary: ``initial(x, y)`` and ``lateral(x, y, t)`` (default 0)."""

    initial: Callable[[np.ndarray, np.ndarray], np.ndarray]
    lateral: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray] | None = None

    def lateral_values(self, x, y, t) -> np.ndarray:
        if self.lateral is None:
            return np.zeros(np.broadcast(np.asarray(x), np.asarray(y)).shape)
        return np.asarray(self.lateral(x, y, t), dtype=float) * np.ones(np.broadcast(np.asarray(x), np.asarray(y)).shape)


def level_data(domain: LipschitzCylinder, power: float = 1.0, tilt=(0.0, 0.0)) -> BoundaryData:
    """Non-negative initial data ``level(x,y)^power exp(tilt . X)``, vanishing on the boundary."""

    def g(x, y):
        return np.maximum(domain.level(x, y), 0.0) ** power * np.exp(tilt[0] * x + tilt[1] * y)

    return BoundaryData(g)


def data_from_spec(domain: LipschitzCylinder, spec: Mapping) -> BoundaryData:
    kind = spec.get("kind", "level")
    if kind == "level":
        return level_data(domain, float(spec.get("power", 1.0)), tuple(spec.get("tilt", (0.0, 0.0))))
    if kind == "sine":
        kx, ky = int(spec.get("kx", 1)), int(spec.get("ky", 1))
        lo, hi = domain.slab
        Lx = domain.x_hi - domain.x_lo

        def g(x, y):
            z = y - domain.phi(x)
            val = np.sin(kx * np.pi * (x - domain.x_lo) / Lx) * np.sin(ky * np.pi * (z - lo) / (hi - lo))
            return np.where(domain.level(x, y) > 0, np.abs(val), 0.0)

        return BoundaryData(g)
    raise DomainError(f"unknown data kind {kind!r}")


# --- weighted Shortley-Weller operator ----------------------------------------------------


def weight_average(y0, y1, a: float) -> np.ndarray:
    """Mean of ``|y|^a`` over ``[min(y0,y1), max(y0,y1)]`` (exact; finite for ``a > -1``)."""
    lo = np.minimum(y0, y1)
    hi = np.maximum(y0, y1)
    e = a + 1.0

    def prim(v):
        return np.sign(v) * np.abs(v) ** e / e

    width = hi - lo
    with np.errstate(invalid="ignore", divide="ignore"):
        avg = (prim(hi) - prim(lo)) / np.where(width > 0, width, 1.0)
        point = np.abs(lo) ** a if a >= 0 else np.where(lo != 0, np.abs(lo) ** a, np.inf)
    return np.where(width > 0, avg, point)


@dataclass(frozen=True, eq=False)
class WeightedOperator:
    """``-div(|y|^a grad .)`` on the interior nodes of a sheared slab.

    ``A`` acts on the unknowns, ``B`` maps boundary-point values to the right-hand
    side and ``mass`` is the nodal weight (mean of ``|y|^a`` over the dual cell).
    """

    domain: LipschitzCylinder
    a: float
    index: np.ndarray
    A: csc_matrix
    B: csc_matrix
    mass: np.ndarray
    boundary_points: np.ndarray


def _boundary_hit(domain: LipschitzCylinder, p0: np.ndarray, p1: np.ndarray) -> np.ndarray:
    """Fraction along p0->p1 where the level function first vanishes (p0 inside, p1 not)."""
    lo = np.zeros(len(p0))
    hi = np.ones(len(p0))
    for _ in range(_BISECT_STEPS):
        mid = 0.5 * (lo + hi)
        q = p0 + mid[:, None] * (p1 - p0)
        inside = domain.level(q[:, 0], q[:, 1]) > 0
        lo = np.where(inside, mid, lo)
        hi = np.where(inside, hi, mid)
    return hi


def assemble_operator(domain: LipschitzCylinder, a: float) -> WeightedOperator:
    X, Y = domain.node_coordinates()
    inside = domain.interior_mask()
    idx = -np.ones(X.shape, dtype=np.int64)
    idx[inside] = np.arange(int(inside.sum()))
    hx, hy = domain.hx, domain.hy
    ii, jj = np.nonzero(inside)
    P = np.column_stack([X[ii, jj], Y[ii, jj]])
    n_unk = len(ii)

    steps = {"E": (1, 0, hx), "W": (-1, 0, hx), "N": (0, 1, hy), "S": (0, -1, hy)}
    lengths = {}
    nb_index = {}
    for key, (di, dj, h) in steps.items():
        ni, nj = ii + di, jj + dj
        valid = (ni >= 0) & (ni <= domain.Nx) & (nj >= 0) & (nj <= domain.Ny)
        nidx = np.full(n_unk, -1, dtype=np.int64)
        nidx[valid] = idx[ni[valid], nj[valid]]
        target = P + np.array([di * h, dj * h])
        frac = np.ones(n_unk)
        cut = nidx < 0
        if np.any(cut):
            frac[cut] = _boundary_hit(domain, P[cut], target[cut])
        lengths[key] = frac * h
        nb_index[key] = nidx

    rows, cols, vals = [], [], []
    brows, bcols, bvals = [], [], []
    bpoints = []
    offset = 0
    diag = np.zeros(n_unk)
    for key, (di, dj, h) in steps.items():
        ell = lengths[key]
        opp = {"E": "W", "W": "E", "N": "S", "S": "N"}[key]
        span = 0.5 * (ell + lengths[opp])
        if dj == 0:
            k = weight_average(P[:, 1] - 0.5 * hy, P[:, 1] + 0.5 * hy, a)
        else:
            k = weight_average(P[:, 1], P[:, 1] + dj * ell, a)
        coef = k / (ell * span)
        diag += coef
        nidx = nb_index[key]
        interior_nb = nidx >= 0
        rows.append(np.nonzero(interior_nb)[0])
        cols.append(nidx[interior_nb])
        vals.append(-coef[interior_nb])
        bd = np.nonzero(~interior_nb)[0]
        pts = P[bd] + np.column_stack([di * ell[bd], dj * ell[bd]])
        bpoints.append(pts)
        brows.append(bd)
        bcols.append(offset + np.arange(len(bd)))
        offset += len(bd)
        bvals.append(coef[bd])
    rows.append(np.arange(n_unk))
    cols.append(np.arange(n_unk))
    vals.append(diag)
    A = coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n_unk, n_unk)).tocsc()
    bp = np.vstack(bpoints)
    B = coo_matrix((np.concatenate(bvals), (np.concatenate(brows), np.concatenate(bcols))), shape=(n_unk, len(bp))).tocsc()
    mass = weight_average(P[:, 1] - 0.5 * hy, P[:, 1] + 0.5 * hy, a)
    if not (np.all(np.isfinite(A.data)) and np.all(np.isfinite(mass))):
        raise NumericalError("weight is not integrable on this mesh")
    return WeightedOperator(domain, a, idx, A, B, mass, bp)


# --- time-dependent solve -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class WeightedSolution:
    """Nodal values ``values[k, i, j]`` at ``times[k]`` on the background mesh (0 outside)."""

    domain: LipschitzCylinder
    times: np.ndarray
    values: np.ndarray
    mask: np.ndarray

    def at(self, point, t: float) -> float:
        """Value at the mesh node nearest to ``point`` and the time level nearest to ``t``."""
        k = int(np.argmin(np.abs(self.times - t)))
        X, Y = self.domain.node_coordinates()
        d = (X - point[0]) ** 2 + (Y - point[1]) ** 2
        i, j = np.unravel_index(int(np.argmin(d)), d.shape)
        return float(self.values[k, i, j])


def solve_weighted(
    domain: LipschitzCylinder,
    p: FracParams,
    data: BoundaryData,
    Nt: int,
    t_end: float | None = None,
    operator: WeightedOperator | None = None,
) -> WeightedSolution:
    """Backward-Euler solve of ``|y|^a u_t = div(|y|^a grad u)`` with the given parabolic data.

    The system matrix is an M-matrix, so non-negative data give non-negative
    solutions and ordered data give ordered solutions.
    """
    if Nt < 1:
        raise DomainError("Nt must be >= 1")
    t_end = domain.T if t_end is None else float(t_end)
    if not 0 < t_end <= domain.T * (1 + 1e-12):
        raise DomainError("t_end must lie in (0, T]")
    op = operator if operator is not None else assemble_operator(domain, p.a)
    dt = t_end / Nt
    times = dt * np.arange(Nt + 1)
    X, Y = domain.node_coordinates()
    mask = op.index >= 0
    sysm = (diags(op.mass / dt) + op.A).tocsc()
    try:
        lu = splu(sysm)
    except RuntimeError as exc:  # singular factor
        raise NumericalError("weighted system is singular", detail=str(exc)) from exc
    bx, by = op.boundary_points[:, 0], op.boundary_points[:, 1]

    vals = np.zeros((Nt + 1,) + X.shape)
    u = np.asarray(data.initial(X[mask], Y[mask]), dtype=float) * np.ones(int(mask.sum()))
    vals[0][mask] = u
    on_bd = (~mask) & (np.abs(domain.level(X, Y)) <= 1e-12 * min(domain.hx, domain.hy))
    init_all = np.asarray(data.initial(X, Y), dtype=float) * np.ones(X.shape)
    vals[0][on_bd] = init_all[on_bd]
    for k in range(1, Nt + 1):
        g = data.lateral_values(bx, by, times[k])
        rhs = op.mass / dt * u + op.B @ g
        u = lu.solve(rhs)
        if not np.all(np.isfinite(u)):
            raise NumericalError("weighted solve produced non-finite values", step=k)
        vals[k][mask] = u
        if np.any(on_bd):
            vals[k][on_bd] = data.lateral_values(X[on_bd], Y[on_bd], times[k])
    return WeightedSolution(domain, times, vals, mask)


# --- flattening ---------------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FlattenMap:
    """``rho(x, z, t) = (x, z + phi(x), t)`` and the induced coefficients.

    ``a_hat = lambda_hat D^T D`` with ``D = [[1, -phi'], [0, 1]]`` and
    ``lambda_hat(x, z) = |z + phi(x)|^a``; the eigenvalues of ``D^T D`` lie in
    ``[1/beta_hat, beta_hat]`` with ``beta_hat = (1 + M)^2``.
    """

    domain: LipschitzCylinder
    a: float
    beta: float = 1.0

    def rho(self, x, z, t=None):
        y = np.asarray(z) + self.domain.phi(x)
        return (x, y) if t is None else (x, y, t)

    def inverse(self, x, y, t=None):
        z = np.asarray(y) - self.domain.phi(x)
        return (x, z) if t is None else (x, z, t)

    @property
    def beta_hat(self) -> float:
        return (1.0 + self.domain.M) ** 2 * self.beta

    def lam_hat(self, x, z) -> np.ndarray:
        return np.abs(np.asarray(z) + self.domain.phi(x)) ** self.a

    @staticmethod
    def metric(slope) -> np.ndarray:
        """``D^T D`` for the given slopes, shape ``(..., 2, 2)``."""
        m = np.asarray(slope, dtype=float)
        out = np.empty(m.shape + (2, 2))
        out[..., 0, 0] = 1.0
        out[..., 0, 1] = -m
        out[..., 1, 0] = -m
        out[..., 1, 1] = 1.0 + m * m
        return out

    def a_hat(self, x, z) -> np.ndarray:
        return self.lam_hat(x, z)[..., None, None] * self.metric(self.domain.dphi(x))

    def eigen_check(self, x, z) -> tuple[float, float]:
        """Extreme ratios ``xi^T a_hat xi / (lambda_hat |xi|^2)`` over the samples."""
        ev = np.linalg.eigvalsh(self.metric(self.domain.dphi(np.asarray(x, dtype=float))))
        lo, hi = float(ev[..., 0].min()), float(ev[..., 1].max())
        if lo < 1.0 / self.beta_hat * (1 - 1e-12) or hi > self.beta_hat * (1 + 1e-12):
            raise NumericalError("flattened coefficients violate the ellipticity bound", lo=lo, hi=hi)
        return lo, hi


@dataclass(frozen=True, eq=False)
class FlatProblem:
    """Bilinear finite elements for ``lambda_hat u_t = div(a_hat grad u)`` on the rectangle."""

    fmap: FlattenMap
    xs: np.ndarray
    zs: np.ndarray
    K: csc_matrix
    mass: np.ndarray

    def solve(self, data: BoundaryData, Nt: int, t_end: float | None = None) -> np.ndarray:
        """Backward Euler; returns ``values[k, i, j]`` at the rectangle nodes ``(xs[i], zs[j])``."""
        dom = self.fmap.domain
        t_end = dom.T if t_end is None else float(t_end)
        dt = t_end / Nt
        nx, nz = len(self.xs), len(self.zs)
        Xg, Zg = np.meshgrid(self.xs, self.zs, indexing="ij")
        bd = np.zeros((nx, nz), dtype=bool)
        bd[0, :] = bd[-1, :] = bd[:, 0] = bd[:, -1] = True
        inner = ~bd.ravel()
        Kii = self.K[inner][:, inner]
        Kib = self.K[inner][:, ~inner]
        m = self.mass[inner]
        lu = splu((diags(m / dt) + Kii).tocsc())
        _, Yg = self.fmap.rho(Xg, Zg)
        out = np.zeros((Nt + 1, nx, nz))
        u0 = np.asarray(data.initial(Xg, Yg), dtype=float) * np.ones(Xg.shape)
        out[0] = u0
        u = u0.ravel()[inner]
        xb, yb = Xg.ravel()[~inner], Yg.ravel()[~inner]
        for k in range(1, Nt + 1):
            g = data.lateral_values(xb, yb, k * dt)
            u = lu.solve(m / dt * u - Kib @ g)
            full = np.empty(nx * nz)
            full[inner] = u
            full[~inner] = g
            out[k] = full.reshape(nx, nz)
        return out

    def pull_back(self, values: np.ndarray) -> np.ndarray:
        """Map rectangle values onto the background mesh of the sheared domain (linear in ``z``)."""
        dom = self.fmap.domain
        X, Y = dom.node_coordinates()
        Z = Y - dom.phi(X)
        out = np.zeros(values.shape[:1] + X.shape)
        for i in range(X.shape[0]):
            for k in range(values.shape[0]):
                out[k, i] = np.interp(Z[i], self.zs, values[k, i], left=0.0, right=0.0)
        mask = dom.interior_mask()
        return out * mask[None]


def flatten(domain: LipschitzCylinder, p: FracParams, Nz: int | None = None) -> tuple[FlattenMap, FlatProblem]:
    """Flatten the sheared slab to ``(x_lo, x_hi) x (y_lo, y_hi)`` and assemble the transformed problem."""
    fmap = FlattenMap(domain, p.a)
    lo, hi = domain.slab
    Nz = Nz if Nz is not None else max(4, int(round((hi - lo) / domain.hy)))
    xs = domain.x_nodes()
    zs = np.linspace(lo, hi, Nz + 1)
    nx, nz = len(xs), len(zs)
    gp = np.array([-1.0, 1.0]) / math.sqrt(3.0)
    ex, ez = np.meshgrid(np.arange(nx - 1), np.arange(nz - 1), indexing="ij")
    ex, ez = ex.ravel(), ez.ravel()
    hxe = xs[ex + 1] - xs[ex]
    hze = zs[ez + 1] - zs[ez]
    corners = [(0, 0), (1, 0), (1, 1), (0, 1)]
    node = [(ex + ci) * nz + (ez + cj) for ci, cj in corners]
    Ke = np.zeros((len(ex), 4, 4))
    Me = np.zeros((len(ex), 4))
    slope = domain.dphi(0.5 * (xs[ex] + xs[ex + 1]))
    G = FlattenMap.metric(slope)
    for gx in gp:
        for gz in gp:
            sx, sz = 0.5 * (1 + gx), 0.5 * (1 + gz)
            xq = xs[ex] + sx * hxe
            zq = zs[ez] + sz * hze
            lam = fmap.lam_hat(xq, zq)
            w = 0.25 * hxe * hze
            N = np.array([(1 - sx) * (1 - sz), sx * (1 - sz), sx * sz, (1 - sx) * sz])
            dNx = np.array([-(1 - sz), (1 - sz), sz, -sz])[:, None] / hxe
            dNz = np.array([-(1 - sx), -sx, sx, (1 - sx)])[:, None] / hze
            grads = np.stack([dNx, dNz], axis=-1)  # (4, E, 2)
            flux = np.einsum("eij,aej->eai", G, grads)
            Ke += (w * lam)[:, None, None] * np.einsum("aei,ebi->eab", grads, flux)
            Me += (w * lam)[:, None] * N[None, :]
    rows = np.stack(node, axis=1)
    I = np.repeat(rows, 4, axis=1).ravel()
    Jc = np.tile(rows, (1, 4)).ravel()
    K = coo_matrix((Ke.ravel(), (I, Jc)), shape=(nx * nz, nx * nz)).tocsc()
    mass = np.bincount(rows.ravel(), weights=Me.ravel(), minlength=nx * nz)
    return fmap, FlatProblem(fmap, xs, zs, K, mass)


# --- barrier -----------------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Barrier:
    """``psi(X, t) = psi(X) + (t0 - t)`` with ``L psi = -lambda`` and ``psi = |X - X0|`` on the boundary."""

    domain: LipschitzCylinder
    X0: tuple[float, float]
    t0: float
    spatial: np.ndarray  # nodal values on the background mesh (boundary nodes included)
    mask: np.ndarray

    def __call__(self, t) -> np.ndarray:
        return self.spatial + (self.t0 - np.asarray(t, dtype=float))[..., None, None]


def build_barrier(domain: LipschitzCylinder, p: FracParams, X0, t0: float, operator: WeightedOperator | None = None) -> Barrier:
    """Solve the weighted elliptic problem ``div(lambda grad psi) = -lambda``.

    With right-hand side ``-lambda`` (rather than ``-1``) the time-shifted barrier
    satisfies ``lambda psi_t - div(lambda grad psi) = 0`` exactly, also for
    ``a != 0``.
    """
    X0 = np.asarray(X0, dtype=float)
    if abs(float(domain.level(X0[0], X0[1]))) > 1e-9:
        raise DomainError("X0 must lie on the spatial boundary")
    op = operator if operator is not None else assemble_operator(domain, p.a)
    gb = np.sqrt(((op.boundary_points - X0) ** 2).sum(axis=1))
    rhs = op.mass + op.B @ gb
    try:
        psi_in = splu(op.A.tocsc()).solve(rhs)
    except RuntimeError as exc:
        raise NumericalError("elliptic barrier solve failed", detail=str(exc)) from exc
    if not np.all(np.isfinite(psi_in)):
        raise NumericalError("elliptic barrier solve produced non-finite values")
    X, Y = domain.node_coordinates()
    mask = op.index >= 0
    psi = np.sqrt((X - X0[0]) ** 2 + (Y - X0[1]) ** 2)
    psi[mask] = psi_in
    return Barrier(domain, tuple(X0), float(t0), psi, mask)


# --- quotients ------------------------------------------------------------------------------------

EXACT = "exact"


@dataclass(frozen=True)
class QuotientProfile:
    """Oscillation of ``u/v`` (normalized by its value at the corkscrew point) on shrinking cylinders."""

    X0: tuple[float, float]
    t0: float
    scales: tuple[float, ...]
    osc: tuple[float, ...]
    alpha: float | str | None
    alpha_raw: float | None
    c: float | None
    r2: float | None
    corkscrew_value: float
    used: tuple[bool, ...]

    def table(self) -> list[tuple[int, float, float]]:
        return [(k, r, o) for k, (r, o) in enumerate(zip(self.scales, self.osc))]

    def summary(self) -> dict:
        d = asdict(self)
        d["X0"] = list(self.X0)
        return d


def cylinder_mask(sol: WeightedSolution, X0, t0: float, r: float) -> np.ndarray:
    """Interior nodes of ``Q_r(X0, t0) = {|X - X0| < r, |t - t0| < r^2}`` as a ``(time, i, j)`` mask."""
    X, Y = sol.domain.node_coordinates()
    ball = ((X - X0[0]) ** 2 + (Y - X0[1]) ** 2 < r * r) & sol.mask
    window = np.abs(sol.times - t0) < r * r
    return window[:, None, None] & ball[None]


def quotient_profile(
    u: WeightedSolution,
    v: WeightedSolution,
    X0,
    t0: float,
    r: float,
    depth: int,
    delta: float | None = None,
    corkscrew: CorkscrewPoint | None = None,
    solver_tol: float = 1e-12,
    min_r2: float = 0.9,
) -> QuotientProfile:
    """Oscillations of ``u/v`` over ``Q_{r 2^-k}(X0, t0)``, ``k = 0..depth``, and a power-law fit.

    Cylinders containing fewer than two spatial mesh nodes get ``nan``.  Nodes
    where ``v < 1e-10 max|v|`` are masked.  Scales whose oscillation is below
    ``10 * solver_tol`` are excluded from the fit; ``alpha`` is reported only
    when at least three scales enter the fit with ``R^2 >= min_r2``, and is
    capped at 1 (``alpha_raw`` keeps the fitted slope).  Identical quotients give the sentinel ``"exact"``.
    """
    if u.values.shape != v.values.shape:
        raise DomainError("u and v live on different meshes")
    dom = u.domain
    delta = 0.25 * math.sqrt(dom.T) if delta is None else delta
    if t0 < delta**2 or t0 > u.times[-1]:
        raise DomainError(f"t0 must lie in [delta^2, t_end] = [{delta ** 2}, {u.times[-1]}]")
    if np.any(u.values < -1e-12) or np.any(v.values < -1e-12):
        raise DomainError("u and v must be non-negative")
    cp = corkscrew if corkscrew is not None else corkscrew_point(dom, X0, r)
    vmax = float(np.abs(v.values).max())
    valid = v.values > 1e-10 * vmax
    k0 = int(np.argmin(np.abs(u.times - t0)))
    vA = v.at(cp.point, t0)
    if vA <= 1e-10 * vmax:
        raise NumericalError("v vanishes at the corkscrew point", value=vA)
    qA = u.at(cp.point, t0) / vA
    scales, oscs = [], []
    for k in range(depth + 1):
        rk = r * 2.0**-k
        m = cylinder_mask(u, X0, u.times[k0], rk)
        interior_v = m & u.mask[None]
        if np.any(interior_v & ~valid):
            # zero denominators strictly inside the domain make the quotient meaningless
            bad = interior_v & ~valid & (u.values > 1e-10 * vmax)
            if np.any(bad):
                raise NumericalError("degenerate quotient: v vanishes at an interior node", scale=rk)
        m &= valid
        scales.append(rk)
        if np.count_nonzero(m.any(axis=0)) < 2:
            oscs.append(math.nan)  # cylinder not resolved by the mesh
            continue
        q = u.values[m] / v.values[m]
        oscs.append(float(q.max() - q.min()) / abs(qA))
    osc = np.array(oscs)
    if np.isnan(osc[0]):
        raise NumericalError("the largest cylinder holds fewer than two mesh nodes; refine the mesh", scale=r)
    used = np.nan_to_num(osc, nan=0.0) > 10 * solver_tol
    if not np.any(used):
        return QuotientProfile(tuple(X0), t0, tuple(scales), tuple(oscs), EXACT, None, 0.0, None, qA, tuple(bool(b) for b in used))
    alpha = alpha_raw = c = r2 = None
    if used.sum() >= 2:
        lx = np.log(np.array(scales)[used] / r)
        ly = np.log(osc[used])
        slope, icpt = np.polyfit(lx, ly, 1)
        pred = slope * lx + icpt
        ss = float(((ly - ly.mean()) ** 2).sum())
        r2 = 1.0 - float(((ly - pred) ** 2).sum()) / ss if ss > 0 else 1.0
        alpha_raw = float(slope)
        c = float(math.exp(icpt))
        # a two-point fit has R^2 = 1 trivially, so alpha needs three usable scales
        if used.sum() >= 3 and r2 >= min_r2 and slope > 0:
            alpha = float(min(alpha_raw, 1.0))
    return QuotientProfile(tuple(X0), t0, tuple(scales), tuple(oscs), alpha, alpha_raw, c, r2, qA, tuple(bool(b) for b in used))


def quotient_bounds(u: WeightedSolution, v: WeightedSolution, X0, t0: float, r: float, q_ref: float) -> tuple[float, float]:
    """``min`` and ``max`` of ``(u/v) / q_ref`` over ``Q_{r/4}(X0, t0)`` (valid nodes only).

    Returns ``(nan, nan)`` when the mesh puts no valid node inside the cylinder.
    """
    k0 = int(np.argmin(np.abs(u.times - t0)))
    m = cylinder_mask(u, X0, u.times[k0], 0.25 * r)
    m &= v.values > 1e-10 * float(np.abs(v.values).max())
    q = u.values[m] / v.values[m] / q_ref
    if q.size == 0:
        return math.nan, math.nan
    return float(q.min()), float(q.max())


def interior_harnack_ratio(sol: WeightedSolution, center, radius: float, t_lo: float, t_hi: float) -> float:
    """``sup u / inf u`` over the interior nodes of ``B(center, radius) x [t_lo, t_hi]``."""
    X, Y = sol.domain.node_coordinates()
    ball = ((X - center[0]) ** 2 + (Y - center[1]) ** 2 <= radius**2) & sol.mask
    win = (sol.times >= t_lo - 1e-12) & (sol.times <= t_hi + 1e-12)
    vals = sol.values[win][:, ball]
    if vals.size == 0 or vals.min() <= 0:
        raise NumericalError("interior cylinder has no positive values")
    return float(vals.max() / vals.min())


# --- experiments ---------------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    """Parameters of one boundary-quotient experiment (all lengths in domain units)."""

    s: float = 0.5
    M: float = 0.0
    slab: tuple[float, float] = (-0.5, 0.5)
    x_range: tuple[float, float] = (0.0, 1.0)
    mesh: tuple[int, int] = (40, 40)
    T: float = 1.0
    delta: float | None = None
    t0: float = 0.08
    r: float = 0.12
    depth: int = 3
    boundary_point: tuple[float, float] | None = None
    data: tuple[Mapping, Mapping] = (
        {"kind": "level", "power": 1.0},
        {"kind": "level", "power": 2.0, "tilt": [2.0, 1.0]},
    )
    r0: float | None = 0.5
    dt_per_h: float = 0.25

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise DomainError(f"unknown experiment keys: {sorted(unknown)}")
        kw = dict(d)
        for key in ("slab", "x_range", "mesh", "boundary_point"):
            if kw.get(key) is not None:
                kw[key] = tuple(kw[key])
        if "data" in kw:
            kw["data"] = tuple(kw["data"])
        return cls(**kw)

    def with_mesh(self, mesh: tuple[int, int]) -> "ExperimentConfig":
        d = asdict(self)
        d["mesh"] = tuple(mesh)
        return ExperimentConfig.from_dict(d)


@dataclass(frozen=True)
class ExperimentResult:
    config: ExperimentConfig
    profile: QuotientProfile
    corkscrew: CorkscrewPoint
    bounds: tuple[float, float]
    harnack_ratio: tuple[float, float]

    def summary(self) -> dict:
        prof = self.profile
        return {
            "alpha": prof.alpha,
            "alpha_raw": prof.alpha_raw,
            "c": prof.c,
            "r2": prof.r2,
            "corkscrew_value": prof.corkscrew_value,
            "corkscrew_point": list(self.corkscrew.point),
            "quotient_bounds": list(self.bounds),
            "interior_harnack_ratio": list(self.harnack_ratio),
            "config": json.loads(json.dumps(asdict(self.config))),
        }


def experiment_domain(cfg: ExperimentConfig) -> LipschitzCylinder:
    if cfg.M == 0:
        spec = {"kind": "flat"}
    else:
        spec = {"kind": "wedge", "M": cfg.M, "vertex": 0.5 * sum(cfg.x_range)}
    return build_domain(spec, cfg.slab, cfg.T, cfg.mesh, cfg.x_range, cfg.r0)


def default_boundary_point(cfg: ExperimentConfig, domain: LipschitzCylinder) -> tuple[float, float]:
    """Flat slab: midpoint of the left wall.  Wedge: the vertex on the lower graph."""
    if cfg.boundary_point is not None:
        return tuple(cfg.boundary_point)
    if cfg.M == 0:
        return (domain.x_lo, 0.5 * sum(domain.slab))
    x0 = 0.5 * sum(cfg.x_range)
    return (x0, domain.slab[0] + float(domain.phi(x0)))


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    p = make_params(cfg.s)
    dom = experiment_domain(cfg)
    X0 = default_boundary_point(cfg, dom)
    cp = corkscrew_point(dom, X0, cfg.r)
    t_end = min(dom.T, cfg.t0 + cfg.r**2)
    h = min(dom.hx, dom.hy)
    Nt = max(8, int(math.ceil(t_end / (cfg.dt_per_h * h))))
    op = assemble_operator(dom, p.a)
    u = solve_weighted(dom, p, data_from_spec(dom, cfg.data[0]), Nt, t_end, operator=op)
    v = solve_weighted(dom, p, data_from_spec(dom, cfg.data[1]), Nt, t_end, operator=op)
    prof = quotient_profile(u, v, X0, cfg.t0, cfg.r, cfg.depth, cfg.delta, corkscrew=cp)
    bounds = quotient_bounds(u, v, X0, cfg.t0, cfg.r, prof.corkscrew_value)
    # interior Harnack: ball of radius a quarter of the smaller side around the slab centre
    side = min(dom.x_hi - dom.x_lo, dom.slab[1] - dom.slab[0])
    centre = (0.5 * (dom.x_lo + dom.x_hi), 0.5 * sum(dom.slab) + float(dom.phi(0.5 * (dom.x_lo + dom.x_hi))))
    rho = 0.25 * side
    ratios = (
        interior_harnack_ratio(u, centre, rho, cfg.t0 - rho**2, cfg.t0),
        interior_harnack_ratio(v, centre, rho, cfg.t0 - rho**2, cfg.t0),
    )
    return ExperimentResult(cfg, prof, cp, bounds, ratios)
