"""Command-line front end: ``fracheat <command> --config run.json [overrides]``.

Every run reads a JSON config, applies the five scalar overrides (``--s``,
``--nx``, ``--nt``, ``--method``, ``--out``), dispatches one command and writes
its artifacts atomically.  Exit codes: 0 success, 1 tolerance failure,
2 configuration error, 3 numerical error; failures print one JSON object on
stderr.
"""

from __future__ import annotations

import argparse
import json
import math
import platform
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import scipy
from scipy.integrate import quad

from . import __version__
from .core import (
    PROVENANCE_PREFIX,
    DomainError,
    Field,
    NumericalError,
    ShapeError,
    SpaceTimeGrid,
    field_from_csv,
    field_to_csv,
    fmt,
    make_params,
    thread_count,
    write_atomic,
)
from .extension import ExtensionGrid, poisson_extend, smooth_profile, solve_extension_pde
from .fracop import apply_extension_route, apply_singular, apply_spectral, consistency_report
from .harnack import ExperimentConfig, run_experiment
from .kernels import kernel_mass

COMMANDS = ("kernel-mass", "apply", "extend", "consistency", "harnack")
METHODS = ("spectral", "singular", "extension")
BUILTINS = ("constant", "mode", "gaussian-bump", "separable-bump")

EXIT_OK, EXIT_TOLERANCE, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3

DEFAULT_GRID = {"n": 1, "L": 8.0, "Nx": 64, "T": 4.0, "Nt": 32}
DEFAULT_INPUT = {"builtin": "mode", "params": {"kx": 1, "kt": 1}}
DEFAULT_TOLERANCE = {"kernel_mass": 1e-8, "consistency": 5e-3, "singular": 1e-6}
TOP_KEYS = {"command", "s", "grid", "method", "input", "out", "tolerance", "kernel_mass", "extension", "harnack"}


class ConfigError(ValueError):
    """The run configuration is malformed or inconsistent."""


class ToleranceFailure(RuntimeError):
    def __init__(self, message: str, **details):
        super().__init__(message)
        self.details = details


# --- configuration -------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    command: str
    s: float
    grid: SpaceTimeGrid
    method: str = "spectral"
    input: Mapping[str, Any] = field(default_factory=lambda: dict(DEFAULT_INPUT))
    out: Path | None = None
    tolerance: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_TOLERANCE))
    options: Mapping[str, Any] = field(default_factory=dict)
    echo: Mapping[str, Any] = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, raw: Mapping[str, Any], base_dir: Path | str = ".") -> "RunConfig":
        """Validate a raw config dict (after overrides); relative input paths resolve against ``base_dir``."""
        unknown = set(raw) - TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        command = raw.get("command")
        if command not in COMMANDS:
            raise ConfigError(f"command must be one of {list(COMMANDS)}, got {command!r}")
        s = raw.get("s", 0.5)
        if not isinstance(s, (int, float)) or isinstance(s, bool):
            raise ConfigError("s must be a number")
        try:
            make_params(s)
        except DomainError as exc:
            raise ConfigError(str(exc)) from exc

        grid_spec = {**DEFAULT_GRID, **dict(raw.get("grid") or {})}
        if set(grid_spec) - set(DEFAULT_GRID):
            raise ConfigError(f"unknown grid keys: {sorted(set(grid_spec) - set(DEFAULT_GRID))}")
        try:
            grid = SpaceTimeGrid(
                int(grid_spec["n"]), float(grid_spec["L"]), int(grid_spec["Nx"]), float(grid_spec["T"]), int(grid_spec["Nt"])
            )
        except (DomainError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid grid: {exc}") from exc

        method = raw.get("method", "spectral")
        if method not in METHODS:
            raise ConfigError(f"method must be one of {list(METHODS)}, got {method!r}")

        source = dict(raw.get("input") or DEFAULT_INPUT)
        if ("builtin" in source) == ("csv" in source):
            raise ConfigError("input needs exactly one of 'builtin' or 'csv'")
        if "builtin" in source:
            if source["builtin"] not in BUILTINS:
                raise ConfigError(f"unknown builtin {source['builtin']!r}; choose from {list(BUILTINS)}")
            if set(source) - {"builtin", "params"}:
                raise ConfigError("builtin input takes only 'builtin' and 'params'")
        else:
            path = Path(source["csv"])
            if not path.is_absolute():
                path = Path(base_dir) / path
            if not path.is_file():
                raise ConfigError(f"input CSV not found: {path}")
            source["csv"] = str(path)

        tol = dict(DEFAULT_TOLERANCE)
        for key, val in dict(raw.get("tolerance") or {}).items():
            if key not in DEFAULT_TOLERANCE:
                raise ConfigError(f"unknown tolerance key {key!r}")
            if not (isinstance(val, (int, float)) and val > 0):
                raise ConfigError(f"tolerance {key!r} must be positive")
            tol[key] = float(val)

        out = raw.get("out")
        options = {key: raw[key] for key in ("kernel_mass", "extension", "harnack") if key in raw}
        return cls(
            command=command,
            s=float(s),
            grid=grid,
            method=method,
            input=source,
            out=Path(out) if out else None,
            tolerance=tol,
            options=options,
            echo=json.loads(json.dumps(dict(raw))),
        )

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> "RunConfig":
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        if raw.get("command", args.command) != args.command:
            raise ConfigError(f"config command {raw['command']!r} conflicts with {args.command!r}")
        raw = {**raw, "command": args.command}
        if args.s is not None:
            raw["s"] = args.s
        if args.nx is not None or args.nt is not None:
            grid = dict(raw.get("grid") or {})
            if args.nx is not None:
                grid["Nx"] = args.nx
            if args.nt is not None:
                grid["Nt"] = args.nt
            raw["grid"] = grid
        if args.method is not None:
            raw["method"] = args.method
        if args.out is not None:
            raw["out"] = args.out
        return cls.from_mapping(raw, base_dir=path.parent)

    @property
    def params(self):
        return make_params(self.s)


# --- builtin input fields ---------------------------------------------------------


def _periodic_offset(x: np.ndarray, c: float, period: float) -> np.ndarray:
    return (x - c + 0.5 * period) % period - 0.5 * period


def _bump_geometry(params: Mapping, grid: SpaceTimeGrid) -> tuple[list[float], list[float]]:
    dims = grid.n + 1
    periods = [grid.L] * grid.n + [grid.T]
    center = params.get("center", [0.5 * P for P in periods])
    width = params.get("width", [0.25 * P for P in periods])
    center = [float(center)] * dims if np.isscalar(center) else [float(c) for c in center]
    width = [float(width)] * dims if np.isscalar(width) else [float(w) for w in width]
    if len(center) != dims or len(width) != dims:
        raise ConfigError(f"bump center/width need {dims} entries (space..., time)")
    if any(w <= 0 for w in width) or any(2 * w > P for w, P in zip(width, periods)):
        raise ConfigError("bump widths must be positive and fit inside one period")
    return center, width


def generate_builtin(name: str, params: Mapping | None, grid: SpaceTimeGrid) -> Field:
    """Deterministic input fields.

    ``constant``: ``c``.  ``mode``: ``amplitude * cos(2 pi (kx x [+ ky y]) / L + 2 pi kt t / T + phase)``
    with integer indices.  ``gaussian-bump``: the radial profile
    ``amplitude * exp(-1/(1-rho^2))`` with ``rho`` the width-scaled distance in
    ``(x, t)``.  ``separable-bump``: the product of one-dimensional profiles.
    Bumps are C-infinity with compact support inside one period.
    """
    params = dict(params or {})
    coords = grid.mesh()
    if name == "constant":
        return Field(grid, np.full(grid.shape, float(params.get("c", 1.0))), real=True)
    if name == "mode":
        ks = [params.get("kx", 1)] + ([params.get("ky", 0)] if grid.n == 2 else []) + [params.get("kt", 0)]
        if any(not isinstance(k, int) or isinstance(k, bool) for k in ks):
            raise ConfigError("mode frequency indices must be integers")
        periods = [grid.L] * grid.n + [grid.T]
        phase = float(params.get("phase", 0.0)) + sum(2 * np.pi * k * c / P for k, c, P in zip(ks, coords, periods))
        return Field(grid, float(params.get("amplitude", 1.0)) * np.cos(phase), real=True)
    if name in ("gaussian-bump", "separable-bump"):
        center, width = _bump_geometry(params, grid)
        periods = [grid.L] * grid.n + [grid.T]
        zs = [_periodic_offset(c, c0, P) / w for c, c0, P, w in zip(coords, center, periods, width)]
        amp = float(params.get("amplitude", 1.0))
        if name == "gaussian-bump":
            return Field(grid, amp * smooth_profile(np.sqrt(sum(z * z for z in zs))), real=True)
        return Field(grid, amp * np.prod([smooth_profile(z) for z in zs], axis=0), real=True)
    raise ConfigError(f"unknown builtin {name!r}; choose from {list(BUILTINS)}")


def builtin_mass(name: str, params: Mapping | None, grid: SpaceTimeGrid) -> float:
    """Exact space-time integral of a bump builtin (one-dimensional quadrature of its profile)."""
    params = dict(params or {})
    _, width = _bump_geometry(params, grid)
    amp = float(params.get("amplitude", 1.0))
    scale = float(np.prod(width))
    if name == "separable-bump":
        one, _ = quad(lambda z: math.exp(-1.0 / (1.0 - z * z)), -1.0, 1.0, epsabs=1e-14, epsrel=1e-13)
        return amp * scale * one ** (grid.n + 1)
    if name == "gaussian-bump":
        d = grid.n + 1
        sphere = 2 * math.pi ** (d / 2) / math.gamma(d / 2)
        radial, _ = quad(lambda r: r ** (d - 1) * math.exp(-1.0 / (1.0 - r * r)), 0.0, 1.0, epsabs=1e-14, epsrel=1e-13)
        return amp * scale * sphere * radial
    raise ConfigError(f"{name!r} has no finite mass")


def load_input(cfg: RunConfig) -> Field:
    src = cfg.input
    if "csv" in src:
        try:
            f = field_from_csv(Path(src["csv"]).read_text())
        except (ValueError, IndexError) as exc:
            raise ConfigError(f"cannot parse input CSV: {exc}") from exc
        if f.grid != cfg.grid:
            raise ConfigError("input CSV grid differs from the configured grid")
        return f
    return generate_builtin(src["builtin"], src.get("params"), cfg.grid)


# --- provenance and output ------------------------------------------------------------


def provenance(cfg: RunConfig) -> dict:
    g = cfg.grid
    return {
        "tool": "fracheat",
        "version": __version__,
        "command": cfg.command,
        "s": cfg.s,
        "grid": {"n": g.n, "L": g.L, "Nx": g.Nx, "T": g.T, "Nt": g.Nt},
        "config": dict(cfg.echo),
        "versions": {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__},
    }


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Field):
        return {"sup": obj.sup(), "l2": obj.l2()}
    if isinstance(obj, Path):
        return str(obj)
    return repr(obj)


def _dump(obj, indent: int = 0) -> str:
    pad, inner = "  " * indent, "  " * (indent + 1)
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, float):
        if math.isnan(obj):
            return "NaN"
        if math.isinf(obj):
            return "Infinity" if obj > 0 else "-Infinity"
        return fmt(obj)
    if isinstance(obj, (int, str)):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{inner}{json.dumps(str(k))}: {_dump(obj[k], indent + 1)}" for k in sorted(obj)]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        return "[\n" + ",\n".join(inner + _dump(v, indent + 1) for v in obj) + "\n" + pad + "]"
    return _dump(_json_default(obj), indent)


def to_json(obj) -> str:
    """Deterministic JSON (sorted keys) with every float written to 17 significant digits."""
    return _dump(obj) + "\n"


def csv_with_provenance(cfg: RunConfig, body: str, **extra) -> str:
    return PROVENANCE_PREFIX + json.dumps({**provenance(cfg), **extra}, sort_keys=True) + "\n" + body


def emit(cfg: RunConfig, text: str, path: Path | None = None) -> None:
    path = path if path is not None else cfg.out
    if path is None:
        sys.stdout.write(text)
    else:
        write_atomic(path, text)


# --- commands ---------------------------------------------------------------------------


def _kernel_mass(cfg: RunConfig) -> int:
    opts = dict(cfg.options.get("kernel_mass") or {})
    ys = opts.get("y", [0.1, 1.0, 10.0])
    ys = [ys] if np.isscalar(ys) else list(ys)
    if not ys or any(not (isinstance(y, (int, float)) and y > 0) for y in ys):
        raise ConfigError("kernel_mass.y must be positive heights")
    tol = cfg.tolerance["kernel_mass"]
    masses = [kernel_mass(float(y), cfg.params) for y in ys]
    for m in masses:
        print(fmt(m))
    worst = max(abs(m - 1.0) for m in masses)
    if cfg.out is not None:
        doc = {
            "provenance": provenance(cfg),
            "mass": [{"y": float(y), "mass": m} for y, m in zip(ys, masses)],
            "max_deviation": worst,
            "tolerance": tol,
        }
        write_atomic(cfg.out, to_json(doc))
    if worst > tol:
        raise ToleranceFailure("kernel mass deviates from one", max_deviation=worst, tolerance=tol)
    return EXIT_OK


def apply_method(f: Field, cfg: RunConfig) -> Field:
    p = cfg.params
    if cfg.method == "spectral":
        return apply_spectral(f, p)
    if cfg.method == "singular":
        return apply_singular(f, p, tol=cfg.tolerance["singular"])
    return apply_extension_route(f, p)


def _apply(cfg: RunConfig) -> int:
    out = apply_method(load_input(cfg), cfg)
    emit(cfg, csv_with_provenance(cfg, field_to_csv(out)))
    return EXIT_OK


EXTENSION_KEYS = {"solver", "J", "Y_max", "slices", "scheme", "x_operator", "substeps"}


def _extend(cfg: RunConfig) -> int:
    opts = dict(cfg.options.get("extension") or {})
    if set(opts) - EXTENSION_KEYS:
        raise ConfigError(f"unknown extension keys: {sorted(set(opts) - EXTENSION_KEYS)}")
    p = cfg.params
    try:
        grid = ExtensionGrid.graded(cfg.grid, J=int(opts.get("J", 64)), Y_max=float(opts.get("Y_max", 1.0)), a=p.a)
    except DomainError as exc:
        raise ConfigError(str(exc)) from exc
    f = load_input(cfg)
    solver = opts.get("solver", "poisson")
    if solver == "poisson":
        u = poisson_extend(f, p, grid)
    elif solver == "pde":
        kw = {k: opts[k] for k in ("scheme", "x_operator", "substeps") if k in opts}
        try:
            u = solve_extension_pde(f, p, grid, **kw)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"invalid extension solver option: {exc}") from exc
    else:
        raise ConfigError("extension.solver must be 'poisson' or 'pde'")
    slices = [int(j) for j in opts.get("slices", [])]
    if any(not 0 <= j <= grid.J for j in slices):
        raise ConfigError(f"slice indices must lie in [0, {grid.J}]")
    if slices and cfg.out is None:
        raise ConfigError("slice export needs an output path")
    # write slices first so the main artifact's presence signals a complete run
    for j in slices:
        sl = cfg.out.with_name(f"{cfg.out.stem}_y{j}{cfg.out.suffix or '.csv'}")
        write_atomic(sl, csv_with_provenance(cfg, field_to_csv(u.height(j)), height=fmt(grid.y_nodes[j])))
    emit(cfg, csv_with_provenance(cfg, u.to_csv()))
    return EXIT_OK


def _consistency(cfg: RunConfig) -> int:
    f = load_input(cfg)
    report = consistency_report(f, cfg.params)
    tol = cfg.tolerance["consistency"]
    doc = {"provenance": provenance(cfg), "tolerance": tol, **report.to_json()}
    doc["passed"] = report.max_error("l2_rel") <= tol
    emit(cfg, to_json(doc))
    if not doc["passed"]:
        raise ToleranceFailure("route discrepancy above tolerance", max_l2_rel=report.max_error("l2_rel"), tolerance=tol)
    return EXIT_OK


def _harnack_jobs(cfg: RunConfig) -> list[ExperimentConfig]:
    opts = dict(cfg.options.get("harnack") or {})
    sweep = opts.pop("sweep", None)
    opts.setdefault("s", cfg.s)
    try:
        if not sweep:
            return [ExperimentConfig.from_dict(opts)]
        return [ExperimentConfig.from_dict({**opts, **dict(job)}) for job in sweep]
    except (DomainError, TypeError) as exc:
        raise ConfigError(f"invalid harnack experiment: {exc}") from exc


def _harnack(cfg: RunConfig) -> int:
    jobs = _harnack_jobs(cfg)
    if cfg.out is None:
        raise ConfigError("harnack needs an output path (CSV table; summary goes next to it as .json)")
    workers = max(1, min(thread_count(), len(jobs)))
    try:
        if workers == 1:
            results = [run_experiment(job) for job in jobs]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(run_experiment, jobs))  # ordered like ``jobs``
    except (DomainError, ShapeError) as exc:
        raise ConfigError(f"invalid harnack experiment: {exc}") from exc
    multi = len(results) > 1
    rows = ["job,k,r_k,osc_k" if multi else "k,r_k,osc_k"]
    for idx, res in enumerate(results):
        for k, r, o in res.profile.table():
            rows.append((f"{idx}," if multi else "") + f"{k},{fmt(r)},{fmt(o)}")
    summaries = [res.summary() for res in results]
    doc = {"provenance": provenance(cfg), "experiments": summaries}
    write_atomic(cfg.out.with_suffix(".json"), to_json(doc))
    emit(cfg, csv_with_provenance(cfg, "\n".join(rows) + "\n"))
    failed = [i for i, sm in enumerate(summaries) if sm["alpha"] is None]
    if failed:
        raise ToleranceFailure("Hölder fit quality below threshold", jobs=failed)
    return EXIT_OK


DISPATCH = {
    "kernel-mass": _kernel_mass,
    "apply": _apply,
    "extend": _extend,
    "consistency": _consistency,
    "harnack": _harnack,
}


def run(cfg: RunConfig) -> int:
    """Execute one command; returns its exit status (errors propagate as exceptions)."""
    return DISPATCH[cfg.command](cfg)


# --- entry point --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fracheat", description="Fractional heat operator toolkit")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--s", type=float, default=None, help="exponent s in (0,1)")
    parser.add_argument("--nx", type=int, default=None, help="points per spatial axis")
    parser.add_argument("--nt", type=int, default=None, help="time points")
    parser.add_argument("--method", choices=METHODS, default=None)
    parser.add_argument("--out", default=None, help="output path (stdout when omitted)")
    return parser


def _fail(kind: str, message: str, code: int, **details) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "details": details}, default=_json_default) + "\n")
    return code


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with status 2
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        cfg = RunConfig.from_args(args)
        return run(cfg)
    except ConfigError as exc:
        return _fail("config", str(exc), EXIT_CONFIG)
    except ToleranceFailure as exc:
        return _fail("tolerance", str(exc), EXIT_TOLERANCE, **exc.details)
    except NumericalError as exc:
        return _fail("numerical", str(exc), EXIT_NUMERICAL, **exc.estimates)
    except (DomainError, ShapeError) as exc:
        return _fail("config", str(exc), EXIT_CONFIG)
    except OSError as exc:
        return _fail("io", str(exc), EXIT_CONFIG)
    except (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        return _fail("numerical", f"{type(exc).__name__}: {exc}", EXIT_NUMERICAL)


if __name__ == "__main__":
    sys.exit(main())
