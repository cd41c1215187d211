"""Regularization/noise sweeps over manufactured-solution identification runs."""

from __future__ import annotations

import csv
import io
import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache

import numpy as np

from .fem import assemble
from .inverse import OptimizerOptions, RegParams, optimize
from .mesh import Subdomain, Variant, generate_phantom
from .synthetic import NoiseSpec, make_synthetic_observations, manufactured_control

log = logging.getLogger(__name__)

CSV_HEADER = ["alpha", "beta", "gamma", "k", "noise_amp", "iterations", "converged",
              "D1_rel", "D2_rel", "D3_rel", "g_rel", "J"]


@dataclass(frozen=True)
class CaseConfig:
    """Everything that defines one manufactured identification run except the grid values."""

    variant: str = "two_domain"
    resolution: int = 8
    box_length: float = 40.0
    cavity_cells: int | None = None
    shell_fractions: tuple | None = None
    n_obs: int = 10
    T: float = 24.0
    dt_gen: float | None = None  # None: generate on the inversion grid
    seed: int = 0
    lumped: bool = False
    max_iter: int = 500
    rtol: float = 1e-6


@dataclass(frozen=True)
class Cell:
    alpha: float
    beta: float
    gamma: float
    k: int
    noise_amp: float
    case: CaseConfig = field(default_factory=CaseConfig)


def grid_cells(alpha, beta, gamma, k, noise_amp, case: CaseConfig | None = None) -> list[Cell]:
    case = case or CaseConfig()
    return [Cell(a, b, g, int(kk), n, case) for a, b, g, kk, n in itertools.product(alpha, beta, gamma, k, noise_amp)]


@lru_cache(maxsize=8)
def _system(case: CaseConfig):
    mesh = generate_phantom(case.resolution, case.box_length, Variant(case.variant),
                            case.shell_fractions, case.cavity_cells)
    return assemble(mesh, lumped=case.lumped)


@lru_cache(maxsize=32)
def _observations(case: CaseConfig, dt_gen: float, noise_amp: float):
    system = _system(case)
    obs, _ = make_synthetic_observations(system, dt_gen=dt_gen, n_obs=case.n_obs, T=case.T,
                                         noise=NoiseSpec(noise_amp, case.seed))
    return obs


def run_cell(cell: Cell) -> dict:
    """One identification run; failures are reported in the row instead of raised."""
    case = cell.case
    row = {"alpha": cell.alpha, "beta": cell.beta, "gamma": cell.gamma, "k": cell.k, "noise_amp": cell.noise_amp}
    try:
        system = _system(case)
        dt = case.T / cell.k
        obs = _observations(case, case.dt_gen or dt, cell.noise_amp)
        truth = manufactured_control(system, dt, cell.k)
        result = optimize(system, obs, RegParams(cell.alpha, cell.beta, cell.gamma), dt, cell.k, truth=truth,
                          opts=OptimizerOptions(max_iter=case.max_iter, rtol=case.rtol))
    except Exception as exc:  # noqa: BLE001 - recorded per row, sweep continues
        log.warning("cell %s failed: %s", row, exc)
        row.update(iterations=None, converged=False, error=str(exc), D_rel={}, g_rel=None, J=None)
        return row
    row.update(iterations=result.iterations, converged=result.converged, error=None,
               D_rel=result.errors["D_rel"], g_rel=result.errors["g_rel"], J=result.J,
               D=dict(zip(system.subdomains, result.control.D.tolist())))
    return row


def run_sweep(cells, workers: int = 1, on_row=None) -> list[dict]:
    """Run all cells; rows come back in cell order whatever the execution order."""
    cells = list(cells)
    if workers <= 1:
        rows = []
        for cell in cells:
            rows.append(run_cell(cell))
            if on_row:
                on_row(rows[-1])
        return rows
    rows = []
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for row in pool.map(run_cell, cells):
            rows.append(row)
            if on_row:
                on_row(row)
    return rows


def _fmt(x):
    return "" if x is None else repr(float(x))


def format_row(row: dict) -> list[str]:
    D = row.get("D_rel") or {}
    converged = "error" if row.get("error") else str(bool(row["converged"])).lower()
    return [_fmt(row["alpha"]), _fmt(row["beta"]), _fmt(row["gamma"]), str(row["k"]), _fmt(row["noise_amp"]),
            "" if row.get("iterations") is None else str(row["iterations"]), converged,
            *(_fmt(D.get(int(s))) for s in Subdomain), _fmt(row.get("g_rel")), _fmt(row.get("J"))]


def write_csv(rows, path_or_file) -> None:
    close = False
    if isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__"):
        fh = open(path_or_file, "w", newline="")
        close = True
    else:
        fh = path_or_file
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for row in rows:
            w.writerow(format_row(row))
    finally:
        if close:
            fh.close()


def to_csv_string(rows) -> str:
    buf = io.StringIO()
    write_csv(rows, buf)
    return buf.getvalue()


def case_from_dict(data: dict) -> CaseConfig:
    known = {f for f in CaseConfig.__dataclass_fields__}
    unknown = set(data) - known
    if unknown:
        raise KeyError(f"unknown case keys: {sorted(unknown)}")
    data = dict(data)
    if data.get("shell_fractions") is not None:
        data["shell_fractions"] = tuple(data["shell_fractions"])
    return replace(CaseConfig(), **data)


def case_to_dict(case: CaseConfig) -> dict:
    return asdict(case)


def summarize(rows) -> np.ndarray:
    """Max |D_rel| per row (NaN for failed rows)."""
    return np.array([max((abs(v) for v in (r.get("D_rel") or {}).values()), default=np.nan) for r in rows])
