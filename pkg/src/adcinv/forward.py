"""Backward-Euler time stepping of the diffusion equation with Dirichlet control."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fem import AssembledSystem, Factorized, SolverError
from .mesh import VertexField, write_field

MM2_PER_H_TO_MM2_PER_S = 1.0 / 3600.0


@dataclass
class ControlState:
    """Optimization unknowns: one D per subdomain (mm^2/h) and boundary values g.

    ``g`` has shape (k + 1, number of Dirichlet vertices); row j holds the
    Dirichlet data at t_j = j * dt.
    """

    D: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        self.D = np.asarray(self.D, dtype=float).copy()
        self.g = np.atleast_2d(np.asarray(self.g, dtype=float)).copy()

    def copy(self) -> "ControlState":
        return ControlState(self.D, self.g)

    def check(self, system: AssembledSystem, k: int | None = None) -> None:
        if len(self.D) != len(system.subdomains):
            raise ValueError(f"expected {len(system.subdomains)} diffusion coefficients, got {len(self.D)}")
        if not np.all(np.isfinite(self.D)) or np.any(self.D <= 0):
            raise ValueError("diffusion coefficients must be finite and positive")
        if self.g.shape[1] != len(system.dirichlet_index):
            raise ValueError(f"g has {self.g.shape[1]} columns, system has {len(system.dirichlet_index)} Dirichlet vertices")
        if k is not None and self.g.shape[0] != k + 1:
            raise ValueError(f"g needs k + 1 = {k + 1} rows, got {self.g.shape[0]}")
        if not np.all(np.isfinite(self.g)):
            raise ValueError("g contains non-finite values")


@dataclass
class StateSeries:
    u: np.ndarray  # (k + 1, nv)
    dt: float
    mesh_id: str | None = None
    times: np.ndarray = field(init=False)

    def __post_init__(self):
        self.times = np.arange(len(self.u)) * self.dt

    @property
    def k(self) -> int:
        return len(self.u) - 1

    def __getitem__(self, j) -> np.ndarray:
        return self.u[j]

    def export(self, directory, stem: str = "u") -> Path:
        """Write one field file per step plus ``manifest.json`` with {dt, k, files}."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = []
        for j, values in enumerate(self.u):
            name = f"{stem}_{j:04d}.txt"
            write_field(values, directory / name)
            files.append(name)
        manifest = directory / "manifest.json"
        manifest.write_text(json.dumps({"dt": self.dt, "k": self.k, "files": files}, indent=2))
        return manifest


class Stepper:
    """Dirichlet-eliminated backward-Euler operators for fixed (D, dt).

    With F the free and B the Dirichlet vertices and A = M + dt K(D), one step
    solves ``A_FF u_F = M_FF u_F' + M_FB g' - A_FB g`` where primes denote the
    previous step. ``A_FF`` is factorized once.
    """

    def __init__(self, system: AssembledSystem, D, dt: float):
        self.system = system
        self.dt = float(dt)
        self.F = system.free_index
        self.B = system.dirichlet_index
        K = system.stiffness(D)
        A = (system.M + self.dt * K).tocsr()
        M = system.M
        F, B = self.F, self.B
        self.A_FF = A[F][:, F]
        self.A_FB = A[F][:, B]
        self.M_FF = M[F][:, F]
        self.M_FB = M[F][:, B]
        self.solve = Factorized(self.A_FF)

    def run(self, u0, g) -> np.ndarray:
        k = len(g) - 1
        F, B = self.F, self.B
        U = np.empty((k + 1, self.system.n))
        U[0] = u0
        U[0, B] = g[0]
        for j in range(1, k + 1):
            rhs = self.M_FF @ U[j - 1, F] + self.M_FB @ g[j - 1] - self.A_FB @ g[j]
            U[j, F] = self.solve(rhs)
            U[j, B] = g[j]
        return U


def forward_solve(system: AssembledSystem, control: ControlState, u0, dt: float, k: int) -> StateSeries:
    """Integrate ``du/dt = div(D grad u)`` for k backward-Euler steps of size dt.

    ``u0`` is overwritten by ``g[0]`` on Dirichlet vertices. Raises
    ``ValueError`` on NaN inputs and :class:`SolverError` on solve failure.
    """
    values = u0.values if isinstance(u0, VertexField) else np.asarray(u0, dtype=float)
    if values.shape != (system.n,):
        raise ValueError(f"initial condition needs {system.n} values, got {values.shape}")
    if not np.all(np.isfinite(values)):
        raise ValueError("initial condition contains NaN")
    if dt <= 0:
        raise ValueError("dt must be positive")
    control.check(system, k)
    U = Stepper(system, control.D, dt).run(values, control.g)
    if not np.all(np.isfinite(U)):
        raise SolverError("forward solve produced non-finite values")
    return StateSeries(U, dt, system.mesh.mesh_id)
