"""Manufactured boundary data, synthetic observations, noise, SNR and error metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fem import AssembledSystem
from .forward import ControlState, forward_solve
from .inverse import ObservationSeries
from .mesh import Subdomain, write_field

D_TRUE = {Subdomain.CSF: 1000.0, Subdomain.GREY: 4.0, Subdomain.WHITE: 8.0}
DT_GEN = 0.24
T_END = 24.0


@dataclass(frozen=True)
class NoiseSpec:
    amplitude: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValueError("noise amplitude must be non-negative")

    @property
    def sigma(self) -> float:
        """Standard deviation of uniform(-a, a) noise."""
        return self.amplitude / np.sqrt(3.0)


def manufactured_g(t):
    """Boundary concentration (mM) of the manufactured solution at t hours, 0 <= t <= 24."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(t > T_END):
        raise ValueError("manufactured_g is defined on 0 <= t <= 24 h")
    out = 0.3 + 0.167 * t - 0.007 * t**2
    return float(out) if out.ndim == 0 else out


def true_D(system: AssembledSystem, values=None) -> np.ndarray:
    values = D_TRUE if values is None else values
    return np.array([values[Subdomain(s)] for s in system.subdomains])


def manufactured_control(system: AssembledSystem, dt: float, k: int, D=None) -> ControlState:
    """Ground-truth control on the (dt, k) grid: spatially uniform g = manufactured_g(t_j)."""
    t = np.arange(k + 1) * dt
    g = np.repeat(manufactured_g(t)[:, None], len(system.dirichlet_index), axis=1)
    return ControlState(true_D(system) if D is None else D, g)


def observation_times(n_obs: int, T: float = T_END) -> np.ndarray:
    """`n_obs` evenly spaced times in (0, T]."""
    if n_obs < 2:
        raise ValueError("at least two observations required")
    return T * np.arange(1, n_obs + 1) / n_obs


def add_noise(values: np.ndarray, noise: NoiseSpec) -> np.ndarray:
    """Add i.i.d. uniform(-a, a) noise; observation i draws from stream (seed, i)."""
    values = np.atleast_2d(np.asarray(values, dtype=float))
    if noise.amplitude == 0:
        return values.copy()
    out = values.copy()
    for i in range(len(out)):
        rng = np.random.default_rng([noise.seed, i])
        out[i] += rng.uniform(-noise.amplitude, noise.amplitude, size=out.shape[1])
    return out


def sample_states(U: np.ndarray, dt: float, times) -> np.ndarray:
    """Linear-in-time interpolation of a state series at `times` (exact on step times)."""
    pos = np.asarray(times, dtype=float) / dt
    lo = np.clip(np.floor(pos + 1e-9).astype(int), 0, len(U) - 1)
    hi = np.minimum(lo + 1, len(U) - 1)
    w = np.clip(pos - lo, 0.0, 1.0)
    w[np.abs(w) < 1e-9] = 0.0
    return (1 - w)[:, None] * U[lo] + w[:, None] * U[hi]


def make_synthetic_observations(system: AssembledSystem, D_true=None, dt_gen: float = DT_GEN, n_obs: int = 10,
                                T: float = T_END, noise: NoiseSpec | None = None, times=None):
    """Forward-solve the manufactured problem from u0 = 0 and sample noisy observations.

    Returns ``(observations, clean_values)`` where ``clean_values`` are the
    noiseless sampled states.
    """
    noise = noise or NoiseSpec()
    k = int(round(T / dt_gen))
    if abs(k * dt_gen - T) > 1e-9 * T:
        raise ValueError("T must be an integer multiple of dt_gen")
    control = manufactured_control(system, dt_gen, k, D_true)
    series = forward_solve(system, control, np.zeros(system.n), dt_gen, k)
    times = observation_times(n_obs, T) if times is None else np.asarray(times, dtype=float)
    clean = sample_states(series.u, dt_gen, times)
    return ObservationSeries(times, add_noise(clean, noise)), clean


def write_observations(obs: ObservationSeries, directory, mesh_file: str, dt_gen: float, noise: NoiseSpec) -> Path:
    """Field files plus the observation manifest {mesh, dt_gen, times_hours, noise_amp, seed, field_files}."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for i, values in enumerate(obs.values):
        name = f"obs_{i:03d}.txt"
        write_field(values, directory / name)
        files.append(name)
    manifest = {
        "mesh": str(mesh_file),
        "dt_gen": dt_gen,
        "times_hours": [float(t) for t in obs.times],
        "noise_amp": noise.amplitude,
        "seed": noise.seed,
        "field_files": files,
    }
    path = directory / "observations.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def read_observations(path):
    """Load an observation manifest; returns ``(ObservationSeries, manifest dict)``."""
    from .mesh import read_field

    path = Path(path)
    manifest = json.loads(path.read_text())
    values = [read_field(path.parent / f) for f in manifest["field_files"]]
    return ObservationSeries(manifest["times_hours"], np.array(values)), manifest


def snr(values, region, noise: NoiseSpec) -> float:
    """Region-mean magnitude of the noiseless field over the noise standard deviation."""
    values = np.asarray(values, dtype=float)
    region = np.ones(len(values), bool) if region is None else np.asarray(region, bool)
    if noise.amplitude == 0:
        return np.inf
    return float(np.mean(np.abs(values[region])) / noise.sigma)


def boundary_time_norm(g: np.ndarray, boundary_mass, dt: float) -> float:
    """Discrete L2(boundary x [0, T]) norm with trapezoidal time weights."""
    g = np.atleast_2d(g)
    w = np.full(len(g), dt)
    if len(g) > 1:
        w[[0, -1]] = dt / 2
    Mg = (boundary_mass @ g.T).T
    return float(np.sqrt(np.sum(w * np.einsum("ji,ji->j", g, Mg))))


def relative_errors(recovered: ControlState, truth: ControlState, boundary_mass=None, dt: float = 1.0,
                    subdomains=None) -> dict:
    """Signed per-subdomain D errors and the relative boundary-data error.

    ``boundary_mass`` defaults to the identity, giving a plain trapezoid-weighted norm.
    """
    if recovered.D.shape != truth.D.shape or recovered.g.shape != truth.g.shape:
        raise ValueError("recovered and true controls have different shapes")
    D_rel = (recovered.D - truth.D) / truth.D
    labels = range(1, len(D_rel) + 1) if subdomains is None else subdomains
    Mg = np.eye(truth.g.shape[1]) if boundary_mass is None else boundary_mass
    ref = boundary_time_norm(truth.g, Mg, dt)
    diff = boundary_time_norm(recovered.g - truth.g, Mg, dt)
    return {"D_rel": dict(zip((int(s) for s in labels), D_rel.tolist())),
            "g_rel": diff / ref if ref > 0 else (0.0 if diff == 0 else np.inf)}
