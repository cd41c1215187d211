"""MPRAGE signal model and signal ratio -> contrast-agent concentration conversion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CSF_T1_MS = 3000.0
T1_GRID_MS = (200.0, 4000.0)
TISSUE_T1_MS = (800.0, 2000.0)


class MprageError(ValueError):
    pass


@dataclass(frozen=True)
class MprageParams:
    """Sequence and agent constants. Times in ms, theta in radians, r1 in 1/(mM s).

    ``TE`` and ``T2star`` are carried for provenance only; the transverse
    decay factor is not modelled.
    """

    theta: float
    T_a: float
    T_b: float
    TR: float
    m: int
    r1: float
    TE: float | None = None
    T2star: float | None = None

    def __post_init__(self):
        if self.m < 2 or self.m % 2:
            raise MprageError("echo count m must be even and >= 2")
        if self.r1 <= 0:
            raise MprageError("relaxivity r1 must be positive")
        if self.T_w < 0:
            raise MprageError(f"T_w = TR - T_a - T_b (m - 1) = {self.T_w:g} ms is negative")

    @property
    def T_w(self) -> float:
        return self.TR - self.T_a - self.T_b * (self.m - 1)

    @property
    def n(self) -> int:
        """Centre echo."""
        return self.m // 2


def _geometric(x, count):
    # (1 - x^count) / (1 - x), continuous at x = 1
    x = np.asarray(x, dtype=float)
    near = np.isclose(x, 1.0, rtol=0, atol=1e-12)
    safe = np.where(near, 0.5, x)
    return np.where(near, float(count), (1 - safe**count) / (1 - safe))


def mprage_f(T1, p: MprageParams):
    """Normalized centre-echo magnetization ``f(T1) = M_n / M_0``.

    One cycle is: inversion, delay ``T_w``, ``m`` readout pulses spaced
    ``T_b``, delay ``T_a``. ``M_e`` is the longitudinal magnetization right
    after inversion in the steady state.
    """
    T1 = np.asarray(T1, dtype=float)
    if np.any(T1 <= 0):
        raise MprageError("T1 must be positive")
    m, n = p.m, p.n
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        a = np.cos(p.theta)
        b = np.exp(-p.T_b / T1)
        d = np.exp(-p.T_a / T1)
        g = np.exp(-p.T_w / T1)
        r = np.exp(-p.TR / T1)
        ab = a * b
        Me = -(1 - d + a * d * (1 - b) * _geometric(ab, m - 1) + a * d * ab ** (m - 1) - a**m * r) / (1 + r * a**m)
        terms = {
            "recovery": (1 - b) * _geometric(ab, n - 1),
            "delay": ab ** (n - 1) * (1 - g),
            "inversion": g * ab ** (n - 1) * Me,
        }
    for name, value in terms.items():
        if not np.all(np.isfinite(value)):
            raise MprageError(f"non-finite {name} term in MPRAGE magnetization")
    f = terms["recovery"] + terms["delay"] + terms["inversion"]
    return float(f) if f.ndim == 0 else f


@dataclass(frozen=True, eq=False)
class T1Lookup:
    """Tabulated f on a 1 ms T1 grid, with the monotone branch used for inversion."""

    T1: np.ndarray
    f: np.ndarray
    lo: int  # branch = T1[lo:hi + 1]
    hi: int

    def __len__(self):
        return len(self.T1)

    @property
    def branch(self) -> tuple[float, float]:
        return float(self.T1[self.lo]), float(self.T1[self.hi])

    def f_at(self, T1):
        """Interpolated f; returns ``(f, out_of_range)`` with T1 clamped to the grid."""
        T1 = np.asarray(T1, dtype=float)
        out = (T1 < self.T1[0]) | (T1 > self.T1[-1])
        return np.interp(np.clip(T1, self.T1[0], self.T1[-1]), self.T1, self.f), out

    def invert(self, fval):
        """T1 on the branch with f(T1) = fval; returns ``(T1, saturated)``."""
        fval = np.asarray(fval, dtype=float)
        T1 = self.T1[self.lo : self.hi + 1]
        f = self.f[self.lo : self.hi + 1]
        if f[-1] < f[0]:
            T1, f = T1[::-1], f[::-1]
        saturated = (fval < f[0]) | (fval > f[-1])
        return np.interp(np.clip(fval, f[0], f[-1]), f, T1), saturated


def build_lookup(p: MprageParams, grid=T1_GRID_MS, step: float = 1.0, tissue=TISSUE_T1_MS) -> T1Lookup:
    """Tabulate f and pick the strictly monotone run overlapping the tissue T1 range most."""
    T1 = np.arange(grid[0], grid[1] + step / 2, step)
    f = np.asarray(mprage_f(T1, p))
    sign = np.sign(np.diff(f))
    runs, start = [], 0
    for i in range(1, len(sign) + 1):
        if i == len(sign) or sign[i] != sign[start]:
            if sign[start] != 0:
                runs.append((start, i))  # table indices start..i
            start = i
    if not runs:
        raise MprageError("f is not monotone anywhere on the T1 grid; parameters unusable for inversion")

    def score(run):
        lo, hi = T1[run[0]], T1[run[1]]
        return (max(0.0, min(hi, tissue[1]) - max(lo, tissue[0])), run[1] - run[0])

    lo, hi = max(runs, key=score)
    return T1Lookup(T1, f, lo, hi)


@dataclass
class Conversion:
    c: np.ndarray
    T1_c: np.ndarray
    saturated: np.ndarray
    negative_clamped: np.ndarray

    @property
    def clamp_events(self) -> int:
        return int(np.count_nonzero(self.saturated) + np.count_nonzero(self.negative_clamped))


def concentration_from_T1(T1_c, T1_0, r1):
    """Relaxivity relation solved for c; T1 in ms, r1 in 1/(mM s)."""
    return (1000.0 / np.asarray(T1_c, float) - 1000.0 / np.asarray(T1_0, float)) / r1


def concentration_from_ratio(ratio, T1_0, p: MprageParams, lut: T1Lookup) -> Conversion:
    """Concentration (mM) from the signal ratio S^c / S^0 and baseline T1 (ms)."""
    ratio = np.asarray(ratio, dtype=float)
    T1_0 = np.broadcast_to(np.asarray(T1_0, dtype=float), ratio.shape)
    if np.any(ratio <= 0):
        raise ValueError("signal ratio must be positive")
    if np.any((T1_0 < lut.T1[0]) | (T1_0 > lut.T1[-1])):
        raise ValueError("baseline T1 outside the lookup grid")
    f0, _ = lut.f_at(T1_0)
    T1_c, saturated = lut.invert(ratio * f0)
    c = concentration_from_T1(T1_c, T1_0, p.r1)
    negative = c < 0
    return Conversion(np.where(negative, 0.0, c), T1_c, saturated, negative)


def csf_concentration(ratio, p: MprageParams, lut: T1Lookup) -> Conversion:
    return concentration_from_ratio(ratio, CSF_T1_MS, p, lut)


def signal_change_percent(S_t, S_0):
    S_t = np.asarray(S_t, dtype=float)
    S_0 = np.asarray(S_0, dtype=float)
    if np.any(S_0 <= 0):
        raise ValueError("baseline signal must be positive")
    out = 100.0 * (S_t - S_0) / S_0
    return float(out) if out.ndim == 0 else out
