"""Discrete objective, its exact adjoint gradient, and the L-BFGS identification loop."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .fem import AssembledSystem
from .forward import ControlState, Stepper
from .mesh import Subdomain

log = logging.getLogger(__name__)

VENTRICLE_GAMMA_FACTOR = 0.01


@dataclass(frozen=True)
class RegParams:
    """Boundary regularization weights.

    ``gamma`` is the reference surface-gradient weight; it applies as-is on
    the SAS boundary and scaled by 0.01 on the ventricle wall.
    """

    alpha: float = 0.0
    beta: float = 0.0
    gamma: float = 0.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("regularization weights must be non-negative")

    @property
    def gamma_r(self) -> float:
        return self.gamma

    @property
    def gamma_b(self) -> float:
        return VENTRICLE_GAMMA_FACTOR * self.gamma


@dataclass
class ObservationSeries:
    """Observed vertex fields ``values[i]`` at times ``times[i]`` (hours)."""

    times: np.ndarray
    values: np.ndarray  # (n_obs, nv)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if len(self.times) != len(self.values):
            raise ValueError("one observation field per time required")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("observation times must be strictly increasing")
        if len(self.times) and self.times[0] < 0:
            raise ValueError("observation times must be non-negative")

    def snap_index(self, dt: float, k: int) -> np.ndarray:
        """Nearest time-step index for each observation time."""
        eps = 1e-9 * max(dt, 1.0)
        if len(self.times) and (self.times[-1] > k * dt + eps or self.times[0] < -eps):
            raise ValueError(f"observation time outside [0, {k * dt:g}] h")
        return np.clip(np.floor(self.times / dt + 0.5).astype(int), 0, k)


@dataclass
class InverseResult:
    control: ControlState
    objective_history: list = field(default_factory=list)
    grad_norm_history: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    message: str = ""
    errors: dict | None = None

    @property
    def J(self) -> float:
        return self.objective_history[-1]


def initial_control(system: AssembledSystem, k: int, obs: ObservationSeries | None = None,
                    dt: float | None = None) -> ControlState:
    """Starting point: D = 100 mm^2/h in CSF and 1 in tissue.

    g is zero, or, when `obs` and `dt` are given, the observed Dirichlet-vertex
    values interpolated linearly in time (held constant outside the
    observation window).
    """
    D = [100.0 if s == Subdomain.CSF else 1.0 for s in system.subdomains]
    g = np.zeros((k + 1, len(system.dirichlet_index)))
    if obs is not None and dt is not None and len(obs.times):
        t = np.arange(k + 1) * dt
        boundary = obs.values[:, system.dirichlet_index]
        for col in range(boundary.shape[1]):
            g[:, col] = np.interp(t, obs.times, boundary[:, col])
    return ControlState(D, g)


def _regularization(system, g, reg, dt):
    k = len(g) - 1
    w = np.full(k + 1, dt)
    w[[0, -1]] = dt / 2
    Mg = system.boundary_mass()
    Kg = system.boundary_stiffness(reg.gamma_r, reg.gamma_b)
    Mgg = (Mg @ g.T).T
    Kgg = (Kg @ g.T).T
    J = 0.5 * np.sum(w * np.einsum("ji,ji->j", g, reg.alpha * Mgg + Kgg))
    grad = w[:, None] * (reg.alpha * Mgg + Kgg)
    if k > 0 and reg.beta:
        d = np.diff(g, axis=0)
        Md = (Mg @ d.T).T
        J += 0.5 * reg.beta / dt * np.sum(d * Md)
        grad[1:] += reg.beta / dt * Md
        grad[:-1] -= reg.beta / dt * Md
    return J, grad


def evaluate(system, control, obs, reg, dt, k, gradient=True, u0=None):
    """Objective value and optionally its gradient ``(dJ/dD, dJ/dg)``."""
    control.check(system, k)
    snap = obs.snap_index(dt, k)
    if obs.values.shape[1] != system.n:
        raise ValueError(f"observations have {obs.values.shape[1]} values per field, mesh has {system.n}")
    stepper = Stepper(system, control.D, dt)
    g = control.g
    U = stepper.run(np.zeros(system.n) if u0 is None else u0, g)
    M = system.M
    J = 0.0
    dJdU = np.zeros_like(U) if gradient else None
    for j, o in zip(snap, obs.values):
        e = U[j] - o
        Me = M @ e
        J += e @ Me
        if gradient:
            dJdU[j] += 2.0 * Me
    Jreg, greg = _regularization(system, g, reg, dt)
    J += Jreg
    if not gradient:
        return J

    F, B = stepper.F, stepper.B
    dJdg = greg.copy()
    dJdg += dJdU[:, B]
    dJdD = np.zeros(len(control.D))
    Ks = list(system.K.values())
    lam_next = np.zeros(len(F))
    for j in range(k, 0, -1):
        lam = stepper.solve(dJdU[j, F] + stepper.M_FF @ lam_next)
        dJdg[j] -= stepper.A_FB.T @ lam
        dJdg[j - 1] += stepper.M_FB.T @ lam
        for s, K in enumerate(Ks):
            dJdD[s] -= dt * (lam @ (K @ U[j])[F])
        lam_next = lam
    return J, dJdD, dJdg


def objective(system, control, obs, reg, dt, k, u0=None) -> float:
    """Misfit plus boundary regularization of the discrete state.

    The initial state `u0` defaults to zero. Observations snap to the
    nearest step; the misfit carries no 1/2 factor.
    """
    return evaluate(system, control, obs, reg, dt, k, gradient=False, u0=u0)


def gradient(system, control, obs, reg, dt, k, u0=None):
    """Exact gradient of :func:`objective` by the discrete adjoint.

    Returns ``(dJ/dD, dJ/dg)`` with ``dJ/dg`` shaped like ``control.g``.
    """
    _, dD, dg = evaluate(system, control, obs, reg, dt, k, u0=u0)
    return dD, dg


@dataclass
class OptimizerOptions:
    memory: int = 10
    rtol: float = 1e-6
    max_iter: int = 500
    max_halvings: int = 50
    armijo_c1: float = 1e-4
    # largest change of any log D per iteration; keeps early quasi-Newton
    # steps out of the flat large-D regions of the objective
    max_log_step: float = 0.5
    precondition: str = "mass"


def _pack(control):
    return np.concatenate([np.log(control.D), control.g.ravel()])


def _unpack(z, nd, shape):
    return ControlState(np.exp(z[:nd]), z[nd:].reshape(shape))


def optimize(system, obs, reg, dt, k, init: ControlState | None = None, opts: OptimizerOptions | None = None,
             truth: ControlState | None = None, u0=None, callback=None) -> InverseResult:
    """Identify (D, g) by limited-memory BFGS on (log D, g) with Armijo backtracking.

    Stops when ``||grad||_inf <= rtol * max(1, ||grad_0||_inf)`` or after
    ``max_iter`` iterations. A line search that fails after ``max_halvings``
    halvings returns the best iterate with ``converged = False``.
    """
    opts = opts or OptimizerOptions()
    init = initial_control(system, k, obs, dt) if init is None else init
    init.check(system, k)
    if np.any(init.D <= 0):
        raise ValueError("initial D must be positive")
    nd, shape = len(init.D), init.g.shape

    def fg(z):
        c = _unpack(z, nd, shape)
        J, dD, dg = evaluate(system, c, obs, reg, dt, k, u0=u0)
        return J, np.concatenate([dD * c.D, dg.ravel()])

    h0 = _initial_hessian(system, init, obs, reg, dt, k, u0, opts.precondition)
    z = _pack(init)
    J, grad = fg(z)
    gnorm0 = np.abs(grad).max()
    target = opts.rtol * max(1.0, gnorm0)
    result = InverseResult(init.copy(), [J], [gnorm0])
    S, Y = deque(maxlen=opts.memory), deque(maxlen=opts.memory)
    converged = gnorm0 <= target
    message = "gradient tolerance reached" if converged else ""
    it = 0
    while not converged and it < opts.max_iter:
        d = -_two_loop(grad, S, Y, h0)
        slope = grad @ d
        if slope >= 0:  # memory produced an ascent direction
            S.clear()
            Y.clear()
            d = -h0 * grad
            slope = grad @ d
        step = 1.0 if S else min(1.0, 1.0 / np.abs(d).max())
        dlog = np.abs(d[:nd]).max() if nd else 0.0
        if dlog * step > opts.max_log_step:
            step = opts.max_log_step / dlog
        for _ in range(opts.max_halvings):
            z_new = z + step * d
            try:
                J_new, grad_new = fg(z_new)
            except (ValueError, FloatingPointError, np.linalg.LinAlgError, RuntimeError):
                J_new = np.inf
            if np.isfinite(J_new) and J_new <= J + opts.armijo_c1 * step * slope:
                break
            step *= 0.5
        else:
            message = f"line search failed after {opts.max_halvings} halvings"
            break
        s, y = z_new - z, grad_new - grad
        if s @ y > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            S.append(s)
            Y.append(y)
        z, J, grad = z_new, J_new, grad_new
        it += 1
        result.objective_history.append(J)
        result.grad_norm_history.append(np.abs(grad).max())
        if callback is not None:
            callback(it, J, _unpack(z, nd, shape))
        log.debug("iter %d J=%.6e |g|=%.3e D=%s", it, J, np.abs(grad).max(), np.exp(z[:nd]))
        if np.abs(grad).max() <= target:
            converged = True
            message = "gradient tolerance reached"
    if not converged and not message:
        message = f"iteration limit {opts.max_iter} reached"
    result.control = _unpack(z, nd, shape)
    result.iterations = it
    result.converged = converged
    result.message = message
    if truth is not None:
        from .synthetic import relative_errors

        result.errors = relative_errors(result.control, truth, system.boundary_mass(), dt, system.subdomains)
    return result


def _initial_hessian(system, init, obs, reg, dt, k, u0, kind):
    """Diagonal inverse-Hessian seed for the two-loop recursion.

    ``"mass"`` scales each g entry by its inverse lumped vertex mass.
    ``"probe"`` additionally weights each time step by the Gauss-Newton
    curvature of a spatially uniform perturbation of that step, computed
    with linearized forward solves at the initial D. log D entries keep
    unit weight.
    """
    nd, shape = len(init.D), init.g.shape
    h0 = np.ones(nd + shape[0] * shape[1])
    if kind == "none":
        return h0
    if kind not in ("mass", "probe"):
        raise ValueError(f"unknown preconditioner {kind!r}")
    lumped = np.asarray(system.M.sum(axis=1)).ravel()[system.dirichlet_index]
    curv = np.ones(shape[0])
    if kind == "probe":
        stepper = Stepper(system, init.D, dt)
        snap = obs.snap_index(dt, k)
        Mg = system.boundary_mass()
        area = Mg.sum() / lumped.sum()
        w = np.full(shape[0], dt)
        w[[0, -1]] = dt / 2
        pert = np.zeros(shape)
        for j in range(shape[0]):
            pert[j] = 1.0
            U = stepper.run(np.zeros(system.n), pert)
            pert[j] = 0.0
            misfit = sum(2.0 * (U[i] @ (system.M @ U[i])) for i in snap) / lumped.sum()
            curv[j] = misfit + area * (reg.alpha * w[j] + 2.0 * reg.beta / dt)
        curv = np.maximum(curv, 1e-3 * curv.max())
    weight = np.outer(1.0 / curv, 1.0 / lumped)
    h0[nd:] = (weight / weight.mean()).ravel()
    return h0


def _two_loop(grad, S, Y, h0):
    q = grad.copy()
    if not S:
        return h0 * q
    rho = [1.0 / (y @ s) for s, y in zip(S, Y)]
    a = []
    for s, y, r in zip(reversed(S), reversed(Y), reversed(rho)):
        ai = r * (s @ q)
        q -= ai * y
        a.append(ai)
    s, y = S[-1], Y[-1]
    q *= h0 * (s @ y) / (y @ (h0 * y))
    for (s, y, r), ai in zip(zip(S, Y, rho), reversed(a)):
        b = r * (y @ q)
        q += (ai - b) * s
    return q
