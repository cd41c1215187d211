"""P1 finite-element assembly and sparse SPD solvers."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import Marker, Mesh

log = logging.getLogger(__name__)

DIRICHLET_MARKERS = (Marker.R_SAS, Marker.B_VENTRICLE)


class SolverError(RuntimeError):
    """Linear solve failed to reach the requested tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


def tet_gradients(points):
    """Barycentric gradients and volumes for an (nt, 4, 3) stack of tets.

    Returns ``grads`` of shape (nt, 4, 3) and ``vol`` of shape (nt,).
    """
    E = points[:, 1:] - points[:, :1]
    det = np.linalg.det(E)
    if np.any(np.abs(det) <= 1e-14 * np.abs(E).max(axis=(1, 2)) ** 3):
        raise ValueError("degenerate (zero-volume) tet")
    inv = np.linalg.inv(E)  # columns are gradients of the barycentrics 1..3
    g = np.transpose(inv, (0, 2, 1))
    grads = np.concatenate([-g.sum(axis=1, keepdims=True), g], axis=1)
    return grads, np.abs(det) / 6.0


def element_stiffness(points):
    grads, vol = tet_gradients(points)
    return vol[:, None, None] * np.einsum("eik,ejk->eij", grads, grads)


def element_mass(vol, lumped=False):
    if lumped:
        local = np.eye(4) / 4.0
    else:
        local = (np.ones((4, 4)) + np.eye(4)) / 20.0
    return vol[:, None, None] * local


def triangle_matrices(points):
    """Mass and Laplace-Beltrami stiffness for an (nf, 3, 3) stack of triangles."""
    a, b, c = points[:, 0], points[:, 1], points[:, 2]
    area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    mass = area[:, None, None] * (np.ones((3, 3)) + np.eye(3)) / 12.0
    # edge opposite each vertex; K_ij = e_i . e_j / (4A)
    edges = np.stack([c - b, a - c, b - a], axis=1)
    stiff = np.einsum("eik,ejk->eij", edges, edges) / (4.0 * area[:, None, None])
    return mass, stiff


def _scatter(cells, local, n):
    k = cells.shape[1]
    rows = np.repeat(cells, k, axis=1).ravel()
    cols = np.tile(cells, (1, k)).ravel()
    A = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    A.sum_duplicates()
    A.sort_indices()
    return A


@dataclass(frozen=True, eq=False)
class AssembledSystem:
    """Matrices needed by the forward, adjoint and objective computations.

    ``K`` maps each present subdomain label to its unit-coefficient stiffness
    matrix, so ``stiffness(D)`` is a scalar combination without reassembly.
    Surface matrices are full-size (nv x nv) and supported on the vertices of
    their marker only.
    """

    mesh: Mesh
    M: sp.csr_matrix
    K: dict
    M_r: sp.csr_matrix
    M_b: sp.csr_matrix
    K_r: sp.csr_matrix
    K_b: sp.csr_matrix
    dirichlet_index: np.ndarray
    dirichlet_marker: np.ndarray
    lumped: bool = False

    @property
    def n(self) -> int:
        return self.M.shape[0]

    @property
    def subdomains(self) -> tuple[int, ...]:
        return tuple(self.K)

    @property
    def free_index(self) -> np.ndarray:
        mask = np.ones(self.n, bool)
        mask[self.dirichlet_index] = False
        return np.flatnonzero(mask)

    def stiffness(self, D) -> sp.csr_matrix:
        D = np.asarray(D, dtype=float)
        if len(D) != len(self.K):
            raise ValueError(f"expected {len(self.K)} diffusion coefficients, got {len(D)}")
        out = sp.csr_matrix((self.n, self.n))
        for d, K in zip(D, self.K.values()):
            out = out + d * K
        return out

    def boundary_mass(self) -> sp.csr_matrix:
        """Combined Dirichlet-surface mass restricted to the Dirichlet index."""
        idx = self.dirichlet_index
        return (self.M_r + self.M_b)[idx][:, idx].tocsr()

    def boundary_stiffness(self, gamma_r: float, gamma_b: float) -> sp.csr_matrix:
        idx = self.dirichlet_index
        return (gamma_r * self.K_r + gamma_b * self.K_b)[idx][:, idx].tocsr()


def assemble(mesh: Mesh, lumped: bool = False, dirichlet_markers=DIRICHLET_MARKERS) -> AssembledSystem:
    """Assemble P1 mass, per-subdomain stiffness and Dirichlet-surface matrices.

    Facets carrying a marker in `dirichlet_markers` form the Dirichlet
    boundary; every other facet is homogeneous Neumann.
    """
    n = mesh.num_vertices
    points = mesh.vertices[mesh.tets]
    grads, vol = tet_gradients(points)
    Ke = vol[:, None, None] * np.einsum("eik,ejk->eij", grads, grads)
    M = _scatter(mesh.tets, element_mass(vol, lumped), n)
    K = {}
    for s in mesh.subdomains:
        sel = mesh.cell_subdomain == s
        K[s] = _scatter(mesh.tets[sel], Ke[sel], n)

    def surface(marker):
        sel = mesh.facet_markers == int(marker)
        fac = mesh.facets[sel]
        if not len(fac):
            empty = sp.csr_matrix((n, n))
            return empty, empty
        mass, stiff = triangle_matrices(mesh.vertices[fac])
        return _scatter(fac, mass, n), _scatter(fac, stiff, n)

    dirichlet_markers = tuple(int(m) for m in dirichlet_markers)
    M_r, K_r = surface(Marker.R_SAS) if Marker.R_SAS in dirichlet_markers else (sp.csr_matrix((n, n)),) * 2
    M_b, K_b = (
        surface(Marker.B_VENTRICLE) if Marker.B_VENTRICLE in dirichlet_markers else (sp.csr_matrix((n, n)),) * 2
    )
    sel = np.isin(mesh.facet_markers, dirichlet_markers)
    index = np.unique(mesh.facets[sel])
    marker = np.zeros(n, dtype=int)
    # a vertex shared by several Dirichlet markers keeps the smallest
    for m in sorted(dirichlet_markers, reverse=True):
        marker[np.unique(mesh.facets[mesh.facet_markers == m])] = m
    return AssembledSystem(mesh, M, K, M_r, M_b, K_r, K_b, index, marker[index], lumped)


def solve_spd(A, b, tol: float = 1e-10, maxiter: int | None = None, x0=None) -> np.ndarray:
    """Jacobi-preconditioned conjugate gradients.

    Converges when ``||Ax - b|| <= tol * ||b||``; raises :class:`SolverError`
    carrying the achieved relative residual after ``maxiter`` (default
    ``10 * n``) iterations.
    """
    A = sp.csr_matrix(A)
    b = np.asarray(b, dtype=float)
    n = len(b)
    maxiter = 10 * n if maxiter is None else maxiter
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n)
    diag = A.diagonal()
    if np.any(diag <= 0):
        raise SolverError("matrix is not positive definite (non-positive diagonal)")
    inv_diag = 1.0 / diag
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - A @ x
    z = inv_diag * r
    p = z.copy()
    rz = r @ z
    for _ in range(maxiter):
        if np.linalg.norm(r) <= tol * bnorm:
            return x
        Ap = A @ p
        pAp = p @ Ap
        if pAp <= 0:
            raise SolverError("matrix is not positive definite", np.linalg.norm(r) / bnorm)
        step = rz / pAp
        x += step * p
        r -= step * Ap
        z = inv_diag * r
        rz, rz_old = r @ z, rz
        p = z + (rz / rz_old) * p
    res = np.linalg.norm(b - A @ x) / bnorm
    if res <= tol:
        return x
    raise SolverError(f"CG did not converge in {maxiter} iterations (relative residual {res:.3e})", res)


class Factorized:
    """Sparse LU factorization reused across many right-hand sides."""

    def __init__(self, A):
        A = sp.csc_matrix(A)
        if A.shape[0] == 0:
            self._lu = None
        else:
            self._lu = spla.splu(A)

    def __call__(self, b):
        if self._lu is None:
            return np.zeros_like(b)
        x = self._lu.solve(np.asarray(b, dtype=float))
        if not np.all(np.isfinite(x)):
            raise SolverError("direct solve produced non-finite values")
        return x
