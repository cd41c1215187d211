"""Voxel grids, boundary denoising (Gaussian smoothing, CSF projection) and voxel-to-mesh sampling."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .fem import DIRICHLET_MARKERS
from .mesh import Mesh

CP_NEIGHBORHOOD = 7


class SampleMode(enum.Enum):
    TRILINEAR = "trilinear"
    NEAREST = "nearest"


@dataclass(eq=False)
class VoxelGrid:
    """Scalar grid ``values[i, j, k]`` with a 4x4 voxel-index -> world (mm) affine."""

    values: np.ndarray
    affine: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.affine = np.asarray(self.affine, dtype=float)
        if self.values.ndim != 3:
            raise ValueError("voxel grid values must be three-dimensional")
        if self.affine.shape != (4, 4):
            raise ValueError("affine must be 4x4")
        if abs(np.linalg.det(self.affine[:3, :3])) < 1e-12:
            raise ValueError("affine is not invertible")
        if self.mask is not None:
            self.mask = np.asarray(self.mask).astype(bool)
            if self.mask.shape != self.values.shape:
                raise ValueError("mask shape differs from value grid")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def spacing(self) -> np.ndarray:
        return np.linalg.norm(self.affine[:3, :3], axis=0)

    def world_to_index(self, points) -> np.ndarray:
        inv = np.linalg.inv(self.affine)
        pts = np.asarray(points, dtype=float)
        return pts @ inv[:3, :3].T + inv[:3, 3]

    def index_to_world(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=float)
        return idx @ self.affine[:3, :3].T + self.affine[:3, 3]

    def with_values(self, values) -> "VoxelGrid":
        return VoxelGrid(values, self.affine, self.mask)


def write_voxels(grid: VoxelGrid, path) -> None:
    """ASCII 'ADCVOX 1' file; mask (if any) goes to a companion '<path>.mask'."""
    path = Path(path)
    head = ["ADCVOX 1", " ".join(str(d) for d in grid.dims), " ".join(format(a, ".17g") for a in grid.affine.ravel())]
    body = [format(v, ".17g") for v in grid.values.ravel(order="F")]
    path.write_text("\n".join(head + body) + "\n")
    if grid.mask is not None:
        mask_lines = [" ".join(str(d) for d in grid.dims)] + [str(int(v)) for v in grid.mask.ravel(order="F")]
        Path(str(path) + ".mask").write_text("\n".join(mask_lines) + "\n")


def read_voxels(path) -> VoxelGrid:
    path = Path(path)
    lines = path.read_text().split("\n")
    if lines[0].strip() != "ADCVOX 1":
        raise ValueError("malformed header: expected 'ADCVOX 1'")
    dims = tuple(int(x) for x in lines[1].split())
    affine = np.array([float(x) for x in lines[2].split()]).reshape(4, 4)
    values = np.array([float(x) for x in lines[3:] if x.strip()])
    if values.size != math.prod(dims):
        raise ValueError(f"expected {math.prod(dims)} voxel values, found {values.size}")
    mask = None
    mask_path = Path(str(path) + ".mask")
    if mask_path.exists():
        mlines = mask_path.read_text().split()
        mask = np.array([int(x) for x in mlines[3:]], dtype=bool).reshape(dims, order="F")
    return VoxelGrid(values.reshape(dims, order="F"), affine, mask)


def gaussian_kernel(sigma_vox: float) -> np.ndarray:
    """Sampled Gaussian of radius ceil(4 sigma), normalized to unit sum."""
    if sigma_vox == 0:
        return np.ones(1)
    radius = math.ceil(4.0 * sigma_vox)
    x = np.arange(-radius, radius + 1, dtype=float)
    w = np.exp(-0.5 * (x / sigma_vox) ** 2)
    return w / w.sum()


def gaussian_smooth(grid: VoxelGrid, sigma: float, mode: str = "reflect") -> VoxelGrid:
    """Separable Gaussian smoothing; `sigma` in mm, converted per axis by voxel spacing."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    out = grid.values.copy()
    if sigma == 0:
        return grid.with_values(out)
    for axis, h in enumerate(grid.spacing):
        out = ndimage.correlate1d(out, gaussian_kernel(sigma / h), axis=axis, mode=mode)
    return grid.with_values(out)


@dataclass
class BoundaryValues:
    """Values at the Dirichlet boundary vertices ``index`` of a mesh."""

    index: np.ndarray
    values: np.ndarray
    fallback: np.ndarray  # vertices that took the nearest-CSF value

    def to_field(self, n: int, fill: float = 0.0) -> np.ndarray:
        out = np.full(n, fill)
        out[self.index] = self.values
        return out


def _containing_voxel(grid: VoxelGrid, points) -> np.ndarray:
    idx = np.floor(grid.world_to_index(points) + 0.5).astype(int)
    return np.clip(idx, 0, np.array(grid.dims) - 1)


def csf_project(signal: VoxelGrid, csf_mask, mesh: Mesh, markers=DIRICHLET_MARKERS,
                size: int = CP_NEIGHBORHOOD) -> BoundaryValues:
    """Average of CSF-labelled voxels in a size^3 neighbourhood of each boundary vertex.

    The neighbourhood is clipped at the grid edges. A vertex with no CSF
    voxel nearby takes the value of the nearest CSF voxel and is flagged.
    """
    mask = csf_mask.values > 0.5 if isinstance(csf_mask, VoxelGrid) else np.asarray(csf_mask, bool)
    if mask.shape != signal.dims:
        raise ValueError("CSF mask is not aligned with the signal grid")
    if not mask.any():
        raise ValueError("no CSF voxels in mask")
    index = mesh.boundary_vertices(markers)
    centre = _containing_voxel(signal, mesh.vertices[index])
    r = size // 2
    values = np.empty(len(index))
    fallback = np.zeros(len(index), bool)
    csf_idx = None
    for n, (i, j, k) in enumerate(centre):
        sl = (slice(max(i - r, 0), i + r + 1), slice(max(j - r, 0), j + r + 1), slice(max(k - r, 0), k + r + 1))
        sel = mask[sl]
        count = np.count_nonzero(sel)
        if count:
            values[n] = signal.values[sl][sel].sum() / count
        else:
            if csf_idx is None:
                csf_idx = np.argwhere(mask)
            world = signal.index_to_world(csf_idx)
            here = signal.index_to_world(np.array([i, j, k]))
            nearest = csf_idx[np.argmin(np.sum((world - here) ** 2, axis=1))]
            values[n] = signal.values[tuple(nearest)]
            fallback[n] = True
    return BoundaryValues(index, values, fallback)


def sample_to_mesh(grid: VoxelGrid, mesh: Mesh, mode: SampleMode = SampleMode.TRILINEAR):
    """Voxel values at mesh vertices; returns ``(values, clamped)``.

    Vertices mapping outside the grid are clamped to its edge and flagged.
    """
    mode = SampleMode(mode)
    idx = grid.world_to_index(mesh.vertices)
    upper = np.array(grid.dims) - 1
    tol = 1e-9
    clamped = np.any((idx < -tol) | (idx > upper + tol), axis=1)
    idx = np.clip(idx, 0, upper)
    if mode is SampleMode.NEAREST:
        near = np.clip(np.floor(idx + 0.5).astype(int), 0, upper)
        return grid.values[near[:, 0], near[:, 1], near[:, 2]], clamped
    return ndimage.map_coordinates(grid.values, idx.T, order=1, mode="nearest"), clamped


def preprocess_boundary(mode: str, signal: VoxelGrid, mesh: Mesh, csf_mask=None, sigma: float = 1.5,
                        markers=DIRICHLET_MARKERS) -> BoundaryValues:
    """Boundary data under one of the RAW, CP or GS schemes."""
    mode = mode.upper()
    index = mesh.boundary_vertices(markers)
    if mode == "CP":
        if csf_mask is None:
            raise ValueError("CP preprocessing needs a CSF mask")
        return csf_project(signal, csf_mask, mesh, markers)
    if mode == "GS":
        signal = gaussian_smooth(signal, sigma)
    elif mode != "RAW":
        raise ValueError(f"unknown preprocessing mode {mode!r}")
    values, _ = sample_to_mesh(signal, mesh)
    return BoundaryValues(index, values[index], np.zeros(len(index), bool))
