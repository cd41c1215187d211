"""Tetrahedral meshes, nested-shell phantom generation and mesh/field file I/O."""

from __future__ import annotations

import enum
import hashlib
import itertools
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np


class MeshError(ValueError):
    """Raised for malformed meshes, mesh files or phantom requests."""


class Marker(enum.IntEnum):
    R_SAS = 1
    B_VENTRICLE = 2
    NEUMANN_GREEN = 3
    NEUMANN_YELLOW = 4


class Subdomain(enum.IntEnum):
    CSF = 1
    GREY = 2
    WHITE = 3


class Variant(enum.Enum):
    TWO_DOMAIN = "two_domain"
    THREE_DOMAIN = "three_domain"


DEFAULT_FRACTIONS = {
    Variant.THREE_DOMAIN: (0.125, 0.125),
    Variant.TWO_DOMAIN: (0.25,),
}

# local face k of a tet is the face opposite vertex k
_FACES = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable tetrahedral mesh with subdomain labels and boundary markers.

    Attributes
    ----------
    vertices : (nv, 3) float array, coordinates in mm.
    tets : (nt, 4) int array of vertex indices, positively oriented.
    cell_subdomain : (nt,) int array of :class:`Subdomain` labels.
    facets : (nbf, 3) int array of boundary triangles.
    facet_markers : (nbf,) int array of :class:`Marker` values.
    """

    vertices: np.ndarray
    tets: np.ndarray
    cell_subdomain: np.ndarray
    facets: np.ndarray
    facet_markers: np.ndarray
    # structured-grid metadata for phantoms (resolution, box_length), else None
    grid: tuple[int, float] | None = field(default=None, compare=False)

    def __post_init__(self):
        for name in ("vertices", "tets", "cell_subdomain", "facets", "facet_markers"):
            arr = np.ascontiguousarray(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_tets(self) -> int:
        return len(self.tets)

    @cached_property
    def signed_volumes(self) -> np.ndarray:
        p = self.vertices[self.tets]
        e = p[:, 1:] - p[:, :1]
        return np.linalg.det(e) / 6.0

    @property
    def volume(self) -> float:
        return float(self.signed_volumes.sum())

    @cached_property
    def subdomains(self) -> tuple[int, ...]:
        """Labels present in the mesh, ascending."""
        return tuple(int(s) for s in np.unique(self.cell_subdomain))

    @cached_property
    def mesh_id(self) -> str:
        h = hashlib.sha1()
        for arr in (self.vertices, self.tets, self.cell_subdomain, self.facets, self.facet_markers):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]

    def boundary_vertices(self, markers=None) -> np.ndarray:
        """Sorted vertex indices touched by facets carrying any of `markers` (all if None)."""
        if markers is None:
            sel = self.facets
        else:
            sel = self.facets[np.isin(self.facet_markers, [int(m) for m in markers])]
        return np.unique(sel)

    def field(self, values) -> "VertexField":
        return VertexField(np.asarray(values, dtype=float), self.mesh_id)

    def validate(self) -> None:
        """Check index ranges, orientation and that facets are exactly the topological boundary."""
        nv = self.num_vertices
        if self.tets.size and (self.tets.min() < 0 or self.tets.max() >= nv):
            raise MeshError("tet vertex index out of range")
        if self.facets.size and (self.facets.min() < 0 or self.facets.max() >= nv):
            raise MeshError("facet vertex index out of range")
        if len(self.cell_subdomain) != self.num_tets:
            raise MeshError("one subdomain label per tet required")
        if len(self.facet_markers) != len(self.facets):
            raise MeshError("one marker per boundary facet required")
        bad = ~np.isin(self.cell_subdomain, [int(s) for s in Subdomain])
        if bad.any():
            raise MeshError(f"unknown subdomain label {self.cell_subdomain[bad][0]}")
        bad = ~np.isin(self.facet_markers, [int(m) for m in Marker])
        if bad.any():
            raise MeshError(f"unknown boundary marker {self.facet_markers[bad][0]}")
        if np.any(self.signed_volumes <= 0):
            raise MeshError("tet with non-positive signed volume")
        faces, counts = _face_counts(self.tets)
        if np.any(counts > 2):
            raise MeshError("non-manifold mesh: facet shared by more than two tets")
        boundary = {tuple(f) for f in faces[counts == 1]}
        listed = [tuple(f) for f in np.sort(self.facets, axis=1)]
        if len(set(listed)) != len(listed):
            raise MeshError("non-manifold boundary facet list: duplicate facet")
        if set(listed) != boundary:
            raise MeshError("non-manifold boundary facet list: facets do not match the mesh boundary")


@dataclass(frozen=True, eq=False)
class VertexField:
    """One finite scalar per mesh vertex, bound to a mesh by id."""

    values: np.ndarray
    mesh_id: str

    def __post_init__(self):
        if self.values.ndim != 1:
            raise ValueError("vertex field must be one-dimensional")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("vertex field contains non-finite values")

    def __len__(self):
        return len(self.values)


def _face_counts(tets):
    faces = np.sort(tets[:, _FACES].reshape(-1, 3), axis=1)
    return np.unique(faces, axis=0, return_counts=True)


def boundary_faces(tets, vertices):
    """Faces belonging to exactly one tet, oriented with outward normals."""
    faces = tets[:, _FACES].reshape(-1, 3)
    key = np.sort(faces, axis=1)
    _, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    once = counts[inverse.ravel()] == 1
    faces = faces[once]
    opposite = np.repeat(tets, 4, axis=0)[once, np.tile(np.arange(4), len(tets))[once]]
    a, b, c = (vertices[faces[:, i]] for i in range(3))
    n = np.cross(b - a, c - a)
    inward = np.einsum("ij,ij->i", n, vertices[opposite] - a) > 0
    faces[inward] = faces[inward][:, [0, 2, 1]]
    return faces


def _kuhn_tets(res):
    """Six positively oriented tets per cube of a res^3 grid, Freudenthal pattern."""
    n1 = res + 1
    corner = lambda o: o[0] + n1 * (o[1] + n1 * o[2])  # noqa: E731
    local = []
    for perm in itertools.permutations(range(3)):
        path = [np.zeros(3, int)]
        for axis in perm:
            step = path[-1].copy()
            step[axis] = 1
            path.append(step)
        p = np.array(path, dtype=float)
        vol = np.linalg.det(p[1:] - p[0])
        idx = [corner(o) for o in path]
        if vol < 0:
            idx[2], idx[3] = idx[3], idx[2]
        local.append(idx)
    local = np.array(local)  # (6, 4) offsets relative to cube origin index
    i, j, k = np.meshgrid(np.arange(res), np.arange(res), np.arange(res), indexing="ij")
    cube = np.stack([i.ravel(order="F"), j.ravel(order="F"), k.ravel(order="F")], axis=1)
    base = cube[:, 0] + n1 * (cube[:, 1] + n1 * cube[:, 2])
    tets = base[:, None, None] + local[None, :, :]
    return cube, tets  # cube: (res^3, 3), tets: (res^3, 6, 4)


def generate_phantom(
    resolution: int,
    box_length: float = 40.0,
    variant: Variant = Variant.THREE_DOMAIN,
    shell_fractions=None,
    cavity_cells: int | None = None,
) -> Mesh:
    """Structured nested-shell box phantom.

    The box ``[0, L]^3`` is split into ``resolution^3`` cubes of six Kuhn
    tets each. Shell thicknesses are fractions of the box length ``L``
    measured inward from the outer surface; a tet belongs to the first
    shell its centroid falls in.

    THREE_DOMAIN uses ``shell_fractions = (csf, grey)``; the whole outer
    surface is marked ``R_SAS``. TWO_DOMAIN uses ``(grey,)`` and removes a
    centered cavity of ``cavity_cells^3`` cubes whose wall is marked
    ``B_VENTRICLE``.

    For THREE_DOMAIN, ``cavity_cells`` (default: none) instead fills the
    centered cavity with CSF and joins it to the outer CSF shell by a
    one-cube-wide channel running in +z, so the CSF compartment is
    connected as the ventricles are through the aqueduct.
    """
    variant = Variant(variant)
    if resolution < 4:
        raise MeshError("resolution must be at least 4")
    fractions = tuple(DEFAULT_FRACTIONS[variant] if shell_fractions is None else shell_fractions)
    expected = 2 if variant is Variant.THREE_DOMAIN else 1
    if len(fractions) != expected:
        raise MeshError(f"{variant.name} takes {expected} shell fraction(s), got {len(fractions)}")
    if any(f <= 0 for f in fractions) or sum(fractions) >= 0.5:
        raise MeshError("shell fractions must be positive with sum < 0.5")

    L = float(box_length)
    h = L / resolution
    n1 = resolution + 1
    g = np.arange(n1)
    gi, gj, gk = np.meshgrid(g, g, g, indexing="ij")
    ijk = np.stack([gi.ravel(order="F"), gj.ravel(order="F"), gk.ravel(order="F")], axis=1)

    cube, tets = _kuhn_tets(resolution)
    keep = np.ones(len(cube), bool)
    ventricle = np.zeros(len(cube), bool)
    if variant is Variant.TWO_DOMAIN and cavity_cells is None:
        cavity_cells = max(2, resolution // 4)
        cavity_cells += (resolution - cavity_cells) % 2
    if cavity_cells is not None:
        if cavity_cells < 1 or cavity_cells >= resolution:
            raise MeshError("cavity larger than box")
        if (resolution - cavity_cells) % 2:
            raise MeshError("cavity cannot be centered: resolution - cavity_cells must be even")
        lo = (resolution - cavity_cells) // 2
        inside = np.all((cube >= lo) & (cube < lo + cavity_cells), axis=1)
        if variant is Variant.TWO_DOMAIN:
            keep &= ~inside
        else:
            channel = (cube[:, 0] == lo) & (cube[:, 1] == lo) & (cube[:, 2] >= lo + cavity_cells)
            ventricle = inside | channel
    ventricle = np.repeat(ventricle[keep], 6)
    tets = tets[keep].reshape(-1, 4)

    centroid = ijk[tets].mean(axis=1) * h
    depth = np.minimum(centroid, L - centroid).min(axis=1)
    bounds = np.cumsum(fractions) * L
    labels = (
        [Subdomain.CSF, Subdomain.GREY, Subdomain.WHITE]
        if variant is Variant.THREE_DOMAIN
        else [Subdomain.GREY, Subdomain.WHITE]
    )
    cell_subdomain = np.full(len(tets), int(labels[-1]))
    for bound, label in zip(bounds[::-1], labels[-2::-1]):
        cell_subdomain[depth < bound] = int(label)
    cell_subdomain[ventricle] = int(Subdomain.CSF)
    missing = set(int(s) for s in labels) - set(np.unique(cell_subdomain).tolist())
    if missing:
        raise MeshError(f"resolution too small to hold requested shells (missing labels {sorted(missing)})")

    used = np.unique(tets)
    remap = np.full(n1**3, -1)
    remap[used] = np.arange(len(used))
    tets = remap[tets]
    ijk = ijk[used]
    vertices = ijk * h

    faces = boundary_faces(tets, vertices)
    fijk = ijk[faces]
    on_box = np.any(np.all(fijk == 0, axis=1) | np.all(fijk == resolution, axis=1), axis=1)
    markers = np.where(on_box, int(Marker.R_SAS), int(Marker.B_VENTRICLE))
    return Mesh(vertices, tets, cell_subdomain, faces, markers, grid=(resolution, L))


def remark_boundary(mesh: Mesh, mapping: dict) -> Mesh:
    """Copy of `mesh` with facet markers substituted according to `mapping`."""
    markers = mesh.facet_markers.copy()
    for old, new in mapping.items():
        markers[mesh.facet_markers == int(old)] = int(new)
    return Mesh(mesh.vertices, mesh.tets, mesh.cell_subdomain, mesh.facets, markers, grid=mesh.grid)


# ---------------------------------------------------------------- file I/O

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_mesh(mesh: Mesh, path) -> None:
    lines = ["ADCMESH 1", f"{mesh.num_vertices} {mesh.num_tets} {len(mesh.facets)}"]
    lines += [" ".join(_fmt(c) for c in v) for v in mesh.vertices]
    lines += [" ".join(str(int(i)) for i in t) + f" {int(s)}" for t, s in zip(mesh.tets, mesh.cell_subdomain)]
    lines += [" ".join(str(int(i)) for i in f) + f" {int(m)}" for f, m in zip(mesh.facets, mesh.facet_markers)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path) -> Mesh:
    text = Path(path).read_text().split("\n")
    if not text or text[0].strip() != "ADCMESH 1":
        raise MeshError("malformed header: expected 'ADCMESH 1'")
    try:
        nv, nt, nbf = (int(x) for x in text[1].split())
    except (IndexError, ValueError):
        raise MeshError("malformed header: expected '<nv> <nt> <nbf>'") from None
    body = text[2 : 2 + nv + nt + nbf]
    if len(body) < nv + nt + nbf:
        raise MeshError("malformed file: fewer lines than the header declares")
    try:
        vertices = np.array([[float(x) for x in ln.split()] for ln in body[:nv]], dtype=float).reshape(nv, 3)
        cells = np.array([[int(x) for x in ln.split()] for ln in body[nv : nv + nt]], dtype=np.int64).reshape(nt, 5)
        fac = np.array([[int(x) for x in ln.split()] for ln in body[nv + nt :]], dtype=np.int64).reshape(nbf, 4)
    except ValueError as exc:
        raise MeshError(f"malformed record: {exc}") from None
    if (cells[:, :4] >= nv).any() or (cells[:, :4] < 0).any() or (fac[:, :3] >= nv).any() or (fac[:, :3] < 0).any():
        raise MeshError("index out of range")
    mesh = Mesh(vertices, cells[:, :4], cells[:, 4], fac[:, :3], fac[:, 3])
    mesh.validate()
    return mesh


def write_field(values, path) -> None:
    values = np.asarray(values, dtype=float)
    Path(path).write_text(f"{len(values)}\n" + "".join(_fmt(v) + "\n" for v in values))


def read_field(path) -> np.ndarray:
    lines = Path(path).read_text().split()
    n = int(lines[0])
    if len(lines) - 1 != n:
        raise MeshError(f"field file declares {n} values but holds {len(lines) - 1}")
    return np.array([float(x) for x in lines[1:]])


def export_vtk(mesh: Mesh, fields: dict, path, title: str = "adcinv") -> None:
    """Legacy ASCII VTK unstructured grid with point scalars and cell subdomain labels."""
    arrays = {}
    for name, f in (fields or {}).items():
        if isinstance(f, VertexField):
            if f.mesh_id != mesh.mesh_id:
                raise MeshError(f"field {name!r} is not bound to this mesh")
            values = f.values
        else:
            values = np.asarray(f, dtype=float)
        if len(values) != mesh.num_vertices:
            raise MeshError(f"field {name!r} is not bound to this mesh (length {len(values)})")
        arrays[name.replace(" ", "_")] = values

    out = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID"]
    out.append(f"POINTS {mesh.num_vertices} double")
    out += [" ".join(_fmt(c) for c in v) for v in mesh.vertices]
    out.append(f"CELLS {mesh.num_tets} {5 * mesh.num_tets}")
    out += ["4 " + " ".join(str(int(i)) for i in t) for t in mesh.tets]
    out.append(f"CELL_TYPES {mesh.num_tets}")
    out += ["10"] * mesh.num_tets
    out.append(f"CELL_DATA {mesh.num_tets}")
    out += ["SCALARS subdomain int 1", "LOOKUP_TABLE default"]
    out += [str(int(s)) for s in mesh.cell_subdomain]
    if arrays:
        out.append(f"POINT_DATA {mesh.num_vertices}")
        for name, values in arrays.items():
            out += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            out += [_fmt(v) for v in values]
    Path(path).write_text("\n".join(out) + "\n")
