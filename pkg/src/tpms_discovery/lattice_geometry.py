"""Voxel sampling, component filtering, surface extraction and mesh export.

A lattice is a ``tiling`` of unit cells, each ``2*pi`` wide in implicit units
and ``cell_length`` micrometres wide physically.
"""
from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .tpms_field import TpmsField

log = logging.getLogger(__name__)

MIN_RESOLUTION = 8
MIN_RETAINED_FRACTION = 0.95
STL_HEADER = b"tpms_discovery binary STL".ljust(80, b"\0")

_SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)

_STL_RECORD = np.dtype([
    ("normal", "<f4", (3,)),
    ("vertices", "<f4", (3, 3)),
    ("attr", "<u2"),
])


class ConfigurationError(ValueError):
    pass


class EmptyStructureError(ValueError):
    pass


class MeshExportError(OSError):
    pass


@dataclass(frozen=True)
class LatticeSpec:
    tiling: tuple = (4, 4, 2)
    cell_length: float = 50.0  # micrometres
    resolution: int = 64  # voxels per unit-cell edge

    def __post_init__(self):
        tiling = tuple(int(n) for n in self.tiling)
        if len(tiling) != 3 or min(tiling) < 1:
            raise ConfigurationError(f"tiling must be three positive counts, got {self.tiling}")
        object.__setattr__(self, "tiling", tiling)
        if int(self.resolution) != self.resolution or self.resolution < MIN_RESOLUTION:
            raise ConfigurationError(
                f"resolution must be an integer >= {MIN_RESOLUTION}, got {self.resolution}")
        if not self.cell_length > 0:
            raise ConfigurationError(f"cell_length must be positive, got {self.cell_length}")

    @property
    def dims(self):
        return tuple(n * self.resolution for n in self.tiling)

    @property
    def voxel_size(self):
        """Voxel edge in implicit units."""
        return 2 * math.pi / self.resolution

    @property
    def scale(self):
        """Micrometres per implicit unit."""
        return self.cell_length / (2 * math.pi)

    @property
    def extent(self):
        """Physical bounding box edge lengths in micrometres."""
        return tuple(n * self.cell_length for n in self.tiling)


@dataclass(eq=False)
class VoxelGrid:
    occupancy: np.ndarray  # bool, shape (nx, ny, nz)
    cell_size: float  # implicit units

    def __post_init__(self):
        self.occupancy = np.asarray(self.occupancy, dtype=bool)
        if self.occupancy.ndim != 3 or min(self.occupancy.shape) < 2:
            raise ValueError(f"grid must be 3D with every dimension >= 2, got {self.occupancy.shape}")

    @property
    def dims(self):
        return self.occupancy.shape

    @property
    def solid_count(self) -> int:
        return int(self.occupancy.sum())

    @property
    def solid_fraction(self) -> float:
        return self.solid_count / self.occupancy.size

    def __eq__(self, other):
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return self.cell_size == other.cell_size and np.array_equal(self.occupancy, other.occupancy)


@dataclass
class ComponentReport:
    n_components: int = 0
    discarded_voxels: int = 0
    retained_voxels: int = 0
    cavities: int = 0
    cavity_voxels: int = 0

    @property
    def retained_fraction(self) -> float:
        total = self.retained_voxels + self.discarded_voxels
        return self.retained_voxels / total if total else 0.0

    @property
    def empty(self) -> bool:
        """True when nothing was discarded and no cavity was found."""
        return self.discarded_voxels == 0 and self.cavities == 0


def voxelize(field_: TpmsField, spec: LatticeSpec, slab: int = 16) -> VoxelGrid:
    """Sample the solid predicate at every voxel centre of the tiled lattice.

    The field has period 2*pi, so one unit cell is sampled and then tiled;
    every copy of a cell is bit-identical.
    """
    if not isinstance(spec, LatticeSpec):
        raise ConfigurationError("spec must be a LatticeSpec")
    n = spec.resolution
    h = spec.voxel_size
    c = (np.arange(n) + 0.5) * h
    cell = np.empty((n, n, n), dtype=bool)
    # slabs along x bound the temporary arrays
    for start in range(0, n, slab):
        stop = min(start + slab, n)
        X, Y, Z = np.meshgrid(c[start:stop], c, c, indexing="ij")
        cell[start:stop] = field_.is_solid(np.stack([X, Y, Z], axis=-1))
    return VoxelGrid(np.tile(cell, spec.tiling), h)


def _void_cavities(solid: np.ndarray):
    labels, n = ndimage.label(~solid, structure=_SIX_CONNECTED)
    if n == 0:
        return 0, 0
    border = np.zeros(n + 1, dtype=bool)
    for face in (labels[0], labels[-1], labels[:, 0], labels[:, -1], labels[:, :, 0], labels[:, :, -1]):
        border[np.unique(face)] = True
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    enclosed = ~border
    enclosed[0] = False
    return int(enclosed.sum()), int(sizes[enclosed].sum())


def filter_components(grid: VoxelGrid):
    """Keep the largest 6-connected solid component.

    Returns the filtered grid and a `ComponentReport` describing what was
    dropped and any enclosed void cavities left in the result.
    """
    labels, n = ndimage.label(grid.occupancy, structure=_SIX_CONNECTED)
    if n == 0:
        raise EmptyStructureError("grid has no solid voxels")
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    sizes[0] = 0
    keep = int(np.argmax(sizes))  # lowest label wins ties
    kept = labels == keep
    cavities, cavity_voxels = _void_cavities(kept)
    report = ComponentReport(
        n_components=n,
        discarded_voxels=int(sizes.sum() - sizes[keep]),
        retained_voxels=int(sizes[keep]),
        cavities=cavities,
        cavity_voxels=cavity_voxels,
    )
    return VoxelGrid(kept, grid.cell_size), report


def grid_validity(grid: VoxelGrid, min_retained: float = MIN_RETAINED_FRACTION):
    """(valid, report) for an already sampled grid."""
    try:
        _, report = filter_components(grid)
    except EmptyStructureError:
        return False, ComponentReport()
    valid = report.cavities == 0 and report.retained_fraction >= min_retained
    return valid, report


def is_valid_design(field_: TpmsField, spec: LatticeSpec,
                    min_retained: float = MIN_RETAINED_FRACTION) -> bool:
    """True when the lattice has no enclosed cavity and no significant floaters."""
    valid, _ = grid_validity(voxelize(field_, spec), min_retained)
    return valid


@dataclass(eq=False)
class SurfaceMesh:
    vertices: np.ndarray  # (n, 3) float, micrometres
    triangles: np.ndarray  # (m, 3) int

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)

    @property
    def triangle_corners(self):
        return self.vertices[self.triangles]

    def areas(self):
        a, b, c = np.moveaxis(self.triangle_corners, 1, 0)
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=-1)

    def volume(self) -> float:
        """Signed enclosed volume by the divergence theorem."""
        a, b, c = np.moveaxis(self.triangle_corners, 1, 0)
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    def edge_counts(self):
        """Occurrences of each undirected edge."""
        t = self.triangles
        edges = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        edges.sort(axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        return counts

    def is_closed_manifold(self) -> bool:
        return bool(len(self.triangles)) and bool(np.all(self.edge_counts() == 2))

    def euler_characteristic(self) -> int:
        return len(self.vertices) - len(self.edge_counts()) + len(self.triangles)

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


def _clean(vertices, triangles):
    """Drop zero-area triangles and unreferenced vertices."""
    a, b, c = (vertices[triangles[:, k]] for k in range(3))
    area2 = np.linalg.norm(np.cross(b - a, c - a), axis=-1)
    triangles = triangles[area2 > 0]
    used = np.unique(triangles)
    remap = np.full(len(vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return vertices[used], remap[triangles]


def extract_surface(source, spec: LatticeSpec) -> SurfaceMesh:
    """Closed triangle mesh of the solid boundary at physical scale.

    ``source`` is a `TpmsField` (voxelized and filtered first) or a `VoxelGrid`
    used as-is.  Marching cubes runs on the zero-padded occupancy at level 0.5,
    so the surface always closes at the lattice boundary.
    """
    from skimage.measure import marching_cubes

    if isinstance(source, TpmsField):
        grid, _ = filter_components(voxelize(source, spec))
    else:
        grid = source
    if not grid.occupancy.any():
        raise EmptyStructureError("cannot mesh an empty structure")
    padded = np.pad(grid.occupancy, 1).astype(np.float32)
    verts, faces, _, _ = marching_cubes(padded, level=0.5, method="lewiner", allow_degenerate=False)
    # padded index i is voxel i-1, whose centre sits at (i - 0.5) * h
    h = grid.cell_size
    verts = (verts.astype(float) - 0.5) * h * spec.scale
    verts, faces = _clean(verts, faces.astype(np.int64))
    mesh = SurfaceMesh(verts, faces)
    if mesh.volume() < 0:
        mesh.triangles = mesh.triangles[:, ::-1].copy()
    return mesh


def _face_normals(corners):
    n = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
    length = np.linalg.norm(n, axis=-1, keepdims=True)
    return np.divide(n, length, out=np.zeros_like(n), where=length > 0)


def write_stl(mesh: SurfaceMesh, path) -> Path:
    path = Path(path)
    corners = mesh.triangle_corners
    records = np.zeros(len(corners), dtype=_STL_RECORD)
    records["normal"] = _face_normals(corners)
    records["vertices"] = corners
    try:
        with open(path, "wb") as fh:
            fh.write(STL_HEADER)
            fh.write(np.uint32(len(records)).astype("<u4").tobytes())
            fh.write(records.tobytes())
    except OSError as exc:
        raise MeshExportError(f"failed to write STL {path}: {exc}") from exc
    return path


def read_stl(path):
    """Triangle soup ``(m, 3, 3)`` float32 from a binary STL."""
    data = Path(path).read_bytes()
    (count,) = np.frombuffer(data, dtype="<u4", count=1, offset=80)
    expected = 84 + int(count) * _STL_RECORD.itemsize
    if len(data) != expected:
        raise ValueError(f"{path}: STL size {len(data)} does not match {count} triangles")
    records = np.frombuffer(data, dtype=_STL_RECORD, count=int(count), offset=84)
    return records["vertices"].copy()


def write_obj(mesh: SurfaceMesh, path) -> Path:
    path = Path(path)
    try:
        with open(path, "w") as fh:
            fh.write("# tpms_discovery surface mesh, units: micrometres\n")
            np.savetxt(fh, mesh.vertices, fmt="v %.9g %.9g %.9g")
            np.savetxt(fh, mesh.triangles + 1, fmt="f %d %d %d")
    except OSError as exc:
        raise MeshExportError(f"failed to write OBJ {path}: {exc}") from exc
    return path


def read_obj(path) -> SurfaceMesh:
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            if line.startswith("v "):
                verts.append([float(v) for v in line.split()[1:4]])
            elif line.startswith("f "):
                faces.append([int(tok.split("/")[0]) - 1 for tok in line.split()[1:4]])
    return SurfaceMesh(np.array(verts), np.array(faces))


def export_mesh(mesh: SurfaceMesh, path):
    """Write ``path`` as STL or OBJ by suffix; without a suffix write both."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".stl":
        return [write_stl(mesh, path)]
    if suffix == ".obj":
        return [write_obj(mesh, path)]
    return [write_stl(mesh, path.with_suffix(".stl")), write_obj(mesh, path.with_suffix(".obj"))]


def dump_grid_rle(grid: VoxelGrid) -> str:
    """Run-length text dump of the occupancy in C order, for debugging."""
    flat = grid.occupancy.ravel().astype(np.int8)
    change = np.flatnonzero(np.diff(flat)) + 1
    starts = np.concatenate([[0], change])
    lengths = np.diff(np.concatenate([starts, [flat.size]]))
    runs = " ".join(f"{n}x{int(flat[s])}" for s, n in zip(starts, lengths))
    nx, ny, nz = grid.dims
    return f"dims {nx} {ny} {nz}\ncell_size {grid.cell_size!r}\nruns {runs}\n"


def load_grid_rle(text: str) -> VoxelGrid:
    lines = dict(line.split(" ", 1) for line in text.strip().splitlines())
    dims = tuple(int(v) for v in lines["dims"].split())
    values = []
    for n, v in re.findall(r"(\d+)x([01])", lines["runs"]):
        values.append(np.full(int(n), v == "1"))
    occupancy = np.concatenate(values).reshape(dims)
    return VoxelGrid(occupancy, float(lines["cell_size"]))
