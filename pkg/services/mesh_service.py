"""
Mesh Service Module
Conforming triangulations of planar domains: structured unit-square generation,
regular (red) refinement and Triangle-style .node/.ele persistence.
"""
import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from services.exceptions import (
    CountMismatchError,
    IndexOutOfRangeError,
    InvalidArgumentError,
    MeshFileNotFoundError,
    MeshFormatError,
)

logger = logging.getLogger("multilevel_eigen")

# local edge k of a triangle joins local vertices k and k+1 (mod 3)
LOCAL_EDGES = np.array([[0, 1], [1, 2], [2, 0]])


@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray        # (n_vertices, 2) float
    triangles: np.ndarray       # (n_triangles, 3) int, counterclockwise
    boundary_edges: np.ndarray  # (n_boundary_edges, 2) int, sorted pairs
    generation: int = 0

    @classmethod
    def from_arrays(cls, vertices, triangles, generation: int = 0) -> "TriMesh":
        """Build a mesh from raw arrays, deriving the boundary from the topology."""
        vertices = np.ascontiguousarray(vertices, dtype=float).reshape(-1, 2)
        triangles = np.ascontiguousarray(triangles, dtype=np.int64).reshape(-1, 3)
        if triangles.size and (triangles.min() < 0 or triangles.max() >= len(vertices)):
            raise InvalidArgumentError("Triangle vertex index out of range.")
        edges, inverse = _unique_edges(triangles)
        counts = np.bincount(inverse, minlength=len(edges))
        if np.any(counts > 2):
            raise InvalidArgumentError("Non-manifold mesh: an edge is shared by more than 2 triangles.")
        mesh = cls(
            vertices=vertices,
            triangles=triangles,
            boundary_edges=edges[counts == 1],
            generation=generation,
        )
        mesh.__dict__["_edge_table"] = (edges, inverse)
        mesh.validate()
        return mesh

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def _edge_table(self) -> tuple[np.ndarray, np.ndarray]:
        return _unique_edges(self.triangles)

    @property
    def edges(self) -> np.ndarray:
        """Unique edges as sorted vertex pairs, in lexicographic order."""
        return self._edge_table[0]

    @cached_property
    def triangle_edges(self) -> np.ndarray:
        """(n_triangles, 3) global edge index of each local edge."""
        return self._edge_table[1].reshape(-1, 3)

    @cached_property
    def edge_is_boundary(self) -> np.ndarray:
        counts = np.bincount(self.triangle_edges.ravel(), minlength=self.n_edges)
        return counts == 1

    @cached_property
    def boundary_vertices(self) -> np.ndarray:
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[self.boundary_edges.ravel()] = True
        return mask

    @cached_property
    def signed_areas(self) -> np.ndarray:
        p0, p1, p2 = (self.vertices[self.triangles[:, k]] for k in range(3))
        d1, d2 = p1 - p0, p2 - p0
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @property
    def area(self) -> float:
        return float(self.signed_areas.sum())

    @cached_property
    def h(self) -> float:
        """Mesh size: the longest edge."""
        e = self.edges
        return float(np.max(np.linalg.norm(self.vertices[e[:, 1]] - self.vertices[e[:, 0]], axis=1)))

    def validate(self) -> None:
        if self.n_triangles == 0:
            raise InvalidArgumentError("Mesh has no triangles.")
        if np.any(self.signed_areas <= 0.0):
            bad = int(np.argmin(self.signed_areas))
            raise InvalidArgumentError(
                f"Triangle {bad} has non-positive signed area {self.signed_areas[bad]:.3e}."
            )
        if self.boundary_edges.size and self.boundary_edges.max() >= self.n_vertices:
            raise InvalidArgumentError("Boundary edge vertex index out of range.")

    def __repr__(self):
        return (f"TriMesh(n_vertices={self.n_vertices}, n_triangles={self.n_triangles}, "
                f"generation={self.generation})")


def _unique_edges(triangles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    local = np.sort(triangles[:, LOCAL_EDGES], axis=2).reshape(-1, 2)
    edges, inverse = np.unique(local, axis=0, return_inverse=True)
    return edges, inverse.reshape(-1)


def unit_square_mesh(m: int) -> TriMesh:
    """
    Structured triangulation of (0,1)x(0,1) with m x m cells, each cut along the
    diagonal from its lower-left to its upper-right corner.

    Raises:
        InvalidArgumentError: If m < 1.
    """
    if int(m) != m or m < 1:
        raise InvalidArgumentError(f"Subdivision count must be a positive integer, got {m}.")
    m = int(m)
    ticks = np.arange(m + 1) / m
    xx, yy = np.meshgrid(ticks, ticks)
    vertices = np.column_stack((xx.ravel(), yy.ravel()))

    i, j = np.meshgrid(np.arange(m), np.arange(m))
    v00 = (j * (m + 1) + i).ravel()
    v10, v01 = v00 + 1, v00 + m + 1
    v11 = v01 + 1
    lower = np.column_stack((v00, v10, v11))
    upper = np.column_stack((v00, v11, v01))
    triangles = np.stack((lower, upper), axis=1).reshape(-1, 3)

    mesh = TriMesh.from_arrays(vertices, triangles)
    logger.debug(f"Unit square mesh m={m}: {mesh}")
    return mesh


def refine_regular(mesh: TriMesh) -> TriMesh:
    """
    Red refinement: every triangle is split into 4 congruent children through its
    edge midpoints. Midpoint of edge g gets vertex index n_vertices + g, and the
    children of triangle t are triangles 4t..4t+3 (three corners, then the middle).
    """
    edges = mesh.edges
    midpoints = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
    vertices = np.vstack((mesh.vertices, midpoints))

    a, b, c = mesh.triangles.T
    mid = mesh.n_vertices + mesh.triangle_edges
    m_ab, m_bc, m_ca = mid.T
    children = np.stack((
        np.column_stack((a, m_ab, m_ca)),
        np.column_stack((m_ab, b, m_bc)),
        np.column_stack((m_ca, m_bc, c)),
        np.column_stack((m_ab, m_bc, m_ca)),
    ), axis=1).reshape(-1, 3)

    refined = TriMesh.from_arrays(vertices, children, generation=mesh.generation + 1)
    logger.debug(f"Refined {mesh} -> {refined}")
    return refined


def refine_times(mesh: TriMesh, times: int) -> TriMesh:
    for _ in range(times):
        mesh = refine_regular(mesh)
    return mesh


# --- Triangle .node / .ele files ---

def _mesh_paths(path: Path | str) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix in (".node", ".ele"):
        path = path.with_suffix("")
    return path.with_name(path.name + ".node"), path.with_name(path.name + ".ele")


def save_mesh(mesh: TriMesh, path: Path | str) -> tuple[Path, Path]:
    """
    Write `<path>.node` and `<path>.ele` with 1-based indices.
    Boundary markers are 1 for vertices on a boundary edge.
    """
    node_path, ele_path = _mesh_paths(path)
    node_path.parent.mkdir(parents=True, exist_ok=True)
    markers = mesh.boundary_vertices.astype(int)

    node_lines = [f"{mesh.n_vertices} 2 0 1"]
    for k, ((x, y), marker) in enumerate(zip(mesh.vertices, markers), start=1):
        node_lines.append(f"{k} {float(x)!r} {float(y)!r} {marker}")
    node_lines.append(f"# generation {mesh.generation}")

    ele_lines = [f"{mesh.n_triangles} 3 0"]
    for k, (v0, v1, v2) in enumerate(mesh.triangles + 1, start=1):
        ele_lines.append(f"{k} {v0} {v1} {v2}")

    node_path.write_text("\n".join(node_lines) + "\n", encoding="utf-8")
    ele_path.write_text("\n".join(ele_lines) + "\n", encoding="utf-8")
    return node_path, ele_path


def _data_lines(path: Path) -> tuple[list[tuple[int, list[str]]], int]:
    """Return the non-comment lines as (line_no, tokens) and the stored generation."""
    if not path.exists():
        raise MeshFileNotFoundError(path)
    rows, generation = [], 0
    with open(path, "r", encoding="utf-8") as file:
        for line_no, line in enumerate(file, start=1):
            text = line.strip()
            if text.startswith("# generation"):
                try:
                    generation = int(text.split()[-1])
                except ValueError:
                    raise MeshFormatError(path, line_no, f"Bad generation comment: {text!r}")
                continue
            text = text.split("#", 1)[0].strip()
            if text:
                rows.append((line_no, text.split()))
    if not rows:
        raise MeshFormatError(path, 1, "Empty file.")
    return rows, generation


def _parse_int(path: Path, line_no: int, token: str) -> int:
    try:
        return int(token)
    except ValueError:
        raise MeshFormatError(path, line_no, f"Expected an integer, got {token!r}")


def load_mesh(path: Path | str) -> TriMesh:
    """
    Read a mesh from `<path>.node` / `<path>.ele`.

    Raises:
        MeshFileNotFoundError: If either file is missing.
        CountMismatchError: If the header counts disagree with the data lines.
        IndexOutOfRangeError: If a triangle references an undeclared node.
        MeshFormatError: For any other malformed line.
    """
    node_path, ele_path = _mesh_paths(path)

    node_rows, generation = _data_lines(node_path)
    header_no, header = node_rows[0]
    n_nodes = _parse_int(node_path, header_no, header[0])
    if len(header) > 1 and header[1] != "2":
        raise MeshFormatError(node_path, header_no, f"Only 2D nodes are supported, got dimension {header[1]}.")
    has_markers = len(header) > 3 and header[3] != "0"
    if len(node_rows) - 1 != n_nodes:
        raise CountMismatchError(
            node_path, header_no, f"Header declares {n_nodes} nodes, found {len(node_rows) - 1}."
        )

    # Triangle numbers nodes from the first index found in the file (0 or 1).
    base = _parse_int(node_path, node_rows[1][0], node_rows[1][1][0]) if n_nodes else 1
    vertices = np.zeros((n_nodes, 2))
    markers = np.zeros(n_nodes, dtype=int)
    for line_no, tokens in node_rows[1:]:
        if len(tokens) < 3:
            raise MeshFormatError(node_path, line_no, "Node line needs an index and two coordinates.")
        index = _parse_int(node_path, line_no, tokens[0]) - base
        if not 0 <= index < n_nodes:
            raise IndexOutOfRangeError(node_path, line_no, f"Node index {tokens[0]} out of range.")
        try:
            vertices[index] = float(tokens[1]), float(tokens[2])
        except ValueError:
            raise MeshFormatError(node_path, line_no, f"Bad coordinates {tokens[1:3]}")
        if has_markers and len(tokens) > 3:
            markers[index] = _parse_int(node_path, line_no, tokens[-1])

    ele_rows, _ = _data_lines(ele_path)
    header_no, header = ele_rows[0]
    n_triangles = _parse_int(ele_path, header_no, header[0])
    if len(header) > 1 and header[1] != "3":
        raise MeshFormatError(ele_path, header_no, f"Only 3-node triangles are supported, got {header[1]}.")
    if len(ele_rows) - 1 != n_triangles:
        raise CountMismatchError(
            ele_path, header_no, f"Header declares {n_triangles} triangles, found {len(ele_rows) - 1}."
        )
    triangles = np.zeros((n_triangles, 3), dtype=np.int64)
    for k, (line_no, tokens) in enumerate(ele_rows[1:]):
        if len(tokens) < 4:
            raise MeshFormatError(ele_path, line_no, "Element line needs an index and three nodes.")
        corners = [_parse_int(ele_path, line_no, t) - base for t in tokens[1:4]]
        for corner, token in zip(corners, tokens[1:4]):
            if not 0 <= corner < n_nodes:
                raise IndexOutOfRangeError(
                    ele_path, line_no, f"Node index {token} out of range for {n_nodes} declared nodes."
                )
        triangles[k] = corners

    mesh = TriMesh.from_arrays(vertices, triangles, generation=generation)
    if has_markers and np.any((markers != 0) != mesh.boundary_vertices):
        logger.warning(f"Boundary markers in {node_path} differ from the mesh topology; using the topology.")
    logger.debug(f"Loaded {mesh} from {node_path.with_suffix('')}")
    return mesh
