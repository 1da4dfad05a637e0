"""Full-order model: thermal-block geometry, P1 assembly, and solves.

The domain is the unit square split into ``px * py`` equal rectangular
sub-blocks, each carrying one scalar diffusion weight.  The bilinear form is

    a_mu(u, v) = sum_p  mu_p * (grad u, grad v)_{L2(Omega_p)},

discretized with continuous piecewise-linear elements on a structured
triangulation (each grid cell split along its bottom-left/top-right
diagonal) and homogeneous Dirichlet conditions on the whole boundary.  The
reference inner product is the H^1_0 seminorm, whose Gram matrix is the
unit-coefficient stiffness matrix M_X = sum_p A_p.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.io
import scipy.sparse as sparse
from scipy.sparse.linalg import splu

from .errors import ConfigurationError, DimensionError, DomainError, NumericError

__all__ = [
    "ParameterPoint",
    "Mesh",
    "AffineSystem",
    "Snapshot",
    "build_mesh",
    "assemble",
    "solve_fom",
    "x_inner",
    "x_norm",
    "to_full",
    "point_values",
    "prolong",
    "export_matrices",
]

#: Default admissible range for the diffusion weights.
MU_MIN_DEFAULT = 0.1
MU_MAX_DEFAULT = 1.0

#: Relative residual each full-order solve must achieve.
FOM_RESIDUAL_TOL = 1e-10


@dataclass(frozen=True)
class ParameterPoint:
    """A point of the parameter space: one positive weight per sub-block.

    Weights are stored as a tuple so points are hashable and usable as
    dictionary keys (snapshot tables).  Positivity and finiteness are
    enforced here; membership in a concrete admissible box is checked where
    parameter sets are constructed.
    """

    weights: tuple[float, ...]

    def __post_init__(self):
        w = tuple(float(x) for x in self.weights)
        if len(w) == 0:
            raise DomainError("a parameter point needs at least one weight")
        if not all(np.isfinite(w)):
            raise DomainError(f"non-finite weight in {w}")
        if min(w) <= 0.0:
            raise DomainError(f"weights must be positive, got {w}")
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, count: int, value: float = 1.0) -> "ParameterPoint":
        """The point (value, ..., value) with `count` entries."""
        return cls((value,) * count)

    @property
    def size(self) -> int:
        return len(self.weights)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=float)

    def scaled(self, factor: float) -> "ParameterPoint":
        """The point with every weight multiplied by `factor`."""
        return ParameterPoint(tuple(factor * w for w in self.weights))


@dataclass(frozen=True)
class Mesh:
    """Structured triangulation of the unit square.

    Attributes
    ----------
    nx, ny : int
        Number of grid cells per direction.
    px, py : int
        Number of sub-blocks per direction; nx % px == 0 and ny % py == 0.
    vertices : (num_vertices, 2) float array
        Vertex coordinates, x-fastest scan order.
    triangles : (num_triangles, 3) int array
        Vertex indices, counterclockwise.  Each cell contributes two
        triangles split along the bottom-left -> top-right diagonal.
    tri_block : (num_triangles,) int array
        1-based sub-block id per triangle, row-major over the px-by-py block
        grid starting at the bottom-left block.
    boundary : (num_vertices,) bool array
        True on the Dirichlet boundary.
    dof_index : (num_vertices,) int array
        Interior DOF number per vertex, -1 on the boundary.
    """

    nx: int
    ny: int
    px: int
    py: int
    vertices: np.ndarray
    triangles: np.ndarray
    tri_block: np.ndarray
    boundary: np.ndarray
    dof_index: np.ndarray

    @property
    def block_count(self) -> int:
        return self.px * self.py

    @property
    def dof_count(self) -> int:
        return (self.nx - 1) * (self.ny - 1)

    @property
    def interior_vertices(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary)


@dataclass
class AffineSystem:
    """Assembled affine decomposition A(mu) = sum_p mu_p A_p plus load and Gram.

    All component matrices share one sparsity pattern (stored zeros allowed),
    so A(mu) is formed by a single dense combination of the stacked data
    arrays — cheap and bitwise deterministic.
    """

    components: list[sparse.csc_matrix]
    load: np.ndarray
    gram: sparse.csc_matrix
    dof_count: int
    mesh: Mesh
    rhs_value: float
    _stacked: np.ndarray = field(repr=False)  # (P, nnz) data on the shared pattern
    _fingerprint: str = field(default="", repr=False)

    @property
    def block_count(self) -> int:
        return len(self.components)

    def matrix(self, weights) -> sparse.csc_matrix:
        """A(mu) for a ParameterPoint or a length-P weight sequence."""
        if isinstance(weights, ParameterPoint):
            weights = weights.as_array()
        w = np.asarray(weights, dtype=float)
        if w.shape != (self.block_count,):
            raise DimensionError(
                f"expected {self.block_count} weights, got shape {w.shape}"
            )
        pattern = self.gram
        data = w @ self._stacked
        return sparse.csc_matrix(
            (data, pattern.indices, pattern.indptr), shape=pattern.shape
        )

    @property
    def fingerprint(self) -> str:
        """Content hash identifying this assembled system."""
        return self._fingerprint


@dataclass(frozen=True)
class Snapshot:
    """A full-order solution together with the parameter that produced it."""

    coefficients: np.ndarray
    parameter: ParameterPoint


def build_mesh(nx: int, ny: int, px: int, py: int) -> Mesh:
    """Build the structured criss-cross triangulation of the unit square.

    Parameters
    ----------
    nx, ny : int
        Cells per direction; must be positive and divisible by px, py.
    px, py : int
        Sub-blocks per direction; must be positive.

    Returns
    -------
    Mesh

    Raises
    ------
    ConfigurationError
        If a grid size is not positive or not divisible by its block count.
    """
    for name, value in (("nx", nx), ("ny", ny), ("px", px), ("py", py)):
        if int(value) != value or value < 1:
            raise ConfigurationError(f"{name} must be a positive integer, got {value}")
    if nx % px != 0:
        raise ConfigurationError(f"nx={nx} is not divisible by px={px}")
    if ny % py != 0:
        raise ConfigurationError(f"ny={ny} is not divisible by py={py}")

    xs = np.linspace(0.0, 1.0, nx + 1)
    ys = np.linspace(0.0, 1.0, ny + 1)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")  # row = constant y
    vertices = np.column_stack([gx.ravel(), gy.ravel()])

    def vid(ix, iy):
        return iy * (nx + 1) + ix

    ci, cj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
    ci = ci.ravel()
    cj = cj.ravel()
    ll = vid(ci, cj)
    lr = vid(ci + 1, cj)
    ul = vid(ci, cj + 1)
    ur = vid(ci + 1, cj + 1)
    # Lower triangle (ll, lr, ur) and upper triangle (ll, ur, ul); both CCW.
    lower = np.column_stack([ll, lr, ur])
    upper = np.column_stack([ll, ur, ul])
    triangles = np.empty((2 * nx * ny, 3), dtype=np.int64)
    triangles[0::2] = lower
    triangles[1::2] = upper

    bx = ci // (nx // px)
    by = cj // (ny // py)
    cell_block = by * px + bx + 1  # 1-based, bottom-left block first
    tri_block = np.repeat(cell_block, 2)

    ix = np.arange(nx + 1)
    iy = np.arange(ny + 1)
    gx_i, gy_i = np.meshgrid(ix, iy, indexing="xy")
    boundary = (
        (gx_i == 0) | (gx_i == nx) | (gy_i == 0) | (gy_i == ny)
    ).ravel()

    dof_index = np.full(vertices.shape[0], -1, dtype=np.int64)
    interior = np.flatnonzero(~boundary)
    dof_index[interior] = np.arange(interior.size)

    return Mesh(
        nx=nx,
        ny=ny,
        px=px,
        py=py,
        vertices=vertices,
        triangles=triangles,
        tri_block=tri_block,
        boundary=boundary,
        dof_index=dof_index,
    )


def _element_quantities(mesh: Mesh):
    """Per-triangle P1 stiffness (3x3) and area."""
    pts = mesh.vertices[mesh.triangles]  # (Nt, 3, 2)
    x = pts[:, :, 0]
    y = pts[:, :, 1]
    # Gradients of the barycentric basis: grad(lambda_i) = (b_i, c_i) / (2 area)
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    area = 0.5 * (
        (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0])
        - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0])
    )
    if np.any(area <= 0):
        raise NumericError("non-positive triangle area; mesh orientation broken")
    scale = 1.0 / (4.0 * area)
    k_local = (b[:, :, None] * b[:, None, :] + c[:, :, None] * c[:, None, :]) * scale[
        :, None, None
    ]
    return k_local, area


def assemble(mesh: Mesh, rhs_value: float = 1.0) -> AffineSystem:
    """Assemble the affine component matrices, load vector, and Gram matrix.

    Each component A_p collects the stiffness contributions of the triangles
    in sub-block p only; rows/columns of DOFs whose support misses that block
    are zero.  The load is the P1 discretization of the constant right-hand
    side `rhs_value`.  All matrices are restricted to interior DOFs
    (homogeneous Dirichlet).

    Returns
    -------
    AffineSystem
    """
    if not np.isfinite(rhs_value):
        raise DomainError(f"rhs_value must be finite, got {rhs_value}")

    k_local, area = _element_quantities(mesh)
    n_vert = mesh.vertices.shape[0]
    n_dof = mesh.dof_count
    tris = mesh.triangles

    rows = np.repeat(tris, 3, axis=1).ravel()  # (Nt*9,)
    cols = np.tile(tris, (1, 3)).ravel()
    dof_r = mesh.dof_index[rows]
    dof_c = mesh.dof_index[cols]
    interior_entry = (dof_r >= 0) & (dof_c >= 0)
    tri_of_entry = np.repeat(np.arange(tris.shape[0]), 9)

    # Shared sparsity pattern from every interior entry of every triangle.
    pat = sparse.coo_matrix(
        (
            np.ones(np.count_nonzero(interior_entry)),
            (dof_r[interior_entry], dof_c[interior_entry]),
        ),
        shape=(n_dof, n_dof),
    ).tocsc()
    pat.sum_duplicates()
    pat.sort_indices()
    nnz = pat.nnz
    # Column-major key of each stored position, for COO -> pattern scatter.
    col_of_pos = np.repeat(np.arange(n_dof), np.diff(pat.indptr))
    keys_pattern = col_of_pos * n_dof + pat.indices

    stacked = np.zeros((mesh.block_count, nnz))
    sel = interior_entry
    values_sel = k_local.reshape(-1, 9).ravel()[sel]
    blocks_sel = mesh.tri_block[tri_of_entry[sel]]
    keys_entries = dof_c[sel] * n_dof + dof_r[sel]
    pos = np.searchsorted(keys_pattern, keys_entries)
    for p in range(1, mesh.block_count + 1):
        mask = blocks_sel == p
        np.add.at(stacked[p - 1], pos[mask], values_sel[mask])

    gram_data = stacked.sum(axis=0)
    gram = sparse.csc_matrix(
        (gram_data, pat.indices, pat.indptr), shape=(n_dof, n_dof)
    )
    components = [
        sparse.csc_matrix((stacked[p], pat.indices, pat.indptr), shape=(n_dof, n_dof))
        for p in range(mesh.block_count)
    ]

    # Load: integral of each interior hat function is area/3 per triangle.
    load_full = np.zeros(n_vert)
    np.add.at(load_full, tris.ravel(), np.repeat(area / 3.0, 3))
    load = rhs_value * load_full[~mesh.boundary]

    digest = hashlib.sha256()
    digest.update(
        np.asarray(
            [mesh.nx, mesh.ny, mesh.px, mesh.py, n_dof], dtype=np.int64
        ).tobytes()
    )
    digest.update(np.float64(rhs_value).tobytes())
    digest.update(pat.indptr.astype(np.int64).tobytes())
    digest.update(pat.indices.astype(np.int64).tobytes())
    digest.update(stacked.tobytes())
    digest.update(load.tobytes())

    return AffineSystem(
        components=components,
        load=load,
        gram=gram,
        dof_count=n_dof,
        mesh=mesh,
        rhs_value=float(rhs_value),
        _stacked=stacked,
        _fingerprint=digest.hexdigest(),
    )


def solve_fom(system: AffineSystem, mu: ParameterPoint) -> Snapshot:
    """Solve the full-order problem A(mu) u = f by sparse LU.

    Raises
    ------
    DomainError
        If any weight is non-positive or the parameter size mismatches.
    NumericError
        If the relative residual exceeds 1e-10.
    """
    if mu.size != system.block_count:
        raise DimensionError(
            f"parameter has {mu.size} weights, system has {system.block_count} blocks"
        )
    matrix = system.matrix(mu)
    lu = splu(matrix)
    u = lu.solve(system.load)
    load_norm = np.linalg.norm(system.load)
    residual = np.linalg.norm(matrix @ u - system.load) / (load_norm or 1.0)
    if not residual <= FOM_RESIDUAL_TOL:
        raise NumericError(
            f"FOM solve at mu={mu.weights} reached relative residual {residual:.3e} "
            f"(contract {FOM_RESIDUAL_TOL:.0e})"
        )
    return Snapshot(coefficients=u, parameter=mu)


def x_inner(u: np.ndarray, v: np.ndarray, system: AffineSystem) -> float:
    """X-inner product u^T M_X v (H^1_0 seminorm metric)."""
    u = np.asarray(u)
    v = np.asarray(v)
    if u.shape != (system.dof_count,) or v.shape != (system.dof_count,):
        raise DimensionError(
            f"vectors must have shape ({system.dof_count},), "
            f"got {u.shape} and {v.shape}"
        )
    return float(u @ (system.gram @ v))


def x_norm(u: np.ndarray, system: AffineSystem) -> float:
    """X-norm sqrt(<u, u>_X); round-off negatives are clamped to zero."""
    return float(np.sqrt(max(x_inner(u, u, system), 0.0)))


def to_full(mesh: Mesh, u_interior: np.ndarray) -> np.ndarray:
    """Embed an interior-DOF vector into the full vertex set (zeros on the boundary)."""
    u_interior = np.asarray(u_interior)
    if u_interior.shape != (mesh.dof_count,):
        raise DimensionError(
            f"expected {mesh.dof_count} interior values, got shape {u_interior.shape}"
        )
    full = np.zeros(mesh.vertices.shape[0])
    full[~mesh.boundary] = u_interior
    return full


def point_values(mesh: Mesh, vertex_values: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Evaluate a P1 function (given by vertex values) at arbitrary points.

    Points must lie in the closed unit square.  Used for transferring
    solutions between refinement levels in convergence studies.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if np.any(pts < -1e-12) or np.any(pts > 1 + 1e-12):
        raise DomainError("evaluation points must lie in the unit square")
    nx, ny = mesh.nx, mesh.ny
    fx = np.clip(pts[:, 0] * nx, 0, nx * (1 - 1e-16))
    fy = np.clip(pts[:, 1] * ny, 0, ny * (1 - 1e-16))
    ci = np.minimum(fx.astype(np.int64), nx - 1)
    cj = np.minimum(fy.astype(np.int64), ny - 1)
    s = fx - ci
    t = fy - cj

    def vid(ix, iy):
        return iy * (nx + 1) + ix

    v_ll = vertex_values[vid(ci, cj)]
    v_lr = vertex_values[vid(ci + 1, cj)]
    v_ul = vertex_values[vid(ci, cj + 1)]
    v_ur = vertex_values[vid(ci + 1, cj + 1)]
    lower = t <= s  # triangle (ll, lr, ur); else (ll, ur, ul)
    out = np.where(
        lower,
        v_ll * (1 - s) + v_lr * (s - t) + v_ur * t,
        v_ll * (1 - t) + v_ur * s + v_ul * (t - s),
    )
    return out


def prolong(coarse_mesh: Mesh, u_coarse: np.ndarray, fine_mesh: Mesh) -> np.ndarray:
    """Interpolate a coarse interior solution onto the fine mesh's interior DOFs."""
    full = to_full(coarse_mesh, u_coarse)
    targets = fine_mesh.vertices[~fine_mesh.boundary]
    return point_values(coarse_mesh, full, targets)


def export_matrices(system: AffineSystem, directory) -> list[Path]:
    """Write M_X and every A_p in MatrixMarket coordinate format.

    Returns the list of files written: gram.mtx, component_1.mtx, ...
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    path = directory / "gram.mtx"
    scipy.io.mmwrite(str(path), system.gram.tocoo())
    written.append(path)
    for p, comp in enumerate(system.components, start=1):
        path = directory / f"component_{p}.mtx"
        scipy.io.mmwrite(str(path), comp.tocoo())
        written.append(path)
    return written
