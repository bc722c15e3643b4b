"""P1 finite elements on triangular meshes.

Mass and stiffness assembly with element-wise constant coefficients
(evaluated at triangle centroids), load vectors by one-point centroid
quadrature, Dirichlet lifting to reduced interior systems, the
mass-weighted L2 norm, and pointwise field evaluation.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import CoefficientError, DimensionMismatchError
from .mesh import TriMesh, locate_point

__all__ = [
    "FeField",
    "assemble_mass",
    "assemble_stiffness",
    "assemble_load",
    "point_source_vector",
    "apply_dirichlet_lift",
    "reduce_system",
    "expand_solution",
    "unit_mass",
    "l2_norm",
    "eval_field",
]

# reference P1 mass pattern: integral of w_i * w_j over a triangle is
# area/12 times this matrix
_MASS_PATTERN = np.array([2.0, 1.0, 1.0, 1.0, 2.0, 1.0, 1.0, 1.0, 2.0]) / 12.0


@dataclass(eq=False)
class FeField:
    """A P1 function: mesh plus nodal coefficient vector."""

    mesh: TriMesh
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if self.coeffs.shape != (self.mesh.num_nodes,):
            raise DimensionMismatchError(
                f"coefficient vector has length {self.coeffs.shape}, "
                f"mesh has {self.mesh.num_nodes} nodes"
            )


def _coeff_values(mesh, coeff, name):
    """Evaluate a coefficient at all centroids and check positivity."""
    if callable(coeff):
        cent = mesh.centroids()
        vals = np.array([float(coeff(c)) for c in cent])
    else:
        vals = np.full(mesh.num_triangles, float(coeff))
    if not np.all(np.isfinite(vals)):
        raise CoefficientError(f"{name} coefficient is not finite on some triangle")
    if vals.min() <= 0.0:
        bad = int(np.argmin(vals))
        raise CoefficientError(
            f"{name} coefficient must be positive; got {vals[bad]:.3e} "
            f"at triangle {bad} centroid"
        )
    return vals


def _scatter_indices(triangles):
    rows = np.repeat(triangles, 3, axis=1).ravel()
    cols = np.tile(triangles, (1, 3)).ravel()
    return rows, cols


def assemble_mass(mesh: TriMesh, coeff=1.0) -> sp.csr_matrix:
    """Mass matrix with a positive scalar coefficient field.

    The coefficient (scalar or callable on points) is taken element-wise
    constant at centroid values; element integrals are then exact.
    """
    vals = _coeff_values(mesh, coeff, "mass")
    areas = mesh.signed_areas()
    data = (vals * areas)[:, None] * _MASS_PATTERN[None, :]
    rows, cols = _scatter_indices(mesh.triangles)
    n = mesh.num_nodes
    return sp.coo_matrix((data.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def assemble_stiffness(mesh: TriMesh, coeff=1.0, metric=(1.0, 1.0)) -> sp.csr_matrix:
    """Stiffness matrix for the weighted Laplacian.

    Computes entries of integral coeff * (gx dx(w_i) dx(w_j) + gy dy(w_i) dy(w_j))
    with (gx, gy) = ``metric``. The default metric (1, 1) gives the plain
    coeff * grad(w_i) . grad(w_j) form; the anisotropic weights support
    dimensionless formulations with distinct axis scalings.
    """
    gx, gy = metric
    if gx <= 0 or gy <= 0:
        raise CoefficientError(f"metric weights must be positive, got {metric}")
    vals = _coeff_values(mesh, coeff, "stiffness")
    p = mesh.nodes[mesh.triangles]
    # gradient of basis i is (b_i, c_i)/(2A)
    b = np.stack(
        [p[:, 1, 1] - p[:, 2, 1], p[:, 2, 1] - p[:, 0, 1], p[:, 0, 1] - p[:, 1, 1]],
        axis=1,
    )
    c = np.stack(
        [p[:, 2, 0] - p[:, 1, 0], p[:, 0, 0] - p[:, 2, 0], p[:, 1, 0] - p[:, 0, 0]],
        axis=1,
    )
    areas = mesh.signed_areas()
    scale = vals / (4.0 * areas)
    data = scale[:, None, None] * (
        gx * b[:, :, None] * b[:, None, :] + gy * c[:, :, None] * c[:, None, :]
    )
    rows, cols = _scatter_indices(mesh.triangles)
    n = mesh.num_nodes
    return sp.coo_matrix((data.reshape(-1), (rows, cols)), shape=(n, n)).tocsr()


def assemble_load(mesh: TriMesh, source, t=0.0) -> np.ndarray:
    """Load vector for a distributed source by centroid quadrature.

    ``source`` is a callable (point, time) -> value; each triangle
    contributes value * area/3 to each of its three nodes.
    """
    cent = mesh.centroids()
    vals = np.array([float(source(c, t)) for c in cent])
    areas = mesh.signed_areas()
    out = np.zeros(mesh.num_nodes)
    np.add.at(out, mesh.triangles.ravel(), np.repeat(vals * areas / 3.0, 3))
    return out


def point_source_vector(mesh: TriMesh, p) -> np.ndarray:
    """Nodal basis values at ``p``; scale by the source strength to get
    the load vector of a point source."""
    loc = locate_point(mesh, p)
    out = np.zeros(mesh.num_nodes)
    out[mesh.triangles[loc.triangle]] = loc.barycentric
    return out


def reduce_system(K, rhs, boundary_dofs, boundary_values):
    """Restrict K u = rhs to interior DOF, moving known boundary columns
    to the right-hand side.

    Returns (K_II csr, reduced rhs, interior index array).
    """
    n = K.shape[0]
    boundary_dofs = np.asarray(boundary_dofs, dtype=np.int64).ravel()
    if boundary_dofs.size:
        if boundary_dofs.min() < 0 or boundary_dofs.max() >= n:
            raise IndexError(f"boundary DOF index out of range 0..{n - 1}")
        if np.unique(boundary_dofs).size != boundary_dofs.size:
            raise IndexError("duplicate boundary DOF index")
    g = np.broadcast_to(np.asarray(boundary_values, dtype=np.float64),
                        boundary_dofs.shape).ravel()
    mask = np.ones(n, dtype=bool)
    mask[boundary_dofs] = False
    interior = np.nonzero(mask)[0]
    K = K.tocsr()
    K_ii = K[interior][:, interior]
    if boundary_dofs.size:
        lift = K[interior][:, boundary_dofs] @ g
    else:
        lift = 0.0
    return K_ii.tocsr(), np.asarray(rhs)[interior] - lift, interior


def apply_dirichlet_lift(A, M, rhs, boundary_dofs, boundary_values):
    """Dirichlet lift of the operator K = A (+ M when given).

    The boundary DOF are constrained to ``boundary_values``; their columns
    multiply those values and move to the right-hand side. Returns the
    interior system (matrix, rhs, interior index array). Solving it and
    re-inserting the boundary values via ``expand_solution`` reproduces
    the constrained solution. The time steppers apply the same reduction
    to their own combined operators.
    """
    K = A if M is None else A + M
    return reduce_system(K, rhs, boundary_dofs, boundary_values)


def expand_solution(n, interior, u_interior, boundary_dofs, boundary_values):
    """Recombine an interior solution with the fixed boundary values."""
    out = np.empty(n)
    out[interior] = u_interior
    boundary_dofs = np.asarray(boundary_dofs, dtype=np.int64).ravel()
    if boundary_dofs.size:
        out[boundary_dofs] = np.broadcast_to(
            np.asarray(boundary_values, dtype=np.float64), boundary_dofs.shape
        )
    return out


_UNIT_MASS = weakref.WeakKeyDictionary()


def unit_mass(mesh: TriMesh) -> sp.csr_matrix:
    """Unit-coefficient mass matrix, cached per mesh."""
    m = _UNIT_MASS.get(mesh)
    if m is None:
        m = assemble_mass(mesh, 1.0)
        _UNIT_MASS[mesh] = m
    return m


def l2_norm(mesh: TriMesh, e) -> float:
    """Discrete L2(domain) norm sqrt(e^T M e) with the unit mass matrix."""
    e = np.asarray(e, dtype=np.float64)
    if e.shape != (mesh.num_nodes,):
        raise DimensionMismatchError(
            f"vector length {e.shape} does not match node count {mesh.num_nodes}"
        )
    m = unit_mass(mesh)
    return float(np.sqrt(max(e @ (m @ e), 0.0)))


def eval_field(field: FeField, p) -> float:
    """Evaluate the P1 function at a point by barycentric interpolation."""
    loc = locate_point(field.mesh, p)
    return float(field.coeffs[field.mesh.triangles[loc.triangle]] @ loc.barycentric)
