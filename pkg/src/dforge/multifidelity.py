"""Fidelity pairs, Galerkin projection between meshes, discrepancy datasets.

The projection computes the L2-optimal representation of a fine-mesh state
in the coarse-mesh P1 basis by solving the coarse mass system against a
cross-mass right-hand side. The dataset holds ground-truth discrepancy
snapshots on the sampled instants plus everything the trainer needs.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import (
    ConfigError,
    CoverageError,
    DimensionMismatchError,
    MetricError,
    ProjectionError,
)
from .fem import FeField, l2_norm, unit_mass
from .mesh import TriMesh, locate_point
from .timestepping import TimeGrid, Trajectory
from .util import format_float, map_ordered

__all__ = [
    "FidelityPair",
    "DiscrepancyDataset",
    "GalerkinProjector",
    "galerkin_project",
    "cross_mass_matrix",
    "build_discrepancy_dataset",
    "validation_check",
    "save_dataset",
    "load_dataset",
]


@dataclass(eq=False)
class FidelityPair:
    """Low- and high-fidelity problem setups sharing one time axis.

    ``sample_indices`` designates the observed instants (as indices into
    the shared grid) where ground-truth discrepancies are available.
    """

    lofi: object
    hifi: object
    grid: TimeGrid
    sample_indices: np.ndarray

    def __post_init__(self):
        s = np.unique(np.asarray(self.sample_indices, dtype=np.int64))
        if s.size == 0:
            raise ConfigError("sample index set is empty")
        if s.min() < 0 or s.max() > self.grid.num_steps:
            raise ConfigError(
                f"sample indices must lie in 0..{self.grid.num_steps}"
            )
        self.sample_indices = s


@dataclass(eq=False)
class DiscrepancyDataset:
    """Ground-truth discrepancy snapshots in the lofi basis.

    ``deltas[i]`` is the discrepancy at grid index ``sample_indices[i]``:
    the projected hifi state minus the lofi state. ``beta`` holds the
    per-sample loss weights (all 1 until a weighted training phase
    updates them). ``lofi`` is the full low-fidelity trajectory, which
    doubles as the model input sequence.
    """

    mesh: TriMesh
    sample_indices: np.ndarray
    deltas: np.ndarray
    lofi: Trajectory
    beta: np.ndarray = field(default=None)

    def __post_init__(self):
        self.sample_indices = np.asarray(self.sample_indices, dtype=np.int64)
        self.deltas = np.asarray(self.deltas, dtype=np.float64)
        if self.beta is None:
            self.beta = np.ones(self.sample_indices.size)
        s = self.sample_indices
        if s.size == 0 or np.any(np.diff(s) <= 0):
            raise ConfigError("sample indices must be strictly increasing and nonempty")
        if s.min() < 0 or s.max() >= self.lofi.num_instants:
            raise ConfigError("sample index outside the trajectory grid")
        if self.deltas.shape != (s.size, self.mesh.num_nodes):
            raise DimensionMismatchError(
                f"deltas shape {self.deltas.shape} does not match "
                f"{s.size} samples x {self.mesh.num_nodes} DOF"
            )
        if self.beta.shape != (s.size,):
            raise DimensionMismatchError("beta length must match sample count")

    @property
    def t_up(self) -> np.ndarray:
        """Grid indices with no ground truth (the upsampling set)."""
        all_idx = np.arange(self.lofi.num_instants)
        return np.setdiff1d(all_idx, self.sample_indices)

    @property
    def num_samples(self) -> int:
        return self.sample_indices.size


# quadrature: midpoints of the three edges in barycentric coordinates,
# exact for quadratic integrands, so exact for P1 x P1 products on any
# triangle over which both factors are linear
_EDGE_MID_BARY = np.array([
    [0.5, 0.5, 0.0],
    [0.0, 0.5, 0.5],
    [0.5, 0.0, 0.5],
])


def cross_mass_matrix(lofi_mesh: TriMesh, hifi_mesh: TriMesh) -> sp.csr_matrix:
    """P[i, j] = integral of (lofi basis i) * (hifi basis j).

    Assembled by the edge-midpoint rule over hifi triangles, with lofi
    basis values obtained by point location. Exact when every hifi
    triangle lies inside a single lofi triangle (nested refinement).
    """
    areas = hifi_mesh.signed_areas()
    tri_pts = hifi_mesh.nodes[hifi_mesh.triangles]

    def chunk_triplets(t_range):
        rows, cols, vals = [], [], []
        for t in t_range:
            pts = _EDGE_MID_BARY @ tri_pts[t]
            w = areas[t] / 3.0
            for q in range(3):
                try:
                    loc = locate_point(lofi_mesh, pts[q])
                except Exception as exc:
                    raise ProjectionError(
                        f"quadrature point ({pts[q][0]:.17g}, {pts[q][1]:.17g}) "
                        f"of hifi triangle {t} not found in the lofi mesh: {exc}"
                    ) from exc
                lofi_nodes = lofi_mesh.triangles[loc.triangle]
                phi_l = loc.barycentric
                phi_h = _EDGE_MID_BARY[q]
                for a in range(3):
                    if phi_l[a] == 0.0:
                        continue
                    for bq in range(3):
                        if phi_h[bq] == 0.0:
                            continue
                        rows.append(lofi_nodes[a])
                        cols.append(hifi_mesh.triangles[t, bq])
                        vals.append(w * phi_l[a] * phi_h[bq])
        return rows, cols, vals

    m = hifi_mesh.num_triangles
    n_chunks = min(8, m)
    bounds = np.linspace(0, m, n_chunks + 1).astype(int)
    parts = map_ordered(
        chunk_triplets, [range(bounds[i], bounds[i + 1]) for i in range(n_chunks)]
    )
    rows = np.concatenate([np.array(p[0], dtype=np.int64) for p in parts])
    cols = np.concatenate([np.array(p[1], dtype=np.int64) for p in parts])
    vals = np.concatenate([np.array(p[2]) for p in parts])
    return sp.coo_matrix(
        (vals, (rows, cols)), shape=(lofi_mesh.num_nodes, hifi_mesh.num_nodes)
    ).tocsr()


class GalerkinProjector:
    """Reusable hifi-to-lofi L2 projector for a fixed mesh pair."""

    def __init__(self, lofi_mesh: TriMesh, hifi_mesh: TriMesh):
        self.lofi_mesh = lofi_mesh
        self.hifi_mesh = hifi_mesh
        self.cross = cross_mass_matrix(lofi_mesh, hifi_mesh)
        try:
            self._lu = splu(unit_mass(lofi_mesh).tocsc())
        except RuntimeError as exc:
            raise ProjectionError(f"lofi mass factorization failed: {exc}") from exc

    def project(self, hifi_coeffs) -> np.ndarray:
        hifi_coeffs = np.asarray(hifi_coeffs, dtype=np.float64)
        if hifi_coeffs.shape != (self.hifi_mesh.num_nodes,):
            raise DimensionMismatchError(
                f"expected length {self.hifi_mesh.num_nodes}, "
                f"got {hifi_coeffs.shape}"
            )
        return self._lu.solve(self.cross @ hifi_coeffs)

    def project_states(self, states) -> np.ndarray:
        """Project each row of a (num_states, hifi DOF) array."""
        states = np.asarray(states, dtype=np.float64)
        rhs = self.cross @ states.T
        return self._lu.solve(np.ascontiguousarray(rhs)).T


_PROJECTOR_CACHE = weakref.WeakKeyDictionary()


def _cached_projector(lofi_mesh, hifi_mesh) -> GalerkinProjector:
    per_hifi = _PROJECTOR_CACHE.get(hifi_mesh)
    if per_hifi is None:
        per_hifi = weakref.WeakKeyDictionary()
        _PROJECTOR_CACHE[hifi_mesh] = per_hifi
    proj = per_hifi.get(lofi_mesh)
    if proj is None:
        proj = GalerkinProjector(lofi_mesh, hifi_mesh)
        per_hifi[lofi_mesh] = proj
    return proj


def galerkin_project(hifi_field: FeField, lofi_mesh: TriMesh) -> FeField:
    """L2-optimal representation of a hifi field on the lofi mesh.

    Solves M_lofi d = P x_hifi with the cross-mass matrix P. Every hifi
    quadrature point must be locatable in the lofi mesh (the hifi domain
    may not extend beyond the lofi one). Projectors are cached per mesh
    pair, so repeated projections between the same meshes are cheap.
    """
    coeffs = np.asarray(hifi_field.coeffs, dtype=np.float64)
    if not np.isfinite(coeffs).all():
        raise ProjectionError("hifi field contains non-finite coefficients")
    proj = _cached_projector(lofi_mesh, hifi_field.mesh)
    return FeField(lofi_mesh, proj.project(coeffs))


def build_discrepancy_dataset(pair: FidelityPair, lofi_traj: Trajectory,
                              hifi_traj: Trajectory) -> DiscrepancyDataset:
    """Snapshot dataset delta_k = project(hifi state k) - lofi state k
    over the sampled instants of the pair."""
    grid = pair.grid
    for name, traj in (("lofi", lofi_traj), ("hifi", hifi_traj)):
        if traj.num_instants != grid.num_steps + 1:
            raise ConfigError(
                f"{name} trajectory has {traj.num_instants} instants, "
                f"grid has {grid.num_steps + 1}"
            )
        if abs(traj.grid.dt - grid.dt) > 1e-12 * grid.dt:
            raise ConfigError(f"{name} trajectory time step differs from the pair grid")
    lofi_mesh = pair.lofi.mesh if hasattr(pair.lofi, "mesh") else lofi_traj.mesh
    hifi_mesh = pair.hifi.mesh if hasattr(pair.hifi, "mesh") else hifi_traj.mesh
    if lofi_traj.num_dof != lofi_mesh.num_nodes:
        raise ConfigError("lofi trajectory does not match the lofi mesh")
    if hifi_traj.num_dof != hifi_mesh.num_nodes:
        raise ConfigError("hifi trajectory does not match the hifi mesh")

    proj = _cached_projector(lofi_mesh, hifi_mesh)
    s = pair.sample_indices
    projected = proj.project_states(hifi_traj.states[s])
    deltas = projected - lofi_traj.states[s]
    lofi_traj = Trajectory(lofi_traj.grid, lofi_traj.states, lofi_mesh)
    return DiscrepancyDataset(lofi_mesh, s, deltas, lofi_traj)


def project_trajectory(hifi_traj: Trajectory, lofi_mesh: TriMesh) -> Trajectory:
    """Project every instant of a hifi trajectory onto the lofi mesh."""
    proj = _cached_projector(lofi_mesh, hifi_traj.mesh)
    return Trajectory(hifi_traj.grid, proj.project_states(hifi_traj.states), lofi_mesh)


def validation_check(discrepancy_traj: Trajectory, c: float):
    """Time-averaged squared discrepancy norm against the bound ``c``.

    Computes (1/T) * sum_k ||delta_k||^2 * dt with a left-endpoint Riemann
    sum (k = 0 .. N_T - 1) and the mass norm in space. Returns
    (value <= c, value).
    """
    mesh = discrepancy_traj.mesh
    if mesh is None:
        raise MetricError("discrepancy trajectory has no mesh attached")
    k_total = discrepancy_traj.num_instants - 1
    if k_total < 1:
        raise MetricError("need at least one time interval")
    total = 0.0
    for k in range(k_total):
        total += l2_norm(mesh, discrepancy_traj.states[k]) ** 2
    value = total / k_total
    return bool(value <= c), value


def _write_indexed_csv(path, header, index, matrix):
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(header + "\n")
        for i, row in zip(index, matrix):
            body = ",".join(format_float(x) for x in row)
            fh.write(f"{format_float(i) if isinstance(i, float) else i},{body}\n")


def save_dataset(dataset: DiscrepancyDataset, dirpath, reference: Trajectory = None):
    """Write the dataset directory.

    Files: ``lofi_mesh.txt``, ``lofi_trajectory.csv``,
    ``delta_ground_truth.csv`` (one row per sampled instant),
    ``sample_indices.csv``, and, when a dense projected reference is
    supplied, ``projected_hifi_trajectory.csv`` for evaluation.
    """
    import os

    from .mesh import save_mesh_file
    from .timestepping import save_trajectory_csv

    os.makedirs(dirpath, exist_ok=True)
    save_mesh_file(dataset.mesh, os.path.join(dirpath, "lofi_mesh.txt"))
    save_trajectory_csv(dataset.lofi, os.path.join(dirpath, "lofi_trajectory.csv"))
    n = dataset.mesh.num_nodes
    header = "t," + ",".join(f"dof_{i}" for i in range(n))
    times = dataset.lofi.grid.instants[dataset.sample_indices]
    _write_indexed_csv(
        os.path.join(dirpath, "delta_ground_truth.csv"),
        header,
        [format_float(t) for t in times],
        dataset.deltas,
    )
    with open(os.path.join(dirpath, "sample_indices.csv"), "w",
              encoding="ascii", newline="\n") as fh:
        fh.write("index\n")
        for i in dataset.sample_indices:
            fh.write(f"{i}\n")
    if reference is not None:
        save_trajectory_csv(
            reference, os.path.join(dirpath, "projected_hifi_trajectory.csv")
        )


def load_dataset(dirpath):
    """Read a dataset directory written by ``save_dataset``.

    Returns (dataset, reference) where ``reference`` is the dense
    projected hifi trajectory or None if it was not stored.
    """
    import os

    from .mesh import load_mesh_file
    from .timestepping import load_trajectory_csv

    mesh_path = os.path.join(dirpath, "lofi_mesh.txt")
    if not os.path.exists(mesh_path):
        raise ConfigError(f"no dataset at {dirpath} (missing lofi_mesh.txt)")
    mesh = load_mesh_file(mesh_path)
    lofi = load_trajectory_csv(os.path.join(dirpath, "lofi_trajectory.csv"), mesh)
    with open(os.path.join(dirpath, "sample_indices.csv"), encoding="ascii") as fh:
        lines = [s for s in fh.read().split("\n") if s]
    if lines[0] != "index":
        raise ConfigError("sample_indices.csv must start with an 'index' header")
    sample = np.array([int(s) for s in lines[1:]], dtype=np.int64)
    with open(os.path.join(dirpath, "delta_ground_truth.csv"), encoding="ascii") as fh:
        rows = [s.split(",") for s in fh.read().split("\n") if s][1:]
    deltas = np.array(rows, dtype=np.float64)[:, 1:]
    dataset = DiscrepancyDataset(mesh, sample, deltas, lofi)
    ref_path = os.path.join(dirpath, "projected_hifi_trajectory.csv")
    reference = load_trajectory_csv(ref_path, mesh) if os.path.exists(ref_path) else None
    return dataset, reference
