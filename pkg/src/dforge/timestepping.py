"""Time integration of assembled FE systems.

Implicit Euler for first-order (diffusion type) systems and an
implicit-stabilized central difference scheme for second-order (wave)
systems. Both factor the constant left-hand operator once per run and
verify a relative update residual each step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import splu

from .errors import ConfigError, DimensionMismatchError, SolverError
from .fem import expand_solution, reduce_system
from .mesh import TriMesh

__all__ = [
    "TimeGrid",
    "Trajectory",
    "implicit_euler_run",
    "central_difference_run",
    "save_trajectory_csv",
    "load_trajectory_csv",
]


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time grid t_k = t0 + k*dt for k = 0..num_steps."""

    t0: float
    dt: float
    num_steps: int

    def __post_init__(self):
        if self.dt <= 0:
            raise ConfigError(f"time step must be positive, got {self.dt}")
        if self.num_steps < 0:
            raise ConfigError(f"step count must be nonnegative, got {self.num_steps}")

    @property
    def instants(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.num_steps + 1)

    @property
    def duration(self) -> float:
        return self.dt * self.num_steps

    def time_at(self, k: int) -> float:
        return self.t0 + self.dt * k


@dataclass(eq=False)
class Trajectory:
    """States of one run: row k of ``states`` is the DOF vector at t_k."""

    grid: TimeGrid
    states: np.ndarray
    mesh: TriMesh | None = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        expected = self.grid.num_steps + 1
        if self.states.ndim != 2 or self.states.shape[0] != expected:
            raise DimensionMismatchError(
                f"states shape {self.states.shape} does not match "
                f"{expected} grid instants"
            )
        if self.mesh is not None and self.states.shape[1] != self.mesh.num_nodes:
            raise DimensionMismatchError(
                f"state length {self.states.shape[1]} does not match "
                f"mesh node count {self.mesh.num_nodes}"
            )

    @property
    def num_instants(self) -> int:
        return self.states.shape[0]

    @property
    def num_dof(self) -> int:
        return self.states.shape[1]


def _prepare_bc(n, dirichlet, states0, label):
    if dirichlet is None:
        bdofs = np.empty(0, dtype=np.int64)
        bvals = np.empty(0)
    else:
        bdofs = np.asarray(dirichlet[0], dtype=np.int64).ravel()
        bvals = np.broadcast_to(
            np.asarray(dirichlet[1], dtype=np.float64), bdofs.shape
        ).astype(np.float64)
    for name, u in states0.items():
        if u.shape != (n,):
            raise DimensionMismatchError(f"{name} has length {u.shape}, expected {n}")
        if bdofs.size:
            mismatch = np.abs(u[bdofs] - bvals).max()
            scale = max(1.0, np.abs(bvals).max())
            if mismatch > 1e-9 * scale:
                raise ConfigError(
                    f"{name} disagrees with the Dirichlet data in {label} "
                    f"by {mismatch:.3e}"
                )
    return bdofs, bvals


def _factor(K_ii, label):
    try:
        return splu(K_ii.tocsc())
    except RuntimeError as exc:
        raise SolverError(f"factorization failed in {label}: {exc}") from exc


def _step_solve(lu, K_ii, rhs, rel_tol, step, label):
    u = lu.solve(rhs)
    if not np.isfinite(u).all():
        raise SolverError(f"non-finite solution at step {step} in {label}")
    resid = np.linalg.norm(K_ii @ u - rhs)
    scale = max(np.linalg.norm(rhs), 1e-300)
    if resid > rel_tol * scale:
        raise SolverError(
            f"step {step} in {label}: residual {resid:.3e} exceeds "
            f"{rel_tol:.1e} * {scale:.3e}"
        )
    return u


def implicit_euler_run(M, A, load, dirichlet, u0, grid: TimeGrid,
                       mesh=None, rel_tol=1e-8) -> Trajectory:
    """Integrate M du/dt + A u = b(t) by implicit Euler.

    Each step solves (dt*A + M) u_new = dt*b(t_new) + M u_old on the
    interior DOF, with constant Dirichlet data handled by lifting.
    ``load`` maps a time to a full-length vector (or is None for b = 0);
    ``dirichlet`` is (dof indices, values) or None.
    """
    u0 = np.asarray(u0, dtype=np.float64)
    n = u0.shape[0]
    dt = grid.dt
    bdofs, bvals = _prepare_bc(n, dirichlet, {"u0": u0}, "implicit_euler_run")
    K = (dt * A + M).tocsr()
    mask = np.ones(n, dtype=bool)
    mask[bdofs] = False
    interior = np.nonzero(mask)[0]
    K_ii = K[interior][:, interior].tocsr()
    K_ib = K[interior][:, bdofs] if bdofs.size else None
    lift = K_ib @ bvals if K_ib is not None else 0.0
    lu = _factor(K_ii, "implicit_euler_run") if interior.size else None

    states = np.empty((grid.num_steps + 1, n))
    states[0] = u0
    M = M.tocsr()
    for k in range(grid.num_steps):
        rhs_full = M @ states[k]
        if load is not None:
            rhs_full = rhs_full + dt * np.asarray(load(grid.time_at(k + 1)))
        rhs = rhs_full[interior] - lift
        if interior.size:
            u_int = _step_solve(lu, K_ii, rhs, rel_tol, k + 1, "implicit_euler_run")
        else:
            u_int = np.empty(0)
        states[k + 1] = expand_solution(n, interior, u_int, bdofs, bvals)
    return Trajectory(grid, states, mesh)


def central_difference_run(M, A, v, load, u0, u1, grid: TimeGrid,
                           dirichlet=None, mesh=None, rel_tol=1e-8) -> Trajectory:
    """Integrate d2u/dt2 + v^2 A u = b(t) (mass-weighted) by central
    differences with the stiffness term held implicitly.

    Each step solves (M + v^2 dt^2 A) u_new = dt^2 b(t_new) + 2 M u_k - M u_km1.
    ``u1`` may be None to start from rest (u1 = u0). The load is evaluated
    at the new time level, matching the implicit stiffness placement.
    """
    u0 = np.asarray(u0, dtype=np.float64)
    u1 = u0.copy() if u1 is None else np.asarray(u1, dtype=np.float64)
    n = u0.shape[0]
    dt = grid.dt
    bdofs, bvals = _prepare_bc(
        n, dirichlet, {"u0": u0, "u1": u1}, "central_difference_run"
    )
    K = (M + (v * v * dt * dt) * A).tocsr()
    mask = np.ones(n, dtype=bool)
    mask[bdofs] = False
    interior = np.nonzero(mask)[0]
    K_ii = K[interior][:, interior].tocsr()
    K_ib = K[interior][:, bdofs] if bdofs.size else None
    lift = K_ib @ bvals if K_ib is not None else 0.0
    lu = _factor(K_ii, "central_difference_run") if interior.size else None

    states = np.empty((grid.num_steps + 1, n))
    states[0] = u0
    if grid.num_steps >= 1:
        states[1] = u1
    M = M.tocsr()
    for k in range(1, grid.num_steps):
        rhs_full = 2.0 * (M @ states[k]) - M @ states[k - 1]
        if load is not None:
            rhs_full = rhs_full + dt * dt * np.asarray(load(grid.time_at(k + 1)))
        rhs = rhs_full[interior] - lift
        if interior.size:
            u_int = _step_solve(lu, K_ii, rhs, rel_tol, k + 1, "central_difference_run")
        else:
            u_int = np.empty(0)
        states[k + 1] = expand_solution(n, interior, u_int, bdofs, bvals)
    return Trajectory(grid, states, mesh)


def save_trajectory_csv(traj: Trajectory, path):
    """Write ``t,dof_0,...,dof_{n-1}`` rows at 17 significant digits."""
    n = traj.num_dof
    header = "t," + ",".join(f"dof_{i}" for i in range(n))
    times = traj.grid.instants
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(header + "\n")
        for k in range(traj.num_instants):
            row = ",".join(f"{x:.17g}" for x in traj.states[k])
            fh.write(f"{times[k]:.17g},{row}\n")


def load_trajectory_csv(path, mesh=None) -> Trajectory:
    """Read a trajectory CSV written by ``save_trajectory_csv``."""
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().strip()
        cols = header.split(",")
        if not cols or cols[0] != "t" or any(
            c != f"dof_{i}" for i, c in enumerate(cols[1:])
        ):
            raise ConfigError(f"unexpected trajectory header in {path}")
        rows = [line.split(",") for line in fh.read().split("\n") if line]
    data = np.array(rows, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != len(cols):
        raise ConfigError(f"ragged trajectory rows in {path}")
    times = data[:, 0]
    states = data[:, 1:]
    if times.size < 2:
        raise ConfigError(f"trajectory in {path} needs at least 2 instants")
    dt = (times[-1] - times[0]) / (times.size - 1)
    drift = np.abs(times - (times[0] + dt * np.arange(times.size))).max()
    if drift > 1e-9 * max(1.0, abs(times[-1])):
        raise ConfigError(f"nonuniform time column in {path} (drift {drift:.3e})")
    grid = TimeGrid(float(times[0]), float(dt), times.size - 1)
    return Trajectory(grid, states, mesh)
