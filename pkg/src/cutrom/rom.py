"""Offline POD with supremizer enrichment and online Galerkin solves.

Snapshots are background-length coefficient vectors, so one correlation
eigenproblem per field delivers parameter-independent modes.  The online
systems reassemble the state-dependent full-order operators at every Newton
iterate and project them onto the reduced space; there is no hyper-reduction.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import MissingSnapshot, NewtonDiverged, RankDeficient, ShapeMismatch
from .snapshots import FIELD_KINDS, read_container, read_manifest

#: eigenvalues below CLIP_REL * lambda_1 count as zero rank
CLIP_REL = 1e-14

#: reduced coupling blocks with a smaller relative spread trigger the
#: rank-deficiency warning that motivates the supremizer enrichment
RANK_WARN_ABS = 1e-10
RANK_WARN_REL = 1e-6


@dataclass
class SnapshotMatrix:
    """Columns of extended snapshots in manifest order."""

    field_name: str
    data: np.ndarray            # (N, M)
    thetas: np.ndarray
    times: np.ndarray

    @property
    def n_columns(self):
        return self.data.shape[1]


def build_snapshot_matrix(manifest_path, field_name):
    """Stack the manifest's snapshot files of one field, in manifest order."""
    if field_name not in FIELD_KINDS:
        raise ValueError(f"unknown snapshot field {field_name!r}")
    lines, _ = read_manifest(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))
    cols, thetas, times = [], [], []
    expected = None
    for ln in lines:
        parts = ln.split()
        if not parts or parts[0] != "snapshot" or parts[1] != field_name:
            continue
        theta, t, rel = float(parts[3]), float(parts[4]), parts[5]
        entry = read_container(os.path.join(base, rel))
        if entry["kind"] != FIELD_KINDS[field_name]:
            raise ShapeMismatch(f"{rel}: kind tag does not match {field_name}")
        vec = np.atleast_1d(entry["data"])
        if vec.ndim != 1:
            raise ShapeMismatch(f"{rel}: expected a vector payload")
        if expected is None:
            expected = vec.shape[0]
        elif vec.shape[0] != expected:
            raise ShapeMismatch(
                f"{rel}: length {vec.shape[0]} != {expected}")
        cols.append(vec)
        thetas.append(theta)
        times.append(t)
    if not cols:
        raise MissingSnapshot(
            f"manifest {manifest_path} lists no {field_name} snapshots")
    return SnapshotMatrix(field_name=field_name,
                          data=np.column_stack(cols),
                          thetas=np.array(thetas), times=np.array(times))


def pod(snapshots, inner_product, n=None):
    """Correlation-eigenproblem POD in the given mass inner product.

    Returns n modes (re-orthonormalized by modified Gram-Schmidt against
    extension-induced ill-conditioning) and the full clipped spectrum.
    """
    s = snapshots.data if isinstance(snapshots, SnapshotMatrix) else snapshots
    s = np.asarray(s, dtype=float)
    ms = inner_product @ s
    corr = s.T @ ms
    corr = 0.5 * (corr + corr.T)
    lam, q = np.linalg.eigh(corr)
    lam = lam[::-1].copy()
    q = q[:, ::-1]
    if lam[0] <= 0.0:
        raise RankDeficient("snapshot set has no energy")
    lam[lam < CLIP_REL * lam[0]] = 0.0
    usable = int(np.sum(lam > 0.0))
    if n is None:
        n = usable
    if n > usable:
        raise RankDeficient(
            f"requested {n} modes but the spectrum supports {usable}")

    modes = s @ (q[:, :n] / np.sqrt(lam[:n]))
    # two MGS passes in the M-inner product
    for j in range(n):
        v = modes[:, j]
        for _ in range(2):
            if j:
                coef = modes[:, :j].T @ (inner_product @ v)
                v = v - modes[:, :j] @ coef
        v = v / np.sqrt(v @ (inner_product @ v))
        modes[:, j] = v
    return modes, lam


def enrich_with_supremizers(l_u, l_s):
    """Concatenate velocity and supremizer modes; no cross-orthonormalization."""
    l_u = np.asarray(l_u)
    l_s = np.asarray(l_s)
    if l_u.shape != l_s.shape:
        raise ShapeMismatch("velocity and supremizer bases must match in shape")
    if l_s.shape[1] == 0:
        warnings.warn("supremizer basis is empty; pressure may be unstable")
        return l_u.copy()
    return np.hstack([l_u, l_s])


@dataclass
class ReducedBasis:
    """Per-field mode matrices plus the recorded spectra."""

    l_u: np.ndarray
    l_s: np.ndarray
    l_p: np.ndarray
    lambdas: dict
    supremizer: bool = True

    @property
    def n_max(self):
        return min(self.l_u.shape[1], self.l_s.shape[1], self.l_p.shape[1])

    def velocity_basis(self, n, supremizer=None):
        use_s = self.supremizer if supremizer is None else supremizer
        if n > self.n_max:
            raise RankDeficient(f"n={n} exceeds the basis rank {self.n_max}")
        if use_s:
            return enrich_with_supremizers(self.l_u[:, :n], self.l_s[:, :n])
        return self.l_u[:, :n]

    def pressure_basis(self, n):
        if n > self.n_max:
            raise RankDeficient(f"n={n} exceeds the basis rank {self.n_max}")
        return self.l_p[:, :n]


@dataclass
class ReducedState:
    u: np.ndarray      # velocity coefficients (2N with enrichment)
    p: np.ndarray      # pressure coefficients (N)


@dataclass
class ReducedTrajectory:
    times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    failed_at: int = None

    @property
    def failed(self):
        return self.failed_at is not None

    def __len__(self):
        return len(self.times)


def reconstruct(state, l_vel, l_p, lifting):
    """Full-order fields from reduced coefficients; velocity gets the lifting.

    Values outside the active mesh of the evaluation parameter are not
    meaningful and are masked by the caller for reporting.
    """
    vel = l_vel @ state.u + np.asarray(lifting, dtype=float)
    p = l_p @ state.p
    return vel, p


def _reduced_system(problem, l_vel, l_p, state, scalings=None):
    """Project the full residual and Jacobian onto the reduced space."""
    asm = problem.assembler
    n_u = problem.dofsys.n_u
    w_coeff = l_vel @ state.u
    p_full = l_p @ state.p
    r, jac = asm.residual_and_jacobian(w_coeff, p_full, problem.lifting,
                                       f=problem.f, scalings=scalings,
                                       strict_active=False)
    r_n = np.concatenate([l_vel.T @ r[:n_u], l_p.T @ r[n_u:]])
    n2 = l_vel.shape[1]
    basis = np.zeros((jac.shape[0], n2 + l_p.shape[1]))
    basis[:n_u, :n2] = l_vel
    basis[n_u:, n2:] = l_p
    j_n = basis.T @ (jac @ basis)
    return r_n, j_n


def project_operators(problem, l_vel, l_p, state):
    """Reduced blocks of the online algebraic system at the current state."""
    asm = problem.assembler
    w = l_vel @ state.u + problem.lifting
    scal = asm.face_scalings(w)
    a_lin = (asm.constant_velocity_block() + asm.nitsche_normal_penalty(scal)
             + asm.ghost_velocity(scal, w))
    n_op, _ = asm.convection(w)
    b = asm.pressure_coupling()
    g_p = asm.ghost_pressure(scal)
    f1, f2 = asm.rhs(problem.f, problem.lifting, scal)
    blocks = {
        "A": l_vel.T @ ((a_lin + n_op) @ l_vel),
        "BT": l_vel.T @ (b.T @ l_p),
        "B": l_p.T @ (b @ l_vel),
        "C": l_p.T @ (g_p @ l_p),
        "F1": l_vel.T @ f1,
        "F2": l_p.T @ f2,
    }
    return blocks


def coupling_singular_values(problem, basis, n, supremizer=None):
    """Singular values of the reduced pressure-velocity coupling block.

    Emits a rank-deficiency warning when the block is numerically singular,
    which is what happens without the supremizer enrichment.
    """
    l_vel = basis.velocity_basis(n, supremizer=supremizer)
    l_p = basis.pressure_basis(n)
    b = problem.assembler.pressure_coupling()
    block = l_vel.T @ (b.T @ l_p)
    svals = np.linalg.svd(block, compute_uv=False)
    smin, smax = float(svals[-1]), float(svals[0])
    if smin < RANK_WARN_ABS * max(1.0, smax) or smin < RANK_WARN_REL * smax:
        warnings.warn(
            f"reduced coupling block is rank deficient "
            f"(sigma_min={smin:.3e}, sigma_max={smax:.3e}); "
            f"enable the supremizer enrichment", stacklevel=2)
    return svals


def _newton_reduced(problem, l_vel, l_p, opts, state, mass_n=None, tau=1.0,
                    u_prev=None):
    asm = problem.assembler
    scal0 = asm.face_scalings(l_vel @ state.u + problem.lifting)
    f1, _ = asm.rhs(problem.f, problem.lifting, scal0)
    ref = np.linalg.norm(l_vel.T @ f1)
    if mass_n is not None:
        ref = tau * ref + np.linalg.norm(mass_n @ u_prev)
    if ref < 1e-300:
        ref = 1.0

    n2 = l_vel.shape[1]
    history = []
    for it in range(opts.newton_max_iter + 1):
        w = l_vel @ state.u + problem.lifting
        scal = asm.face_scalings(w)
        r_n, j_n = _reduced_system(problem, l_vel, l_p, state, scalings=scal)
        if mass_n is not None:
            r_n[:n2] = mass_n @ (state.u - u_prev) + tau * r_n[:n2]
            r_n[n2:] *= tau
            j_n = tau * j_n
            j_n[:n2, :n2] += mass_n
        rnorm = float(np.linalg.norm(r_n))
        history.append(rnorm)
        if rnorm <= opts.newton_tol * ref or rnorm <= 1e-13:
            return state, {"iterations": it, "history": history,
                           "converged": True}
        if len(history) > opts.divergence_patience and all(
                history[-k - 1] > history[-k - 2]
                for k in range(opts.divergence_patience)):
            raise NewtonDiverged("reduced residual grew repeatedly",
                                 iterate=state, history=history)
        if it == opts.newton_max_iter:
            raise NewtonDiverged(
                f"reduced Newton stalled (|R|={rnorm:.3e}, ref={ref:.3e})",
                iterate=state, history=history)
        try:
            delta = np.linalg.solve(j_n, -r_n)
        except np.linalg.LinAlgError as exc:
            raise NewtonDiverged(f"reduced Jacobian singular: {exc}",
                                 iterate=state, history=history)
        state = ReducedState(u=state.u + delta[:n2], p=state.p + delta[n2:])
    raise AssertionError("unreachable")


def solve_reduced_steady(problem, basis, n, opts, supremizer=None):
    """Galerkin-projected steady Newton with full-order reassembly per step."""
    l_vel = basis.velocity_basis(n, supremizer=supremizer)
    l_p = basis.pressure_basis(n)
    state = ReducedState(u=np.zeros(l_vel.shape[1]), p=np.zeros(n))
    state, info = _newton_reduced(problem, l_vel, l_p, opts, state)
    return state, info


def solve_reduced_unsteady(problem, basis, n, tau, t_final, opts,
                           mass_background, supremizer=None, init=None):
    """Implicit Euler on the reduced system; the mass block is the projected
    background mass, matching the parameter-independent reduced spaces."""
    from .fom_solvers import time_grid

    l_vel = basis.velocity_basis(n, supremizer=supremizer)
    l_p = basis.pressure_basis(n)
    mass_n = l_vel.T @ (mass_background @ l_vel)
    times = time_grid(tau, t_final)

    state = init or ReducedState(u=np.zeros(l_vel.shape[1]), p=np.zeros(n))
    traj = ReducedTrajectory()
    traj.times.append(times[0])
    traj.states.append(state)
    for k in range(1, len(times)):
        tau_k = times[k] - times[k - 1]
        try:
            state, _ = _newton_reduced(
                problem, l_vel, l_p, opts,
                ReducedState(u=state.u.copy(), p=state.p.copy()),
                mass_n=mass_n, tau=tau_k, u_prev=traj.states[-1].u)
        except NewtonDiverged:
            traj.failed_at = k
            return traj
        traj.times.append(times[k])
        traj.states.append(state)
    return traj
