"""Full-order solves: steady Newton, backward Euler in time, supremizers.

All solves work on background-length coefficient vectors: the unknowns are
the homogenized velocity (full velocity minus the lifting) and the pressure,
both zero on inactive and strongly constrained dofs.  The linear systems are
factorized sparsely; problem sizes at the paper resolution stay around 1e4
to 1e5 dofs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .assembly import SystemAssembler
from .background_mesh import build_background_mesh, classify_elements
from .errors import NewtonDiverged
from .fe_spaces import (
    BcSpec,
    apply_strong_bcs,
    build_dof_maps,
    extend_to_background,
    lifting_field,
    restrict_to_active,
)
from .geometry import orient_fluid_sign


@dataclass(frozen=True)
class SolverOptions:
    newton_tol: float = 1e-8
    newton_max_iter: int = 25
    linear_solver: str = "direct"
    continuation: bool = False        # optional viscosity ramp 4mu, 2mu, mu
    divergence_patience: int = 3

    def __post_init__(self):
        if not (0.0 < self.newton_tol <= 1e-2):
            raise ValueError("newton_tol must lie in (0, 1e-2]")
        if self.newton_max_iter < 1:
            raise ValueError("newton_max_iter must be >= 1")

    @classmethod
    def from_config(cls, cfg):
        s = cfg.solver
        return cls(newton_tol=s.newton_tol, newton_max_iter=s.newton_max_iter,
                   linear_solver=s.linear_solver, continuation=s.continuation,
                   divergence_patience=s.divergence_patience)


@dataclass
class Trajectory:
    """Backward Euler states on a clipped time grid; all vectors extended."""

    times: list = field(default_factory=list)
    u0: list = field(default_factory=list)
    p: list = field(default_factory=list)
    failed_at: int = None
    newton_iterations: list = field(default_factory=list)

    @property
    def failed(self):
        return self.failed_at is not None

    def __len__(self):
        return len(self.times)


def time_grid(tau, t_final):
    """0 = t0 < ... < T with uniform steps; the last step clips to land on T."""
    if tau <= 0.0 or t_final <= 0.0:
        raise ValueError("tau and t_final must be positive")
    times = [0.0]
    t = 0.0
    while t < t_final - 1e-12 * t_final:
        t = min(t + tau, t_final)
        times.append(t)
    times[-1] = t_final
    return times


@dataclass
class FlowProblem:
    """Everything one parameter's solves need, sharing the background data."""

    dofsys: object
    classification: object
    constants: object
    options: object            # AssemblyOptions
    bcspec: BcSpec
    lifting: np.ndarray
    u_in: tuple = (1.0, 0.0)
    f: object = None
    theta: float = 0.0
    _assembler: object = None

    @property
    def assembler(self):
        if self._assembler is None:
            self._assembler = SystemAssembler(
                self.dofsys, self.classification, self.constants,
                self.options, u_in=self.u_in)
        return self._assembler

    @property
    def active(self):
        return self.assembler.active

    def free_mask(self):
        """System dofs that are active and not strongly constrained."""
        mask = self.active.system_mask()
        mask[self.bcspec.system_dofs()] = False
        return mask


def setup_problem(config, theta, shared=None):
    """Build the per-parameter problem from a run configuration.

    shared = (mesh, dofsys) reuses the parameter-independent background data.
    """
    if shared is None:
        mesh = build_background_mesh(config.rect, config.mesh.h)
        dofsys = build_dof_maps(mesh)
    else:
        mesh, dofsys = shared
    oriented = orient_fluid_sign(config.family(), theta, anchor=config.anchor)
    cls = classify_elements(mesh, oriented,
                            ghost_mode=config.stabilization.ghost_facet_mode)
    bcspec = BcSpec.channel(dofsys, config.u_in)
    lift = lifting_field(dofsys, config.u_in).coefficients
    return FlowProblem(
        dofsys=dofsys, classification=cls,
        constants=config.stabilization_constants(),
        options=config.assembly_options(), bcspec=bcspec, lifting=lift,
        u_in=config.u_in, f=config.body_force, theta=theta)


def _newton(problem, opts, u0, p, mass=None, tau=1.0, u0_prev=None):
    """Newton iteration on the (possibly time-stepped) nonlinear residual.

    Face scalings are recomputed from each iterate, then frozen inside the
    step, so the Jacobian is exact for the frozen-coefficient residual.
    """
    asm = problem.assembler
    n_u = problem.dofsys.n_u
    free = problem.free_mask()
    fixed = np.where(~free)[0]
    lift = problem.lifting

    scal0 = asm.face_scalings(u0 + lift)
    f1, _ = asm.rhs(problem.f, lift, scal0)
    ref = np.linalg.norm(f1[free[:n_u]])
    if mass is not None:
        ref = tau * ref + np.linalg.norm((mass @ u0_prev)[free[:n_u]])
    if ref < 1e-300:
        ref = 1.0

    history = []
    for it in range(opts.newton_max_iter + 1):
        w = u0 + lift
        scal = asm.face_scalings(w)
        r, jac = asm.residual_and_jacobian(u0, p, lift, f=problem.f,
                                           scalings=scal)
        if mass is not None:
            r[:n_u] = mass @ (u0 - u0_prev) + tau * r[:n_u]
            r[n_u:] *= tau
        r[fixed] = 0.0
        rnorm = float(np.linalg.norm(r))
        history.append(rnorm)
        if rnorm <= opts.newton_tol * ref or rnorm <= 1e-14:
            return u0, p, {"iterations": it, "history": history,
                           "converged": True}
        if len(history) > opts.divergence_patience and all(
                history[-k - 1] > history[-k - 2]
                for k in range(opts.divergence_patience)):
            raise NewtonDiverged(
                f"residual grew {opts.divergence_patience} times in a row",
                iterate=(u0, p), history=history)
        if it == opts.newton_max_iter:
            raise NewtonDiverged(
                f"no convergence in {opts.newton_max_iter} iterations "
                f"(|R|={rnorm:.3e}, ref={ref:.3e})",
                iterate=(u0, p), history=history)
        if mass is not None:
            jac = tau * jac + sparse.bmat(
                [[mass, None],
                 [None, sparse.csr_matrix((problem.dofsys.n_p,
                                           problem.dofsys.n_p))]],
                format="csr")
        jac_bc, rhs_bc = apply_strong_bcs(jac, -r, problem.bcspec,
                                          mode="test", extra_fixed=fixed)
        delta = splu(jac_bc.tocsc()).solve(rhs_bc)
        u0 = u0 + delta[:n_u]
        p = p + delta[n_u:]
    raise AssertionError("unreachable")


def solve_steady_problem(problem, opts=None):
    """Newton from the plug-flow initial guess; returns extended fields."""
    opts = opts or SolverOptions()
    n_u = problem.dofsys.n_u
    n_p = problem.dofsys.n_p
    u0 = np.zeros(n_u)
    p = np.zeros(n_p)
    if opts.continuation:
        base = problem.constants
        infos = []
        for factor in (4.0, 2.0, 1.0):
            from dataclasses import replace as _replace

            stage = FlowProblem(
                dofsys=problem.dofsys, classification=problem.classification,
                constants=_replace(base, mu=base.mu * factor),
                options=problem.options, bcspec=problem.bcspec,
                lifting=problem.lifting, u_in=problem.u_in, f=problem.f,
                theta=problem.theta)
            u0, p, info = _newton(stage, opts, u0, p)
            infos.append(info)
        info = infos[-1]
        info["continuation_stages"] = len(infos)
        return u0, p, info
    u0, p, info = _newton(problem, opts, u0, p)
    return u0, p, info


def solve_steady(theta, config, shared=None):
    """Steady solve at one parameter from a run configuration."""
    problem = setup_problem(config, theta, shared=shared)
    opts = SolverOptions.from_config(config)
    u0, p, info = solve_steady_problem(problem, opts)
    return u0, p, problem, info


def solve_unsteady_problem(problem, tau, t_final, opts=None, u0_init=None,
                           p_init=None):
    """Backward Euler with per-step Newton; stores every extended state.

    A Newton failure at step n returns the partial trajectory with the
    failure marker set instead of raising.
    """
    opts = opts or SolverOptions()
    n_u = problem.dofsys.n_u
    n_p = problem.dofsys.n_p
    times = time_grid(tau, t_final)
    mass = problem.assembler.mass("physical")

    u0 = np.zeros(n_u) if u0_init is None else np.array(u0_init, dtype=float)
    p = np.zeros(n_p) if p_init is None else np.array(p_init, dtype=float)
    traj = Trajectory()
    traj.times.append(times[0])
    traj.u0.append(u0.copy())
    traj.p.append(p.copy())

    for n in range(1, len(times)):
        tau_n = times[n] - times[n - 1]
        try:
            u0, p, info = _newton(problem, opts, u0.copy(), p.copy(),
                                  mass=mass, tau=tau_n, u0_prev=traj.u0[-1])
        except NewtonDiverged:
            traj.failed_at = n
            return traj
        traj.times.append(times[n])
        traj.u0.append(u0.copy())
        traj.p.append(p.copy())
        traj.newton_iterations.append(info["iterations"])
    return traj


def solve_unsteady(theta, config, shared=None, u0_init=None):
    problem = setup_problem(config, theta, shared=shared)
    opts = SolverOptions.from_config(config)
    traj = solve_unsteady_problem(problem, config.time.tau,
                                  config.time.t_final, opts, u0_init=u0_init)
    return traj, problem


class SupremizerSolver:
    """Factorizes the supremizer operator once per parameter."""

    def __init__(self, problem):
        self.problem = problem
        asm = problem.assembler
        self.bc = BcSpec.all_boundary(problem.dofsys)
        k = asm.supremizer_matrix()
        inactive = np.where(~asm.active.u_mask)[0]
        k_bc, _ = apply_strong_bcs(k, np.zeros(problem.dofsys.n_u), self.bc,
                                   extra_fixed=inactive)
        self.fixed = np.concatenate([self.bc.vel_dofs, inactive])
        self.lu = splu(k_bc.tocsc())

    def solve(self, p_hat):
        rhs = self.problem.assembler.supremizer_rhs(p_hat)
        rhs[self.fixed] = 0.0
        s = self.lu.solve(rhs)
        return s


def solve_supremizer(theta, p_hat, config, shared=None, problem=None):
    """Poisson supremizer driven by a pressure field at the same parameter."""
    if problem is None:
        problem = setup_problem(config, theta, shared=shared)
    return SupremizerSolver(problem).solve(p_hat), problem


# zero-extension of active-dof vectors lives with the dof system
__all__ = [
    "FlowProblem", "SolverOptions", "SupremizerSolver", "Trajectory",
    "extend_to_background", "restrict_to_active", "setup_problem",
    "solve_steady", "solve_steady_problem", "solve_supremizer",
    "solve_unsteady", "solve_unsteady_problem", "time_grid",
]
