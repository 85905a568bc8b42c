import numpy as np
import pytest
from scipy import sparse

from cutrom.assembly import (
    AssemblyOptions,
    StabilizationConstants,
    SystemAssembler,
    assemble_convection,
    assemble_ghost_pressure,
    assemble_ghost_velocity,
    assemble_mass,
    assemble_pressure_coupling,
    assemble_rhs,
    assemble_supremizer_system,
    assemble_viscous_nitsche,
    compute_face_scalings,
    residual_and_jacobian,
    write_coo,
)
from cutrom.background_mesh import build_background_mesh, classify_elements
from cutrom.errors import InactiveState
from cutrom.fe_spaces import build_dof_maps, interpolate_velocity, lifting_field
from cutrom.geometry import LevelsetFamily, orient_fluid_sign

PAPER_RECT = (-2.0, -1.0, 2.0, 1.0)


class UniformLevelset:
    def __init__(self, value=-1.0):
        self.value = value

    def values(self, x, y):
        return np.full_like(np.asarray(x, dtype=float), self.value)


def uncut_setup(h=0.25, rect=PAPER_RECT):
    mesh = build_background_mesh(rect, h)
    dofsys = build_dof_maps(mesh)
    cls = classify_elements(mesh, UniformLevelset())
    return mesh, dofsys, cls


def cylinder_setup(h=0.14, theta=0.0):
    mesh = build_background_mesh(PAPER_RECT, h)
    dofsys = build_dof_maps(mesh)
    ofl = orient_fluid_sign(LevelsetFamily.cylinder(), theta, anchor=(0.0, 0.0))
    cls = classify_elements(mesh, ofl)
    return mesh, dofsys, cls


# ----- mass ------------------------------------------------------------------

def test_background_mass_total():
    mesh, dofsys, cls = uncut_setup(h=0.25)
    m = assemble_mass(dofsys, cls, domain="background")
    assert float(m.sum()) == pytest.approx(16.0, rel=1e-12)
    # row sums are the integrals of the basis functions
    ones = np.ones(dofsys.n_u)
    row_sums = m @ ones
    assert float(np.sum(row_sums[0::2])) == pytest.approx(8.0, rel=1e-12)


def test_physical_mass_equals_background_when_uncut():
    mesh, dofsys, cls = uncut_setup(h=0.5)
    m_phys = assemble_mass(dofsys, cls, domain="physical")
    m_bg = assemble_mass(dofsys, cls, domain="background")
    assert abs(m_phys - m_bg).max() < 1e-14


def test_background_mass_spd_probes():
    mesh, dofsys, cls = cylinder_setup(h=0.25)
    m = assemble_mass(dofsys, cls, domain="background")
    rng = np.random.default_rng(17)
    for _ in range(20):
        x = rng.standard_normal(dofsys.n_u)
        assert x @ (m @ x) > 0.0


# ----- viscous + Nitsche -----------------------------------------------------

def test_viscous_constant_field_interior_rows():
    mesh, dofsys, cls = uncut_setup(h=0.5)
    w = np.zeros(dofsys.n_u)
    s = compute_face_scalings(dofsys, cls, w)
    a = assemble_viscous_nitsche(dofsys, cls, StabilizationConstants(), s)
    const = interpolate_velocity(dofsys, lambda x, y: (1.0, 0.0))
    assert np.linalg.norm(a @ const, np.inf) < 1e-12


def test_viscous_nitsche_symmetry():
    mesh, dofsys, cls = cylinder_setup(h=0.2)
    w = lifting_field(dofsys, (1.0, 0.0)).coefficients
    s = compute_face_scalings(dofsys, cls, w)
    a = assemble_viscous_nitsche(dofsys, cls, StabilizationConstants(), s)
    diff = abs(a - a.T).max()
    assert diff <= 1e-12 * abs(a).max()


def test_stabilized_viscous_block_coercive_on_cut_mesh():
    # the symmetric Nitsche choice loses some coercivity on bad cuts; the
    # ghost penalty restores it, so the stabilized block stays positive
    mesh, dofsys, cls = cylinder_setup(h=0.14)
    dofs = build_dof_maps(mesh)
    const = StabilizationConstants()
    w = lifting_field(dofsys, (1.0, 0.0)).coefficients
    s = compute_face_scalings(dofsys, cls, w, const)
    a = assemble_viscous_nitsche(dofsys, cls, const, s)
    g = assemble_ghost_velocity(dofsys, cls, const, s, w)
    op = a + g
    from cutrom.fe_spaces import BcSpec, active_dofs
    bc = BcSpec.channel(dofsys, (1.0, 0.0))
    act = active_dofs(dofsys, cls)
    free = act.u_mask.copy()
    free[bc.vel_dofs] = False
    idx = np.where(free)[0]
    rng = np.random.default_rng(23)
    for _ in range(20):
        x = np.zeros(dofsys.n_u)
        x[idx] = rng.standard_normal(len(idx))
        assert x @ (op @ x) > 0.0


# ----- pressure coupling -----------------------------------------------------

def test_coupling_divergence_theorem_constant_pressure():
    # v = curl of a bubble vanishes on the boundary and is divergence free,
    # so b_h(1, v) = 0
    mesh, dofsys, cls = uncut_setup(h=0.25, rect=(0.0, 0.0, 1.0, 1.0))
    b = assemble_pressure_coupling(dofsys, cls)

    def stream_vel(x, y):
        # curl of psi = (x(1-x)y(1-y))^2
        g = (x * (1 - x) * y * (1 - y))
        dgdx = (1 - 2 * x) * y * (1 - y)
        dgdy = x * (1 - x) * (1 - 2 * y)
        return (2 * g * dgdy, -2 * g * dgdx)

    v = interpolate_velocity(dofsys, stream_vel)
    pconst = np.ones(dofsys.n_p)
    # the interpolant is not exactly divergence free; O(h^2) tolerance
    assert abs(pconst @ (b @ v)) < 5e-4


def test_coupling_exact_divergence_free_field():
    mesh, dofsys, cls = uncut_setup(h=0.5)
    b = assemble_pressure_coupling(dofsys, cls)
    v = interpolate_velocity(dofsys, lambda x, y: (x, -y))
    # (x, -y) is linear, hence exactly represented, and divergence free:
    # the volume part of every continuity row vanishes
    assert np.linalg.norm(b @ v, np.inf) < 1e-12


def test_coupling_adjoint_identity_uncut():
    # -(q, div v) == (grad q, v) - boundary flux, checked per basis pair
    mesh, dofsys, cls = uncut_setup(h=0.5, rect=(0.0, 0.0, 1.0, 1.0))
    b = assemble_pressure_coupling(dofsys, cls)

    asm = SystemAssembler(dofsys, cls)
    n_p, n_u = dofsys.n_p, dofsys.n_u
    # volume term (grad q, v)
    ids = cls.fluid_ids
    gradq = np.einsum("q,enc,qj,e->enjc", asm.vol_qw,
                      asm.g1_phys[ids], asm.n2, asm.detj[ids])
    vol = sparse.coo_matrix((n_p, n_u))
    rows = np.repeat(mesh.triangles[ids][:, :, None], 12, axis=2)
    cols = np.repeat(dofsys.tri_vel_dofs[ids][:, None, :], 3, axis=1)
    vol = sparse.coo_matrix(
        (gradq.reshape(len(ids), 3, 12).ravel(),
         (rows.ravel(), cols.ravel())), shape=(n_p, n_u)).tocsr()

    # boundary flux over the outer rectangle
    from cutrom.cut_quadrature import reference_segment_rule
    from cutrom.fe_spaces import p1_values, p2_values
    t_ref, w_ref = reference_segment_rule(5)
    flux = sparse.lil_matrix((n_p, n_u))
    for e in np.where(mesh.boundary_tag >= 0)[0]:
        t = mesh.edge_tris[e, 0]
        a_v, b_v = mesh.vertices[mesh.edges[e]]
        tangent = b_v - a_v
        length = np.linalg.norm(tangent)
        normal = np.array([tangent[1], -tangent[0]]) / length
        centroid = mesh.tri_coords(t).mean(axis=0)
        if np.dot(normal, centroid - 0.5 * (a_v + b_v)) > 0:
            normal = -normal
        pts = a_v + np.outer(t_ref, tangent)
        xi = asm._ref_coords(t, pts)
        n1 = p1_values(xi)
        n2 = p2_values(xi)
        loc = np.einsum("q,qi,qj,c->ijc", w_ref * length, n1, n2, normal)
        for li, gi in enumerate(mesh.triangles[t]):
            for lj, gj in enumerate(dofsys.tri_nodes[t]):
                for c in range(2):
                    flux[gi, 2 * gj + c] += loc[li, lj, c]
    identity_gap = abs(b - (vol - flux.tocsr())).max()
    assert identity_gap < 1e-12


# ----- convection -------------------------------------------------------------

def test_convection_zero_state():
    mesh, dofsys, cls = uncut_setup(h=0.5)
    n_op, j_op = assemble_convection(dofsys, cls, np.zeros(dofsys.n_u))
    assert abs(n_op).max() == 0.0
    # J_c(0) = N(0) + K(0) = 0
    assert abs(j_op).max() < 1e-14


def test_convection_shear_field_has_zero_self_advection():
    mesh, dofsys, cls = uncut_setup(h=0.5)
    w = interpolate_velocity(dofsys, lambda x, y: (y, 0.0 * x))
    n_op, _ = assemble_convection(dofsys, cls, w)
    val = w @ (n_op @ w)
    assert abs(val) < 1e-12


def test_convection_directional_derivative():
    mesh, dofsys, cls = cylinder_setup(h=0.25)
    rng = np.random.default_rng(5)
    w = rng.standard_normal(dofsys.n_u) * 0.1
    asm = SystemAssembler(dofsys, cls)
    n_w, k_w = asm.convection(w)
    jac = n_w + k_w

    def value(vec):
        n_v, _ = asm.convection(vec)
        return n_v @ vec

    delta = rng.standard_normal(dofsys.n_u)
    base = value(w)
    errs = []
    for eps in (1e-4, 1e-5, 1e-6):
        fd = (value(w + eps * delta) - base) / eps
        errs.append(np.linalg.norm(fd - jac @ delta))
    # convection is quadratic: FD error decays linearly in eps
    assert errs[0] / errs[1] == pytest.approx(10.0, rel=0.2)
    assert errs[1] / errs[2] == pytest.approx(10.0, rel=0.2)


# ----- ghost penalties ---------------------------------------------------------

def test_ghost_zero_without_cut_elements():
    mesh, dofsys, cls = uncut_setup(h=0.5)
    const = StabilizationConstants()
    w = np.zeros(dofsys.n_u)
    s = compute_face_scalings(dofsys, cls, w, const)
    g = assemble_ghost_velocity(dofsys, cls, const, s, w)
    assert g.nnz == 0 or abs(g).max() == 0.0
    gp = assemble_ghost_pressure(dofsys, cls, const, w)
    assert gp.nnz == 0 or abs(gp).max() == 0.0


def test_ghost_mu_vanishes_on_exact_quadratic():
    # u = (x^2, x y) is represented exactly in P2: all derivative jumps vanish
    mesh, dofsys, cls = cylinder_setup(h=0.2)
    const = StabilizationConstants(gamma_u=0.0)   # isolate g_mu
    w = lifting_field(dofsys, (1.0, 0.0)).coefficients
    s = compute_face_scalings(dofsys, cls, w, const)
    g = assemble_ghost_velocity(dofsys, cls, const, s, w)
    u = interpolate_velocity(dofsys, lambda x, y: (x * x, x * y))
    r = g @ u
    assert np.linalg.norm(r, np.inf) <= 1e-12 * abs(g).max() * np.linalg.norm(u, np.inf)


def test_ghost_u_vanishes_on_exact_quadratic_divfree():
    # divergence jumps of an exactly represented field also vanish
    mesh, dofsys, cls = cylinder_setup(h=0.2)
    const = StabilizationConstants(gamma_mu=0.0)
    w = lifting_field(dofsys, (1.0, 0.0)).coefficients
    s = compute_face_scalings(dofsys, cls, w, const)
    g = assemble_ghost_velocity(dofsys, cls, const, s, w)
    u = interpolate_velocity(dofsys, lambda x, y: (x * x, x * y))
    r = g @ u
    assert np.linalg.norm(r, np.inf) <= 1e-12 * abs(g).max() * np.linalg.norm(u, np.inf)


def test_ghost_operators_psd():
    mesh, dofsys, cls = cylinder_setup(h=0.14)
    const = StabilizationConstants()
    w = lifting_field(dofsys, (1.0, 0.0)).coefficients
    s = compute_face_scalings(dofsys, cls, w, const)
    g = assemble_ghost_velocity(dofsys, cls, const, s, w)
    gp = assemble_ghost_pressure(dofsys, cls, const, w)
    rng = np.random.default_rng(9)
    gnorm = abs(g).max()
    gpnorm = abs(gp).max()
    for _ in range(50):
        x = rng.standard_normal(dofsys.n_u)
        assert x @ (g @ x) >= -1e-12 * gnorm * (x @ x)
        q = rng.standard_normal(dofsys.n_p)
        assert q @ (gp @ q) >= -1e-12 * gpnorm * (q @ q)


def test_ghost_pressure_linear_pressure_in_kernel():
    mesh, dofsys, cls = cylinder_setup(h=0.2)
    gp = assemble_ghost_pressure(dofsys, cls, StabilizationConstants(),
                                 np.zeros(dofsys.n_u))
    p = mesh.vertices[:, 0].copy()
    assert np.linalg.norm(gp @ p, np.inf) <= 1e-12 * abs(gp).max() * np.linalg.norm(p, np.inf)


def test_ghost_pressure_clamp_and_scaling():
    mesh, dofsys, cls = cylinder_setup(h=0.2)
    base = StabilizationConstants()
    w0 = np.zeros(dofsys.n_u)
    gp0 = assemble_ghost_pressure(dofsys, cls, base, w0)
    # w = 0 clamps the convective weight to one: weight = gamma_p h^3 / mu
    asm = SystemAssembler(dofsys, cls, base)
    s0 = asm.face_scalings(w0)
    assert np.all(np.maximum(mesh.h_char * s0.u_inf_F / base.mu, 1.0) == 1.0)
    doubled = StabilizationConstants(gamma_p=2 * base.gamma_p)
    gp2 = assemble_ghost_pressure(dofsys, cls, doubled, w0)
    assert abs(gp2 - 2.0 * gp0).max() < 1e-14


# ----- face scalings ------------------------------------------------------------

def test_face_scalings_formulas():
    mesh, dofsys, cls = cylinder_setup(h=0.2)
    const = StabilizationConstants()
    w = lifting_field(dofsys, (1.0, 0.0)).coefficients
    s = compute_face_scalings(dofsys, cls, w, const)
    assert np.all(s.phi_T > 0.0)
    asm = SystemAssembler(dofsys, cls, const)
    expected = const.mu + const.c_u * s.u_inf_T * asm.h_T
    assert np.allclose(s.phi_T, expected, rtol=1e-14)
    assert np.allclose(s.u_inf_T, 1.0)  # plug flow
    assert np.allclose(s.phi_p_F, 0.5 * (asm.h_T[asm.gf_tris[:, 0]]**2
                                         / s.phi_T[asm.gf_tris[:, 0]]
                                         + asm.h_T[asm.gf_tris[:, 1]]**2
                                         / s.phi_T[asm.gf_tris[:, 1]]))


# ----- right-hand side -----------------------------------------------------------

def test_rhs_zero_data():
    mesh, dofsys, cls = uncut_setup(h=0.5)
    const = StabilizationConstants()
    zero_l = np.zeros(dofsys.n_u)
    f1, f2 = assemble_rhs(dofsys, cls, const, None, zero_l, zero_l)
    assert np.linalg.norm(f1) == 0.0
    assert np.linalg.norm(f2) == 0.0


def test_rhs_constant_lifting_rows():
    # uncut: constant lifting has zero gradient, so only inlet-convection
    # rows survive; with a cut, Nitsche rows appear on cut elements
    mesh, dofsys, cls = uncut_setup(h=0.5)
    const = StabilizationConstants()
    lift = lifting_field(dofsys, (1.0, 0.0)).coefficients
    f1, _ = assemble_rhs(dofsys, cls, const, None, lift, lift)
    inlet_dofs = set()
    for e in np.where(mesh.boundary_tag == 0)[0]:
        for n in mesh.edges[e]:
            inlet_dofs.update((2 * n, 2 * n + 1))
        nid = mesh.n_vertices + e
        inlet_dofs.update((2 * nid, 2 * nid + 1))
    nonzero = set(np.where(np.abs(f1) > 1e-12)[0].tolist())
    assert nonzero <= inlet_dofs

    mesh2, dofsys2, cls2 = cylinder_setup(h=0.2)
    lift2 = lifting_field(dofsys2, (1.0, 0.0)).coefficients
    f1c, f2c = assemble_rhs(dofsys2, cls2, const, None, lift2, lift2)
    cut_dofs = set(dofsys2.tri_vel_dofs[cls2.cut_ids].ravel().tolist())
    assert np.linalg.norm(f1c[sorted(cut_dofs)], np.inf) > 0.0
    assert np.all(f2c == 0.0)


# ----- supremizer -----------------------------------------------------------------

def test_supremizer_constant_pressure_zero_rhs():
    mesh, dofsys, cls = cylinder_setup(h=0.2)
    const = StabilizationConstants()
    k, rhs = assemble_supremizer_system(dofsys, cls, const,
                                        np.ones(dofsys.n_p))
    assert np.linalg.norm(rhs, np.inf) < 1e-12
    assert abs(k - k.T).max() <= 1e-12 * abs(k).max()


def test_supremizer_rhs_linear_in_pressure():
    mesh, dofsys, cls = cylinder_setup(h=0.2)
    const = StabilizationConstants()
    rng = np.random.default_rng(2)
    p = rng.standard_normal(dofsys.n_p)
    _, r1 = assemble_supremizer_system(dofsys, cls, const, p)
    _, r2 = assemble_supremizer_system(dofsys, cls, const, 2.5 * p)
    assert np.allclose(r2, 2.5 * r1, atol=1e-13)


# ----- residual and Jacobian -------------------------------------------------------

def fd_jacobian_check(dofsys, cls, seed=0):
    const = StabilizationConstants()
    lift = lifting_field(dofsys, (1.0, 0.0)).coefficients
    asm = SystemAssembler(dofsys, cls, const, u_in=(1.0, 0.0))
    act = asm.active
    rng = np.random.default_rng(seed)
    u0 = np.where(act.u_mask, 0.1 * rng.standard_normal(dofsys.n_u), 0.0)
    p = np.where(act.p_mask, rng.standard_normal(dofsys.n_p), 0.0)
    scal = asm.face_scalings(u0 + lift)

    r0, jac = asm.residual_and_jacobian(u0, p, lift, scalings=scal)
    ok = True
    for k in range(5):
        du = np.where(act.u_mask, rng.standard_normal(dofsys.n_u), 0.0)
        dp = np.where(act.p_mask, rng.standard_normal(dofsys.n_p), 0.0)
        d = np.concatenate([du, dp])
        jd = jac @ d
        errs = []
        for eps in (1e-4, 1e-5, 1e-6):
            r_eps, _ = asm.residual_and_jacobian(
                u0 + eps * du, p + eps * dp, lift, scalings=scal)
            errs.append(np.linalg.norm((r_eps - r0) / eps - jd))
        scale = np.linalg.norm(jd)
        for i in range(2):
            # first-order decay, allowing roundoff floor at tiny errors
            ok = ok and (errs[i + 1] <= 0.2 * errs[i] + 1e-9 * scale)
    return ok


def test_residual_jacobian_fd_uncut():
    mesh, dofsys, cls = uncut_setup(h=0.4)
    assert fd_jacobian_check(dofsys, cls, seed=1)


def test_residual_jacobian_fd_cut():
    mesh, dofsys, cls = cylinder_setup(h=0.25)
    assert fd_jacobian_check(dofsys, cls, seed=2)


def test_residual_rejects_inactive_state():
    mesh, dofsys, cls = cylinder_setup(h=0.1)
    const = StabilizationConstants()
    lift = lifting_field(dofsys, (1.0, 0.0)).coefficients
    asm = SystemAssembler(dofsys, cls, const)
    assert asm.active.n_active_u < dofsys.n_u
    bad = np.ones(dofsys.n_u)
    with pytest.raises(InactiveState):
        asm.residual_and_jacobian(bad, np.zeros(dofsys.n_p), lift,
                                  strict_active=True)


def test_residual_ignores_inactive_input_entries():
    mesh, dofsys, cls = cylinder_setup(h=0.1)
    const = StabilizationConstants()
    lift = lifting_field(dofsys, (1.0, 0.0)).coefficients
    asm = SystemAssembler(dofsys, cls, const)
    act = asm.active
    rng = np.random.default_rng(3)
    u0 = np.where(act.u_mask, 0.1 * rng.standard_normal(dofsys.n_u), 0.0)
    p = np.where(act.p_mask, rng.standard_normal(dofsys.n_p), 0.0)
    w = u0 + lift
    scal = asm.face_scalings(w)
    r_ref, _ = asm.residual_and_jacobian(u0, p, lift, scalings=scal,
                                         strict_active=False)
    u0_noise = u0 + np.where(act.u_mask, 0.0, rng.standard_normal(dofsys.n_u))
    p_noise = p + np.where(act.p_mask, 0.0, rng.standard_normal(dofsys.n_p))
    r_mod, _ = asm.residual_and_jacobian(u0_noise, p_noise, lift,
                                         scalings=scal, strict_active=False)
    sys_mask = np.concatenate([act.u_mask, act.p_mask])
    assert np.array_equal(r_ref[sys_mask], r_mod[sys_mask])


def test_operators_have_zero_inactive_rows_and_cols():
    mesh, dofsys, cls = cylinder_setup(h=0.2)
    const = StabilizationConstants()
    asm = SystemAssembler(dofsys, cls, const)
    act = asm.active
    w = lifting_field(dofsys, (1.0, 0.0)).coefficients
    s = asm.face_scalings(w)
    ops_u = [asm.viscous_nitsche(s), asm.ghost_mu(),
             asm.ghost_velocity(s, w), asm.convection(w)[0],
             asm.mass("physical")]
    inactive_u = np.where(~act.u_mask)[0]
    for op in ops_u:
        csr = op.tocsr()
        assert csr[inactive_u].nnz == 0
        assert csr.T.tocsr()[inactive_u].nnz == 0
    b = asm.pressure_coupling()
    assert b.tocsr()[np.where(~act.p_mask)[0]].nnz == 0
    assert b.T.tocsr()[inactive_u].nnz == 0


def test_inlet_convection_flag_is_inert_after_constraints():
    # rows of the inlet term sit on strongly constrained test dofs only
    mesh, dofsys, cls = uncut_setup(h=0.4)
    on = SystemAssembler(dofsys, cls, u_in=(1.0, 0.0),
                         options=AssemblyOptions(include_inlet_convection=True))
    off = SystemAssembler(dofsys, cls, u_in=(1.0, 0.0),
                          options=AssemblyOptions(include_inlet_convection=False))
    w = lifting_field(dofsys, (1.0, 0.0)).coefficients
    n_on, _ = on.convection(w)
    n_off, _ = off.convection(w)
    diff = (n_on - n_off).tocoo()
    from cutrom.fe_spaces import BcSpec
    bc = BcSpec.channel(dofsys, (1.0, 0.0))
    constrained = set(bc.vel_dofs.tolist())
    assert diff.nnz > 0
    assert set(diff.row.tolist()) <= constrained


def test_write_coo_round_trip(tmp_path):
    mesh, dofsys, cls = uncut_setup(h=0.5)
    m = assemble_mass(dofsys, cls, domain="background")
    path = tmp_path / "m.txt"
    write_coo(m, path)
    lines = path.read_text().strip().splitlines()
    header = lines[0].split()
    assert int(header[3]) == m.tocoo().nnz
