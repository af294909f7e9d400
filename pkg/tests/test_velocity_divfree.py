import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gkv.block_mapping import BLOCKS
from gkv.magnetic_geometry import eval_field
from gkv.phase_space import BoltzmannEquilibrium, GridLevel, SpeciesParams, build_phase_grid, gauss_unit
from gkv.velocity_divfree import (ConfigBox, EfieldData, assemble_face_velocities, edge_quantities,
                                  metric_face_velocities, potential_from, velocity_moments)


def zero_potential(grid):
    return potential_from(grid, lambda R, Z: 0.0 * R)


def equilibrium_potential(grid, species=None):
    eq = BoltzmannEquilibrium(grid.geometry, species or SpeciesParams())
    return potential_from(grid, eq.potential)


# --- independent pointwise velocity -------------------------------------------


def _gk_velocity(geo, sp, R, Z, v, mu, gphi):
    """B*_par dX/dt written out: v B* + (rho/Z) b x G with B* = B + (rho m v / Z) curl b."""
    f = eval_field(geo.flux, R, Z)
    G = (sp.Z * gphi[0] + 0.5 * mu * f.grad_B[0], sp.Z * gphi[1] + 0.5 * mu * f.grad_B[1])
    k = sp.rho_L * sp.m * v / sp.Z
    BR = f.B_R + k * f.curl_b[0]
    BZ = f.B_Z + k * f.curl_b[2]
    bphi = f.B_phi / f.B
    return v * BR + sp.rho_L / sp.Z * bphi * G[1], v * BZ - sp.rho_L / sp.Z * bphi * G[0]


def _radial_face_oracle(grid, block, xi1, xi2a, xi2b, va, vb, mu, sp, gphi_fn, q=24):
    """Dense Gauss quadrature of int dv int dxi2 2 pi R u . (dZ/dxi2, -dR/dxi2) over one face."""
    s, w = gauss_unit(q)
    x2 = xi2a + (xi2b - xi2a) * s
    X, _, d2 = grid.mappings[block].jacobian(np.full_like(x2, xi1), x2)
    R, Z = X[:, 0], X[:, 1]
    vs = va + (vb - va) * s
    tot = 0.0
    for v, wv in zip(vs, w):
        uR, uZ = _gk_velocity(grid.geometry, sp, R, Z, v, mu, gphi_fn(R, Z))
        tot += wv * np.sum(w * 2 * np.pi * R * (uR * d2[:, 1] - uZ * d2[:, 0]))
    return tot * (xi2b - xi2a) * (vb - va)


# --- closed-form pieces ---------------------------------------------------


def test_symmetric_v_cell_has_no_streaming_moment():
    eta2, eta3 = velocity_moments([-0.125, 0.125])
    assert eta2[0] == 0.0
    assert eta3[0] == pytest.approx(2 * 0.125**3 / 3, rel=1e-15)


def test_constant_potential_gives_no_exb_terms(grid1, species):
    ef = potential_from(grid1, lambda R, Z: 3.7 + 0 * R)
    eq = edge_quantities(grid1, ConfigBox("MCORE", 2, 6, 10, 14), ef, species)
    assert np.all(eq.a == 0) and np.all(eq.b == 0) and np.all(eq.UE == 0)


def test_streaming_corner_term_against_high_precision(grid1):
    sp = SpeciesParams(rho_L=0.0)
    fv = assemble_face_velocities(grid1, ConfigBox("LCSOL", 1, 3, 2, 4), zero_potential(grid1), sp, k0=14, k1=15,
                                  keep_parts=True)
    E12 = fv.parts["E12"][..., 0, 0]
    vn = grid1.v_bounds[0] + np.array([14, 15]) * grid1.dv
    eta2 = (vn[1] ** 2 - vn[0] ** 2) / 2
    flux = grid1.geometry.flux
    X = grid1.node_positions("LCSOL", np.arange(1, 4)[:, None], np.arange(2, 5)[None, :])
    mp.mp.dps = 40
    for a in range(3):
        for b in range(3):
            R, Z = mp.mpf(X[a, b, 0]), mp.mpf(X[a, b, 1])
            Z0 = mp.mpf(flux.Z0_offset) + flux.L_N * mp.acos(mp.mpf(flux.c3) / flux.c2)
            y = (Z - Z0) / flux.L_N
            psin = mp.cos(flux.c1 * (R - flux.R0) / flux.L_N) + flux.c2 * mp.sin(y) - flux.c3 * y
            ref = -2 * mp.pi * mp.mpf(flux.psi_scale) * (psin - mp.mpf(grid1.geometry.xpt.psi_X)) * mp.mpf(eta2)
            assert E12[a, b] == pytest.approx(float(ref), rel=1e-12, abs=1e-15)
    mp.mp.dps = 15


def test_grad_b_edge_term_is_log_ratio_and_matches_quadrature(grid1):
    sp = SpeciesParams(rho_L=1e-3)
    ef = zero_potential(grid1)
    box = ConfigBox("MCORE", 3, 4, 20, 21)
    mu = np.array([0.0, 0.75])
    fv = assemble_face_velocities(grid1, box, ef, sp, k0=15, k1=16, mu=mu)
    gradb = fv.F1[0, 0, 0, 1] - fv.F1[0, 0, 0, 0]  # the mu-dependent part of the xi1 = 3/8 face
    h1, h2 = grid1.h("MCORE")
    X = grid1.node_positions("MCORE", np.array([3, 3]), np.array([20, 21]))
    B = eval_field(grid1.geometry.flux, X[:, 0], X[:, 1]).B
    va, vb = grid1.v_bounds[0] + np.array([15, 16]) * grid1.dv
    F = grid1.geometry.flux.RB_tor
    closed = 2 * np.pi * sp.rho_L * F * 0.75 / (2 * sp.Z) * np.log(B[1] / B[0]) * (vb - va)
    assert gradb == pytest.approx(closed, rel=1e-13)
    zero_grad = lambda R, Z: (0 * R, 0 * R)
    brute = (_radial_face_oracle(grid1, "MCORE", 3 * h1, 20 * h2, 21 * h2, va, vb, 0.75, sp, zero_grad)
             - _radial_face_oracle(grid1, "MCORE", 3 * h1, 20 * h2, 21 * h2, va, vb, 0.0, sp, zero_grad))
    assert gradb == pytest.approx(brute, rel=1e-10)


def test_poloidal_face_streaming_against_quadrature(grid1):
    sp = SpeciesParams(rho_L=0.0)
    box = ConfigBox("LCORE", 2, 3, 4, 5)
    fv = assemble_face_velocities(grid1, box, zero_potential(grid1), sp, k0=18, k1=19)
    va, vb = grid1.v_bounds[0] + np.array([18, 19]) * grid1.dv
    h1, h2 = grid1.h("LCORE")
    s, w = gauss_unit(24)
    x1 = (2 + s) * h1
    X, d1, _ = grid1.mappings["LCORE"].jacobian(x1, np.full_like(x1, 4 * h2))
    f = eval_field(grid1.geometry.flux, X[:, 0], X[:, 1])
    # xi2 = const face: area normal (-dZ/dxi1, dR/dxi1)
    integrand = 2 * np.pi * X[:, 0] * (-f.B_R * d1[:, 1] + f.B_Z * d1[:, 0])
    brute = np.sum(w * integrand) * h1 * (vb**2 - va**2) / 2
    assert fv.F2[0, 0, 0, 0] == pytest.approx(brute, rel=1e-11)


def test_toroidal_faces_are_not_carried(grid1, species):
    fv = assemble_face_velocities(grid1, ConfigBox("RPF", 0, 2, 0, 2), equilibrium_potential(grid1), species, k0=0,
                                  k1=2)
    assert set(vars(fv)) >= {"F0", "F1", "F2"} and not hasattr(fv, "F3")


# --- telescoping ------------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(BLOCKS), st.integers(0, 6), st.integers(0, 6), st.integers(-1, 22))
def test_every_cell_divergence_free(grid1_hyp, block, i, j, k):
    grid, ef, sp = grid1_hyp
    j = min(j, grid.n_pol(block) - 2)
    fv = assemble_face_velocities(grid, ConfigBox(block, i, i + 2, j, j + 2), ef, sp, k0=k, k1=k + 2)
    d, s = fv.cell_divergence()
    assert np.max(np.abs(d) / s) <= 1e-12


@pytest.fixture(scope="module")
def grid1_hyp(grid1):
    return grid1, equilibrium_potential(grid1), SpeciesParams()


def test_whole_block_divergence_free_including_x_corner(grid1, species):
    ef = equilibrium_potential(grid1)
    for b in ("LCORE", "MCORE", "RPF"):
        fv = assemble_face_velocities(grid1, ConfigBox(b, 0, grid1.n_rad, 0, grid1.n_pol(b)), ef, species)
        d, s = fv.cell_divergence()
        assert np.max(np.abs(d) / s) <= 1e-12, b


def test_metric_variant_is_not_divergence_free(grid1, species):
    ef = equilibrium_potential(grid1)
    box = ConfigBox("MCORE", 2, 5, 20, 23)
    d, s = metric_face_velocities(grid1, box, ef, species).cell_divergence()
    dd, ss = assemble_face_velocities(grid1, box, ef, species).cell_divergence()
    assert np.max(np.abs(dd) / ss) <= 1e-12
    assert np.max(np.abs(d) / s) > 1e3 * max(np.max(np.abs(dd) / ss), 1e-16)


def test_linearity_in_potential(grid1, species):
    ef = equilibrium_potential(grid1)
    box = ConfigBox("LCSOL", 1, 4, 2, 6)
    e1 = edge_quantities(grid1, box, ef, species)
    e2 = edge_quantities(grid1, box, ef.scaled(2.0), species)
    for name in ("a", "b", "UE"):
        assert np.array_equal(getattr(e2, name), 2 * getattr(e1, name))
    for name in ("lnB1", "lnB2", "psi", "B", "UB"):
        assert np.array_equal(getattr(e2, name), getattr(e1, name))


def test_vpar_faces_linear_in_mu_without_potential(grid1, species):
    ef = zero_potential(grid1)
    box = ConfigBox("MCSOL", 2, 4, 7, 9)
    a = assemble_face_velocities(grid1, box, ef, species, mu=np.array([0.4])).F0
    b = assemble_face_velocities(grid1, box, ef, species, mu=np.array([0.8])).F0
    z = assemble_face_velocities(grid1, box, ef, species, mu=np.array([0.0])).F0
    assert np.all(z == 0)
    assert np.allclose(b, 2 * a, rtol=1e-14, atol=0)


def test_aligned_radial_faces_have_no_streaming(grid1):
    sp = SpeciesParams(rho_L=0.0)
    fv = assemble_face_velocities(grid1, ConfigBox("MCORE", 0, 8, 0, 48), zero_potential(grid1), sp, k0=20, k1=21)
    ref = np.abs(fv.F2).max()
    assert np.abs(fv.F1).max() <= 1e-12 * ref


# --- accuracy under refinement ----------------------------------------------


def _wave(R, Z):
    return 0.3 * np.sin(3 * R) * np.cos(2 * Z)


def _wave_grad(R, Z):
    return 0.9 * np.cos(3 * R) * np.cos(2 * Z), -0.6 * np.sin(3 * R) * np.sin(2 * Z)


@pytest.fixture(scope="module")
def refined_faces(default_mapping):
    """One fixed MCORE radial face (xi1 = 1/2, xi2 in [1/2, 2/3], v in [1/4, 1/2], mu = 1/2) on three grids."""
    mg, maps = default_mapping
    sp = SpeciesParams()
    out = []
    for N in (8, 16, 32):
        grid = build_phase_grid(mg.geometry, maps, GridLevel(N, N, 6 * N, 8, 1))
        # the equilibrium potential is a flux function and gives no normal drift here
        ef = potential_from(grid, _wave)
        box = ConfigBox("MCORE", N // 2, N // 2 + 1, 3 * N, 4 * N)
        kw = dict(k0=5, k1=6, mu=np.array([0.5]))
        fd = assemble_face_velocities(grid, box, ef, sp, **kw).F1[0, :, 0, 0].sum()
        fm = metric_face_velocities(grid, box, ef, sp, **kw).F1[0, :, 0, 0].sum()
        out.append((grid, fd, fm))
    g = out[0][0]
    oracle = _radial_face_oracle(g, "MCORE", 0.5, 0.5, 2 / 3, 0.25, 0.5, 0.5, sp,
                                 _wave_grad, q=96)
    return out, oracle


def _orders(errs):
    return np.log2(np.array(errs[:-1]) / np.array(errs[1:]))


def test_divfree_face_integral_converges_to_surface_integral(refined_faces):
    out, oracle = refined_faces
    errs = [abs(fd - oracle) for _, fd, _ in out]
    assert _orders(errs)[-1] >= 3.8, errs


def test_metric_and_divfree_faces_agree_at_fourth_order(refined_faces):
    out, _ = refined_faces
    errs = [abs(fd - fm) for _, fd, fm in out]
    assert _orders(errs)[-1] >= 3.8, errs


def _uhat_oracle(grid, block, xa, xb, ya, yb, mu, sp, q=16, panels=4):
    """(2 pi / m) int B . (Z E - mu/2 grad B) R J2 dxi over a logical rectangle, panelled Gauss."""
    s, w = gauss_unit(q)
    tot = 0.0
    for p in range(panels):
        for r in range(panels):
            x1 = xa + (xb - xa) * (p + s) / panels
            x2 = ya + (yb - ya) * (r + s) / panels
            X, d1, d2 = grid.mappings[block].jacobian(x1[:, None], x2[None, :])
            R, Z = X[..., 0], X[..., 1]
            J2 = d1[..., 0] * d2[..., 1] - d2[..., 0] * d1[..., 1]
            f = eval_field(grid.geometry.flux, R, Z)
            gR, gZ = _wave_grad(R, Z)
            val = -sp.Z * (f.B_R * gR + f.B_Z * gZ) - 0.5 * mu * (f.B_R * f.grad_B[0] + f.B_Z * f.grad_B[1])
            W = w[:, None] * w[None, :] * (xb - xa) * (yb - ya) / panels**2
            tot += np.sum(W * val * R * J2)
    return 2 * np.pi / sp.m * tot


def test_area_term_converges_to_dense_quadrature(default_mapping):
    # a potential that is not a flux function, on a block whose grid is not flux aligned near X
    mg, maps = default_mapping
    sp = SpeciesParams()
    errs = []
    ref = None
    for N in (8, 16, 32):
        grid = build_phase_grid(mg.geometry, maps, GridLevel(N, N, 6 * N, 2, 1))
        ef = potential_from(grid, _wave)
        box = ConfigBox("LCORE", N // 4, N // 2, N // 2, N)
        e = edge_quantities(grid, box, ef, sp)
        got = float(np.sum(e.UE + 0.5 * e.UB))
        if ref is None:
            ref = _uhat_oracle(grid, "LCORE", 0.25, 0.5, 0.5, 1.0, 0.5, sp)
        errs.append(abs(got - ref))
    assert _orders(errs)[-1] >= 3.8, (errs, ref)
