import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gkv.magnetic_geometry import (BlendedFlux, BlendParams, DomainError, FluxField, GeometryError, blended_flux,
                                   eval_field, eval_flux, find_x_point, frame_residuals, local_frame_coeffs)

FLUX = FluxField()


def psi_n_oracle(R, Z, c1=1.2, c2=0.9, c3=0.7, L=1.0, R0=1.6, Zoff=0.4):
    """The closed-form normalized flux, written out independently in mpmath."""
    Z0 = Zoff + L * mp.acos(mp.mpf(c3) / c2)
    y = (Z - Z0) / L
    return mp.cos(c1 * (R - R0) / L) + c2 * mp.sin(y) - c3 * y


@pytest.fixture(scope="module")
def xpt():
    return find_x_point(FLUX)


def test_default_constants_accepted():
    assert (FLUX.c1, FLUX.c2, FLUX.c3, FLUX.L_N, FLUX.R0) == (1.2, 0.9, 0.7, 1.0, 1.6)


def test_invalid_shape_factors_rejected():
    with pytest.raises(GeometryError):
        FluxField(c2=0.5, c3=0.7)


def test_out_of_bounds_is_domain_error():
    with pytest.raises(DomainError):
        eval_flux(FLUX, 10.0, 0.0)


def test_radial_derivative_vanishes_at_R0():
    Z = np.linspace(-0.5, 2.0, 7)
    v = FLUX.normalized_flux(np.full_like(Z, 1.6), Z)
    assert np.all(v.psi_R == 0.0)


def test_derivatives_match_high_precision_differentiation():
    rng = np.random.default_rng(1)
    for R, Z in rng.uniform((1.3, 0.2), (2.0, 1.4), size=(5, 2)):
        v = FLUX.normalized_flux(R, Z)
        f = lambda r, z: psi_n_oracle(r, z)
        assert float(v.psi) == pytest.approx(float(f(R, Z)), abs=1e-14)
        assert float(v.psi_R) == pytest.approx(float(mp.diff(f, (R, Z), (1, 0))), abs=1e-12)
        assert float(v.psi_Z) == pytest.approx(float(mp.diff(f, (R, Z), (0, 1))), abs=1e-12)
        assert float(v.psi_RR) == pytest.approx(float(mp.diff(f, (R, Z), (2, 0))), abs=1e-10)
        assert float(v.psi_ZZ) == pytest.approx(float(mp.diff(f, (R, Z), (0, 2))), abs=1e-10)


def test_x_point_location_against_independent_root_find(xpt):
    mp.mp.dps = 30
    f = lambda r, z: psi_n_oracle(r, z)
    gx = lambda r, z: mp.diff(f, (r, z), (1, 0))
    gz = lambda r, z: mp.diff(f, (r, z), (0, 1))
    R, Z = mp.findroot([gx, gz], (mp.mpf("1.58"), mp.mpf("0.43")))
    mp.mp.dps = 15
    assert xpt.R_X == pytest.approx(float(R), abs=1e-12)
    assert xpt.Z_X == pytest.approx(float(Z), abs=1e-12)
    assert (xpt.R_X, xpt.Z_X) == pytest.approx((1.6, 0.4), abs=1e-12)
    assert xpt.psi_X == pytest.approx(float(f(R, Z)), abs=1e-13)


def test_x_point_expansion_is_a_separable_saddle(xpt):
    assert xpt.b == 0.0
    assert xpt.a < 0 < xpt.c
    assert xpt.b**2 - 4 * xpt.a * xpt.c > 0


def test_toroidal_field_arithmetic():
    assert eval_field(FLUX, 1.75, 0.4).B_phi == pytest.approx(2.0, rel=1e-15)


def test_poloidal_field_vanishes_at_x_point(xpt):
    f = eval_field(FLUX, xpt.R_X, xpt.Z_X)
    assert abs(f.B_R) < 1e-12 and abs(f.B_Z) < 1e-12


def test_midplane_poloidal_field_magnitude():
    f = eval_field(FLUX, FLUX.R_mp, FLUX.Z_mp)
    assert math.hypot(float(f.B_R), float(f.B_Z)) == pytest.approx(0.16, rel=1e-13)


def test_field_rejects_nonpositive_R():
    class Flat:
        RB_tor = 1.0

    with pytest.raises(DomainError):
        eval_field(Flat(), 0.0, 0.0)


def _divergence_of_B(R, Z, h=1e-5):
    """Axisymmetric div B = (1/R) d(R B_R)/dR + dB_Z/dZ by central differences."""
    def comp(r, z):
        f = eval_field(FLUX, r, z)
        return float(f.B_R), float(f.B_Z)
    dRBR = (R + h) * comp(R + h, Z)[0] - (R - h) * comp(R - h, Z)[0]
    dBZ = comp(R, Z + h)[1] - comp(R, Z - h)[1]
    scale = abs(comp(R + h, Z)[0]) + abs(comp(R, Z + h)[1])
    return (dRBR / R + dBZ) / (2 * h), scale


def test_divergence_free_field_analytically():
    # B_R = -psi_Z / R and B_Z = psi_R / R make R div B = -psi_ZR + psi_RZ exactly
    rng = np.random.default_rng(2)
    for R, Z in rng.uniform((1.3, 0.2), (2.0, 1.4), size=(20, 2)):
        p = eval_flux(FLUX, R, Z)
        assert abs(float(-p.psi_RZ + p.psi_RZ)) <= 1e-12 * abs(float(p.psi_RR))
        d, s = _divergence_of_B(R, Z)
        assert abs(d) <= 1e-6 * s


def test_grad_B_matches_finite_differences():
    R, Z, h = 1.8, 0.9, 1e-6
    g = eval_field(FLUX, R, Z).grad_B
    B = lambda r, z: float(eval_field(FLUX, r, z).B)
    assert g[0] == pytest.approx((B(R + h, Z) - B(R - h, Z)) / (2 * h), rel=1e-7)
    assert g[1] == pytest.approx((B(R, Z + h) - B(R, Z - h)) / (2 * h), rel=1e-7)


def test_model_frame_coefficients_at_the_x_point():
    a1, a2, b1, b2 = local_frame_coeffs(-0.72, 0.0, 0.28284)
    assert a1 == 0.0 and b2 == 0.0
    assert abs(a2) == pytest.approx(math.sqrt(0.72), rel=1e-14)
    assert abs(b1) == pytest.approx(math.sqrt(0.28284), rel=1e-14)


def test_frame_coefficients_against_generic_solver():
    from scipy.optimize import fsolve
    a, b, c = -0.72, 0.0, 0.28284
    mine = np.array(local_frame_coeffs(a, b, c))
    sol = fsolve(lambda x: frame_residuals(a, b, c, x), mine + 0.05, xtol=1e-13)
    assert np.max(np.abs(frame_residuals(a, b, c, sol))) < 1e-12
    # the matching system fixes each coefficient up to sign
    assert np.allclose(np.abs(sol), np.abs(mine), atol=1e-10)


def test_non_hyperbolic_rejected():
    with pytest.raises(GeometryError):
        local_frame_coeffs(1.0, 0.0, 1.0)


hyperbolic = st.tuples(st.floats(-10, 10), st.floats(-10, 10), st.floats(-10, 10)).filter(
    lambda t: t[1] ** 2 - 4 * t[0] * t[2] > 1e-6 * (t[0] ** 2 + t[1] ** 2 + t[2] ** 2) and max(map(abs, t)) > 1e-3)


@settings(max_examples=300, deadline=None)
@given(hyperbolic)
def test_frame_orthogonality_and_matching(t):
    a, b, c = t
    co = local_frame_coeffs(a, b, c)
    scale = abs(a) + abs(b) + abs(c)
    assert np.max(np.abs(frame_residuals(a, b, c, co))) <= 1e-12 * scale


def _positivity_quantity(a, b, c):
    """A positive multiple of b^2 + 2c(-a + sqrt(b^2 + (a-c)^2) + c), free of cancellation and underflow.

    For a > c the square root minus (a - c) equals b^2 / (sqrt + (a - c)), so
    the quantity is b^2 (1 + 2c / (sqrt + a - c)); its sign is that of the bracket.
    """
    e = a - c
    d = math.hypot(b, e)
    if e > 0:
        return 1 + 2 * c / (d + e)
    return b * b + 2 * c * (d - e)


@settings(max_examples=300, deadline=None)
@given(hyperbolic)
def test_positivity_chain(t):
    a, b, c = t
    if b == 0:
        return
    assert _positivity_quantity(a, b, c) > 0


def test_positivity_chain_direct_form_on_moderate_b():
    rng = np.random.default_rng(5)
    n = 0
    while n < 500:
        a, b, c = rng.uniform(-5, 5, 3)
        if b * b - 4 * a * c <= 0 or abs(b) < 1e-3:
            continue
        n += 1
        assert b * b + 2 * c * (-a + math.sqrt(b * b + (a - c) ** 2) + c) > 0


def test_blend_at_x_point_is_psi_x(xpt):
    assert blended_flux(FLUX, xpt, BlendParams(0.05), xpt.R_X, xpt.Z_X) == pytest.approx(xpt.psi_X, abs=1e-15)


def test_blend_saturates_far_from_x_point(xpt):
    D = 0.01
    bf = BlendedFlux(FLUX, xpt, BlendParams(D))
    M = np.array([[xpt.a1, xpt.b1], [xpt.a2, xpt.b2]])
    for ang in np.linspace(0, 2 * np.pi, 9)[:-1]:
        # frame radius r = 12 D
        dR, dZ = np.linalg.solve(M, [12 * D * np.cos(ang), 12 * D * np.sin(ang)])
        R, Z = xpt.R_X + dR, xpt.Z_X + dZ
        psi0 = float(FLUX.normalized_flux(R, Z).psi)
        assert abs(float(bf(R, Z)) - psi0) <= 1e-10 * abs(psi0)


def test_blend_on_rbar_axis_against_high_precision(xpt):
    D, al = 0.05, 1.0
    # direction whose frame image lies on the R_bar axis with r = D
    M = np.array([[xpt.a1, xpt.b1], [xpt.a2, xpt.b2]])
    dR, dZ = np.linalg.solve(M, [D, 0.0])
    R, Z = xpt.R_X + dR, xpt.Z_X + dZ
    mp.mp.dps = 40
    psi0 = psi_n_oracle(mp.mpf(R), mp.mpf(Z))
    psiX = psi_n_oracle(mp.mpf(xpt.R_X), mp.mpf(xpt.Z_X))
    expect = psiX + mp.tanh(1) * (psi0 - psiX) + (1 - mp.tanh(1)) * D * D
    mp.mp.dps = 15
    got = blended_flux(FLUX, xpt, BlendParams(D, al), R, Z)
    assert float(got) == pytest.approx(float(expect), abs=1e-14)


def test_blend_params_validated():
    with pytest.raises(ValueError):
        BlendParams(0.0)
