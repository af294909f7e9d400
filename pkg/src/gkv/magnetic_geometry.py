"""Analytic edge magnetic flux, field, X point and blended flux.

The flux model is the separable single-null shape

    Psi_N(R, Z) = cos(c1 (R - R0)/L_N) + c2 sin((Z - Z0)/L_N) - c3 (Z - Z0)/L_N,

scaled to a dimensional flux so that the poloidal field at a reference
outboard point has a prescribed magnitude.  All derivatives are analytic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple, Protocol

import numpy as np


class GeometryError(RuntimeError):
    """Raised when the geometry is unusable (non-hyperbolic X point, no convergence)."""


class DomainError(ValueError):
    """Raised for coordinates outside the configured domain."""


class FluxValues(NamedTuple):
    psi: np.ndarray
    psi_R: np.ndarray
    psi_Z: np.ndarray
    psi_RR: np.ndarray
    psi_RZ: np.ndarray
    psi_ZZ: np.ndarray


class FieldValues(NamedTuple):
    B_R: np.ndarray
    B_phi: np.ndarray
    B_Z: np.ndarray
    B: np.ndarray
    b: np.ndarray  # (3, ...) in (R, phi, Z) order
    grad_B: np.ndarray  # (2, ...) in (R, Z) order
    curl_b: np.ndarray  # (3, ...) in (R, phi, Z) order


class FluxModel(Protocol):
    """Anything that can supply a flux with analytic derivatives."""

    RB_tor: float

    def eval_flux(self, R, Z) -> FluxValues: ...

    def normalized_flux(self, R, Z) -> FluxValues: ...


@dataclass(frozen=True)
class FluxField:
    """Analytic single-null flux model.

    Lengths are in metres, fields in tesla.  ``Z0_offset`` is the vertical
    position of the X point; the model's Z0 follows from it.
    """

    c1: float = 1.2
    c2: float = 0.9
    c3: float = 0.7
    L_N: float = 1.0
    R0: float = 1.6
    Z0_offset: float = 0.4
    RB_tor: float = 3.5
    B_theta_bar: float = 0.16
    R_mp: float = 2.11
    bounds: tuple[float, float, float, float] = (0.3, 3.2, -1.5, 3.8)

    def __post_init__(self):
        if not (self.c2 > self.c3 > 0):
            raise GeometryError("shape factors need c2 > c3 > 0")
        if self.L_N <= 0 or self.R0 <= 0:
            raise GeometryError("L_N and R0 must be positive")

    @cached_property
    def Z0(self) -> float:
        return self.Z0_offset + self.L_N * np.arccos(self.c3 / self.c2)

    @cached_property
    def Z_mp(self) -> float:
        return self.Z0 + self.L_N * np.arccos(self.c3 / self.c2)

    @cached_property
    def psi_scale(self) -> float:
        """Factor converting Psi_N into the dimensional flux."""
        v = self.normalized_flux(self.R_mp, self.Z_mp)
        return self.B_theta_bar * self.R_mp / float(np.hypot(v.psi_R, v.psi_Z))

    def _check(self, R, Z):
        R = np.asarray(R, dtype=float)
        Z = np.asarray(Z, dtype=float)
        r0, r1, z0, z1 = self.bounds
        if np.any(R < r0) or np.any(R > r1) or np.any(Z < z0) or np.any(Z > z1):
            raise DomainError(f"point outside flux domain R in [{r0}, {r1}], Z in [{z0}, {z1}]")
        return R, Z

    def normalized_flux(self, R, Z) -> FluxValues:
        R, Z = self._check(R, Z)
        L = self.L_N
        x = self.c1 * (R - self.R0) / L
        y = (Z - self.Z0) / L
        cx, sx = np.cos(x), np.sin(x)
        cy, sy = np.cos(y), np.sin(y)
        k = self.c1 / L
        psi = cx + self.c2 * sy - self.c3 * y
        psi_R = -k * sx
        psi_Z = (self.c2 * cy - self.c3) / L
        psi_RR = -k * k * cx
        psi_RZ = np.zeros_like(psi)
        psi_ZZ = -self.c2 * sy / (L * L)
        return FluxValues(psi, psi_R, psi_Z, psi_RR, psi_RZ, psi_ZZ)

    def eval_flux(self, R, Z) -> FluxValues:
        s = self.psi_scale
        return FluxValues(*(s * q for q in self.normalized_flux(R, Z)))

    def magnetic_axis(self) -> tuple[float, float]:
        """Flux maximum, found by Newton iteration from the model's symmetric guess."""
        R, Z = _newton_critical_point(self, self.R0, self.Z_mp)
        return R, Z

    @cached_property
    def psi_n_axis(self) -> float:
        return float(self.normalized_flux(*self.magnetic_axis()).psi)


def eval_flux(flux: FluxModel, R, Z) -> FluxValues:
    """Dimensional flux and its first and second partial derivatives."""
    return flux.eval_flux(R, Z)


def eval_field(flux: FluxModel, R, Z) -> FieldValues:
    """Magnetic field, unit vector, grad|B| and curl of the unit vector.

    Components are ordered (R, phi, Z) with e_R x e_phi = e_Z.
    """
    R = np.asarray(R, dtype=float)
    if np.any(R <= 0):
        raise DomainError("field evaluation needs R > 0")
    p = flux.eval_flux(R, Z)
    F = flux.RB_tor
    B_R = -p.psi_Z / R
    B_Z = p.psi_R / R
    B_phi = F / R + 0 * R
    B2 = B_R**2 + B_phi**2 + B_Z**2
    B = np.sqrt(B2)
    gp2 = p.psi_R**2 + p.psi_Z**2
    dB2_dR = 2 * (p.psi_R * p.psi_RR + p.psi_Z * p.psi_RZ) / R**2 - 2 * (gp2 + F * F) / R**3
    dB2_dZ = 2 * (p.psi_R * p.psi_RZ + p.psi_Z * p.psi_ZZ) / R**2
    gR = dB2_dR / (2 * B)
    gZ = dB2_dZ / (2 * B)
    # curl b = (curl B)/B - (grad B x B)/B^2; curl B is purely toroidal here
    curlB_phi = -(p.psi_RR - p.psi_R / R + p.psi_ZZ) / R
    cross_R = -gZ * B_phi
    cross_phi = gZ * B_R - gR * B_Z
    cross_Z = gR * B_phi
    curl_b = np.stack([-cross_R / B2, curlB_phi / B - cross_phi / B2, -cross_Z / B2])
    b = np.stack([B_R / B, B_phi / B, B_Z / B])
    return FieldValues(B_R, B_phi, B_Z, B, b, np.stack([gR, gZ]), curl_b)


def _newton_critical_point(flux: FluxModel, R, Z, tol=1e-13, max_iter=60):
    for _ in range(max_iter):
        v = flux.normalized_flux(R, Z)
        g = np.array([float(v.psi_R), float(v.psi_Z)])
        if np.hypot(*g) <= tol:
            return R, Z
        H = np.array([[float(v.psi_RR), float(v.psi_RZ)], [float(v.psi_RZ), float(v.psi_ZZ)]])
        dR, dZ = np.linalg.solve(H, -g)
        R, Z = R + dR, Z + dZ
    v = flux.normalized_flux(R, Z)
    if np.hypot(float(v.psi_R), float(v.psi_Z)) <= tol:
        return R, Z
    raise GeometryError("critical point iteration did not converge")


@dataclass(frozen=True)
class XPointData:
    """X-point location and local hyperbolic frame of the normalized flux."""

    R_X: float
    Z_X: float
    psi_X: float  # normalized flux at the X point
    a: float
    b: float
    c: float
    a1: float
    a2: float
    b1: float
    b2: float

    def frame(self, R, Z):
        """Rotated coordinates (R_bar, Z_bar) about the X point."""
        dR = np.asarray(R, dtype=float) - self.R_X
        dZ = np.asarray(Z, dtype=float) - self.Z_X
        return self.a1 * dR + self.b1 * dZ, self.a2 * dR + self.b2 * dZ


def find_x_point(flux: FluxModel, initial_guess=None, tol=1e-13, max_iter=60) -> XPointData:
    """Locate the saddle of the normalized flux and build its local frame."""
    if initial_guess is None:
        initial_guess = (flux.R0, flux.Z0_offset + 0.05)
    R, Z = _newton_critical_point(flux, float(initial_guess[0]), float(initial_guess[1]), tol, max_iter)
    v = flux.normalized_flux(R, Z)
    a, b, c = 0.5 * float(v.psi_RR), float(v.psi_RZ), 0.5 * float(v.psi_ZZ)
    if b * b - 4 * a * c <= 0:
        raise GeometryError("critical point is not a saddle (b^2 - 4ac <= 0)")
    a1, a2, b1, b2 = local_frame_coeffs(a, b, c)
    return XPointData(R, Z, float(v.psi), a, b, c, a1, a2, b1, b2)


def local_frame_coeffs(a: float, b: float, c: float):
    """Solve a1^2-a2^2=a, b1^2-b2^2=c, 2a1b1-2a2b2=b, a1a2+b1b2=0.

    Uses the closed-form solution rearranged so that no term cancels as
    b -> 0; at b == 0 the one-sided limit b -> 0- is taken.  Orientation:
    (a1, b1) points into the half plane of increasing R (ties broken toward
    +Z) and (a2, b2) is (a1, b1) rotated by +90 degrees up to scale.
    """
    a, b, c = float(a), float(b), float(c)
    if b * b - 4 * a * c <= 0:
        raise GeometryError("quadratic form is not hyperbolic")
    e = a - c
    delta = np.hypot(b, e)
    sd = np.sqrt(delta)
    if e >= 0:
        s = delta + e
        sgn = 1.0 if b > 0 else -1.0
        pp = 1 + 2 * c / s
        qq = 1 - 2 * a / s
        if pp < 0 or qq < 0:
            raise GeometryError("frame coefficients are not real")
        a1 = -sgn * s * np.sqrt(pp) / (2 * sd)
        b2 = sgn * s * np.sqrt(qq) / (2 * sd)
        b1 = -abs(b) * np.sqrt(pp) / (2 * sd)
        a2 = -abs(b) * np.sqrt(qq) / (2 * sd)
    else:
        t = delta - e
        P = b * b + 2 * c * t
        Q = b * b - 2 * a * t
        if P <= 0 or Q < 0:
            raise GeometryError("frame coefficients are not real")
        a1 = -b * np.sqrt(P) / (2 * t * sd)
        b2 = b * np.sqrt(Q) / (2 * t * sd)
        b1 = -np.sqrt(P) / (2 * sd)
        a2 = -np.sqrt(Q) / (2 * sd)
    if a1 < 0 or (a1 == 0 and b1 < 0):
        a1, b1 = -a1, -b1
    if a2 * (-b1) + b2 * a1 < 0:
        a2, b2 = -a2, -b2
    return float(a1), float(a2), float(b1), float(b2)


def frame_residuals(a, b, c, coeffs):
    """Residuals of the four matching equations."""
    a1, a2, b1, b2 = coeffs
    return np.array([a1 * a1 - a2 * a2 - a, b1 * b1 - b2 * b2 - c, 2 * a1 * b1 - 2 * a2 * b2 - b, a1 * a2 + b1 * b2])


@dataclass(frozen=True)
class BlendParams:
    """Transition distance D (m) and weight alpha of the blended flux."""

    D: float
    alpha: float = 1.0

    def __post_init__(self):
        if not (self.D > 0 and self.alpha > 0):
            raise ValueError("blend parameters need D > 0 and alpha > 0")


@dataclass(frozen=True)
class BlendedFlux:
    """Normalized flux blended toward a piecewise-linear cone near the X point.

    ``signs`` fixes the branch of |R_bar| and |Z_bar|, giving the smooth
    continuation used inside one block sector.
    """

    flux: FluxModel
    xpt: XPointData
    params: BlendParams
    signs: tuple[float, float] | None = field(default=None)

    def with_signs(self, sR: float, sZ: float) -> "BlendedFlux":
        return BlendedFlux(self.flux, self.xpt, self.params, (float(sR), float(sZ)))

    def __call__(self, R, Z):
        return self.value_and_grad(R, Z)[0]

    def value_and_grad(self, R, Z):
        x, D, al = self.xpt, self.params.D, self.params.alpha
        v = self.flux.normalized_flux(R, Z)
        Rb, Zb = x.frame(R, Z)
        if self.signs is None:
            sR, sZ = np.sign(Rb), np.sign(Zb)
        else:
            sR, sZ = self.signs
        lin = sR * Rb - sZ * Zb
        r = np.hypot(Rb, Zb)
        T = np.tanh(r / D)
        d0 = v.psi - x.psi_X
        val = x.psi_X + T * d0 + al * (1 - T) * D * lin
        with np.errstate(invalid="ignore", divide="ignore"):
            rR = np.where(r > 0, (Rb * x.a1 + Zb * x.a2) / r, 0.0)
            rZ = np.where(r > 0, (Rb * x.b1 + Zb * x.b2) / r, 0.0)
        w = (d0 - al * D * lin) * (1 - T * T) / D
        lR = sR * x.a1 - sZ * x.a2
        lZ = sR * x.b1 - sZ * x.b2
        gR = T * v.psi_R + w * rR + al * (1 - T) * D * lR
        gZ = T * v.psi_Z + w * rZ + al * (1 - T) * D * lZ
        return val, gR, gZ


def blended_flux(flux: FluxModel, xpt: XPointData, params: BlendParams, R, Z):
    """Blended normalized flux at (R, Z)."""
    return BlendedFlux(flux, xpt, params)(R, Z)
