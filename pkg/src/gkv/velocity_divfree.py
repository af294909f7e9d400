"""Face integrals of the mapped gyrokinetic phase-space velocity.

Phase-space velocity u = (B*_par dR/dt, B*_par dv_par/dt).  Face integrals
are over logical faces of a (v_par, xi1, xi2) cell at fixed mu (mu is a
parameter), with the toroidal angle integrated out.  Orientation follows
increasing logical coordinates, which is outward for the high face.

Divergence-free mode builds every face integral from three families of
edge/corner quantities that are computed once and shared between adjacent
cells, so each cell's alternating face sum cancels term by term:

* E01[k, i, j]: v node k, radial node line i, poloidal edge j
* E02[k, i, j]: v node k, poloidal node line j, radial edge i
* E12[k, i, j]: v cell k, configuration node (i, j)

plus a per-cell area term Uhat that enters both v_par faces identically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .block_mapping import x_corner
from .magnetic_geometry import GeometryError, eval_field
from .phase_space import ConfigError, PhaseSpaceGrid, SpeciesParams, gauss_unit

# Lagrange basis through nodes -1, 0, 1, 2 (monomial coefficients, rows = basis)
_LAG_NODES = np.array([-1.0, 0.0, 1.0, 2.0])
_LAG = np.linalg.inv(np.vander(_LAG_NODES, 4, increasing=True)).T


def _relative(st, axes):
    """Stencil values minus its node (0, 0), so derivatives of a constant vanish exactly."""
    ref = st[(Ellipsis,) + (slice(1, 2),) * axes]
    return st - ref


def lagrange4(s, deriv=0):
    """Cubic Lagrange basis on nodes -1..2 (or its derivative) at points s; shape s.shape + (4,)."""
    s = np.asarray(s, float)[..., None]
    if deriv == 0:
        return sum(_LAG[:, p] * s**p for p in range(4))
    return sum(p * _LAG[:, p] * s ** (p - 1) for p in range(1, 4))


@dataclass
class ConfigBox:
    """Configuration cells [i0, i1) x [j0, j1) of one block (ghost indices allowed)."""

    block: str
    i0: int
    i1: int
    j0: int
    j1: int

    @property
    def shape(self):
        return self.i1 - self.i0, self.j1 - self.j0

    def grow(self, n: int) -> "ConfigBox":
        return ConfigBox(self.block, self.i0 - n, self.i1 + n, self.j0 - n, self.j1 + n)


@dataclass
class EfieldData:
    """Nodal potential per block on the lattice i in [-g, n_rad + g], j in [-g, n_pol + g]."""

    phi: dict
    offset: int

    def nodes(self, block, i0, i1, j0, j1):
        """Potential on nodes [i0, i1] x [j0, j1] (inclusive)."""
        g = self.offset
        a = self.phi[block]
        if i0 + g < 0 or j0 + g < 0 or i1 + g >= a.shape[0] or j1 + g >= a.shape[1]:
            raise ConfigError(f"potential lattice of {block} too small for nodes [{i0},{i1}]x[{j0},{j1}]")
        return a[i0 + g : i1 + g + 1, j0 + g : j1 + g + 1]

    def scaled(self, c: float) -> "EfieldData":
        return EfieldData({b: c * a for b, a in self.phi.items()}, self.offset)


def potential_from(grid: PhaseSpaceGrid, func, pad=None) -> EfieldData:
    """Nodal potential from a pointwise function of (R, Z) on every block's padded node lattice."""
    g = grid.ghost if pad is None else pad
    phi = {}
    for b in grid.mappings:
        ni = np.arange(-g, grid.n_rad + g + 1)
        nj = np.arange(-g, grid.n_pol(b) + g + 1)
        X = grid.node_positions(b, ni[:, None], nj[None, :])
        phi[b] = np.asarray(func(X[..., 0], X[..., 1]), float) + np.zeros(X.shape[:-1])
    return EfieldData(phi, g)


@dataclass
class FaceVelocitySet:
    """Face integrals on a configuration box for v cells [k0, k1) and mu cells of ``mu``.

    F0[i, j, k, m]: v_par face at v node k0 + k of cell (i0 + i, j0 + j)
    F1[i, j, k, m]: radial face at node line i0 + i, cell j0 + j
    F2[i, j, k, m]: poloidal face at node line j0 + j, cell i0 + i
    The toroidal faces carry identically zero integrals and are not stored.
    """

    box: ConfigBox
    k0: int
    k1: int
    mu: np.ndarray
    F0: np.ndarray
    F1: np.ndarray
    F2: np.ndarray
    mode: str
    parts: dict | None = None

    def cell_divergence(self):
        """Alternating face sums and the sum of face magnitudes for every cell."""
        d = (self.F0[:, :, 1:] - self.F0[:, :, :-1]) + (self.F1[1:] - self.F1[:-1]) + (self.F2[:, 1:] - self.F2[:, :-1])
        s = (np.abs(self.F0[:, :, 1:]) + np.abs(self.F0[:, :, :-1]) + np.abs(self.F1[1:]) + np.abs(self.F1[:-1])
             + np.abs(self.F2[:, 1:]) + np.abs(self.F2[:, :-1]))
        return d, s


# ---------------------------------------------------------------------------
# geometric ingredients


def _node_data(grid: PhaseSpaceGrid, block, i0, i1, j0, j1):
    i = np.arange(i0, i1 + 1)
    j = np.arange(j0, j1 + 1)
    X = grid.node_positions(block, i[:, None], j[None, :])
    flux = grid.geometry.flux
    B = eval_field(flux, X[..., 0], X[..., 1]).B
    if np.any(B <= 0):
        raise GeometryError("non-positive field magnitude at a cell corner")
    psi_shift = flux.psi_scale * (flux.normalized_flux(X[..., 0], X[..., 1]).psi - grid.geometry.xpt.psi_X)
    return X, B, psi_shift


def _edge_inverse_B(grid: PhaseSpaceGrid, block, axis, lines, cells, q=4):
    """Logical averages of 1/B along edges.

    axis=2: edges along xi2 on radial node lines ``lines`` spanning cells ``cells``;
    axis=1: edges along xi1 on poloidal node lines.  Shape (len(lines), len(cells)) for
    axis=2 and (len(cells), len(lines)) for axis=1, i.e. always [i, j].
    """
    s, w = gauss_unit(q)
    h1, h2 = grid.h(block)
    if axis == 2:
        x1 = np.asarray(lines, float)[:, None, None] * h1
        x2 = (np.asarray(cells, float)[None, :, None] + s) * h2
    else:
        x1 = (np.asarray(cells, float)[:, None, None] + s) * h1
        x2 = np.asarray(lines, float)[None, :, None] * h2
    X = grid.mappings[block](x1, x2)
    B = eval_field(grid.geometry.flux, X[..., 0], X[..., 1]).B
    return np.sum(w / B, axis=-1)


def _exb_line_integrals(invB, phi, axis):
    """Fourth-order int (1/B) dphi/dxi along edges from edge averages of 1/B and nodal phi.

    For axis=2, ``invB`` has edges j-1..j_end (one extra on each side) on each line and
    ``phi`` nodes j-1..j_end+2; result covers the interior edges.
    """
    if axis == 1:
        return _exb_line_integrals(invB.T, phi.T, 2).T
    dphi = np.diff(phi, axis=1)  # edges -1 .. n
    a, d = invB[:, 1:-1], dphi[:, 1:-1]
    da = invB[:, 2:] - invB[:, :-2]
    dd = dphi[:, 2:] - dphi[:, :-2]
    return a * d + da * dd / 48.0


def _x_stencil_shifts(grid: PhaseSpaceGrid, box: ConfigBox):
    """Cells of ``box`` whose bicubic node stencil reaches diagonally past the X point.

    Ghost nodes in that quadrant lie on another flux branch, so the single cell
    touching X shifts its radial stencil one node back into the block.
    Returns {(i, j): (shift1, shift2)}.
    """
    n1, n2 = grid.n_rad, grid.n_pol(box.block)
    xc = x_corner(box.block, n1, n2)
    if xc is None:
        return {}
    ci, cj = (n1 - 1 if xc[0] else 0), (n2 - 1 if xc[1] else 0)
    if box.i0 <= ci < box.i1 and box.j0 <= cj < box.j1:
        return {(ci, cj): (-1 if xc[0] else 1, 0)}
    return {}


def _uhat_parts(grid: PhaseSpaceGrid, box: ConfigBox, efield: EfieldData, species: SpeciesParams, q=2):
    """Per-cell area terms: Uhat = UE + mu * UB.

    Uses B . grad(g) R J2 = dPsi/dxi1 dg/dxi2 - dPsi/dxi2 dg/dxi1, with dphi/dxi from
    the bicubic nodal interpolant (nodes i-1..i+2) and analytic Psi and B gradients.

    The cell touching the X point uses a shifted stencil (see ``_x_stencil_shifts``).
    """
    phi_nodes = efield.nodes(box.block, box.i0 - 1, box.i1 + 1, box.j0 - 1, box.j1 + 1)
    s, w = gauss_unit(q)
    h1, h2 = grid.h(box.block)
    n1, n2 = box.shape
    I = np.arange(box.i0, box.i1, dtype=float)[:, None, None, None]
    J = np.arange(box.j0, box.j1, dtype=float)[None, :, None, None]
    x1 = (I + s[:, None]) * h1
    x2 = (J + s[None, :]) * h2
    X, d1, d2 = grid.mappings[box.block].jacobian(x1, x2)
    flux = grid.geometry.flux
    fv = flux.eval_flux(X[..., 0], X[..., 1])
    fld = eval_field(flux, X[..., 0], X[..., 1])
    p1 = fv.psi_R * d1[..., 0] + fv.psi_Z * d1[..., 1]
    p2 = fv.psi_R * d2[..., 0] + fv.psi_Z * d2[..., 1]
    b1 = fld.grad_B[0] * d1[..., 0] + fld.grad_B[1] * d1[..., 1]
    b2 = fld.grad_B[0] * d2[..., 0] + fld.grad_B[1] * d2[..., 1]
    st = _relative(sliding_window_view(phi_nodes, (4, 4))[:n1, :n2], 2)  # (n1, n2, 4, 4)
    L, dL = lagrange4(s), lagrange4(s, 1)  # (q, 4)
    phi1 = np.einsum("ijab,pa,qb->ijpq", st, dL, L) / h1
    phi2 = np.einsum("ijab,pa,qb->ijpq", st, L, dL) / h2
    W = w[:, None] * w[None, :] * h1 * h2
    c = 2 * np.pi / species.m
    for (ci, cj), (sh1, sh2) in _x_stencil_shifts(grid, box).items():
        st = _relative(efield.nodes(box.block, ci - 1 + sh1, ci + 2 + sh1, cj - 1 + sh2, cj + 2 + sh2), 2)
        L1, dL1 = lagrange4(s - sh1), lagrange4(s - sh1, 1)
        L2, dL2 = lagrange4(s - sh2), lagrange4(s - sh2, 1)
        a, b = ci - box.i0, cj - box.j0
        phi1[a, b] = np.einsum("ab,pa,qb->pq", st, dL1, L2) / h1
        phi2[a, b] = np.einsum("ab,pa,qb->pq", st, L1, dL2) / h2
    UE = -c * species.Z * np.sum(W * (p1 * phi2 - p2 * phi1), axis=(-2, -1))
    UB = -0.5 * c * np.sum(W * (p1 * b2 - p2 * b1), axis=(-2, -1))
    return UE, UB


def velocity_moments(v_nodes):
    """eta2, eta3 per v cell from consecutive v nodes."""
    v = np.asarray(v_nodes, float)
    return (v[1:] ** 2 - v[:-1] ** 2) / 2, (v[1:] ** 3 - v[:-1] ** 3) / 3


# ---------------------------------------------------------------------------
# divergence-free assembly


@dataclass
class EdgeQuantities:
    """The shared edge and corner terms, before contraction with v and mu."""

    a: np.ndarray  # [i line, j edge] int (1/B) dphi/dxi2
    lnB2: np.ndarray
    b: np.ndarray  # [i edge, j line] int (1/B) dphi/dxi1
    lnB1: np.ndarray
    psi: np.ndarray  # corners [i, j], gauge Psi - Psi_X
    B: np.ndarray
    UE: np.ndarray  # cells
    UB: np.ndarray


def edge_quantities(grid: PhaseSpaceGrid, box: ConfigBox, efield: EfieldData, species: SpeciesParams,
                    edge_q=4, area_q=2) -> EdgeQuantities:
    i0, i1, j0, j1 = box.i0, box.i1, box.j0, box.j1
    X, B, psi = _node_data(grid, box.block, i0, i1, j0, j1)
    phi = efield.nodes(box.block, i0 - 1, i1 + 1, j0 - 1, j1 + 1)
    inv2 = _edge_inverse_B(grid, box.block, 2, np.arange(i0, i1 + 1), np.arange(j0 - 1, j1 + 1), edge_q)
    inv1 = _edge_inverse_B(grid, box.block, 1, np.arange(j0, j1 + 1), np.arange(i0 - 1, i1 + 1), edge_q)
    a = _exb_line_integrals(inv2, phi[1:-1, :], 2)
    b = _exb_line_integrals(inv1, phi[:, 1:-1], 1)
    lnB2 = np.log(B[:, 1:] / B[:, :-1])
    lnB1 = np.log(B[1:, :] / B[:-1, :])
    UE, UB = _uhat_parts(grid, box, efield, species, area_q)
    return EdgeQuantities(a, lnB2, b, lnB1, psi, B, UE, UB)


def assemble_face_velocities(grid: PhaseSpaceGrid, box: ConfigBox, efield: EfieldData,
                             species: SpeciesParams, k0=None, k1=None, mu=None,
                             keep_parts=False) -> FaceVelocitySet:
    """Divergence-free face integrals on ``box`` for v cells [k0, k1) and mu values ``mu``."""
    k0 = -1 if k0 is None else k0
    k1 = grid.n_v + 1 if k1 is None else k1
    mu = grid.mu_centers() if mu is None else np.asarray(mu, float)
    eq = edge_quantities(grid, box, efield, species)
    vn = grid.v_bounds[0] + np.arange(k0, k1 + 1) * grid.dv
    eta2, eta3 = velocity_moments(vn)
    F = grid.geometry.flux.RB_tor
    Z, m, rho = species.Z, species.m, species.rho_L
    C = -2 * np.pi * rho * F
    # shapes: [i, j, k, mu]
    vk = vn[None, None, :, None]
    muk = mu[None, None, None, :]
    E01 = C * vk * (eq.a[..., None, None] + muk / (2 * Z) * eq.lnB2[..., None, None])
    E02 = C * vk * (eq.b[..., None, None] + muk / (2 * Z) * eq.lnB1[..., None, None])
    stream = -2 * np.pi * eq.psi[..., None] * eta2
    curv = -2 * np.pi * (m * rho / Z) * F / eq.B[..., None] * eta3
    E12 = (stream + curv)[..., None]
    U = eq.UE[..., None, None] + muk * eq.UB[..., None, None]
    F0 = (E02[:, :-1] - E02[:, 1:]) - (E01[:-1] - E01[1:]) + U
    F1 = (E01[:, :, :-1] - E01[:, :, 1:]) - (E12[:, :-1] - E12[:, 1:])
    F2 = (E12[:-1] - E12[1:]) - (E02[:, :, :-1] - E02[:, :, 1:])
    F1 = np.broadcast_to(F1, F1.shape[:3] + (mu.size,)).copy()
    F2 = np.broadcast_to(F2, F2.shape[:3] + (mu.size,)).copy()
    parts = None
    if keep_parts:
        parts = {"streaming_F1": -(stream[:, :-1] - stream[:, 1:]), "edges": eq,
                 "E01": E01, "E02": E02, "E12": E12}
    return FaceVelocitySet(box, k0, k1, mu, F0, F1, F2, "divfree", parts)


# ---------------------------------------------------------------------------
# pointwise velocity and the metric (non-divergence-free) variant


def pointwise_velocity(flux, species: SpeciesParams, R, Z, v, mu, grad_phi):
    """(u_R, u_Z, u_v) of u = B*_par (dR/dt, dv_par/dt); grad_phi = (dphi/dR, dphi/dZ)."""
    fld = eval_field(flux, R, Z)
    Zs, m, rho = species.Z, species.m, species.rho_L
    GR = Zs * grad_phi[0] + 0.5 * mu * fld.grad_B[0]
    GZ = Zs * grad_phi[1] + 0.5 * mu * fld.grad_B[1]
    bR, bphi, bZ = fld.b
    cR, cphi, cZ = fld.curl_b
    s = rho * m * v / Zs
    BsR = fld.B_R + s * cR
    BsZ = fld.B_Z + s * cZ
    uR = v * BsR + (rho / Zs) * (bphi * GZ)
    uZ = v * BsZ - (rho / Zs) * (bphi * GR)
    uv = -(BsR * GR + BsZ * GZ) / m
    return uR, uZ, uv


def _phi_gradient_on_edges(grid, block, phi, axis, lines, cells, s, h1, h2):
    """Logical derivatives of phi on edge Gauss points.

    ``phi`` covers nodes with a two-node halo around the lines/cells span.  Along the edge
    a cubic through nodes c-1..c+2 is used; across it the fourth-order centered
    difference at the node line.
    """
    if axis == 2:
        # lines are i, cells are j; phi index offset: node i -> i - lines[0] + 2, j -> j - cells[0] + 2
        L, dL = lagrange4(s), lagrange4(s, 1)
        st = _relative(sliding_window_view(phi[2:-2], 4, axis=1)[:, : len(cells)], 1)  # (ni, nj, 4)
        dpar = np.einsum("ija,qa->ijq", st, dL) / h2
        cen = (phi[:-4] - 8 * phi[1:-3] + 8 * phi[3:-1] - phi[4:]) / 12.0  # d/di at lines
        sc = sliding_window_view(cen, 4, axis=1)[:, : len(cells)]
        dperp = np.einsum("ija,qa->ijq", sc, L) / h1
        return dperp, dpar
    dperp, dpar = _phi_gradient_on_edges(grid, block, phi.T, 2, lines, cells, s, h2, h1)
    return np.swapaxes(dpar, 0, 1), np.swapaxes(dperp, 0, 1)


def metric_face_velocities(grid: PhaseSpaceGrid, box: ConfigBox, efield: EfieldData,
                           species: SpeciesParams, k0=None, k1=None, mu=None, q=4) -> FaceVelocitySet:
    """Face integrals from face averages of N entries and pointwise u (product rule).

    The configuration-face metric factor is 2 pi R, folded into the field
    W = 2 pi R (u_R, u_Z); the face integrals of the remaining N entries are
    exact corner differences, which is what makes constant W divergence-free.
    """
    k0 = -1 if k0 is None else k0
    k1 = grid.n_v + 1 if k1 is None else k1
    mu = grid.mu_centers() if mu is None else np.asarray(mu, float)
    blk = box.block
    h1, h2 = grid.h(blk)
    i0, i1, j0, j1 = box.i0, box.i1, box.j0, box.j1
    flux = grid.geometry.flux
    vn = grid.v_bounds[0] + np.arange(k0, k1 + 1) * grid.dv
    v1, v2 = _v_cell_means(vn)
    s, w = gauss_unit(q)
    phi = efield.nodes(blk, i0 - 2, i1 + 2, j0 - 2, j1 + 2)
    out = []
    for axis in (1, 2):
        if axis == 1:
            lines, cells = np.arange(i0, i1 + 1), np.arange(j0 - 1, j1 + 1)
            x1 = lines[:, None, None] * h1 + 0 * s
            x2 = (cells[None, :, None] + s) * h2
            phi1, phi2 = _phi_gradient_on_edges(grid, blk, phi, 2, lines, cells, s, h1, h2)
        else:
            lines, cells = np.arange(j0, j1 + 1), np.arange(i0 - 1, i1 + 1)
            x1 = (cells[:, None, None] + s) * h1
            x2 = lines[None, :, None] * h2 + 0 * s
            phi1, phi2 = _phi_gradient_on_edges(grid, blk, phi, 1, lines, cells, s, h1, h2)
        X, d1, d2 = grid.mappings[blk].jacobian(x1, x2)
        J2 = d1[..., 0] * d2[..., 1] - d2[..., 0] * d1[..., 1]
        gR = (d2[..., 1] * phi1 - d1[..., 1] * phi2) / J2
        gZ = (-d2[..., 0] * phi1 + d1[..., 0] * phi2) / J2
        R, Zc = X[..., 0], X[..., 1]
        # u is a quadratic polynomial in v: average over each v cell exactly
        comps = _velocity_poly_terms(flux, species, R, Zc, (gR, gZ))
        Wavg = []
        for c in comps:  # each c: dict of arrays for coefficients of 1, v, v^2, mu, v*mu
            val = (c["1"][..., None, None] + c["v"][..., None, None] * v1[:, None]
                   + c["v2"][..., None, None] * v2[:, None] + c["mu"][..., None, None] * mu
                   + c["vmu"][..., None, None] * v1[:, None] * mu)
            val = 2 * np.pi * R[..., None, None] * val
            Wavg.append(np.einsum("ijq,ijqkm->ijkm", np.broadcast_to(w, R.shape), val))
        WR, WZ = Wavg[:2]
        if axis == 1:
            Xn = grid.node_positions(blk, lines[:, None], np.arange(j0 - 1, j1 + 2)[None, :])
            NR = np.diff(Xn[..., 1], axis=1)  # dZ along xi2
            NZ = -np.diff(Xn[..., 0], axis=1)
            dot = NR[..., None, None] * WR + NZ[..., None, None] * WZ
            corr = ((NR[:, 2:] - NR[:, :-2])[..., None, None] * (WR[:, 2:] - WR[:, :-2])
                    + (NZ[:, 2:] - NZ[:, :-2])[..., None, None] * (WZ[:, 2:] - WZ[:, :-2])) / 48
            F = (dot[:, 1:-1] + corr) * grid.dv
        else:
            Xn = grid.node_positions(blk, np.arange(i0 - 1, i1 + 2)[:, None], lines[None, :])
            NR = -np.diff(Xn[..., 1], axis=0)
            NZ = np.diff(Xn[..., 0], axis=0)
            dot = NR[..., None, None] * WR + NZ[..., None, None] * WZ
            corr = ((NR[2:] - NR[:-2])[..., None, None] * (WR[2:] - WR[:-2])
                    + (NZ[2:] - NZ[:-2])[..., None, None] * (WZ[2:] - WZ[:-2])) / 48
            F = (dot[1:-1] + corr) * grid.dv
        out.append(F)
    F1, F2 = out
    F0 = _metric_vface(grid, box, phi, species, vn, mu)
    return FaceVelocitySet(box, k0, k1, mu, F0, F1, F2, "metric")


def _v_cell_means(vn):
    d = np.diff(vn)
    return (vn[1:] ** 2 - vn[:-1] ** 2) / (2 * d), (vn[1:] ** 3 - vn[:-1] ** 3) / (3 * d)


def _velocity_poly_terms(flux, species, R, Z, grad_phi):
    """Coefficients of u_R, u_Z, u_v as polynomials in (v, mu): keys 1, v, v2, mu, vmu."""
    fld = eval_field(flux, R, Z)
    Zs, m, rho = species.Z, species.m, species.rho_L
    bphi = fld.b[1]
    cR, cZ = fld.curl_b[0], fld.curl_b[2]
    gp = (Zs * grad_phi[0], Zs * grad_phi[1])
    gb = (0.5 * fld.grad_B[0], 0.5 * fld.grad_B[1])
    zero = np.zeros_like(R)
    uR = {"1": (rho / Zs) * bphi * gp[1], "v": fld.B_R, "v2": rho * m / Zs * cR,
          "mu": (rho / Zs) * bphi * gb[1], "vmu": zero}
    uZ = {"1": -(rho / Zs) * bphi * gp[0], "v": fld.B_Z, "v2": rho * m / Zs * cZ,
          "mu": -(rho / Zs) * bphi * gb[0], "vmu": zero}
    s = rho * m / Zs
    uv = {"1": -(fld.B_R * gp[0] + fld.B_Z * gp[1]) / m,
          "v": -s * (cR * gp[0] + cZ * gp[1]) / m,
          "v2": zero,
          "mu": -(fld.B_R * gb[0] + fld.B_Z * gb[1]) / m,
          "vmu": -s * (cR * gb[0] + cZ * gb[1]) / m}
    return uR, uZ, uv


def _metric_vface(grid, box, phi, species, vn, mu, q=2):
    """v_par-face integrals <J><u_v> + product correction over xi1, xi2, on cells of ``box``."""
    blk = box.block
    h1, h2 = grid.h(blk)
    s, w = gauss_unit(q)
    ext = box.grow(1)
    I = np.arange(ext.i0, ext.i1, dtype=float)[:, None, None, None]
    J = np.arange(ext.j0, ext.j1, dtype=float)[None, :, None, None]
    X, d1, d2 = grid.mappings[blk].jacobian((I + s[:, None]) * h1, (J + s[None, :]) * h2)
    J2 = d1[..., 0] * d2[..., 1] - d2[..., 0] * d1[..., 1]
    n1, n2 = ext.shape
    st = _relative(sliding_window_view(phi, (4, 4))[:n1, :n2], 2)
    L, dL = lagrange4(s), lagrange4(s, 1)
    p1 = np.einsum("ijab,pa,qb->ijpq", st, dL, L) / h1
    p2 = np.einsum("ijab,pa,qb->ijpq", st, L, dL) / h2
    gR = (d2[..., 1] * p1 - d1[..., 1] * p2) / J2
    gZ = (-d2[..., 0] * p1 + d1[..., 0] * p2) / J2
    W = w[:, None] * w[None, :]
    Jbar = np.sum(W * 2 * np.pi * X[..., 0] * J2, axis=(-2, -1))
    terms = _velocity_poly_terms(grid.geometry.flux, species, X[..., 0], X[..., 1], (gR, gZ))[2]
    avg = {k: np.sum(W * v, axis=(-2, -1)) for k, v in terms.items()}
    vk = vn[None, None, :, None]
    muk = mu[None, None, None, :]
    U = (avg["1"][..., None, None] + avg["v"][..., None, None] * vk + avg["mu"][..., None, None] * muk
         + avg["vmu"][..., None, None] * vk * muk)
    Jb = Jbar[..., None, None]
    core = (slice(1, -1), slice(1, -1))
    F = Jb[core] * U[core]
    F = F + (Jb[2:, 1:-1] - Jb[:-2, 1:-1]) * (U[2:, 1:-1] - U[:-2, 1:-1]) / 48
    F = F + (Jb[1:-1, 2:] - Jb[1:-1, :-2]) * (U[1:-1, 2:] - U[1:-1, :-2]) / 48
    return F * h1 * h2


def face_velocities(grid, box, efield, species, mode="divfree", **kw) -> FaceVelocitySet:
    if mode == "divfree":
        return assemble_face_velocities(grid, box, efield, species, **kw)
    if mode == "metric":
        return metric_face_velocities(grid, box, efield, species, **kw)
    raise ConfigError(f"unknown velocity mode {mode!r}")
