"""Fourth-order finite-volume evaluation of the mapped gyrokinetic Vlasov operator.

Face fluxes combine face-integrated velocities (per unit mu) with face
averages of f through the product rule

    F = U <f> + (1/48) sum_t (U[+t] - U[-t]) (<f>[+t] - <f>[-t])

where t runs over the directions transverse to the face (both remaining
phase directions plus mu).  The right-hand side is the negative alternating
face sum divided by the cell volume V_config * dv.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .block_mapping import BLOCKS, TopologyError
from .phase_space import ConfigError, DistributionField, ExchangeError, PhaseSpaceGrid, SpeciesParams, gauss_unit
from .velocity_divfree import ConfigBox, EfieldData, FaceVelocitySet, face_velocities

log = logging.getLogger(__name__)

RECON_MODES = ("centered", "weno5", "limited")
BOUNDARY_MODES = ("ghost", "zero_inflow")


class IntegrationError(RuntimeError):
    pass


def _take(a, axis, start, stop):
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    return a[tuple(sl)]


# ---------------------------------------------------------------------------
# reconstruction


def _weno_candidates(fm2, fm1, f0, fp1, fp2):
    """Left-biased third-order candidates and Jiang-Shu indicators for face i+1/2."""
    q0 = (2 * fm2 - 7 * fm1 + 11 * f0) / 6
    q1 = (-fm1 + 5 * f0 + 2 * fp1) / 6
    q2 = (2 * f0 + 5 * fp1 - fp2) / 6
    b0 = 13 / 12 * (fm2 - 2 * fm1 + f0) ** 2 + 0.25 * (fm2 - 4 * fm1 + 3 * f0) ** 2
    b1 = 13 / 12 * (fm1 - 2 * f0 + fp1) ** 2 + 0.25 * (fm1 - fp1) ** 2
    b2 = 13 / 12 * (f0 - 2 * fp1 + fp2) ** 2 + 0.25 * (3 * f0 - 4 * fp1 + fp2) ** 2
    return (q0, q1, q2), (b0, b1, b2)


def _weno5_left(fm2, fm1, f0, fp1, fp2, eps=1e-36):
    (q0, q1, q2), (b0, b1, b2) = _weno_candidates(fm2, fm1, f0, fp1, fp2)
    # WENO-Z weights keep the fifth-order value on smooth data
    tau = np.abs(b0 - b2)
    a0 = 0.1 * (1 + tau / (b0 + eps))
    a1 = 0.6 * (1 + tau / (b1 + eps))
    a2 = 0.3 * (1 + tau / (b2 + eps))
    return (a0 * q0 + a1 * q1 + a2 * q2) / (a0 + a1 + a2)


def _limited(fm1, f0, fp1, fp2, eps=1e-36):
    """Centered value as a smoothness-weighted mix of the two symmetric cubic-stencil halves."""
    qL = (-fm1 + 5 * f0 + 2 * fp1) / 6
    qR = (2 * f0 + 5 * fp1 - fp2) / 6
    bL = 13 / 12 * (fm1 - 2 * f0 + fp1) ** 2 + 0.25 * (fm1 - fp1) ** 2
    bR = 13 / 12 * (f0 - 2 * fp1 + fp2) ** 2 + 0.25 * (f0 - fp2) ** 2
    scale = (np.abs(fm1) + np.abs(f0) + np.abs(fp1) + np.abs(fp2)) ** 2 * 1e-12 + eps
    tau = np.abs(bL - bR)
    aL = 0.5 * (1 + (tau / (bL + scale)) ** 2)
    aR = 0.5 * (1 + (tau / (bR + scale)) ** 2)
    return (aL * qL + aR * qR) / (aL + aR)


def reconstruct_face_f(f, axis, lo, hi, mode="centered", velocity=None):
    """Face averages of f between cells c and c+1 along ``axis`` for c in [lo, hi).

    ``f`` holds cell averages.  Centered and limited modes read cells
    c-1..c+2, WENO5 reads c-2..c+3 and picks the upwind side from the sign
    of ``velocity`` (broadcastable to the output).
    """
    n = f.shape[axis]
    reach = (2, 3) if mode == "weno5" else (1, 2)
    if mode not in RECON_MODES:
        raise ConfigError(f"unknown reconstruction mode {mode!r}")
    if lo - reach[0] < 0 or hi - 1 + reach[1] >= n:
        raise ConfigError(f"{mode} reconstruction needs cells [{lo - reach[0]}, {hi - 1 + reach[1]}] of {n}")
    s = {d: _take(f, axis, lo + d, hi + d) for d in range(-reach[0], reach[1] + 1)}
    if mode == "centered":
        return (7 / 12) * (s[0] + s[1]) - (1 / 12) * (s[-1] + s[2])
    if mode == "limited":
        return _limited(s[-1], s[0], s[1], s[2])
    if velocity is None:
        raise ConfigError("weno5 reconstruction needs face velocities")
    left = _weno5_left(s[-2], s[-1], s[0], s[1], s[2])
    right = _weno5_left(s[3], s[2], s[1], s[0], s[-1])
    return np.where(np.asarray(velocity) >= 0, left, right)


def face_average_product(a, b, transverse):
    """Fourth-order face average of a product from face averages of the factors.

    ``a`` and ``b`` carry one extra layer on each side of every axis in
    ``transverse``; the result drops those layers.
    """
    core = [slice(None)] * a.ndim
    for t in transverse:
        core[t] = slice(1, -1)
    out = a[tuple(core)] * b[tuple(core)]
    for t in transverse:
        plus, minus = list(core), list(core)
        plus[t], minus[t] = slice(2, None), slice(None, -2)
        out = out + (a[tuple(plus)] - a[tuple(minus)]) * (b[tuple(plus)] - b[tuple(minus)]) / 48
    return out


# ---------------------------------------------------------------------------
# box-level flux assembly


@dataclass
class FaceFluxSet:
    """One-sided face fluxes of a configuration box over valid v and mu cells.

    F0[i, j, k, m]: v face at node k of cell (i, j); shape (n1, n2, n_v + 1, n_mu)
    F1[i, j, k, m]: radial face at node line i0 + i; shape (n1 + 1, n2, n_v, n_mu)
    F2[i, j, k, m]: poloidal face at node line j0 + j; shape (n1, n2 + 1, n_v, n_mu)
    Each value is integrated over the face and over the mu cell.
    """

    box: ConfigBox
    F0: np.ndarray
    F1: np.ndarray
    F2: np.ndarray
    U: tuple | None = None  # face velocities on the same faces (times dmu)

    def divergence(self):
        """Alternating face sums per cell (outward positive)."""
        return ((self.F0[:, :, 1:] - self.F0[:, :, :-1]) + (self.F1[1:] - self.F1[:-1])
                + (self.F2[:, 1:] - self.F2[:, :-1]))


def box_velocities(grid: PhaseSpaceGrid, box: ConfigBox, efield: EfieldData, species: SpeciesParams,
                   vmode="divfree") -> FaceVelocitySet:
    """Face velocities on ``box`` grown by one cell, v cells [-1, n_v + 1), all mu cells."""
    return face_velocities(grid, box.grow(1), efield, species, mode=vmode,
                           k0=-1, k1=grid.n_v + 1, mu=grid.mu_centers())


def box_fluxes(grid: PhaseSpaceGrid, box: ConfigBox, fpad, halo: int, vel: FaceVelocitySet,
               recon="centered") -> FaceFluxSet:
    """Product-rule fluxes on every face of ``box``.

    ``fpad`` holds cell averages on configuration cells ``box.grow(halo)`` with
    the grid's v and mu pads; ``vel`` comes from ``box_velocities``.
    """
    g, gm = grid.ghost, grid.mu_ghost
    n1, n2 = box.shape
    nv, nm = grid.n_v, grid.n_mu
    H = halo
    need = 3 if recon == "weno5" else 2
    if H < need or g < need or gm < 1:
        raise ConfigError(f"{recon} reconstruction needs {need} ghost layers")
    if vel.box != box.grow(1) or vel.k0 != -1 or vel.k1 != nv + 1:
        raise ConfigError("velocity set does not match the flux box")
    expect = (n1 + 2 * H, n2 + 2 * H, nv + 2 * g, nm + 2 * gm)
    if fpad.shape != expect:
        raise ConfigError(f"padded f has shape {fpad.shape}, expected {expect}")
    f = fpad[..., gm - 1 : gm + nm + 1]
    dmu = grid.dmu
    # radial faces: node lines i0..i1, transverse cells j0-1..j1, v -1..n_v, mu all
    U = vel.F1[1:-1]
    fs = f[:, H - 1 : H + n2 + 1, g - 1 : g + nv + 1]
    ff = reconstruct_face_f(fs, 0, H - 1, H + n1, recon, U)
    F1 = face_average_product(U, ff, (1, 2, 3)) * dmu
    # poloidal faces
    U = vel.F2[:, 1:-1]
    fs = f[H - 1 : H + n1 + 1, :, g - 1 : g + nv + 1]
    ff = reconstruct_face_f(fs, 1, H - 1, H + n2, recon, U)
    F2 = face_average_product(U, ff, (0, 2, 3)) * dmu
    # v faces: nodes 0..n_v
    U = vel.F0[:, :, 1:-1]
    fs = f[H - 1 : H + n1 + 1, H - 1 : H + n2 + 1]
    ff = reconstruct_face_f(fs, 2, g - 1, g + nv, recon, U)
    F0 = face_average_product(U, ff, (0, 1, 3)) * dmu
    Us = (vel.F0[1:-1, 1:-1, 1:-1, 1:-1], vel.F1[1:-1, 1:-1, 1:-1, 1:-1], vel.F2[1:-1, 1:-1, 1:-1, 1:-1])
    Us = tuple(u * dmu for u in Us)
    return FaceFluxSet(box, F0, F1, F2, Us)


def phase_volumes(grid: PhaseSpaceGrid, box: ConfigBox, q=4):
    """Phase-cell volumes V_config * dv * dmu of a box, shape (n1, n2)."""
    I, J = np.meshgrid(np.arange(box.i0, box.i1), np.arange(box.j0, box.j1), indexing="ij")
    return grid.config_volumes(box.block, I, J, q) * grid.dv * grid.dmu


def rhs_from_fluxes(grid: PhaseSpaceGrid, fluxes: FaceFluxSet, volumes=None):
    """Cell averages of d(B*_par f)/dt = -(face sum) / volume."""
    V = phase_volumes(grid, fluxes.box) if volumes is None else volumes
    return -fluxes.divergence() / V[:, :, None, None]


def zero_inflow(F, U_sign_outward):
    """Boundary flux with inflow suppressed; ``U_sign_outward`` > 0 marks outflow."""
    return np.where(U_sign_outward > 0, F, 0.0)


def average_interface_fluxes(a, b, orientation=1):
    """Arithmetic mean of two one-sided interface fluxes, ``b`` aligned by ``orientation``."""
    if orientation not in (1, -1):
        raise TopologyError(f"bad interface orientation {orientation}")
    b = b if orientation == 1 else b[::-1]
    if a.shape != b.shape:
        raise TopologyError(f"interface flux shapes differ: {a.shape} vs {b.shape}")
    return 0.5 * (a + b)


def _edge_view(fl: FaceFluxSet, edge):
    return {"xlo": fl.F1[0], "xhi": fl.F1[-1], "ylo": fl.F2[:, 0], "yhi": fl.F2[:, -1]}[edge]


def _set_edge(fl: FaceFluxSet, edge, val):
    if edge == "xlo":
        fl.F1[0] = val
    elif edge == "xhi":
        fl.F1[-1] = val
    elif edge == "ylo":
        fl.F2[:, 0] = val
    else:
        fl.F2[:, -1] = val


def average_block_interfaces(grid: PhaseSpaceGrid, fluxes: dict):
    """Make every interblock face flux single-valued (in place)."""
    for a, ea, b, eb in grid.topology.interfaces():
        ln = grid.topology.link(a, ea)
        m = average_interface_fluxes(_edge_view(fluxes[a], ea), _edge_view(fluxes[b], eb), ln.orientation)
        _set_edge(fluxes[a], ea, m)
        _set_edge(fluxes[b], eb, m if ln.orientation == 1 else m[::-1])
    return fluxes


def apply_zero_inflow(grid: PhaseSpaceGrid, block, fl: FaceFluxSet):
    """Suppress inflow through the physical faces of a full-block flux set (in place)."""
    U0, U1, U2 = fl.U
    for edge in ("xlo", "xhi", "ylo", "yhi"):
        if not grid.topology.link(block, edge).physical:
            continue
        sign = 1 if edge.endswith("hi") else -1
        u = _edge_view(FaceFluxSet(fl.box, U0, U1, U2), edge)
        _set_edge(fl, edge, zero_inflow(_edge_view(fl, edge), sign * u))
    fl.F0[:, :, 0] = zero_inflow(fl.F0[:, :, 0], -U0[:, :, 0])
    fl.F0[:, :, -1] = zero_inflow(fl.F0[:, :, -1], U0[:, :, -1])
    return fl


def physical_boundary_flux(grid: PhaseSpaceGrid, fluxes: dict):
    """Net outward flux through all physical faces (config edges and v_par ends)."""
    total = 0.0
    for b, fl in fluxes.items():
        for edge in ("xlo", "xhi", "ylo", "yhi"):
            if grid.topology.link(b, edge).physical:
                sign = 1 if edge.endswith("hi") else -1
                total += sign * np.sum(_edge_view(fl, edge))
        total += np.sum(fl.F0[:, :, -1]) - np.sum(fl.F0[:, :, 0])
    return total


def block_box(grid: PhaseSpaceGrid, block) -> ConfigBox:
    return ConfigBox(block, 0, grid.n_rad, 0, grid.n_pol(block))


def block_velocities(grid: PhaseSpaceGrid, efield: EfieldData, species: SpeciesParams, vmode="divfree",
                     workers=1) -> dict:
    """Face velocities of every block, reusable across right-hand-side evaluations."""
    def one(b):
        return b, box_velocities(grid, block_box(grid, b), efield, species, vmode)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as ex:
        return dict(ex.map(one, BLOCKS))


def vlasov_fluxes(fld: DistributionField, velocities: dict, recon="centered", boundary="zero_inflow",
                  workers=1) -> dict:
    """Single-valued face fluxes of every block."""
    grid = fld.grid
    if boundary not in BOUNDARY_MODES:
        raise ConfigError(f"unknown boundary mode {boundary!r}")
    if not fld.ghosts_current:
        raise ExchangeError("ghost cells are stale; exchange before evaluating the operator")

    def one(b):
        fl = box_fluxes(grid, block_box(grid, b), fld.data[b], grid.ghost, velocities[b], recon)
        if boundary == "zero_inflow":
            apply_zero_inflow(grid, b, fl)
        return b, fl

    with ThreadPoolExecutor(max_workers=max(1, workers)) as ex:
        fluxes = dict(ex.map(one, BLOCKS))
    return average_block_interfaces(grid, fluxes)


def apply_vlasov(fld: DistributionField, efield: EfieldData | None = None, species: SpeciesParams | None = None,
                 vmode="divfree", recon="centered", boundary="zero_inflow", velocities=None, workers=1) -> dict:
    """Right-hand side d(B*_par f)/dt on the valid cells of every block.

    Either ``efield`` (with ``species``) or precomputed ``velocities`` must be given.
    """
    grid = fld.grid
    if velocities is None:
        if efield is None:
            raise ConfigError("apply_vlasov needs an electric field or precomputed velocities")
        velocities = block_velocities(grid, efield, species or fld.species, vmode, workers)
    fluxes = vlasov_fluxes(fld, velocities, recon, boundary, workers)
    return {b: rhs_from_fluxes(grid, fl) for b, fl in fluxes.items()}


# ---------------------------------------------------------------------------
# metric identities


def metric_divergence(mapping, n1, n2, field, q=4):
    """Cell-averaged planar divergence of ``field`` from metric face fluxes.

    Face normals integrate exactly to corner differences, the field is face
    averaged by q-point Gauss quadrature, and the two are combined with the
    product rule.  Returns (flux sums / cell area in xi, sum of |face terms|).
    ``mapping`` needs ``__call__(xi1, xi2)`` returning points (..., 2).
    """
    h1, h2 = 1.0 / n1, 1.0 / n2
    s, w = gauss_unit(q)
    i = np.arange(-1, n1 + 2)
    j = np.arange(-1, n2 + 2)
    X = mapping(i[:, None] * h1, j[None, :] * h2)  # nodes with one ghost layer
    # radial faces: node line i, cell j; <N1> = (dZ, -dR) along the face
    dX2 = X[:, 1:] - X[:, :-1]
    N1 = np.stack([dX2[..., 1], -dX2[..., 0]], -1)
    x1, x2 = np.broadcast_arrays(i[:, None, None] * h1, (j[None, :-1, None] + s) * h2)
    u1 = np.einsum("q,ijqc->ijc", w, np.asarray(field(*np.moveaxis(mapping(x1, x2), -1, 0))).transpose(1, 2, 3, 0))
    dX1 = X[1:] - X[:-1]
    N2 = np.stack([-dX1[..., 1], dX1[..., 0]], -1)
    y1, y2 = np.broadcast_arrays((i[:-1, None, None] + s) * h1, j[None, :, None] * h2)
    u2 = np.einsum("q,ijqc->ijc", w, np.asarray(field(*np.moveaxis(mapping(y1, y2), -1, 0))).transpose(1, 2, 3, 0))
    G1 = N1[..., 0] * u1[..., 0] + N1[..., 1] * u1[..., 1]
    G1 = G1[1:-1, 1:-1] + sum(
        (N1[1:-1, 2:, c] - N1[1:-1, :-2, c]) * (u1[1:-1, 2:, c] - u1[1:-1, :-2, c]) for c in (0, 1)) / 48
    G2 = N2[..., 0] * u2[..., 0] + N2[..., 1] * u2[..., 1]
    G2 = G2[1:-1, 1:-1] + sum(
        (N2[2:, 1:-1, c] - N2[:-2, 1:-1, c]) * (u2[2:, 1:-1, c] - u2[:-2, 1:-1, c]) for c in (0, 1)) / 48
    div = (G1[1:] - G1[:-1]) + (G2[:, 1:] - G2[:, :-1])
    mag = np.abs(G1[1:]) + np.abs(G1[:-1]) + np.abs(G2[:, 1:]) + np.abs(G2[:, :-1])
    return div / (h1 * h2), mag / (h1 * h2)


def freestream_check(grid: PhaseSpaceGrid, vector=(1.0, 0.5)) -> float:
    """Max relative metric divergence of a constant planar vector field over all blocks."""
    c = np.asarray(vector, float)

    def field(R, Z):
        return (np.full_like(R, c[0]), np.full_like(R, c[1]))

    worst = 0.0
    for b in BLOCKS:
        div, mag = metric_divergence(grid.mappings[b], grid.n_rad, grid.n_pol(b), field)
        worst = max(worst, float(np.max(np.abs(div) / mag)))
    return worst


# ---------------------------------------------------------------------------
# time integration (demo driver)


def advance_rk4(fld: DistributionField, dt: float, n_steps: int, rhs, exchange):
    """Classical four-stage Runge-Kutta update of the stored cell averages.

    ``rhs(fld)`` returns {block: df/dt on valid cells}; ``exchange(fld)``
    refreshes the ghosts of a field whose valid data changed.  Returns a new field.
    """
    if dt == 0 or n_steps == 0:
        return fld.copy()
    cur = fld.copy()
    for step in range(n_steps):
        base = {b: cur.valid(b).copy() for b in BLOCKS}
        acc = {b: np.zeros_like(a) for b, a in base.items()}
        stage = cur
        for c, wgt in ((0.0, 1 / 6), (0.5, 1 / 3), (0.5, 1 / 3), (1.0, 1 / 6)):
            if c:
                stage = cur.copy()
                for b in BLOCKS:
                    stage.valid(b)[...] = base[b] + c * dt * k[b]
                stage.mark_modified()
                exchange(stage)
            k = rhs(stage)
            for b in BLOCKS:
                acc[b] += wgt * k[b]
        for b in BLOCKS:
            new = base[b] + dt * acc[b]
            if not np.all(np.isfinite(new)):
                raise IntegrationError(f"non-finite values in block {b} at step {step}")
            cur.valid(b)[...] = new
        cur.mark_modified()
        exchange(cur)
    return cur
