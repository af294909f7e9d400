"""Truncation-error verification against the Boltzmann equilibrium.

The Vlasov operator annihilates the Boltzmann equilibrium analytically, so the
discrete right-hand side evaluated on its exact cell averages is pure
truncation error.  The error is measured on windows around a fixed set of
coarse test cells, refined with the grid; each window is evaluated exactly as
a full-domain run would evaluate it (extrablock ghosts are interpolated from
donor cells of neighboring blocks, interface fluxes are averaged with the
neighbor's one-sided flux), but only the data a window needs is built.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .block_mapping import (BLOCKS, MappingResolution, _atomic_write_text, build_mappings,
                            generate_mapping_grids, x_corner)
from .fv_operator import FaceFluxSet, average_interface_fluxes, box_fluxes, box_velocities, phase_volumes
from .multiblock_exchange import COPY, LSQ, PHYSICAL, VALID, DonorIndex, build_stencil, classify_cell, stencil_values
from .phase_space import (BoltzmannEquilibrium, ConfigError, GridLevel, PhaseSpaceGrid, SpeciesParams,
                          build_phase_grid, tanh_density)
from .velocity_divfree import ConfigBox, EfieldData, assemble_face_velocities, velocity_moments

log = logging.getLogger(__name__)

CLASSES = ("interior", "boundary-interior", "corner")


@dataclass(frozen=True)
class TestCell:
    cell_id: int
    block: str
    i: int
    j: int
    cls: str
    x_adjacent: bool = False
    where: str = ""

    def refined(self, level: int) -> ConfigBox:
        """Configuration cells covering this coarse cell on grid level ``level``."""
        s = 2 ** (level - 1)
        return ConfigBox(self.block, self.i * s, (self.i + 1) * s, self.j * s, (self.j + 1) * s)


# Coarse (level 1) placement.  LCORE has its X point at the (8, 8) corner and
# meets MCORE across ylo; the MCORE cells sit in its upper half, near LCORE.
DEFAULT_TEST_CELLS = (
    TestCell(0, "LCORE", 3, 3, "interior", where="block interior"),
    TestCell(1, "LCORE", 0, 3, "boundary-interior", where="inner core boundary"),
    TestCell(2, "LCORE", 3, 0, "boundary-interior", where="interface with MCORE"),
    TestCell(3, "LCORE", 7, 3, "boundary-interior", where="separatrix"),
    TestCell(4, "LCORE", 3, 7, "boundary-interior", where="cut toward RCORE"),
    TestCell(5, "LCORE", 0, 0, "corner", where="inner boundary / MCORE"),
    TestCell(6, "LCORE", 7, 0, "corner", where="separatrix / MCORE"),
    TestCell(7, "LCORE", 0, 7, "corner", where="inner boundary / cut"),
    TestCell(8, "LCORE", 7, 7, "corner", True, where="X point"),
    TestCell(9, "MCORE", 3, 40, "interior", where="block interior"),
    TestCell(10, "MCORE", 0, 40, "boundary-interior", where="inner core boundary"),
    TestCell(11, "MCORE", 7, 40, "boundary-interior", where="separatrix"),
    TestCell(12, "MCORE", 3, 30, "interior", where="block interior"),
    TestCell(13, "MCORE", 7, 30, "boundary-interior", where="separatrix"),
    TestCell(14, "MCORE", 0, 30, "boundary-interior", where="inner core boundary"),
    TestCell(15, "MCORE", 3, 47, "boundary-interior", where="interface with LCORE"),
    TestCell(16, "MCORE", 0, 47, "corner", where="inner boundary / LCORE"),
    TestCell(17, "MCORE", 7, 47, "corner", where="separatrix / LCORE"),
)


def truncation_tau(r, volumes):
    """Volume-weighted mean of |r|; ``volumes`` broadcasts against ``r``."""
    r = np.asarray(r, float)
    V = np.broadcast_to(np.asarray(volumes, float), r.shape)
    if r.size == 0 or V.sum() <= 0:
        raise ConfigError("empty index set for the truncation error")
    return float(np.sum(np.abs(r) * V) / np.sum(V))


def fit_orders(h, tau):
    """Two-point orders between consecutive levels and the least-squares slope of log tau vs log h."""
    h = np.asarray(h, float)
    tau = np.asarray(tau, float)
    if h.size < 2:
        raise ConfigError("an order needs at least two levels")
    with np.errstate(divide="ignore", invalid="ignore"):
        pair = np.log(tau[:-1] / tau[1:]) / np.log(h[:-1] / h[1:])
        slope = float(np.polyfit(np.log(h), np.log(tau), 1)[0]) if np.all(tau > 0) else float("nan")
    return [float(p) for p in pair], slope


# ---------------------------------------------------------------------------
# window evaluation


class WindowContext:
    """Everything needed to evaluate the operator on windows of one grid level."""

    def __init__(self, grid: PhaseSpaceGrid, species: SpeciesParams | None = None, density=tanh_density,
                 quad=4, halo=3):
        self.grid = grid
        self.species = species or SpeciesParams()
        self.eq = BoltzmannEquilibrium(grid.geometry, self.species, density)
        self.quad = quad
        self.halo = halo
        g = grid.ghost
        phi = {}
        for b in BLOCKS:
            ni = np.arange(-g, grid.n_rad + g + 1)
            nj = np.arange(-g, grid.n_pol(b) + g + 1)
            X = grid.node_positions(b, ni[:, None], nj[None, :])
            phi[b] = self.eq.potential(X[..., 0], X[..., 1])
        self.efield = EfieldData(phi, g)
        self._index = None
        self._stencils = {}
        self._donor = {}

    @property
    def index(self) -> DonorIndex:
        if self._index is None:
            self._index = DonorIndex(self.grid)
        return self._index

    def stencil(self, block, i, j):
        key = (block, i, j)
        if key not in self._stencils:
            self._stencils[key] = build_stencil(self.grid, self.index, block, i, j)
        return self._stencils[key]

    def analytic(self, block, I, J):
        return self.eq.cell_averages(self.grid, block, np.asarray(I), np.asarray(J), self.quad)

    def donor(self, block, i, j):
        key = (block, i, j)
        if key not in self._donor:
            self._donor[key] = self.analytic(block, i, j)
        return self._donor[key]

    def window_field(self, box: ConfigBox, extrablock="interpolate"):
        """Padded cell averages on ``box.grow(halo)``.

        Valid and physical-ghost cells take the exact averages; extrablock
        ghosts are copied or interpolated from exact donor averages, or with
        ``extrablock='exact'`` also take the exact averages of their own image.
        """
        H, b = self.halo, box.block
        pb = box.grow(H)
        I, J = np.meshgrid(np.arange(pb.i0, pb.i1), np.arange(pb.j0, pb.j1), indexing="ij")
        out = self.analytic(b, I, J)
        if extrablock == "exact":
            return out
        for a in range(I.shape[0]):
            for c in range(I.shape[1]):
                i, j = int(I[a, c]), int(J[a, c])
                if classify_cell(self.grid, b, i, j) not in (VALID, PHYSICAL):
                    out[a, c] = stencil_values(self.stencil(b, i, j), self.donor)
        return out

    def one_sided(self, box: ConfigBox, vmode="divfree", recon="centered", extrablock="interpolate"):
        vel = box_velocities(self.grid, box, self.efield, self.species, vmode)
        return box_fluxes(self.grid, box, self.window_field(box, extrablock), self.halo, vel, recon)

    def fluxes(self, box: ConfigBox, vmode="divfree", recon="centered", extrablock="interpolate") -> FaceFluxSet:
        """Window fluxes with interface faces averaged against the neighbor block."""
        fl = self.one_sided(box, vmode, recon, extrablock)
        grid, b = self.grid, box.block
        n1, n2 = grid.n_rad, grid.n_pol(b)
        for edge, touches in (("xlo", box.i0 == 0), ("xhi", box.i1 == n1),
                              ("ylo", box.j0 == 0), ("yhi", box.j1 == n2)):
            ln = grid.topology.link(b, edge)
            if not touches or ln.physical:
                continue
            nb = ln.neighbor
            m1, m2 = grid.n_rad, grid.n_pol(nb)
            if edge == "xlo":
                strip = ConfigBox(nb, m1 - 1, m1, box.j0, box.j1)
            elif edge == "xhi":
                strip = ConfigBox(nb, 0, 1, box.j0, box.j1)
            elif edge == "ylo":
                strip = ConfigBox(nb, box.i0, box.i1, m2 - 1, m2)
            else:
                strip = ConfigBox(nb, box.i0, box.i1, 0, 1)
            other = self.one_sided(strip, vmode, recon, extrablock)
            if edge == "xlo":
                fl.F1[0] = average_interface_fluxes(fl.F1[0], other.F1[-1], ln.orientation)
            elif edge == "xhi":
                fl.F1[-1] = average_interface_fluxes(fl.F1[-1], other.F1[0], ln.orientation)
            elif edge == "ylo":
                fl.F2[:, 0] = average_interface_fluxes(fl.F2[:, 0], other.F2[:, -1], ln.orientation)
            else:
                fl.F2[:, -1] = average_interface_fluxes(fl.F2[:, -1], other.F2[:, 0], ln.orientation)
        return fl

    def rhs(self, box: ConfigBox, **kw):
        """(r, V) on a window: right-hand side and phase-cell volumes."""
        fl = self.fluxes(box, **kw)
        V = phase_volumes(self.grid, box)
        return -fl.divergence() / V[:, :, None, None], V


# ---------------------------------------------------------------------------
# studies


@dataclass
class TauReport:
    """Truncation errors per test cell and level, with fitted orders."""

    levels: list
    h: list
    tau: dict  # cell_id -> [tau per level]
    cells: list
    pair_orders: dict = field(default_factory=dict)
    slopes: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def finest_order(self, cell_id):
        p = self.pair_orders.get(cell_id)
        return p[-1] if p else float("nan")


def level_grid(geometry, mappings, level: int, **kw) -> PhaseSpaceGrid:
    return build_phase_grid(geometry, mappings, GridLevel.from_level(level), **kw)


def convergence_study(geometry, mappings, levels=(1, 2, 3), cells=DEFAULT_TEST_CELLS, vmode="divfree",
                      recon="centered", species=None, quad=4, contexts=None) -> TauReport:
    """Truncation error at every test cell on each level; orders from consecutive levels."""
    levels = list(levels)
    if len(levels) < 2:
        raise ConfigError("a convergence study needs at least two levels")
    tau = {c.cell_id: [] for c in cells}
    for m in levels:
        ctx = contexts.get(m) if contexts else None
        ctx = ctx or WindowContext(level_grid(geometry, mappings, m), species, quad=quad)
        for c in cells:
            r, V = ctx.rhs(c.refined(m), vmode=vmode, recon=recon)
            tau[c.cell_id].append(truncation_tau(r, V[:, :, None, None]))
            log.info("level %d cell %d: tau = %.6e", m, c.cell_id, tau[c.cell_id][-1])
    h = [2.0 ** -(m - 1) for m in levels]
    rep = TauReport(levels, h, tau, [asdict(c) for c in cells],
                    meta={"velocity_mode": vmode, "reconstruction": recon, "quadrature": quad})
    for cid, t in tau.items():
        rep.pair_orders[cid], rep.slopes[cid] = fit_orders(h, t)
    return rep


def compare_velocity_formulations(geometry, mappings, levels=(1, 2, 3), cells=DEFAULT_TEST_CELLS, **kw):
    """Paired reports for the divergence-free and the metric velocity discretizations."""
    contexts = {m: WindowContext(level_grid(geometry, mappings, m), kw.get("species"), quad=kw.get("quad", 4))
                for m in levels}
    kw = {k: v for k, v in kw.items() if k not in ("species", "quad")}
    return {mode: convergence_study(geometry, mappings, levels, cells, vmode=mode, contexts=contexts, **kw)
            for mode in ("divfree", "metric")}


def nearest_velocity_index(grid: PhaseSpaceGrid, v=0.5, mu=0.5):
    """Index (k, l) of the valid (v_par, mu) cell whose center is nearest (v, mu)."""
    vc = grid.v_bounds[0] + (np.arange(grid.n_v) + 0.5) * grid.dv
    mc = grid.mu_bounds[0] + (np.arange(grid.n_mu) + 0.5) * grid.dmu
    return int(np.argmin(np.abs(vc - v))), int(np.argmin(np.abs(mc - mu)))


def x_windows(grid: PhaseSpaceGrid, width: int):
    """Boxes of width x width cells touching the X point in every block that reaches it."""
    out = []
    for b in BLOCKS:
        n1, n2 = grid.n_rad, grid.n_pol(b)
        xc = x_corner(b, n1, n2)
        if xc is None:
            continue
        i0 = n1 - width if xc[0] else 0
        j0 = n2 - width if xc[1] else 0
        out.append(ConfigBox(b, i0, i0 + width, j0, j0 + width))
    return out


@dataclass
class PollutionResult:
    n_core: int
    max_tau: float
    rows: list  # (block, i, j, R, Z, tau)


def pollution_study(n_cores=(32, 64, 128, 256), compute_level=3, mapping_n_rad=None, window=4,
                    velocity=(0.5, 0.5), vmode="divfree", species=None, quad=4, geometry=None):
    """Near-X truncation error at one velocity cell as the mapping grid is refined poloidally.

    The compute grid is fixed; the radial mapping resolution defaults to the
    compute grid's so that only the poloidal mapping resolution varies.
    """
    lvl = GridLevel.from_level(compute_level)
    n_rad = mapping_n_rad or lvl.n_rad
    results = []
    for nc in n_cores:
        res = MappingResolution.covering(n_rad, nc, lvl.n_rad, lvl.n_x)
        mg = generate_mapping_grids(geometry, res)
        grid = build_phase_grid(mg.geometry, build_mappings(mg), lvl)
        ctx = WindowContext(grid, species, quad=quad)
        k, l = nearest_velocity_index(grid, *velocity)
        rows = []
        for box in x_windows(grid, window * 2 ** (compute_level - 1) // 4 or 1):
            r, _ = ctx.rhs(box, vmode=vmode)
            I, J = np.meshgrid(np.arange(box.i0, box.i1), np.arange(box.j0, box.j1), indexing="ij")
            h1, h2 = grid.h(box.block)
            X = grid.mappings[box.block]((I + 0.5) * h1, (J + 0.5) * h2)
            for a in range(I.shape[0]):
                for c in range(I.shape[1]):
                    rows.append((box.block, int(I[a, c]), int(J[a, c]), float(X[a, c, 0]), float(X[a, c, 1]),
                                 float(abs(r[a, c, k, l]))))
        mx = max(row[-1] for row in rows)
        log.info("pollution n_core=%d: max tau %.6e", nc, mx)
        results.append(PollutionResult(nc, mx, rows))
    return results


def streaming_cancellation(grid: PhaseSpaceGrid, efield: EfieldData, species: SpeciesParams, blocks=BLOCKS,
                           aligned_radius=15.0):
    """Largest parallel-streaming integral on aligned radial faces relative to the largest on poloidal faces.

    Radial faces lie on level sets of the blended flux, which equals the true
    flux once the blend has saturated; faces with both corners at least
    ``aligned_radius`` blend lengths from the X point count as aligned.  There
    the streaming term is a difference of two equal corner values of the
    shifted flux and cancels to round-off.  Returns {block: ratio}; blocks
    without aligned faces are omitted.
    """
    geo = grid.geometry
    x = geo.xpt
    cutoff = aligned_radius * geo.blend.D
    out = {}
    vn = grid.v_bounds[0] + np.arange(grid.n_v + 1) * grid.dv
    eta2, _ = velocity_moments(vn)
    for b in blocks:
        box = ConfigBox(b, 0, grid.n_rad, 0, grid.n_pol(b))
        fv = assemble_face_velocities(grid, box, efield, species, k0=0, k1=grid.n_v, keep_parts=True)
        psi = fv.parts["edges"].psi
        X = grid.node_positions(b, np.arange(grid.n_rad + 1)[:, None], np.arange(grid.n_pol(b) + 1)[None, :])
        Rb, Zb = x.frame(X[..., 0], X[..., 1])
        far = np.hypot(Rb, Zb) >= cutoff
        aligned = far[:, :-1] & far[:, 1:]
        if not aligned.any():
            continue
        radial = np.abs(fv.parts["streaming_F1"])[aligned]
        poloidal = np.abs(2 * np.pi * (psi[:-1] - psi[1:])[..., None] * eta2)
        out[b] = float(radial.max() / poloidal.max())
    return out


# ---------------------------------------------------------------------------
# output


POLLUTION_THRESHOLD = 2e-8


def _g17(x):
    return f"{x:.17g}"


def _csv_text(header, rows):
    import io
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_g17(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def reference_slopes(h, tau_anchor, orders=(3, 4)):
    """Reference lines tau_anchor * (h / h[0])**p, for drawing alongside measured errors."""
    h = np.asarray(h, float)
    return {p: [float(tau_anchor * (x / h[0]) ** p) for x in h] for p in orders}


def write_tau_report(rep: TauReport, out_dir, mapping_resolution=None):
    """tau.csv (one row per cell and level), slopes.csv, reference.csv and run.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cls = {c["cell_id"]: c["cls"] for c in rep.cells}
    rows = []
    for cid, taus in rep.tau.items():
        orders = [float("nan")] + rep.pair_orders[cid]
        for m, h, t, p in zip(rep.levels, rep.h, taus, orders):
            rows.append((cid, cls[cid], m, float(h), float(t), float(p)))
    _atomic_write_text(out / "tau.csv", _csv_text(("cell_id", "class", "level", "h", "tau", "order"), rows))
    _atomic_write_text(out / "slopes.csv", _csv_text(
        ("cell_id", "class", "finest_pair_order", "lsq_slope"),
        [(cid, cls[cid], float(rep.finest_order(cid)), float(rep.slopes[cid])) for cid in rep.tau]))
    anchor = max(t[0] for t in rep.tau.values())
    ref = reference_slopes(rep.h, anchor)
    _atomic_write_text(out / "reference.csv", _csv_text(
        ("level", "h", "third_order", "fourth_order"),
        [(m, float(h), ref[3][k], ref[4][k]) for k, (m, h) in enumerate(zip(rep.levels, rep.h))]))
    meta = dict(rep.meta, levels=rep.levels, h=rep.h, cells=rep.cells)
    if mapping_resolution is not None:
        meta["mapping_resolution"] = asdict(mapping_resolution)
    _atomic_write_text(out / "run.json", json.dumps(meta, indent=2, default=str) + "\n")
    return out


def write_comparison(reports: dict, out_dir):
    """Per-mode report directories plus compare.csv pairing the two modes."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for mode, rep in reports.items():
        write_tau_report(rep, out / mode)
    a, b = reports["divfree"], reports["metric"]
    rows = []
    for cid in a.tau:
        for m, ta, tb in zip(a.levels, a.tau[cid], b.tau[cid]):
            rows.append((cid, m, float(ta), float(tb), float(ta / tb) if tb > 0 else float("inf")))
    _atomic_write_text(out / "compare.csv", _csv_text(("cell_id", "level", "tau_divfree", "tau_metric", "ratio"), rows))
    return out


def write_pollution(results, out_dir, threshold=POLLUTION_THRESHOLD):
    """pollution.csv (per cell, with the threshold flag) and pollution_max.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [(r.n_core, blk, i, j, R, Z, tau, int(tau >= threshold))
            for r in results for blk, i, j, R, Z, tau in r.rows]
    _atomic_write_text(out / "pollution.csv", _csv_text(
        ("mapping_n_core", "block", "i", "j", "R", "Z", "tau", "above_threshold"), rows))
    _atomic_write_text(out / "pollution_max.csv", _csv_text(
        ("mapping_n_core", "max_tau"), [(r.n_core, float(r.max_tau)) for r in results]))
    return out


def is_monotone_decreasing(values):
    return all(b < a for a, b in zip(values, values[1:]))


def refinement_nests(cells=DEFAULT_TEST_CELLS, levels=(1, 2, 3)):
    """True when every refined index set covers exactly its coarse cell (2^(m-1) per direction)."""
    for c in cells:
        for m in levels:
            box = c.refined(m)
            s = 2 ** (m - 1)
            if box.shape != (s, s) or box.i0 // s != c.i or box.j0 // s != c.j:
                return False
    return True
