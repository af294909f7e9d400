"""Extrablock ghost cells: copies across conformal interfaces, least-squares elsewhere.

A ghost cell of block A is *physical* when it lies beyond a physical edge
of A, otherwise *extrablock*.  Extrablock ghosts whose image coincides with
a valid cell of another block (found by walking the block topology, and
checked on the cell's corner nodes) are filled by copying that cell.  The
rest are filled from a least-squares cubic fitted to the cell averages of
nearby valid cells of other blocks; the fit reproduces the exact average of
any cubic in (R, Z).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import qr, solve_triangular
from scipy.spatial import cKDTree

from .block_mapping import BLOCKS, _atomic_write_text
from .phase_space import ConfigError, DistributionField, ExchangeError, PhaseSpaceGrid, gauss_unit

log = logging.getLogger(__name__)

VALID, PHYSICAL, COPY, LSQ = "valid", "physical", "copy", "lsq"


class StencilError(RuntimeError):
    pass


def _side(k, n):
    return "lo" if k < 0 else ("hi" if k >= n else None)


def classify_cell(grid: PhaseSpaceGrid, block, i, j):
    """'valid', 'physical' or 'extrablock' for a padded configuration cell."""
    sx, sy = _side(i, grid.n_rad), _side(j, grid.n_pol(block))
    if sx is None and sy is None:
        return VALID
    edges = [e for e in (sx and "x" + sx, sy and "y" + sy) if e]
    if any(grid.topology.link(block, e).physical for e in edges):
        return PHYSICAL
    return "extrablock"


def _step(grid, block, i, j, edge):
    """The same logical cell seen from across ``edge`` (interfaces match index by index)."""
    ln = grid.topology.link(block, edge)
    if ln.physical or ln.orientation != 1:
        return None
    nb = ln.neighbor
    if edge == "xhi":
        return nb, i - grid.n_rad, j
    if edge == "xlo":
        return nb, i + grid.n_rad, j
    if edge == "yhi":
        return nb, i, j - grid.n_pol(block)
    return nb, i, j + grid.n_pol(nb)


def walk_candidates(grid: PhaseSpaceGrid, block, i, j):
    """Valid cells reached from a ghost cell by crossing its edges in either order."""
    sx, sy = _side(i, grid.n_rad), _side(j, grid.n_pol(block))
    edges = [e for e in (sx and "x" + sx, sy and "y" + sy) if e]
    orders = [edges] if len(edges) == 1 else [edges, edges[::-1]]
    out = []
    for order in orders:
        cur = (block, i, j)
        for e in order:
            # after the first step the remaining offset is along the other axis
            cur = _step(grid, *cur, e)
            if cur is None:
                break
        if cur is not None and classify_cell(grid, *cur) == VALID and cur not in out:
            out.append(cur)
    return out


def cell_corners(grid: PhaseSpaceGrid, block, i, j):
    return grid.node_positions(block, np.array([i, i + 1, i, i + 1]), np.array([j, j, j + 1, j + 1]))


def find_copy_donor(grid: PhaseSpaceGrid, block, i, j, tol=1e-11):
    """Valid cell of another block whose corner nodes coincide with this ghost's, or None."""
    mine = cell_corners(grid, block, i, j)
    scale = np.abs(mine).max()
    for cand in walk_candidates(grid, *((block, i, j))):
        if np.abs(cell_corners(grid, *cand) - mine).max() <= tol * scale:
            return cand
    return None


# ---------------------------------------------------------------------------
# exact cell moments


def _breaks(knots, a, b):
    k = np.unique(knots)
    inner = k[(k > a + 1e-14) & (k < b - 1e-14)]
    return np.concatenate([[a], inner, [b]])


def cell_quadrature(grid: PhaseSpaceGrid, block, i, j, q=10):
    """Points and weights (summing to 1) for logical averages over a cell.

    The rule is a tensor Gauss rule split at the mapping's knots, so averages
    of polynomials in (R, Z) up to degree 3 are exact to round-off.
    """
    mp = grid.mappings[block]
    h1, h2 = grid.h(block)
    s, w = gauss_unit(q)
    pts, wts = [], []
    for axis, (a, b) in enumerate(((i * h1, (i + 1) * h1), (j * h2, (j + 1) * h2))):
        br = _breaks(mp.spline.t[axis], a, b)
        lengths = np.diff(br)
        pts.append((br[:-1, None] + lengths[:, None] * s).ravel())
        wts.append((lengths[:, None] * w).ravel() / (b - a))
    X = mp(pts[0][:, None], pts[1][None, :]).reshape(-1, 2)
    W = (wts[0][:, None] * wts[1][None, :]).ravel()
    return X, W


MONOMIALS = [(a, d - a) for d in range(4) for a in range(d, -1, -1)]


_PA = np.array([a for a, _ in MONOMIALS])
_PB = np.array([b for _, b in MONOMIALS])


def _powers(t):
    out = np.empty(t.shape + (4,))
    out[..., 0] = 1.0
    out[..., 1] = t
    out[..., 2] = t * t
    out[..., 3] = out[..., 2] * t
    return out


def monomial_averages(X, W, center, scale):
    """Weighted averages of ((R - Rc)/s)^a ((Z - Zc)/s)^b for the cubic monomials.

    ``X`` is (..., P, 2) and ``W`` (..., P); leading axes are batched.
    """
    xp = _powers((X[..., 0] - center[0]) / scale)
    yp = _powers((X[..., 1] - center[1]) / scale)
    m = np.swapaxes(xp * W[..., None], -1, -2) @ yp
    return m[..., _PA, _PB]


@dataclass
class GhostStencil:
    """How one ghost cell of ``block`` is filled."""

    block: str
    i: int
    j: int
    kind: str
    donors: list = field(default_factory=list)  # [(block, i, j)]
    weights: np.ndarray | None = None
    center: tuple | None = None
    scale: float | None = None
    rank: int | None = None


class DonorIndex:
    """Centroid images of every valid cell, for nearest-donor searches."""

    def __init__(self, grid: PhaseSpaceGrid):
        self.grid = grid
        ids, pts = [], []
        for b in BLOCKS:
            n1, n2 = grid.n_rad, grid.n_pol(b)
            I, J = np.meshgrid(np.arange(n1), np.arange(n2), indexing="ij")
            h1, h2 = grid.h(b)
            P = grid.mappings[b]((I + 0.5) * h1, (J + 0.5) * h2).reshape(-1, 2)
            pts.append(P)
            ids.extend((b, int(a), int(c)) for a, c in zip(I.ravel(), J.ravel()))
        self.ids = ids
        self.block_of = np.array([x[0] for x in ids])
        self.tree = cKDTree(np.concatenate(pts))
        self._quad = {}

    def quad(self, cell):
        if cell not in self._quad:
            self._quad[cell] = cell_quadrature(self.grid, *cell)
        return self._quad[cell]

    def stacked(self, cells):
        """Quadrature of several cells padded to a common length with zero weights."""
        qs = [self.quad(c) for c in cells]
        P = max(len(w) for _, w in qs)
        X = np.zeros((len(qs), P, 2))
        W = np.zeros((len(qs), P))
        for k, (x, w) in enumerate(qs):
            X[k, : len(w)] = x
            W[k, : len(w)] = w
        return X, W

    def near(self, point, radius, exclude, minimum):
        idx = [k for k in self.tree.query_ball_point(point, radius) if self.block_of[k] != exclude]
        if len(idx) < minimum:
            k = min(len(self.ids), 4 * minimum + 40)
            _, cand = self.tree.query(point, k=k)
            idx = [c for c in cand if self.block_of[c] != exclude][:minimum]
        return [self.ids[k] for k in sorted(idx)]


def lsq_weights(M, target, rtol=1e-10):
    """Weights w with w @ M reproducing ``target`` through a column-pivoted QR fit.

    M[d, p] holds the p-th monomial average of donor d.  Returns (w, rank).
    """
    Q, R, piv = qr(M, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    rank = int(np.sum(d > rtol * d[0])) if d.size else 0
    if rank < M.shape[1]:
        return None, rank
    # coefficients c = P R^-1 Q^T f, so ghost = target . c = (Q R^-T P^T target) . f
    y = solve_triangular(R, target[piv], trans="T")
    return Q @ y, rank


def build_lsq_stencil(index: DonorIndex, block, i, j, radius_factor=2.5, min_factor=1.5, retries=4):
    grid = index.grid
    corners = cell_corners(grid, block, i, j)
    diam = max(np.hypot(*(corners[a] - corners[b])) for a in range(4) for b in range(a + 1, 4))
    h1, h2 = grid.h(block)
    center = grid.mappings[block]((i + 0.5) * h1, (j + 0.5) * h2)
    Xg, Wg = cell_quadrature(grid, block, i, j)
    target = monomial_averages(Xg, Wg, center, diam)
    n_coef = len(MONOMIALS)
    minimum = int(np.ceil(min_factor * n_coef))
    radius = radius_factor * diam
    for _ in range(retries + 1):
        donors = index.near(center, radius, block, minimum)
        M = monomial_averages(*index.stacked(donors), center, diam)
        w, rank = lsq_weights(M, target)
        if w is not None:
            return GhostStencil(block, i, j, LSQ, donors, w, tuple(center), diam, rank)
        radius *= 1.5
        minimum += n_coef
    raise StencilError(f"rank-deficient least-squares stencil for {block}[{i},{j}] (rank {rank})")


# ---------------------------------------------------------------------------
# stencil sets


def ghost_cells(grid: PhaseSpaceGrid, block, width=None):
    """Padded configuration cells of a block outside its valid range."""
    g = grid.ghost if width is None else width
    n1, n2 = grid.n_rad, grid.n_pol(block)
    return [(i, j) for i in range(-g, n1 + g) for j in range(-g, n2 + g)
            if not (0 <= i < n1 and 0 <= j < n2)]


def build_stencil(grid: PhaseSpaceGrid, index: DonorIndex, block, i, j) -> GhostStencil:
    kind = classify_cell(grid, block, i, j)
    if kind == VALID:
        raise ConfigError(f"{block}[{i},{j}] is a valid cell")
    if kind == PHYSICAL:
        return GhostStencil(block, i, j, PHYSICAL)
    donor = find_copy_donor(grid, block, i, j)
    if donor is not None:
        return GhostStencil(block, i, j, COPY, [donor], np.ones(1))
    return build_lsq_stencil(index, block, i, j)


def build_ghost_stencils(grid: PhaseSpaceGrid, cells=None, index: DonorIndex | None = None) -> dict:
    """Stencils keyed by (block, i, j); ``cells`` defaults to every ghost of every block."""
    index = index or DonorIndex(grid)
    if cells is None:
        cells = [(b, i, j) for b in BLOCKS for i, j in ghost_cells(grid, b)]
    out = {c: build_stencil(grid, index, *c) for c in cells}
    n = {k: sum(s.kind == k for s in out.values()) for k in (PHYSICAL, COPY, LSQ)}
    log.info("ghost stencils: %d physical, %d copy, %d least-squares", n[PHYSICAL], n[COPY], n[LSQ])
    return out


def stencil_values(st: GhostStencil, source):
    """Ghost value from ``source(block, i, j)`` donor values."""
    if st.kind == COPY:
        return np.array(source(*st.donors[0]), copy=True)
    if st.kind != LSQ:
        raise ConfigError(f"stencil of kind {st.kind} has no donors")
    acc = None
    for w, d in zip(st.weights, st.donors):
        v = w * source(*d)
        acc = v if acc is None else acc + v
    return acc


def field_source(fld: DistributionField):
    """Donor lookup into the padded arrays of a distribution field (full v and mu pads)."""
    g = fld.grid.ghost

    def src(block, i, j):
        return fld.data[block][i + g, j + g]

    return src


def _extrapolate(a, axis, n_ghost, n_valid_lo, side):
    """Cubic extrapolation of cell averages into ``n_ghost`` cells on one side of ``axis``."""
    sl = [slice(None)] * a.ndim

    def at(k):
        sl[axis] = k
        return a[tuple(sl)]

    def put(k, v):
        sl[axis] = k
        a[tuple(sl)] = v

    if side == "lo":
        first = n_valid_lo
        for k in range(first - 1, first - 1 - n_ghost, -1):
            put(k, 4 * at(k + 1) - 6 * at(k + 2) + 4 * at(k + 3) - at(k + 4))
    else:
        last = n_valid_lo
        for k in range(last + 1, last + 1 + n_ghost):
            put(k, 4 * at(k - 1) - 6 * at(k - 2) + 4 * at(k - 3) - at(k - 4))


def fill_velocity_ghosts(fld: DistributionField):
    """Extrapolate v_par and mu ghost layers of every configuration cell."""
    grid = fld.grid
    g, gm = grid.ghost, grid.mu_ghost
    for b in BLOCKS:
        a = fld.data[b]
        _extrapolate(a, 2, g, g, "lo")
        _extrapolate(a, 2, g, g + grid.n_v - 1, "hi")
        _extrapolate(a, 3, gm, gm, "lo")
        _extrapolate(a, 3, gm, gm + grid.n_mu - 1, "hi")


def fill_physical_ghosts(fld: DistributionField):
    """Cubic extrapolation across physical configuration edges."""
    grid = fld.grid
    g = grid.ghost
    for b in BLOCKS:
        a = fld.data[b]
        n1, n2 = grid.n_rad, grid.n_pol(b)
        top = grid.topology
        # radial edges first, skipping rows beyond a physical poloidal edge
        jlo = 0 if top.link(b, "ylo").physical else -g
        jhi = n2 if top.link(b, "yhi").physical else n2 + g
        rows = a[:, jlo + g : jhi + g]
        if top.link(b, "xlo").physical:
            _extrapolate(rows, 0, g, g, "lo")
        if top.link(b, "xhi").physical:
            _extrapolate(rows, 0, g, g + n1 - 1, "hi")
        if top.link(b, "ylo").physical:
            _extrapolate(a, 1, g, g, "lo")
        if top.link(b, "yhi").physical:
            _extrapolate(a, 1, g, g + n2 - 1, "hi")


def fill_ghosts(fld: DistributionField, stencils: dict, physical="extrapolate"):
    """Refresh every ghost of ``fld`` (in place) and mark the ghosts current.

    ``physical='extrapolate'`` also rebuilds v_par, mu and physical
    configuration ghosts by cubic extrapolation; ``'keep'`` leaves them as
    they are (for analytically prescribed boundary data).
    """
    if physical not in ("extrapolate", "keep"):
        raise ConfigError(f"unknown physical ghost treatment {physical!r}")
    if physical == "extrapolate":
        fill_velocity_ghosts(fld)
    src = field_source(fld)
    g = fld.grid.ghost
    # donors are valid cells only, so fill order does not matter; stage to be safe
    staged = {key: stencil_values(st, src) for key, st in stencils.items() if st.kind in (COPY, LSQ)}
    for (b, i, j), v in staged.items():
        fld.data[b][i + g, j + g] = v
    if physical == "extrapolate":
        fill_physical_ghosts(fld)
    fld.ghost_epoch = fld.valid_epoch
    return fld


def check_donor_epoch(fld: DistributionField, expected_epoch: int):
    if fld.valid_epoch != expected_epoch:
        raise ExchangeError("donor data changed while ghosts were being filled")


def dump_stencils(stencils: dict, path):
    """Text listing of every stencil: one header line, then one line per donor."""
    lines = ["# block i j kind n_donors rank scale", "#   donor_block donor_i donor_j weight"]
    for (b, i, j), st in sorted(stencils.items()):
        rank = "-" if st.rank is None else st.rank
        scale = "-" if st.scale is None else f"{st.scale:.17g}"
        lines.append(f"{b} {i} {j} {st.kind} {len(st.donors)} {rank} {scale}")
        for w, d in zip([] if st.weights is None else st.weights, st.donors):
            lines.append(f"    {d[0]} {d[1]} {d[2]} {w:.17g}")
    _atomic_write_text(Path(path), "\n".join(lines) + "\n")
