"""Ten-block single-null edge grid, ghost extension and spline mappings.

Every block carries logical coordinates (xi1, xi2) in [0, 1]^2.  xi1 is the
radial direction and always increases as the flux decreases; xi2 is chosen
so that dR/dxi1 dZ/dxi2 - dR/dxi2 dZ/dxi1 > 0.  Node arrays are indexed by
(a, b) with a = i + M_rad and b = j + M_pol so that valid nodes occupy
i in [0, N_rad], j in [0, N_pol].
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import NdBSpline, make_interp_spline
from scipy.optimize import brentq

from .magnetic_geometry import (
    BlendedFlux,
    BlendParams,
    DomainError,
    FluxField,
    XPointData,
    find_x_point,
)

log = logging.getLogger(__name__)


class GridGenerationError(RuntimeError):
    """Raised when a grid line cannot be constructed."""


class TopologyError(ValueError):
    pass


BLOCKS = ("LCORE", "MCORE", "RCORE", "LCSOL", "MCSOL", "RCSOL", "LSOL", "RSOL", "LPF", "RPF")
EDGES = ("xlo", "xhi", "ylo", "yhi")
M_BLOCKS = ("MCORE", "MCSOL")


@dataclass(frozen=True)
class EdgeLink:
    """What lies across one block edge: a neighbor edge or a physical boundary."""

    neighbor: str | None = None
    neighbor_edge: str | None = None
    orientation: int = 1
    boundary: str | None = None

    @property
    def physical(self) -> bool:
        return self.neighbor is None


@dataclass(frozen=True)
class BlockTopology:
    links: dict

    def link(self, block: str, edge: str) -> EdgeLink:
        return self.links[(block, edge)]

    def interfaces(self):
        """Each interblock interface once, as (block, edge, neighbor, neighbor_edge)."""
        seen = set()
        for (blk, edge), ln in sorted(self.links.items()):
            if ln.physical or (ln.neighbor, ln.neighbor_edge) in seen:
                continue
            seen.add((blk, edge))
            yield blk, edge, ln.neighbor, ln.neighbor_edge

    def check(self):
        for (blk, edge), ln in self.links.items():
            if ln.physical:
                continue
            back = self.links[(ln.neighbor, ln.neighbor_edge)]
            if back.neighbor != blk or back.neighbor_edge != edge or back.orientation != ln.orientation:
                raise TopologyError(f"asymmetric link {blk}.{edge} -> {ln.neighbor}.{ln.neighbor_edge}")
            if edge[0] != ln.neighbor_edge[0] or edge[1:] == ln.neighbor_edge[1:]:
                raise TopologyError(f"edge pairing {blk}.{edge} / {ln.neighbor}.{ln.neighbor_edge} is not lo/hi")


def single_null_topology() -> BlockTopology:
    pairs = [
        ("RCORE", "yhi", "MCORE", "ylo"),
        ("MCORE", "yhi", "LCORE", "ylo"),
        ("LCORE", "yhi", "RCORE", "ylo"),
        ("RSOL", "yhi", "RCSOL", "ylo"),
        ("RCSOL", "yhi", "MCSOL", "ylo"),
        ("MCSOL", "yhi", "LCSOL", "ylo"),
        ("LCSOL", "yhi", "LSOL", "ylo"),
        ("RPF", "yhi", "LPF", "ylo"),
        ("RCORE", "xhi", "RCSOL", "xlo"),
        ("MCORE", "xhi", "MCSOL", "xlo"),
        ("LCORE", "xhi", "LCSOL", "xlo"),
        ("LPF", "xhi", "LSOL", "xlo"),
        ("RPF", "xhi", "RSOL", "xlo"),
    ]
    links = {}
    for a, ea, b, eb in pairs:
        links[(a, ea)] = EdgeLink(b, eb, 1)
        links[(b, eb)] = EdgeLink(a, ea, 1)
    physical = {
        ("LCORE", "xlo"): "core",
        ("MCORE", "xlo"): "core",
        ("RCORE", "xlo"): "core",
        ("LCSOL", "xhi"): "wall",
        ("MCSOL", "xhi"): "wall",
        ("RCSOL", "xhi"): "wall",
        ("LSOL", "xhi"): "wall",
        ("RSOL", "xhi"): "wall",
        ("LPF", "xlo"): "private_flux",
        ("RPF", "xlo"): "private_flux",
        ("LSOL", "yhi"): "plate",
        ("LPF", "yhi"): "plate",
        ("RSOL", "ylo"): "plate",
        ("RPF", "ylo"): "plate",
    }
    for key, tag in physical.items():
        links[key] = EdgeLink(boundary=tag)
    topo = BlockTopology(links)
    if len(links) != 4 * len(BLOCKS):
        raise TopologyError("incomplete topology")
    topo.check()
    return topo


@dataclass(frozen=True)
class BlockInfo:
    """How a block sits relative to the separatrix and the X point."""

    region: str  # core, csol, sol (divertor leg) or pf
    family: str  # radial-line family: core loop, left leg or right leg
    side: str  # "in" (flux above the separatrix value) or "out"
    quadrant: tuple[float, float]  # branch (sign R_bar, sign Z_bar) of the blended flux
    x_edge: str | None  # poloidal edge that ends at the X point


BLOCK_INFO = {
    "RCORE": BlockInfo("core", "core", "in", (1.0, -1.0), "ylo"),
    "MCORE": BlockInfo("core", "core", "in", (1.0, 1.0), None),
    "LCORE": BlockInfo("core", "core", "in", (1.0, 1.0), "yhi"),
    "RCSOL": BlockInfo("csol", "core", "out", (1.0, -1.0), "ylo"),
    "MCSOL": BlockInfo("csol", "core", "out", (1.0, 1.0), None),
    "LCSOL": BlockInfo("csol", "core", "out", (1.0, 1.0), "yhi"),
    "LSOL": BlockInfo("sol", "legL", "out", (-1.0, 1.0), "ylo"),
    "LPF": BlockInfo("pf", "legL", "in", (-1.0, 1.0), "ylo"),
    "RSOL": BlockInfo("sol", "legR", "out", (-1.0, -1.0), "yhi"),
    "RPF": BlockInfo("pf", "legR", "in", (-1.0, -1.0), "yhi"),
}


def x_corner(block: str, n_rad: int, n_pol: int):
    """Logical node (i, j) of the X point for a block, or None."""
    info = BLOCK_INFO[block]
    if info.x_edge is None:
        return None
    return (n_rad if info.side == "in" else 0), (n_pol if info.x_edge == "yhi" else 0)


@dataclass(frozen=True)
class MappingResolution:
    """Mapping-grid cell counts and ghost widths.

    ``n_core`` counts poloidal cells around the closed separatrix; the X-point
    blocks and the divertor legs get ``n_core // 8`` each and the two
    midplane blocks the remaining three quarters.
    """

    n_rad: int = 24
    n_core: int = 256
    m_rad: int = 9
    m_pol: int = 12

    def __post_init__(self):
        if self.n_rad < 8 or self.n_core < 32 or self.n_core % 8:
            raise GridGenerationError("need n_rad >= 8 and n_core >= 32 divisible by 8")
        if self.m_rad < 1 or self.m_pol < 1:
            raise GridGenerationError("ghost widths must be positive")
        if self.m_pol > 0.75 * self.n_x:
            raise GridGenerationError(
                f"m_pol={self.m_pol} reaches into the X-point ramp of {self.n_x}-cell blocks"
            )

    @classmethod
    def covering(cls, n_rad: int, n_core: int, compute_n_rad: int, compute_n_x: int, halo: int = 3):
        """Resolution whose ghost extension covers ``halo`` cells of a compute grid."""
        m_rad = halo * -(-n_rad // compute_n_rad)
        m_pol = halo * -(-(n_core // 8) // compute_n_x)
        return cls(n_rad, n_core, m_rad, m_pol)

    @property
    def n_x(self) -> int:
        return self.n_core // 8

    @property
    def n_m(self) -> int:
        return self.n_core - 2 * self.n_x

    def n_pol(self, block: str) -> int:
        return self.n_m if block in M_BLOCKS else self.n_x

    def line_index(self, block: str, j):
        """Index of the radial line carrying poloidal node j of ``block``."""
        j = np.asarray(j)
        if block in ("RCORE", "RCSOL", "LSOL", "LPF"):
            return j
        if block in M_BLOCKS:
            return j + self.n_x
        if block in ("LCORE", "LCSOL"):
            return j + self.n_x + self.n_m
        return self.n_x - j  # RSOL, RPF run from the plate toward the X point


def _smoothstep5(s):
    s = np.clip(s, 0.0, 1.0)
    return s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)


@dataclass(frozen=True)
class EdgeGeometry:
    """Flux model, X point, blended flux and the radial extent of the grid.

    The core and scrape-off bands have the given radial widths on the
    vertical line through the X point at the top of the separatrix; the
    private-flux band uses the same flux offset as the core band.
    """

    flux: FluxField = field(default_factory=FluxField)
    width_core_m: float = 0.067
    width_sol_m: float = 0.067
    blend_D: float | None = None
    blend_alpha: float = 1.0
    ramp_fraction: float = 0.25

    @cached_property
    def xpt(self) -> XPointData:
        return find_x_point(self.flux)

    def psi_n(self, R, Z):
        return self.flux.normalized_flux(R, Z).psi

    @cached_property
    def z_top(self) -> float:
        x = self.xpt
        _, z_axis = self.flux.magnetic_axis()
        f = lambda z: float(self.psi_n(x.R_X, z)) - x.psi_X
        z1 = z_axis + 0.05
        while f(z1) > 0:
            z1 += 0.05
        return brentq(f, z_axis, z1, xtol=1e-15, rtol=1e-15)

    @cached_property
    def psi_in(self) -> float:
        return float(self.psi_n(self.xpt.R_X, self.z_top - self.width_core_m))

    @cached_property
    def psi_out(self) -> float:
        return float(self.psi_n(self.xpt.R_X, self.z_top + self.width_sol_m))

    @cached_property
    def psi_pf(self) -> float:
        return self.psi_in

    def band_limit(self, region: str) -> float:
        return {"core": self.psi_in, "pf": self.psi_pf, "csol": self.psi_out, "sol": self.psi_out}[region]

    @cached_property
    def frame_matrix(self) -> np.ndarray:
        x = self.xpt
        return np.array([[x.a1, x.b1], [x.a2, x.b2]])

    def frame_direction(self, rb: float, zb: float) -> np.ndarray:
        """Unit physical direction along which the frame coordinates move as (rb, zb)."""
        v = np.linalg.solve(self.frame_matrix, [rb, zb])
        return v / np.hypot(*v)

    def cut_direction(self, block: str) -> np.ndarray:
        """Direction, away from the X point, of the block's X-adjacent poloidal edge."""
        info = BLOCK_INFO[block]
        sR, sZ = info.quadrant
        if info.region in ("core", "pf"):
            return self.frame_direction(sR, 0.0)
        return self.frame_direction(0.0, sZ)

    @cached_property
    def default_D(self) -> float:
        """One tenth of the distance from the X point to the nearest flux boundary."""
        x = self.xpt
        dists = []
        for blk, target in (("LCORE", self.psi_in), ("LPF", self.psi_pf), ("LCSOL", self.psi_out), ("RCSOL", self.psi_out)):
            v = self.cut_direction(blk)
            f = lambda t: float(self.psi_n(x.R_X + t * v[0], x.Z_X + t * v[1])) - target
            t1 = 0.01
            while f(t1) * f(0.0) > 0:
                t1 *= 1.5
            dists.append(brentq(f, 0.0, t1, xtol=1e-14))
        return 0.1 * min(dists)

    @cached_property
    def blend(self) -> BlendParams:
        D = self.default_D if self.blend_D is None else self.blend_D
        return BlendParams(D, self.blend_alpha)

    def blended(self, quadrant=None) -> BlendedFlux:
        return BlendedFlux(self.flux, self.xpt, self.blend, None if quadrant is None else tuple(quadrant))

    def level(self, region: str, frac):
        """Normalized flux a fraction ``frac`` of the band away from the separatrix."""
        return self.xpt.psi_X + (self.band_limit(region) - self.xpt.psi_X) * np.asarray(frac, dtype=float)


# ---------------------------------------------------------------------------
# separatrix


@dataclass(frozen=True)
class Separatrix:
    """Separatrix nodes equidistant in arc length.

    ``core`` holds nodes J = 0..n_core counterclockwise around the closed
    part starting and ending at the X point; ``legL``/``legR`` hold nodes
    J = 0..n_x + m_pol along the divertor legs starting at the X point.
    """

    core: np.ndarray
    legL: np.ndarray
    legR: np.ndarray
    spacing: float
    core_length: float


def _trace_level_branch(geo: EdgeGeometry, quadrant, s_max, stop_at_cut=False):
    bf = geo.blended(quadrant)
    x = geo.xpt
    d0 = geo.frame_direction(*quadrant)
    _, gR, gZ = bf.value_and_grad(x.R_X, x.Z_X)
    sigma = 1.0 if (-gZ * d0[0] + gR * d0[1]) > 0 else -1.0
    kappa = 10.0

    def rhs(s, y):
        val, gR, gZ = bf.value_and_grad(y[0], y[1])
        n2 = gR * gR + gZ * gZ
        n = np.sqrt(n2)
        c = -kappa * (val - x.psi_X) / n2
        return [sigma * -gZ / n + c * gR, sigma * gR / n + c * gZ]

    events = None
    if stop_at_cut:
        sZ = quadrant[1]

        def crossing(s, y):
            return sZ * (x.a2 * (y[0] - x.R_X) + x.b2 * (y[1] - x.Z_X))

        crossing.terminal = True
        crossing.direction = -1
        events = crossing
    try:
        sol = solve_ivp(rhs, (0.0, s_max), [x.R_X, x.Z_X], method="DOP853", rtol=1e-12, atol=1e-14,
                        dense_output=True, events=events)
    except DomainError as exc:
        raise GridGenerationError(f"separatrix branch {quadrant} left the flux domain") from exc
    if sol.status < 0:
        raise GridGenerationError(f"separatrix branch {quadrant}: {sol.message}")
    end = sol.t_events[0][0] if stop_at_cut else sol.t[-1]
    if stop_at_cut and not len(sol.t_events[0]):
        raise GridGenerationError("separatrix did not close")
    return sol.sol, float(end), bf


def _polish_level(bf: BlendedFlux, P, target, iters=4):
    P = np.array(P, dtype=float)
    for _ in range(iters):
        val, gR, gZ = bf.value_and_grad(P[..., 0], P[..., 1])
        n2 = gR * gR + gZ * gZ
        step = (target - val) / n2
        P[..., 0] += step * gR
        P[..., 1] += step * gZ
    return P


def trace_separatrix(geo: EdgeGeometry, res: MappingResolution) -> Separatrix:
    right, L_r, bf_r = _trace_level_branch(geo, BLOCK_INFO["RCORE"].quadrant, 50.0, stop_at_cut=True)
    left, L_l, bf_l = _trace_level_branch(geo, BLOCK_INFO["LCORE"].quadrant, 50.0, stop_at_cut=True)
    total = L_r + L_l
    ds = total / res.n_core
    s = ds * np.arange(res.n_core + 1)
    core = np.empty((res.n_core + 1, 2))
    on_right = s <= L_r
    core[on_right] = right(s[on_right]).T
    core[~on_right] = left(total - s[~on_right]).T
    psi_X = geo.xpt.psi_X
    core[on_right] = _polish_level(bf_r, core[on_right], psi_X)
    core[~on_right] = _polish_level(bf_l, core[~on_right], psi_X)
    core[0] = core[-1] = (geo.xpt.R_X, geo.xpt.Z_X)
    n_leg = res.n_x + res.m_pol
    legs = {}
    for name, blk in (("legL", "LSOL"), ("legR", "RSOL")):
        q = BLOCK_INFO[blk].quadrant
        sol, _, bf = _trace_level_branch(geo, q, n_leg * ds * (1 + 1e-9))
        nodes = sol(ds * np.arange(n_leg + 1)).T
        nodes = _polish_level(bf, nodes, psi_X)
        nodes[0] = (geo.xpt.R_X, geo.xpt.Z_X)
        legs[name] = nodes
    return Separatrix(core, legs["legL"], legs["legR"], ds, total)


# ---------------------------------------------------------------------------
# radial lines


def _cut_line(geo: EdgeGeometry, direction, quadrant, region, n_rad, n_levels):
    """Nodes on the straight X-edge line at levels k = 0..n_levels-1."""
    x = geo.xpt
    bf = geo.blended(quadrant)
    v = np.asarray(direction, dtype=float)
    out = np.empty((n_levels, 2))
    out[0] = (x.R_X, x.Z_X)
    psi = lambda t: float(bf(x.R_X + t * v[0], x.Z_X + t * v[1]))
    t_lo = 0.0
    for k in range(1, n_levels):
        target = float(geo.level(region, k / n_rad))
        f = lambda t: psi(t) - target
        t_hi = max(2 * t_lo, 1e-3)
        while f(t_hi) * f(t_lo) > 0:
            t_hi *= 1.5
            if t_hi > 10:
                raise GridGenerationError(f"cut line toward {region} never reaches level {k}")
        t = brentq(f, t_lo, t_hi, xtol=1e-15, rtol=1e-15, maxiter=200)
        out[k] = (x.R_X + t * v[0], x.Z_X + t * v[1])
        t_lo = t
    return out


def _trace_group(geo, starts, cut_v, seg_len, delta, quadrants, region, n_rad, n_levels, label):
    """Trace radial lines from the separatrix across ``n_levels`` flux levels.

    The direction field blends the flux normal with the X-edge direction
    ``cut_v``; the blend weight is a quintic ramp in the distance to the
    X-edge segment, reaching zero at ``delta``.  Being a smooth field, its
    integral curves cannot cross.
    """
    K = len(starts)
    out = np.empty((K, n_levels, 2))
    if K == 0:
        return out
    dpsi = float(geo.level(region, 1.0 / n_rad)) - geo.xpt.psi_X
    fs = np.sign(dpsi)
    x0 = np.array([geo.xpt.R_X, geo.xpt.Z_X])
    bf = BlendedFlux(geo.flux, geo.xpt, geo.blend, (quadrants[:, 0], quadrants[:, 1]))

    def direction(R, Z):
        _, gR, gZ = bf.value_and_grad(R, Z)
        n = np.hypot(gR, gZ)
        pR, pZ = R - x0[0], Z - x0[1]
        t = np.clip(pR * cut_v[:, 0] + pZ * cut_v[:, 1], 0.0, seg_len)
        dist = np.hypot(pR - t * cut_v[:, 0], pZ - t * cut_v[:, 1])
        w = 1.0 - _smoothstep5(dist / delta)
        dR = (1 - w) * fs * gR / n + w * cut_v[:, 0]
        dZ = (1 - w) * fs * gZ / n + w * cut_v[:, 1]
        m = np.hypot(dR, dZ)
        dR, dZ = dR / m, dZ / m
        return dR, dZ, dR * gR + dZ * gZ

    def rhs(k, y):
        dR, dZ, dn = direction(y[:K], y[K:])
        if np.any(dn * dpsi <= 0):
            raise GridGenerationError(f"radial lines {label}: direction tangent to a flux surface")
        return np.concatenate([dpsi * dR / dn, dpsi * dZ / dn])

    y0 = np.concatenate([starts[:, 0], starts[:, 1]])
    try:
        sol = solve_ivp(rhs, (0.0, n_levels - 1.0), y0, method="RK45", rtol=1e-11, atol=1e-13,
                        t_eval=np.arange(n_levels, dtype=float))
    except DomainError as exc:
        raise GridGenerationError(f"radial lines {label} left the flux domain") from exc
    if sol.status != 0:
        raise GridGenerationError(f"radial lines {label}: {sol.message}")
    R, Z = sol.y[:K].copy(), sol.y[K:].copy()
    targets = geo.level(region, np.arange(n_levels) / n_rad)
    for kk in range(1, n_levels):
        r, z = R[:, kk], Z[:, kk]
        for _ in range(4):
            val = bf(r, z)
            dR, dZ, dn = direction(r, z)
            step = (targets[kk] - val) / dn
            r, z = r + step * dR, z + step * dZ
        R[:, kk], Z[:, kk] = r, z
    out[..., 0], out[..., 1] = R, Z
    out[:, 0] = starts
    return out


@dataclass(frozen=True)
class RadialLines:
    """Nodes of every radial line, per family and per side of the separatrix.

    ``inner[fam][J, k]`` is the node k levels into the core or private-flux
    band, ``outer[fam][J, k]`` the node k levels into the scrape-off layer.
    """

    inner: dict
    outer: dict


def _ramp_scale(geo, sep_nodes, frac_index, cut_v):
    """Distance from the X-edge line of the separatrix point ``frac_index`` nodes from X."""
    d = sep_nodes - np.array([geo.xpt.R_X, geo.xpt.Z_X])
    dist = np.abs(d[:, 0] * cut_v[1] - d[:, 1] * cut_v[0])
    return float(np.interp(frac_index, np.arange(len(dist)), dist))


def trace_radial_lines(geo: EdgeGeometry, res: MappingResolution, sep: Separatrix) -> RadialLines:
    n_levels = res.n_rad + res.m_rad + 1
    J = np.arange(res.n_core + 1)
    right = J <= res.n_core / 2
    Jl = np.arange(res.n_x + res.m_pol + 1)
    ramp = geo.ramp_fraction * res.n_x
    specs = {
        "core": (sep.core, [("core", np.where(right, "RCORE", "LCORE")), ("csol", np.where(right, "RCSOL", "LCSOL"))]),
        "legL": (sep.legL, [("pf", np.full(Jl.size, "LPF")), ("sol", np.full(Jl.size, "LSOL"))]),
        "legR": (sep.legR, [("pf", np.full(Jl.size, "RPF")), ("sol", np.full(Jl.size, "RSOL"))]),
    }
    inner, outer = {}, {}
    cut_cache = {}
    for fam, (starts, sides) in specs.items():
        for (region, blocks), store in zip(sides, (inner, outer)):
            arr = np.empty((len(starts), n_levels, 2))
            cut_v = np.array([geo.cut_direction(b) for b in blocks])
            quads = np.array([BLOCK_INFO[b].quadrant for b in blocks])
            delta = np.empty(len(starts))
            seg = np.empty(len(starts))
            for b in sorted(set(blocks)):
                sel = blocks == b
                v = geo.cut_direction(b)
                nodes = starts if fam != "core" or b.startswith("R") else starts[::-1]
                delta[sel] = _ramp_scale(geo, nodes, ramp, v)
                key = (tuple(v), float(geo.band_limit(region)))
                if key not in cut_cache:
                    cut_cache[key] = _cut_line(geo, v, BLOCK_INFO[b].quadrant, region, res.n_rad, n_levels)
                seg[sel] = np.hypot(*(cut_cache[key][-1] - cut_cache[key][0]))
            straight = np.zeros(len(starts), bool)
            straight[[0, -1] if fam == "core" else [0]] = True
            for idx in np.flatnonzero(straight):
                arr[idx] = cut_cache[(tuple(cut_v[idx]), float(geo.band_limit(region)))]
            rest = ~straight
            arr[rest] = _trace_group(geo, starts[rest], cut_v[rest], seg[rest], delta[rest], quads[rest],
                                     region, res.n_rad, n_levels, f"{fam}/{region}")
            store[fam] = arr
    return RadialLines(inner, outer)


# ---------------------------------------------------------------------------
# RBF extension


def rbf_extend(centers, values, queries, cond_limit=1e14):
    """Cubic polyharmonic RBF interpolation with a linear polynomial tail.

    ``centers`` (P, 2) are logical coordinates of known nodes, ``values``
    (P, n) the data there; returns the interpolant at ``queries`` (Q, 2).
    """
    centers = np.asarray(centers, dtype=float)
    values = np.asarray(values, dtype=float)
    queries = np.asarray(queries, dtype=float)
    P = len(centers)
    if P < 3:
        raise GridGenerationError("RBF extension needs at least three nodes")
    shift = centers.mean(axis=0)
    scale = np.ptp(centers, axis=0).max() or 1.0
    c = (centers - shift) / scale
    q = (queries - shift) / scale
    r = np.linalg.norm(c[:, None, :] - c[None, :, :], axis=-1)
    poly = np.column_stack([np.ones(P), c])
    A = np.zeros((P + 3, P + 3))
    A[:P, :P] = r**3
    A[:P, P:] = poly
    A[P:, :P] = poly.T
    rhs = np.zeros((P + 3,) + values.shape[1:])
    rhs[:P] = values
    try:
        coef = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError as exc:
        raise GridGenerationError(f"singular RBF system (cond ~ {np.linalg.cond(A):.3e})") from exc
    resid = np.abs(A @ coef - rhs).max() / max(np.abs(rhs).max(), 1e-300)
    if not np.isfinite(resid) or resid > 1e-8:
        raise GridGenerationError(f"ill-conditioned RBF system (cond ~ {np.linalg.cond(A):.3e})")
    rq = np.linalg.norm(q[:, None, :] - c[None, :, :], axis=-1)
    return rq**3 @ coef[:P] + np.column_stack([np.ones(len(q)), q]) @ coef[P:]


# ---------------------------------------------------------------------------
# mapping grids


@dataclass
class BlockGrid:
    """Mapping-grid nodes of one block, ghosts included."""

    name: str
    n_rad: int
    n_pol: int
    m_rad: int
    m_pol: int
    nodes: np.ndarray  # (n_rad + 2 m_rad + 1, n_pol + 2 m_pol + 1, 2)
    valid: np.ndarray  # bool, same leading shape
    source: np.ndarray  # int8: 0 traced, 1 edge extension, 2 RBF

    @property
    def xi1(self):
        return (np.arange(self.nodes.shape[0]) - self.m_rad) / self.n_rad

    @property
    def xi2(self):
        return (np.arange(self.nodes.shape[1]) - self.m_pol) / self.n_pol

    def node(self, i, j):
        return self.nodes[i + self.m_rad, j + self.m_pol]


@dataclass
class MappingGrid:
    geometry: EdgeGeometry
    resolution: MappingResolution
    topology: BlockTopology
    separatrix: Separatrix
    blocks: dict


def _extend_edges(P, fixed, source, block: BlockGrid):
    ma, mb = block.m_rad, block.m_pol
    na, nb = block.n_rad, block.n_pol
    lines = [(P[ma + a0, :], fixed[ma + a0, :], source[ma + a0, :], mb, nb) for a0 in (0, na)]
    lines += [(P[:, mb + b0], fixed[:, mb + b0], source[:, mb + b0], ma, na) for b0 in (0, nb)]
    for pts, fx, src, m, n in lines:  # views into P, fixed, source
        for end, step in ((m, -1), (m + n, 1)):
            if fx[end + step]:
                continue
            d = pts[end] - pts[end - step]
            for s in range(1, m + 1):
                pts[end + s * step] = pts[end] + s * d
                fx[end + s * step] = True
                src[end + s * step] = 1


def _assemble_block(name, geo, res, lines: RadialLines) -> BlockGrid:
    info = BLOCK_INFO[name]
    na, nb = res.n_rad, res.n_pol(name)
    ma, mb = res.m_rad, res.m_pol
    shape = (na + 2 * ma + 1, nb + 2 * mb + 1)
    P = np.full(shape + (2,), np.nan)
    fixed = np.zeros(shape, bool)
    source = np.full(shape, 2, np.int8)
    own, other = (lines.inner, lines.outer) if info.side == "in" else (lines.outer, lines.inner)
    own, other = own[info.family], other[info.family]
    i = np.arange(shape[0]) - ma
    k_own = na - i if info.side == "in" else i
    k_oth = i - na if info.side == "in" else -i
    for b in range(shape[1]):
        J = int(res.line_index(name, b - mb))
        if not 0 <= J < len(own):
            continue
        sel = k_own >= 0
        P[sel, b] = own[J, k_own[sel]]
        fixed[sel, b] = True
        if info.family == "core" and (name in M_BLOCKS or res.n_x <= J <= res.n_x + res.n_m):
            P[~sel, b] = other[J, k_oth[~sel]]
            fixed[~sel, b] = True
    source[fixed] = 0
    valid = np.zeros(shape, bool)
    valid[ma : ma + na + 1, mb : mb + nb + 1] = True
    blk = BlockGrid(name, na, nb, ma, mb, P, valid, source)
    if not fixed.all():
        _extend_edges(P, fixed, source, blk)
        idx = np.argwhere(fixed)
        miss = np.argwhere(~fixed)
        P[~fixed] = rbf_extend(idx, P[fixed], miss)
    if not np.all(np.isfinite(P)):
        raise GridGenerationError(f"block {name}: non-finite nodes")
    return blk


def generate_mapping_grids(geo: EdgeGeometry | None = None, res: MappingResolution | None = None,
                           topology: BlockTopology | None = None) -> MappingGrid:
    """Separatrix, radial lines and ghost-extended node arrays for all ten blocks."""
    geo = geo or EdgeGeometry()
    res = res or MappingResolution()
    topology = topology or single_null_topology()
    sep = trace_separatrix(geo, res)
    lines = trace_radial_lines(geo, res, sep)
    blocks = {name: _assemble_block(name, geo, res, lines) for name in BLOCKS}
    for blk in blocks.values():
        J2 = _discrete_jacobian(blk.nodes[blk.valid].reshape(blk.n_rad + 1, blk.n_pol + 1, 2))
        if J2.min() <= 0:
            raise GridGenerationError(f"block {blk.name}: folded valid region (min cell Jacobian {J2.min():.3e})")
        n_fold = int((_discrete_jacobian(blk.nodes) <= 0).sum())
        if n_fold:
            log.warning("block %s: %d folded cells in the ghost extension", blk.name, n_fold)
    return MappingGrid(geo, res, topology, sep, blocks)


def _discrete_jacobian(P):
    """Cross product of the cell diagonals (twice the signed area) for each cell."""
    d1 = P[1:, 1:] - P[:-1, :-1]
    d2 = P[:-1, 1:] - P[1:, :-1]
    return d1[..., 0] * d2[..., 1] - d1[..., 1] * d2[..., 0]


# ---------------------------------------------------------------------------
# spline mappings and metrics


@dataclass
class BlockMapping:
    """Tensor-product spline (R, Z)(xi1, xi2) over a ghost-extended block."""

    name: str
    n_rad: int
    n_pol: int
    m_rad: int
    m_pol: int
    spline: NdBSpline

    @property
    def lower(self):
        return (-self.m_rad / self.n_rad, -self.m_pol / self.n_pol)

    @property
    def upper(self):
        return (1 + self.m_rad / self.n_rad, 1 + self.m_pol / self.n_pol)

    def _points(self, xi1, xi2):
        xi1, xi2 = np.broadcast_arrays(np.asarray(xi1, float), np.asarray(xi2, float))
        lo, hi = self.lower, self.upper
        tol = 1e-12
        if (np.any(xi1 < lo[0] - tol) or np.any(xi1 > hi[0] + tol)
                or np.any(xi2 < lo[1] - tol) or np.any(xi2 > hi[1] + tol)):
            raise DomainError(f"{self.name}: logical point outside the extended mapping domain")
        return np.stack([xi1, xi2], axis=-1)

    def __call__(self, xi1, xi2, nu=(0, 0)):
        """(R, Z) or their partial derivatives of order ``nu``; trailing axis of length 2."""
        pts = self._points(xi1, xi2)
        flat = pts.reshape(-1, 2)
        out = self.spline(flat, nu=np.asarray(nu, dtype=np.intc))
        return out.reshape(pts.shape[:-1] + (2,))

    def jacobian(self, xi1, xi2):
        """Position X and the columns dX/dxi1, dX/dxi2."""
        return self(xi1, xi2), self(xi1, xi2, (1, 0)), self(xi1, xi2, (0, 1))


@dataclass
class MetricData:
    """Mapping metrics at a set of logical points.

    ``N`` holds the area normals of the xi1 = const and xi2 = const faces
    (rows) so that the flux through a face is N[d] . u integrated over the
    face.  With ``toroidal`` the normals and J include the 2 pi R factor of
    the axisymmetric revolution.
    """

    X: np.ndarray
    dX1: np.ndarray
    dX2: np.ndarray
    J: np.ndarray
    N: np.ndarray


def eval_metrics(mapping, xi1, xi2, toroidal=True) -> MetricData:
    X, d1, d2 = mapping.jacobian(xi1, xi2)
    J2 = d1[..., 0] * d2[..., 1] - d2[..., 0] * d1[..., 1]
    N = np.stack([np.stack([d2[..., 1], -d2[..., 0]], -1), np.stack([-d1[..., 1], d1[..., 0]], -1)], -2)
    if toroidal:
        f = 2 * np.pi * X[..., 0]
        J2 = f * J2
        N = f[..., None, None] * N
    return MetricData(X, d1, d2, J2, N)


def build_mapping(grid: BlockGrid, degree: int = 6) -> BlockMapping:
    """Interpolating tensor-product spline through every node, ghosts included."""
    try:
        s1 = make_interp_spline(grid.xi1, grid.nodes, k=degree, axis=0)
        s2 = make_interp_spline(grid.xi2, s1.c, k=degree, axis=1)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise GridGenerationError(f"spline construction failed for {grid.name}") from exc
    spline = NdBSpline((s1.t, s2.t), np.moveaxis(s2.c, 0, 1), degree, extrapolate=False)
    return BlockMapping(grid.name, grid.n_rad, grid.n_pol, grid.m_rad, grid.m_pol, spline)


def build_mappings(mg: MappingGrid) -> dict:
    return {name: build_mapping(g) for name, g in mg.blocks.items()}


# ---------------------------------------------------------------------------
# text export


def export_mapping_grid(mg: MappingGrid, out_dir) -> list:
    """One text file per block; coordinates written with 17 significant digits."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, g in mg.blocks.items():
        lines = [f"# block {name} n_rad {g.n_rad} n_pol {g.n_pol} m_rad {g.m_rad} m_pol {g.m_pol}",
                 "# i j R Z valid"]
        for a in range(g.nodes.shape[0]):
            for b in range(g.nodes.shape[1]):
                R, Z = g.nodes[a, b]
                lines.append(f"{a - g.m_rad} {b - g.m_pol} {R:.17g} {Z:.17g} {int(g.valid[a, b])}")
        path = out_dir / f"{name}.map"
        _atomic_write_text(path, "\n".join(lines) + "\n")
        paths.append(path)
    return paths


def read_block_grid(path) -> BlockGrid:
    text = Path(path).read_text().splitlines()
    head = text[0].split()
    name = head[2]
    vals = dict(zip(head[3::2], map(int, head[4::2])))
    na, nb = vals["n_rad"] + 2 * vals["m_rad"] + 1, vals["n_pol"] + 2 * vals["m_pol"] + 1
    nodes = np.empty((na, nb, 2))
    valid = np.zeros((na, nb), bool)
    for line in text[2:]:
        i, j, R, Z, v = line.split()
        a, b = int(i) + vals["m_rad"], int(j) + vals["m_pol"]
        nodes[a, b] = float(R), float(Z)
        valid[a, b] = v == "1"
    return BlockGrid(name, vals["n_rad"], vals["n_pol"], vals["m_rad"], vals["m_pol"], nodes, valid,
                     np.zeros((na, nb), np.int8))


def _atomic_write_text(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)
