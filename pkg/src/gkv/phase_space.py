"""Phase-space grid, normalization, distribution storage and the Boltzmann state.

Phase space is (v_par, xi1, xi2, mu) per configuration block.  v_par and mu
are affine in their logical coordinates; mu is a parameter direction with no
flux.  The stored state is the logical-space cell average of f; cell
integrals of J f follow from it with the product rule (``particle_content``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import constants
from scipy.special import erf

from .block_mapping import BLOCKS, M_BLOCKS, BlockMapping, BlockTopology, EdgeGeometry, single_null_topology
from .magnetic_geometry import DomainError, eval_field


class ConfigError(ValueError):
    """Inconsistent or invalid run parameters."""


class ExchangeError(RuntimeError):
    """Ghost data missing or older than the valid data it depends on."""


def gauss_unit(q: int):
    """Gauss-Legendre nodes and weights on [0, 1]."""
    x, w = leggauss(q)
    return 0.5 * (x + 1.0), 0.5 * w


# ---------------------------------------------------------------------------
# normalization and species


@dataclass(frozen=True)
class Normalization:
    """Reference scales: density [m^-3], temperature [eV], length [m], mass [amu], field [T]."""

    n_ref: float = 1.0e20
    T_ref_eV: float = 100.0
    L_ref_m: float = 1.0
    m_ref_amu: float = 1.0
    B_ref_T: float = 1.0

    @property
    def T_J(self) -> float:
        return self.T_ref_eV * constants.e

    @property
    def m_kg(self) -> float:
        return self.m_ref_amu * constants.atomic_mass

    @property
    def v_ref(self) -> float:
        return np.sqrt(self.T_J / self.m_kg)

    @property
    def tau_ref(self) -> float:
        return self.L_ref_m / self.v_ref

    @property
    def mu_ref(self) -> float:
        return self.T_J / (2 * self.B_ref_T)

    @property
    def f_ref(self) -> float:
        return self.n_ref / (np.pi * self.v_ref**3)

    @property
    def phi_ref(self) -> float:
        return self.T_J / constants.e

    @property
    def omega_ref(self) -> float:
        return constants.e * self.B_ref_T / self.m_kg

    @property
    def debye_ref(self) -> float:
        return np.sqrt(constants.epsilon_0 * self.T_J / (self.n_ref * constants.e**2))

    @property
    def rho_L(self) -> float:
        return self.v_ref / (self.omega_ref * self.L_ref_m)

    @property
    def lambda_D(self) -> float:
        return self.debye_ref / self.L_ref_m


@dataclass(frozen=True)
class SpeciesParams:
    """Normalized charge state, mass and temperature, plus the Larmor number."""

    Z: float = 1.0
    m: float = 1.0
    T: float = 1.0
    rho_L: float = 1.0e-3

    def __post_init__(self):
        if self.m <= 0 or self.T <= 0:
            raise ConfigError("species mass and temperature must be positive")
        if self.Z == 0:
            raise ConfigError("species charge state must be nonzero")
        if self.rho_L < 0:
            raise ConfigError("rho_L must be non-negative")


# ---------------------------------------------------------------------------
# grid


@dataclass(frozen=True)
class GridLevel:
    n_rad: int
    n_x: int
    n_m: int
    n_v: int
    n_mu: int

    @classmethod
    def from_level(cls, m: int) -> "GridLevel":
        """Level m of the refinement sequence starting from 8 x 48 / 8 x 8 / 24 x 24."""
        if m < 1:
            raise ConfigError("grid level must be >= 1")
        s = 2 ** (m - 1)
        return cls(8 * s, 8 * s, 48 * s, 24 * s, 24 * s)

    def n_pol(self, block: str) -> int:
        return self.n_m if block in M_BLOCKS else self.n_x

    def total_cells(self) -> int:
        return sum(self.n_rad * self.n_pol(b) for b in BLOCKS) * self.n_v * self.n_mu


@dataclass
class PhaseSpaceGrid:
    """Configuration blocks times a shared (v_par, mu) grid.

    ``ghost`` is the configuration ghost width; v_par carries ``ghost`` ghost
    cells too, mu carries one (for transverse differences only).
    """

    geometry: EdgeGeometry
    topology: BlockTopology
    mappings: dict
    level: GridLevel
    v_bounds: tuple = (-1.0, 1.0)
    mu_bounds: tuple = (0.0, 2.0)
    ghost: int = 3
    mu_ghost: int = 1

    @property
    def n_rad(self):
        return self.level.n_rad

    def n_pol(self, block):
        return self.level.n_pol(block)

    @property
    def n_v(self):
        return self.level.n_v

    @property
    def n_mu(self):
        return self.level.n_mu

    @property
    def dv(self) -> float:
        return (self.v_bounds[1] - self.v_bounds[0]) / self.n_v

    @property
    def dmu(self) -> float:
        return (self.mu_bounds[1] - self.mu_bounds[0]) / self.n_mu

    def v_edges(self, ghost=None):
        g = self.ghost if ghost is None else ghost
        k = np.arange(-g, self.n_v + g + 1)
        return self.v_bounds[0] + k * self.dv

    def mu_edges(self, ghost=None):
        g = self.mu_ghost if ghost is None else ghost
        k = np.arange(-g, self.n_mu + g + 1)
        return self.mu_bounds[0] + k * self.dmu

    def mu_centers(self, ghost=None):
        e = self.mu_edges(ghost)
        return 0.5 * (e[1:] + e[:-1])

    def h(self, block):
        return 1.0 / self.n_rad, 1.0 / self.n_pol(block)

    def total_cells(self) -> int:
        return self.level.total_cells()

    def node_positions(self, block, i, j):
        """Images of logical nodes (i, j) (integer arrays, ghosts allowed)."""
        h1, h2 = self.h(block)
        return self.mappings[block](np.asarray(i) * h1, np.asarray(j) * h2)

    def cell_points(self, block, i, j, q):
        """Logical Gauss points (xi1, xi2) and weights for cells (i, j), shape (..., q, q)."""
        s, w = gauss_unit(q)
        h1, h2 = self.h(block)
        i = np.asarray(i, float)[..., None, None]
        j = np.asarray(j, float)[..., None, None]
        x1 = (i + s[:, None]) * h1
        x2 = (j + s[None, :]) * h2
        return x1, x2, w[:, None] * w[None, :]

    def config_volumes(self, block, i, j, q=4):
        """Physical volumes of revolution of configuration cells: 2 pi int R J2 dxi."""
        x1, x2, w = self.cell_points(block, i, j, q)
        m = self.mappings[block]
        X, d1, d2 = m.jacobian(x1, x2)
        J2 = d1[..., 0] * d2[..., 1] - d2[..., 0] * d1[..., 1]
        h1, h2 = self.h(block)
        return 2 * np.pi * h1 * h2 * np.sum(w * X[..., 0] * J2, axis=(-2, -1))

    def check_conformity(self):
        for a, ea, b, eb in self.topology.interfaces():
            na = self.n_rad if ea in ("ylo", "yhi") else self.n_pol(a)
            nb = self.n_rad if eb in ("ylo", "yhi") else self.n_pol(b)
            if na != nb:
                raise ConfigError(f"non-conforming interface {a}.{ea} ({na}) / {b}.{eb} ({nb})")


def build_phase_grid(geometry: EdgeGeometry, mappings: dict, level: GridLevel,
                     v_bounds=(-1.0, 1.0), mu_bounds=(0.0, 2.0), ghost=3, topology=None) -> PhaseSpaceGrid:
    topology = topology or single_null_topology()
    if v_bounds[1] <= v_bounds[0] or mu_bounds[1] <= mu_bounds[0] or mu_bounds[0] < 0:
        raise ConfigError("velocity bounds must be increasing with mu >= 0")
    for name in BLOCKS:
        if name not in mappings:
            raise ConfigError(f"missing mapping for block {name}")
        mp: BlockMapping = mappings[name]
        need1 = ghost / level.n_rad
        need2 = ghost / level.n_pol(name)
        if mp.m_rad / mp.n_rad < need1 - 1e-14 or mp.m_pol / mp.n_pol < need2 - 1e-14:
            raise ConfigError(f"mapping ghost extension of {name} does not cover {ghost} compute ghost cells")
    grid = PhaseSpaceGrid(geometry, topology, mappings, level, tuple(v_bounds), tuple(mu_bounds), ghost)
    grid.check_conformity()
    return grid


# ---------------------------------------------------------------------------
# Boltzmann equilibrium


def tanh_density(psi):
    return np.tanh(25.0 * (0.9 - psi)) + 1.1


@dataclass
class BoltzmannEquilibrium:
    """Maxwellian with flux-function density and the matching Boltzmann potential.

    The density argument is the flux normalized to 0 on the magnetic axis and
    1 on the separatrix.
    """

    geometry: EdgeGeometry
    species: SpeciesParams = field(default_factory=SpeciesParams)
    density: callable = tanh_density

    @cached_property
    def _psi_ref(self):
        flux = self.geometry.flux
        return flux.psi_n_axis, self.geometry.xpt.psi_X

    def psi(self, R, Z):
        a, s = self._psi_ref
        return (self.geometry.flux.normalized_flux(R, Z).psi - a) / (s - a)

    def n(self, R, Z):
        n = self.density(self.psi(R, Z))
        if np.any(n <= 0):
            raise DomainError("non-positive density")
        return n

    def potential(self, R, Z):
        sp = self.species
        return -(sp.T / sp.Z) * np.log(self.n(R, Z))

    def f(self, R, Z, v, mu):
        """Pointwise distribution; R, Z, v, mu broadcast together."""
        sp = self.species
        B = eval_field(self.geometry.flux, R, Z).B
        pref = self.n(R, Z) / (np.sqrt(np.pi) * (2 * sp.T / sp.m) ** 1.5)
        return pref * np.exp(-(sp.m * v**2 + mu * B) / (2 * sp.T))

    def v_factor(self, v_edges):
        """Cell averages of exp(-m v^2 / 2T) over consecutive v edges (exact)."""
        sp = self.species
        s = np.sqrt(sp.m / (2 * sp.T))
        e = np.asarray(v_edges, float)
        return np.sqrt(np.pi) / (2 * s) * (erf(s * e[1:]) - erf(s * e[:-1])) / np.diff(e)

    def mu_factor(self, B, mu_edges):
        """Cell averages of exp(-mu B / 2T) over consecutive mu edges (exact), shape B.shape + (n_mu,)."""
        T = self.species.T
        e = np.asarray(mu_edges, float)
        B = np.asarray(B, float)[..., None]
        k = B / (2 * T)
        return (np.exp(-k * e[:-1]) - np.exp(-k * e[1:])) / (k * np.diff(e))

    def config_mu_averages(self, mapping, n_rad, n_pol, i, j, mu_edges, q=2):
        """Logical-space averages over configuration cells (i, j) of n(psi) exp(-mu B/2T) / norm.

        Returns shape i.shape + (n_mu,).
        """
        sp = self.species
        s, w = gauss_unit(q)
        i = np.asarray(i, float)[..., None, None]
        j = np.asarray(j, float)[..., None, None]
        X = mapping((i + s[:, None]) / n_rad, (j + s[None, :]) / n_pol)
        R, Z = X[..., 0], X[..., 1]
        B = eval_field(self.geometry.flux, R, Z).B
        pref = self.n(R, Z) / (np.sqrt(np.pi) * (2 * sp.T / sp.m) ** 1.5)
        vals = pref[..., None] * self.mu_factor(B, mu_edges)
        W = (w[:, None] * w[None, :])[..., None]
        return np.sum(vals * W, axis=(-3, -2))

    def cell_averages(self, grid: PhaseSpaceGrid, block, i, j, q=2, v_ghost=None, mu_ghost=None):
        """Averages of f over phase cells: configuration cells (i, j) times every (v, mu) cell.

        Shape i.shape + (n_v + 2 gv, n_mu + 2 gmu).
        """
        cm = self.config_mu_averages(grid.mappings[block], grid.n_rad, grid.n_pol(block), i, j,
                                     grid.mu_edges(mu_ghost), q)
        vf = self.v_factor(grid.v_edges(v_ghost))
        return cm[..., None, :] * vf[:, None]


# ---------------------------------------------------------------------------
# distribution storage


@dataclass
class DistributionField:
    """Per-block padded arrays of cell averages of f, axes (xi1, xi2, v_par, mu).

    Configuration and v_par pads are ``grid.ghost`` wide, mu pads
    ``grid.mu_ghost``.  ``ghost_epoch`` counts exchanges; ``valid_epoch``
    counts writes to valid data, so ghosts are current when the two match.
    """

    grid: PhaseSpaceGrid
    species: SpeciesParams
    data: dict
    valid_epoch: int = 0
    ghost_epoch: int = -1

    @classmethod
    def zeros(cls, grid: PhaseSpaceGrid, species: SpeciesParams) -> "DistributionField":
        g, gm = grid.ghost, grid.mu_ghost
        data = {b: np.zeros((grid.n_rad + 2 * g, grid.n_pol(b) + 2 * g, grid.n_v + 2 * g, grid.n_mu + 2 * gm))
                for b in BLOCKS}
        return cls(grid, species, data)

    def valid(self, block) -> np.ndarray:
        g, gm = self.grid.ghost, self.grid.mu_ghost
        a = self.data[block]
        return a[g:-g, g:-g, g:-g, gm:-gm]

    def mark_modified(self):
        self.valid_epoch += 1

    @property
    def ghosts_current(self) -> bool:
        return self.ghost_epoch == self.valid_epoch

    def copy(self) -> "DistributionField":
        return DistributionField(self.grid, self.species, {b: a.copy() for b, a in self.data.items()},
                                 self.valid_epoch, self.ghost_epoch)


def padded_cell_indices(grid: PhaseSpaceGrid, block):
    g = grid.ghost
    i = np.arange(-g, grid.n_rad + g)
    j = np.arange(-g, grid.n_pol(block) + g)
    return np.meshgrid(i, j, indexing="ij")


def init_boltzmann(grid: PhaseSpaceGrid, species: SpeciesParams | None = None, density=tanh_density,
                   q: int = 2):
    """Maxwellian cell averages on every valid and ghost cell, and nodal potential.

    All pads (including extrablock ghosts) are filled from the analytic
    state; callers that want interpolated extrablock ghosts overwrite them
    with an exchange.  Returns (field, equilibrium, potential) where
    potential[block] holds nodal values on the ghost-extended node lattice.
    """
    species = species or SpeciesParams()
    eq = BoltzmannEquilibrium(grid.geometry, species, density)
    fld = DistributionField.zeros(grid, species)
    pot = {}
    g = grid.ghost
    for b in BLOCKS:
        I, J = padded_cell_indices(grid, b)
        fld.data[b][...] = eq.cell_averages(grid, b, I, J, q)
        ni = np.arange(-g, grid.n_rad + g + 1)
        nj = np.arange(-g, grid.n_pol(b) + g + 1)
        X = grid.node_positions(b, ni[:, None], nj[None, :])
        pot[b] = eq.potential(X[..., 0], X[..., 1])
    fld.ghost_epoch = fld.valid_epoch
    return fld, eq, pot


def particle_content(grid: PhaseSpaceGrid, fld: DistributionField, block, q=4):
    """Cell integrals of J f over valid phase cells from the stored averages.

    Uses the fourth-order product rule <J f> = <J><f> + (1/12) sum_d D_d<J> D_d<f>
    with centered differences D_d over one cell; needs current ghosts.
    """
    g, gm = grid.ghost, grid.mu_ghost
    n1, n2 = grid.n_rad, grid.n_pol(block)
    i = np.arange(-1, n1 + 1)
    j = np.arange(-1, n2 + 1)
    I, J = np.meshgrid(i, j, indexing="ij")
    h1, h2 = grid.h(block)
    Jbar = grid.config_volumes(block, I, J, q) / (h1 * h2)
    f = fld.data[block][g - 1 : g + n1 + 1, g - 1 : g + n2 + 1, g:-g, gm:-gm]
    core = (slice(1, -1), slice(1, -1))
    val = Jbar[core][..., None, None] * f[core]
    val += (Jbar[2:, 1:-1] - Jbar[:-2, 1:-1])[..., None, None] * (f[2:, 1:-1] - f[:-2, 1:-1]) / 48
    val += (Jbar[1:-1, 2:] - Jbar[1:-1, :-2])[..., None, None] * (f[1:-1, 2:] - f[1:-1, :-2]) / 48
    return val * h1 * h2 * grid.dv * grid.dmu
