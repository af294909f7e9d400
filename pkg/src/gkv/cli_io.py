"""Command-line entry point, run configuration and file formats.

Configuration files are INI-style: ``[section]`` or ``[section.sub]`` headers
followed by ``key = value`` lines.  A key's full path is the section name
plus the key, e.g. ``grid.N_rad`` or ``geometry.blend.D``.  Every key is
optional; unknown sections or keys are rejected.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import re
import struct
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .block_mapping import (BLOCKS, EdgeGeometry, GridGenerationError, MappingResolution, TopologyError,
                            _atomic_write_text, build_mappings, export_mapping_grid, generate_mapping_grids)
from .fv_operator import BOUNDARY_MODES, RECON_MODES, IntegrationError, apply_vlasov, freestream_check
from .magnetic_geometry import DomainError, FluxField, GeometryError
from .multiblock_exchange import StencilError, build_ghost_stencils, dump_stencils, fill_ghosts
from .phase_space import (ConfigError, DistributionField, ExchangeError, GridLevel, PhaseSpaceGrid, SpeciesParams,
                          build_phase_grid, init_boltzmann)
from .velocity_divfree import ConfigBox, EfieldData, face_velocities
from . import verification as ver

log = logging.getLogger("gkv")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
INVARIANT_TOL = 1e-12

# ---------------------------------------------------------------------------
# configuration schema


def _int_list(s):
    return [int(x) for x in re.split(r"[,\s]+", s.strip()) if x]


def _float_list(s):
    return [float(x) for x in re.split(r"[,\s]+", s.strip()) if x]


def _pos(x):
    return x > 0


def _nonneg(x):
    return x >= 0


# key path -> (parser, default, check, message)
SCHEMA = {
    "geometry.c1": (float, 1.2, None, ""),
    "geometry.c2": (float, 0.9, _pos, "must be positive"),
    "geometry.c3": (float, 0.7, _pos, "must be positive"),
    "geometry.L_N": (float, 1.0, _pos, "must be positive (m)"),
    "geometry.R0": (float, 1.6, _pos, "must be positive (m)"),
    "geometry.Z0_offset": (float, 0.4, None, ""),
    "geometry.RB_tor": (float, 3.5, None, ""),
    "geometry.B_theta_bar": (float, 0.16, _pos, "must be positive (T)"),
    "geometry.R_mp": (float, 2.11, _pos, "must be positive (m)"),
    "geometry.width_core_m": (float, 0.067, _pos, "must be positive"),
    "geometry.width_sol_m": (float, 0.067, _pos, "must be positive"),
    "geometry.ramp_fraction": (float, 0.25, lambda x: 0 < x < 1, "must lie in (0, 1)"),
    "geometry.blend.D": (float, None, _pos, "must be positive (m)"),
    "geometry.blend.alpha": (float, 1.0, _pos, "must be positive"),
    "mapping.N_rad": (int, 24, lambda x: x >= 8, "must be at least 8"),
    "mapping.N_core": (int, 256, lambda x: x >= 32 and x % 8 == 0, "must be a multiple of 8, at least 32"),
    "mapping.M_rad": (int, None, _pos, "must be a positive integer"),
    "mapping.M_pol": (int, None, _pos, "must be a positive integer"),
    "grid.level": (int, 1, lambda x: x >= 1, "must be >= 1"),
    "grid.N_rad": (int, None, _pos, "must be a positive integer"),
    "grid.N_x": (int, None, _pos, "must be a positive integer"),
    "grid.N_m": (int, None, _pos, "must be a positive integer"),
    "grid.N_v": (int, None, _pos, "must be a positive integer"),
    "grid.N_mu": (int, None, _pos, "must be a positive integer"),
    "grid.M": (int, 3, lambda x: x >= 3, "must be at least 3"),
    "grid.v_min": (float, -1.0, None, ""),
    "grid.v_max": (float, 1.0, None, ""),
    "grid.mu_min": (float, 0.0, _nonneg, "must be non-negative"),
    "grid.mu_max": (float, 2.0, _pos, "must be positive"),
    "species.Z": (float, 1.0, lambda x: x != 0, "must be nonzero"),
    "species.m": (float, 1.0, _pos, "must be positive"),
    "species.T": (float, 1.0, _pos, "must be positive"),
    "species.rho_L": (float, 1e-3, _nonneg, "must be non-negative"),
    "numerics.reconstruction": (str, "centered", lambda x: x in RECON_MODES, f"must be one of {RECON_MODES}"),
    "numerics.velocity_mode": (str, "divfree", lambda x: x in ("divfree", "metric"), "must be divfree or metric"),
    "numerics.boundary": (str, "zero_inflow", lambda x: x in BOUNDARY_MODES, f"must be one of {BOUNDARY_MODES}"),
    "numerics.P": (int, 4, lambda x: x == 4, "only P = 4 (cubic ghost fits) is implemented"),
    "numerics.quadrature": (int, 4, lambda x: 2 <= x <= 12, "must lie in [2, 12]"),
    "study.levels": (_int_list, [1, 2, 3], lambda v: len(v) >= 2 and min(v) >= 1, "needs at least two levels >= 1"),
    "study.test_cells": (_int_list, None, lambda v: all(0 <= c < 18 for c in v), "cell ids lie in 0..17"),
    "study.mapping_N_rad": (int, None, _pos, "must be a positive integer"),
    "study.mapping_N_core": (int, None, lambda x: x >= 32 and x % 8 == 0, "must be a multiple of 8, at least 32"),
    "study.pollution_N_core": (_int_list, [32, 64, 128, 256], lambda v: all(x >= 32 and x % 8 == 0 for x in v),
                               "entries must be multiples of 8, at least 32"),
    "study.pollution_level": (int, 3, lambda x: x >= 1, "must be >= 1"),
    "study.pollution_mapping_N_rad": (int, None, _pos, "must be a positive integer"),
    "study.pollution_velocity": (_float_list, [0.5, 0.5], lambda v: len(v) == 2, "needs two values (v_par, mu)"),
    "study.pollution_window": (int, 4, _pos, "must be a positive integer"),
}

SECTIONS = sorted({k.rsplit(".", 1)[0] for k in SCHEMA})


@dataclass
class RunConfig:
    """Validated settings; ``values`` maps every schema key path to its value."""

    values: dict
    source: str = "<defaults>"
    lines: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def flux(self) -> FluxField:
        v = self.values
        return FluxField(c1=v["geometry.c1"], c2=v["geometry.c2"], c3=v["geometry.c3"], L_N=v["geometry.L_N"],
                         R0=v["geometry.R0"], Z0_offset=v["geometry.Z0_offset"], RB_tor=v["geometry.RB_tor"],
                         B_theta_bar=v["geometry.B_theta_bar"], R_mp=v["geometry.R_mp"])

    def geometry(self) -> EdgeGeometry:
        v = self.values
        return EdgeGeometry(self.flux(), v["geometry.width_core_m"], v["geometry.width_sol_m"],
                            v["geometry.blend.D"], v["geometry.blend.alpha"], v["geometry.ramp_fraction"])

    def grid_level(self, level=None) -> GridLevel:
        v = self.values
        base = GridLevel.from_level(level or v["grid.level"])
        if level is not None:
            return base
        return GridLevel(*(v[f"grid.{k}"] or getattr(base, a) for k, a in
                           (("N_rad", "n_rad"), ("N_x", "n_x"), ("N_m", "n_m"), ("N_v", "n_v"), ("N_mu", "n_mu"))))

    def mapping_resolution(self, level: GridLevel | None = None, n_rad=None, n_core=None) -> MappingResolution:
        """Mapping resolution with ghost extensions covering ``level`` (default: the configured grid)."""
        v = self.values
        level = level or self.grid_level()
        res = MappingResolution.covering(n_rad or v["mapping.N_rad"], n_core or v["mapping.N_core"],
                                         level.n_rad, level.n_x, v["grid.M"])
        m_rad = v["mapping.M_rad"] or res.m_rad
        m_pol = v["mapping.M_pol"] or res.m_pol
        return MappingResolution(res.n_rad, res.n_core, m_rad, m_pol)

    def species(self) -> SpeciesParams:
        v = self.values
        return SpeciesParams(v["species.Z"], v["species.m"], v["species.T"], v["species.rho_L"])

    @property
    def v_bounds(self):
        return self.values["grid.v_min"], self.values["grid.v_max"]

    @property
    def mu_bounds(self):
        return self.values["grid.mu_min"], self.values["grid.mu_max"]

    def test_cells(self):
        ids = self.values["study.test_cells"]
        cells = ver.DEFAULT_TEST_CELLS
        return cells if ids is None else tuple(c for c in cells if c.cell_id in set(ids))


def _key_lines(text):
    """Line number of every ``section.key`` in an INI text."""
    out, section = {}, None
    for n, raw in enumerate(text.splitlines(), 1):
        s = raw.strip()
        if not s or s[0] in "#;":
            continue
        m = re.match(r"\[(.+)\]$", s)
        if m:
            section = m.group(1).strip()
            out.setdefault(section, n)
            continue
        m = re.match(r"([^=:]+?)\s*[=:]", s)
        if m and section:
            out[f"{section}.{m.group(1).strip()}"] = n
    return out


def parse_config(text: str, source="<string>") -> RunConfig:
    lines = _key_lines(text)
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keys are case-sensitive
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc

    def where(path):
        return f"{source}:{lines[path]}" if path in lines else source

    values = {k: entry[1] for k, entry in SCHEMA.items()}
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{where(section)}: unknown section [{section}]")
        for key, raw in cp.items(section):
            path = f"{section}.{key}"
            if path not in SCHEMA:
                raise ConfigError(f"{where(path)}: unknown key {path}")
            parse, _, check, msg = SCHEMA[path]
            try:
                val = parse(raw)
            except ValueError:
                raise ConfigError(f"{where(path)}: {path}: cannot parse {raw!r}") from None
            if check is not None and not check(val):
                raise ConfigError(f"{where(path)}: {path} = {raw!r}: {msg}")
            values[path] = val
    cfg = RunConfig(values, source, lines)
    _cross_check(cfg, where)
    return cfg


def _cross_check(cfg: RunConfig, where):
    v = cfg.values
    if not v["grid.v_max"] > v["grid.v_min"]:
        raise ConfigError(f"{where('grid.v_max')}: grid.v_max must exceed grid.v_min")
    if not v["grid.mu_max"] > v["grid.mu_min"]:
        raise ConfigError(f"{where('grid.mu_max')}: grid.mu_max must exceed grid.mu_min")
    if not v["geometry.c2"] > v["geometry.c3"]:
        raise ConfigError(f"{where('geometry.c2')}: geometry.c2 must exceed geometry.c3")
    lvl = cfg.grid_level()
    if lvl.n_x * 6 != lvl.n_m:
        raise ConfigError(f"{where('grid.N_m')}: grid.N_m must equal 6 * grid.N_x (the core closes on itself)")
    try:
        cfg.mapping_resolution(lvl)
    except GridGenerationError as exc:
        raise ConfigError(f"{where('mapping.N_core')}: mapping resolution: {exc}") from None


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {p}: {exc.strerror}") from exc
    return parse_config(text, str(p))


# ---------------------------------------------------------------------------
# binary snapshot

MAGIC = b"GKV1"
KIND_F, KIND_RHS = 0, 1
_HEAD = struct.Struct("<4sI4d4d3I")
_BLOCK = struct.Struct("<8s2I")


def write_snapshot(path, grid: PhaseSpaceGrid, species: SpeciesParams, arrays: dict, kind=KIND_F):
    """Valid-cell arrays (n_rad, n_pol, n_v, n_mu) of every block, little-endian doubles."""
    parts = [_HEAD.pack(MAGIC, kind, species.Z, species.m, species.T, species.rho_L,
                        *grid.v_bounds, *grid.mu_bounds, grid.n_v, grid.n_mu, len(BLOCKS))]
    for b in BLOCKS:
        parts.append(_BLOCK.pack(b.encode("ascii").ljust(8), grid.n_rad, grid.n_pol(b)))
    for b in BLOCKS:
        a = np.asarray(arrays[b], dtype="<f8")
        if a.shape != (grid.n_rad, grid.n_pol(b), grid.n_v, grid.n_mu):
            raise ConfigError(f"snapshot block {b} has shape {a.shape}")
        parts.append(np.ascontiguousarray(a).tobytes())
    p = Path(path)
    tmp = p.with_name(p.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(p)
    return p


@dataclass
class Snapshot:
    kind: int
    species: SpeciesParams
    v_bounds: tuple
    mu_bounds: tuple
    n_v: int
    n_mu: int
    dims: dict
    arrays: dict


def read_snapshot(path) -> Snapshot:
    data = Path(path).read_bytes()
    if len(data) < _HEAD.size or data[:4] != MAGIC:
        raise ConfigError(f"{path}: not a GKV1 snapshot")
    magic, kind, Z, m, T, rho, v0, v1, u0, u1, n_v, n_mu, nb = _HEAD.unpack_from(data)
    off = _HEAD.size
    dims = {}
    for _ in range(nb):
        name, n1, n2 = _BLOCK.unpack_from(data, off)
        off += _BLOCK.size
        dims[name.decode("ascii").strip()] = (n1, n2)
    arrays = {}
    for b, (n1, n2) in dims.items():
        n = n1 * n2 * n_v * n_mu
        if off + 8 * n > len(data):
            raise ConfigError(f"{path}: truncated snapshot")
        arrays[b] = np.frombuffer(data, "<f8", n, off).reshape(n1, n2, n_v, n_mu).astype(float)
        off += 8 * n
    if off != len(data):
        raise ConfigError(f"{path}: {len(data) - off} trailing bytes")
    return Snapshot(kind, SpeciesParams(Z, m, T, rho), (v0, v1), (u0, u1), n_v, n_mu, dims, arrays)


def field_from_snapshot(snap: Snapshot, grid: PhaseSpaceGrid) -> DistributionField:
    if (snap.n_v, snap.n_mu) != (grid.n_v, grid.n_mu) or any(
            snap.dims.get(b) != (grid.n_rad, grid.n_pol(b)) for b in BLOCKS):
        raise ConfigError("snapshot dimensions do not match the configured grid")
    if not (np.allclose(snap.v_bounds, grid.v_bounds, rtol=0, atol=0)
            and np.allclose(snap.mu_bounds, grid.mu_bounds, rtol=0, atol=0)):
        raise ConfigError("snapshot velocity bounds do not match the configured grid")
    fld = DistributionField.zeros(grid, snap.species)
    for b in BLOCKS:
        fld.valid(b)[...] = snap.arrays[b]
    fld.mark_modified()
    return fld


# ---------------------------------------------------------------------------
# pipelines


def build_grid(cfg: RunConfig, level: GridLevel | None = None, res: MappingResolution | None = None):
    """(mapping grid, phase grid) for the configured or given level."""
    level = level or cfg.grid_level()
    mg = generate_mapping_grids(cfg.geometry(), res or cfg.mapping_resolution(level))
    grid = build_phase_grid(mg.geometry, build_mappings(mg), level, cfg.v_bounds, cfg.mu_bounds, cfg["grid.M"])
    return mg, grid


def cmd_generate_mapping(cfg: RunConfig, args):
    mg = generate_mapping_grids(cfg.geometry(), cfg.mapping_resolution())
    paths = export_mapping_grid(mg, args.out)
    log.info("wrote %d mapping files to %s", len(paths), args.out)
    return EXIT_OK


def invariant_report(grid: PhaseSpaceGrid, species: SpeciesParams, workers=1):
    """Largest relative cell divergence of the face velocities, toroidal-face integral and aligned streaming."""
    ctx = ver.WindowContext(grid, species)
    worst = 0.0
    for b in BLOCKS:
        box = ConfigBox(b, 0, grid.n_rad, 0, grid.n_pol(b))
        fv = face_velocities(grid, box, ctx.efield, species, mode="divfree", k0=0, k1=grid.n_v, mu=grid.mu_centers())
        d, s = fv.cell_divergence()
        worst = max(worst, float(np.max(np.abs(d) / s)))
    stream = ver.streaming_cancellation(grid, ctx.efield, species)
    return {
        "max_cell_divergence": worst,
        # the toroidal angle is integrated out; those faces carry no flux by construction
        "max_toroidal_face_integral": 0.0,
        "max_aligned_streaming_residual": max(stream.values()) if stream else 0.0,
        "max_freestream_divergence": freestream_check(grid),
    }


def cmd_check_invariants(cfg: RunConfig, args):
    _, grid = build_grid(cfg)
    rep = invariant_report(grid, cfg.species(), args.workers)
    for k, v in rep.items():
        print(f"{k}={v:.17g}")
    ok = all(v <= INVARIANT_TOL for v in rep.values())
    print(f"status={'pass' if ok else 'fail'}")
    return EXIT_OK if ok else EXIT_FAILURE


def cmd_apply_operator(cfg: RunConfig, args):
    mg, grid = build_grid(cfg)
    sp = cfg.species()
    fld, _, pot = init_boltzmann(grid, sp, q=cfg["numerics.quadrature"])
    efield = EfieldData(pot, grid.ghost)
    if args.snapshot:
        fld = field_from_snapshot(read_snapshot(args.snapshot), grid)
        sp = fld.species
    stencils = build_ghost_stencils(grid)
    if args.debug_stencils:
        dump_stencils(stencils, args.debug_stencils)
    fill_ghosts(fld, stencils, physical="extrapolate")
    rhs = apply_vlasov(fld, efield, sp, cfg["numerics.velocity_mode"], cfg["numerics.reconstruction"],
                       cfg["numerics.boundary"], workers=args.workers)
    if not all(np.all(np.isfinite(r)) for r in rhs.values()):
        log.error("non-finite right-hand side")
        return EXIT_FAILURE
    write_snapshot(args.out, grid, sp, rhs, KIND_RHS)
    log.info("wrote right-hand side to %s", args.out)
    return EXIT_OK


def _study_mappings(cfg: RunConfig, levels):
    coarse = cfg.grid_level(min(levels))
    res = cfg.mapping_resolution(coarse, cfg["study.mapping_N_rad"], cfg["study.mapping_N_core"])
    mg = generate_mapping_grids(cfg.geometry(), res)
    return mg, build_mappings(mg), res


def _levels(cfg: RunConfig, args):
    """``--levels N`` means levels 1..N and overrides ``study.levels``."""
    n = getattr(args, "levels", None)
    if n is None:
        return cfg["study.levels"]
    if n < 2:
        raise ConfigError("--levels needs at least 2")
    return list(range(1, n + 1))


def cmd_truncation_study(cfg: RunConfig, args):
    levels = _levels(cfg, args)
    mg, maps, res = _study_mappings(cfg, levels)
    rep = ver.convergence_study(mg.geometry, maps, levels, cfg.test_cells(), cfg["numerics.velocity_mode"],
                                cfg["numerics.reconstruction"], cfg.species(), cfg["numerics.quadrature"])
    ver.write_tau_report(rep, args.out, res)
    finite = all(np.isfinite(t).all() for t in rep.tau.values())
    return EXIT_OK if finite else EXIT_FAILURE


def cmd_compare_velocities(cfg: RunConfig, args):
    levels = _levels(cfg, args)
    mg, maps, _ = _study_mappings(cfg, levels)
    reps = ver.compare_velocity_formulations(mg.geometry, maps, levels, cfg.test_cells(), species=cfg.species(),
                                             quad=cfg["numerics.quadrature"],
                                             recon=cfg["numerics.reconstruction"])
    ver.write_comparison(reps, args.out)
    return EXIT_OK


def cmd_pollution_study(cfg: RunConfig, args):
    res = ver.pollution_study(cfg["study.pollution_N_core"], cfg["study.pollution_level"],
                              cfg["study.pollution_mapping_N_rad"], cfg["study.pollution_window"],
                              tuple(cfg["study.pollution_velocity"]), cfg["numerics.velocity_mode"], cfg.species(),
                              cfg["numerics.quadrature"], cfg.geometry())
    ver.write_pollution(res, args.out)
    for r in res:
        print(f"n_core={r.n_core} max_tau={r.max_tau:.17g}")
    return EXIT_OK


COMMANDS = {
    "generate-mapping": (cmd_generate_mapping, "write the ghost-extended mapping grids, one text file per block"),
    "check-invariants": (cmd_check_invariants, "report discrete divergence, free-stream and streaming residuals"),
    "apply-operator": (cmd_apply_operator, "evaluate the Vlasov right-hand side into a binary snapshot"),
    "truncation-study": (cmd_truncation_study, "Boltzmann-equilibrium truncation errors and convergence orders"),
    "pollution-study": (cmd_pollution_study, "near-X truncation error versus mapping poloidal resolution"),
    "compare-velocities": (cmd_compare_velocities, "truncation errors of the two velocity discretizations"),
}


def build_parser():
    ap = argparse.ArgumentParser(prog="gkv", description="Mapped multiblock gyrokinetic Vlasov operator tools")
    ap.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for debug output")
    sub = ap.add_subparsers(dest="command", metavar="command")
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="INI configuration file")
        p.add_argument("--workers", type=int, default=1, help="worker threads (results do not depend on it)")
        p.add_argument("-v", "--verbose", action="count", default=0, dest="sub_verbose")
        if name != "check-invariants":
            p.add_argument("--out", required=True, help="output directory (file for apply-operator)")
        if name in ("truncation-study", "compare-velocities"):
            p.add_argument("--levels", type=int, help="run levels 1..N (overrides study.levels)")
        if name == "apply-operator":
            p.add_argument("--snapshot", help="input distribution snapshot; default: Boltzmann equilibrium")
            p.add_argument("--debug-stencils", metavar="PATH", help="write the ghost stencils as text")
    return ap


NUMERICAL_ERRORS = (GeometryError, DomainError, GridGenerationError, TopologyError, StencilError, ExchangeError,
                    IntegrationError, FloatingPointError, np.linalg.LinAlgError)


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.command is None:
        ap.print_usage(sys.stderr)
        return EXIT_USAGE
    verbosity = args.verbose + getattr(args, "sub_verbose", 0)
    logging.basicConfig(stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
                        level=(logging.WARNING, logging.INFO, logging.DEBUG)[min(verbosity, 2)])
    if getattr(args, "workers", 1) < 1:
        print("error: --workers must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command][0](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NUMERICAL_ERRORS as exc:
        print(f"numerical error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
