import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gkv.block_mapping import BLOCKS
from gkv.multiblock_exchange import (COPY, LSQ, MONOMIALS, PHYSICAL, classify_cell, check_donor_epoch,
                                     dump_stencils, fill_ghosts, fill_velocity_ghosts, find_copy_donor,
                                     lsq_weights, monomial_averages)
from gkv.phase_space import ConfigError, DistributionField, ExchangeError


def _cubic(R, Z):
    return 0.7 - 1.3 * R + 0.4 * Z + 0.9 * R * R - 0.5 * R * Z + 0.2 * Z * Z + 0.3 * R**3 - 0.6 * R * R * Z + Z**3


def _logical_average(grid, block, i, j, fn, panels=6, q=10):
    """Panelled Gauss average over the logical cell, ignoring the mapping's knots."""
    s, w = np.polynomial.legendre.leggauss(q)
    s, w = (s + 1) / 2, w / 2
    h1, h2 = grid.h(block)
    u = (np.arange(panels)[:, None] + s).ravel() / panels
    wu = np.tile(w, panels) / panels
    X = grid.mappings[block]((i + u[:, None]) * h1, (j + u[None, :]) * h2)
    return float(np.sum(wu[:, None] * wu[None, :] * fn(X[..., 0], X[..., 1])))


def test_cell_classification(grid1):
    n = grid1.n_rad
    assert classify_cell(grid1, "MCORE", 0, 0) == "valid"
    assert classify_cell(grid1, "MCORE", -1, 3) == PHYSICAL  # core inner edge
    assert classify_cell(grid1, "MCORE", n, 3) == "extrablock"  # toward MCSOL
    assert classify_cell(grid1, "MCSOL", n, 3) == PHYSICAL  # outer wall


def test_copy_donor_across_the_separatrix(grid1):
    n = grid1.n_rad
    assert find_copy_donor(grid1, "MCORE", n + 1, 5) == ("MCSOL", 1, 5)
    assert find_copy_donor(grid1, "MCSOL", -2, 7) == ("MCORE", n - 2, 7)


def test_every_ghost_has_a_stencil(grid1, stencils1):
    g = grid1.ghost
    for b in BLOCKS:
        n1, n2 = grid1.n_rad, grid1.n_pol(b)
        assert sum(k[0] == b for k in stencils1) == (n1 + 2 * g) * (n2 + 2 * g) - n1 * n2
    kinds = {s.kind for s in stencils1.values()}
    assert kinds == {PHYSICAL, COPY, LSQ}


def test_lsq_stencils_use_other_blocks_and_full_rank(stencils1):
    for s in stencils1.values():
        if s.kind == LSQ:
            assert s.rank == len(MONOMIALS)
            assert all(d[0] != s.block for d in s.donors)
            assert len(s.donors) >= 15
            assert abs(s.weights.sum() - 1) <= 1e-10


def _cubic_field(grid, species):
    fld = DistributionField.zeros(grid, species)
    g = grid.ghost
    for b in BLOCKS:
        n1, n2 = grid.n_rad, grid.n_pol(b)
        for i in range(n1):
            for j in range(n2):
                fld.data[b][i + g, j + g] = _logical_average(grid, b, i, j, _cubic, panels=4, q=8)
    fld.mark_modified()
    return fld


@pytest.fixture(scope="module")
def filled(grid1, species, stencils1):
    fld = _cubic_field(grid1, species)
    fill_ghosts(fld, stencils1)
    return fld


def test_copy_ghosts_equal_their_donors(grid1, stencils1, filled):
    g = grid1.ghost
    for (b, i, j), s in stencils1.items():
        if s.kind == COPY:
            db, di, dj = s.donors[0]
            assert np.array_equal(filled.data[b][i + g, j + g], filled.data[db][di + g, dj + g])


def test_lsq_ghosts_reproduce_cubic_averages(grid1, stencils1, filled):
    g = grid1.ghost
    lsq = [k for k, s in stencils1.items() if s.kind == LSQ]
    rng = np.random.default_rng(3)
    picks = [lsq[k] for k in rng.choice(len(lsq), size=min(40, len(lsq)), replace=False)]
    for b, i, j in picks:
        exact = _logical_average(grid1, b, i, j, _cubic)
        got = filled.data[b][i + g, j + g, 0, 0]
        assert got == pytest.approx(exact, rel=1e-8, abs=1e-8), (b, i, j)


def test_fill_marks_ghosts_current(grid1, species, stencils1):
    fld = DistributionField.zeros(grid1, species)
    fld.mark_modified()
    assert not fld.ghosts_current
    fill_ghosts(fld, stencils1)
    assert fld.ghosts_current
    with pytest.raises(ConfigError):
        fill_ghosts(fld, stencils1, physical="mirror")


def test_donor_epoch_check(grid1, species):
    fld = DistributionField.zeros(grid1, species)
    check_donor_epoch(fld, fld.valid_epoch)
    e = fld.valid_epoch
    fld.mark_modified()
    with pytest.raises(ExchangeError):
        check_donor_epoch(fld, e)


def test_velocity_ghosts_extend_cubics_exactly(grid1, species):
    fld = DistributionField.zeros(grid1, species)
    g, gm = grid1.ghost, grid1.mu_ghost
    ev = np.linspace(grid1.v_bounds[0] - g * grid1.dv, grid1.v_bounds[1] + g * grid1.dv, grid1.n_v + 2 * g + 1)
    P = lambda v: v**4 / 4 - v**3 / 3 + v  # antiderivative of v^3 - v^2 + 1
    avg = (P(ev[1:]) - P(ev[:-1])) / np.diff(ev)
    for b in BLOCKS:
        fld.data[b][:, :, g:-g, :] = avg[None, None, g:-g, None]
    fill_velocity_ghosts(fld)
    got = fld.data["LPF"][g, g, :, gm]
    assert np.allclose(got, avg, rtol=1e-12, atol=1e-12)


def test_stencil_dump_lists_every_donor(tmp_path, stencils1):
    p = tmp_path / "stencils.txt"
    dump_stencils(stencils1, p)
    lines = p.read_text().splitlines()
    body = [ln for ln in lines if not ln.startswith("#")]
    heads = [ln for ln in body if not ln.startswith(" ")]
    assert len(heads) == len(stencils1)
    assert len(body) - len(heads) == sum(len(s.donors) for s in stencils1.values() if s.weights is not None)
    b, i, j, kind, n, rank, scale = heads[0].split()
    assert kind in (PHYSICAL, COPY, LSQ) and int(n) >= 0


def test_rank_deficient_fit_returns_none():
    M = np.ones((20, 3))
    w, rank = lsq_weights(M, np.ones(3))
    assert w is None and rank == 1


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=10, max_size=10))
def test_lsq_weights_reproduce_any_row_combination(c):
    rng = np.random.default_rng(0)
    M = rng.normal(size=(25, 10))
    target = rng.normal(size=10)
    w, rank = lsq_weights(M, target)
    assert rank == 10
    assert np.allclose(w @ M, target, atol=1e-10)
    poly = np.asarray(c)
    assert w @ (M @ poly) == pytest.approx(target @ poly, abs=1e-9 * (1 + np.abs(poly).sum()))


def test_monomial_averages_of_a_point_set():
    X = np.array([[1.0, 2.0], [3.0, -1.0]])
    W = np.array([0.25, 0.75])
    m = monomial_averages(X, W, (1.0, 0.0), 2.0)
    for k, (a, b) in enumerate(MONOMIALS):
        exact = 0.25 * 0.0**a * 1.0**b + 0.75 * 1.0**a * (-0.5) ** b
        assert m[k] == pytest.approx(exact, abs=1e-15)
