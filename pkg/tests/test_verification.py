import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gkv.fv_operator import apply_vlasov
from gkv.phase_space import ConfigError, init_boltzmann
from gkv.velocity_divfree import potential_from
from gkv.verification import (DEFAULT_TEST_CELLS, POLLUTION_THRESHOLD, PollutionResult, TauReport, WindowContext,
                              convergence_study, fit_orders, is_monotone_decreasing, nearest_velocity_index,
                              reference_slopes, refinement_nests, streaming_cancellation, truncation_tau,
                              write_comparison, write_pollution, write_tau_report, x_windows)


def test_tau_is_volume_weighted_mean_of_magnitudes():
    r = np.array([1.0, -3.0])
    assert truncation_tau(r, np.array([3.0, 1.0])) == pytest.approx(1.5, rel=1e-15)
    with pytest.raises(ConfigError):
        truncation_tau(np.array([]), np.array([]))


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-6, 1e3), st.floats(0.5, 6.0))
def test_fit_orders_recovers_power_laws(C, p):
    h = np.array([1.0, 0.5, 0.25, 0.125])
    pair, slope = fit_orders(h, C * h**p)
    assert np.allclose(pair, p, rtol=1e-10)
    assert slope == pytest.approx(p, rel=1e-10)


def test_fit_orders_needs_two_levels():
    with pytest.raises(ConfigError):
        fit_orders([1.0], [1.0])


def test_reference_slopes():
    ref = reference_slopes([1.0, 0.5], 2.0)
    assert ref[3] == [2.0, 0.25] and ref[4] == [2.0, 0.125]


def test_monotone_helper():
    assert is_monotone_decreasing([3, 2, 1])
    assert not is_monotone_decreasing([3, 3, 1])


# --- test-cell layout ---------------------------------------------------------------


def test_eighteen_cells_with_one_x_adjacent():
    assert [c.cell_id for c in DEFAULT_TEST_CELLS] == list(range(18))
    assert [c.cell_id for c in DEFAULT_TEST_CELLS if c.x_adjacent] == [8]
    counts = {k: sum(c.cls == k for c in DEFAULT_TEST_CELLS) for k in ("interior", "boundary-interior", "corner")}
    assert counts == {"interior": 3, "boundary-interior": 9, "corner": 6}


def test_refined_index_sets_nest():
    assert refinement_nests()
    box = DEFAULT_TEST_CELLS[8].refined(3)
    assert (box.i0, box.i1, box.j0, box.j1) == (28, 32, 28, 32)


def test_nearest_velocity_cell(grid1):
    k, l = nearest_velocity_index(grid1)
    vc = grid1.v_bounds[0] + (k + 0.5) * grid1.dv
    mc = grid1.mu_bounds[0] + (l + 0.5) * grid1.dmu
    assert abs(vc - 0.5) <= grid1.dv / 2 and abs(mc - 0.5) <= grid1.dmu / 2


def test_x_windows_touch_the_x_point(grid1):
    boxes = x_windows(grid1, 2)
    assert len(boxes) == 8
    x = grid1.geometry.xpt
    for b in boxes:
        corners = grid1.node_positions(b.block, np.array([b.i0, b.i1, b.i0, b.i1]), np.array([b.j0, b.j0, b.j1, b.j1]))
        d = np.hypot(corners[:, 0] - x.R_X, corners[:, 1] - x.Z_X)
        assert d.min() <= 1e-9


# --- evaluation ---------------------------------------------------------------------


def test_streaming_cancels_on_aligned_faces(grid1, species):
    from gkv.phase_space import BoltzmannEquilibrium
    eq = BoltzmannEquilibrium(grid1.geometry, species)
    out = streaming_cancellation(grid1, potential_from(grid1, eq.potential), species)
    assert out and max(out.values()) <= 1e-12


def test_window_matches_full_domain_operator_in_the_interior(grid1, species):
    # an interior window reads only valid cells, so it must reproduce the full operator there
    ctx = WindowContext(grid1, species, quad=4)
    cell = DEFAULT_TEST_CELLS[0]
    r, _ = ctx.rhs(cell.refined(1))
    fld, eq, _ = init_boltzmann(grid1, species, q=4)
    # windows keep exact v_par ghosts, so compare against ghost boundaries rather than zero inflow
    full = apply_vlasov(fld, potential_from(grid1, eq.potential), species, boundary="ghost")
    ref = full[cell.block][cell.i, cell.j]
    assert np.allclose(r[0, 0], ref, rtol=0, atol=1e-12 * np.abs(ref).max())
    inflow = apply_vlasov(fld, potential_from(grid1, eq.potential), species)[cell.block][cell.i, cell.j]
    assert np.array_equal(inflow[1:-1], ref[1:-1])


def test_exact_and_interpolated_ghosts_agree_away_from_interfaces(grid1, species):
    ctx = WindowContext(grid1, species)
    box = DEFAULT_TEST_CELLS[0].refined(1)
    assert np.array_equal(ctx.window_field(box), ctx.window_field(box, "exact"))


def test_small_convergence_study_on_an_interior_cell(default_mapping):
    mg, maps = default_mapping
    rep = convergence_study(mg.geometry, maps, levels=(1, 2), cells=DEFAULT_TEST_CELLS[:1])
    t = rep.tau[0]
    assert t[1] < t[0]
    assert rep.pair_orders[0][0] > 2
    with pytest.raises(ConfigError):
        convergence_study(mg.geometry, maps, levels=(1,), cells=DEFAULT_TEST_CELLS[:1])


# --- output files ---------------------------------------------------------------------


def _fake_report():
    cells = [{"cell_id": 0, "cls": "interior"}, {"cell_id": 8, "cls": "corner"}]
    tau = {0: [1e-3, 6.25e-5, 3.90625e-6], 8: [2e-3, 4e-4, 8e-5]}
    h = [1.0, 0.5, 0.25]
    rep = TauReport([1, 2, 3], h, tau, cells, meta={"velocity_mode": "divfree"})
    for cid, t in tau.items():
        rep.pair_orders[cid], rep.slopes[cid] = fit_orders(h, t)
    return rep


def test_tau_report_files(tmp_path):
    from gkv.block_mapping import MappingResolution
    rep = _fake_report()
    write_tau_report(rep, tmp_path, MappingResolution(24, 256, 9, 12))
    rows = list(csv.DictReader(open(tmp_path / "tau.csv")))
    assert len(rows) == 6
    assert float(rows[2]["tau"]) == 3.90625e-6
    assert float(rows[1]["order"]) == pytest.approx(4.0, rel=1e-12)
    slopes = list(csv.DictReader(open(tmp_path / "slopes.csv")))
    assert [r["cell_id"] for r in slopes] == ["0", "8"]
    meta = json.loads((tmp_path / "run.json").read_text())
    assert meta["mapping_resolution"]["n_rad"] == 24
    assert meta["levels"] == [1, 2, 3]
    assert (tmp_path / "reference.csv").exists()


def test_comparison_file(tmp_path):
    a, b = _fake_report(), _fake_report()
    b.tau = {k: [2 * x for x in v] for k, v in b.tau.items()}
    write_comparison({"divfree": a, "metric": b}, tmp_path)
    rows = list(csv.DictReader(open(tmp_path / "compare.csv")))
    assert len(rows) == 6 and all(float(r["ratio"]) == 0.5 for r in rows)
    assert (tmp_path / "divfree" / "tau.csv").exists() and (tmp_path / "metric" / "tau.csv").exists()


def test_pollution_files_flag_threshold(tmp_path):
    res = [PollutionResult(32, 5e-8, [("LCORE", 7, 7, 1.6, 0.4, 5e-8), ("RPF", 7, 7, 1.6, 0.39, 1e-9)]),
           PollutionResult(64, 1e-8, [("LCORE", 7, 7, 1.6, 0.4, 1e-8)])]
    write_pollution(res, tmp_path)
    rows = list(csv.DictReader(open(tmp_path / "pollution.csv")))
    assert [int(r["above_threshold"]) for r in rows] == [1, 0, 0]
    assert POLLUTION_THRESHOLD == 2e-8
    mx = list(csv.DictReader(open(tmp_path / "pollution_max.csv")))
    assert [float(r["max_tau"]) for r in mx] == [5e-8, 1e-8]
