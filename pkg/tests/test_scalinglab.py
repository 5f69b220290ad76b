import math
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ephyslab import scalinglab as sl
from ephyslab.scalinglab import LAW_IEEG_1S as LAW

U_D = sl.IEEG_UNIQUE_TOKENS


def ref_loss(law, n, u, epochs):
    """Scalar re-derivation using only the math module."""
    a, b = law.alpha, law.beta
    g = (a * law.A / (b * law.B)) ** (1 / (a + b))
    n_star = g * (g * u) ** (b / a)
    u_n = n if n < n_star else n_star
    r_n = n / u_n - 1
    n_eff = u_n * (1 + law.R_N_star * (1 - math.exp(-r_n / law.R_N_star)))
    d_eff = u * (1 + law.R_D_star * (1 - math.exp(-(epochs - 1) / law.R_D_star)))
    return law.A / n_eff ** a + law.B / d_eff ** b + law.E


def test_effective_data_examples():
    assert sl.effective_data(100.0, 0.0, 9.5372) == 100.0
    assert sl.effective_data(100.0, 9.5372, 9.5372) == pytest.approx(100 + 953.72 * (1 - math.exp(-1)), rel=1e-14)
    assert float(sl.effective_data(100.0, 9.5372, 9.5372)) == pytest.approx(702.9, abs=0.05)
    assert sl.effective_data(100.0, np.inf, 9.5372) == pytest.approx(100 * 10.5372, rel=1e-15)


@given(st.floats(1, 1e12), st.floats(0, 1e3), st.floats(0, 1e3), st.floats(0.01, 100))
@settings(max_examples=200, deadline=None)
def test_effective_data_bounds_and_monotone(u, r1, r2, rstar):
    lo, hi = sorted((r1, r2))
    d_lo, d_hi = sl.effective_data(u, lo, rstar), sl.effective_data(u, hi, rstar)
    assert u * (1 - 1e-12) <= d_lo <= d_hi <= u * (1 + rstar) * (1 + 1e-12)


def test_optimal_params_matches_chinchilla_pairing():
    # N*(D) must be the N whose compute-optimal partner is D under C = 6 N D
    a, b = LAW.alpha, LAW.beta
    for d in (1e6, 1e9, U_D):
        n = sl.optimal_params(d, LAW)
        # stationarity of A/N^a + B/D^b along N*D = const: a A / N^a = b B / D^b
        assert a * LAW.A / n ** a == pytest.approx(b * LAW.B / d ** b, rel=1e-10)


def test_effective_params():
    n_star = float(sl.optimal_params(U_D, LAW))
    small = 0.5 * n_star
    assert sl.effective_params(small, U_D, LAW) == pytest.approx(small, rel=1e-15)
    assert sl.effective_params(np.inf, U_D, LAW) == pytest.approx(n_star * (1 + LAW.R_N_star), rel=1e-12)
    for n in (1e6, 13.03e6, 1.83e9):
        a, b = LAW.alpha, LAW.beta
        g = (a * LAW.A / (b * LAW.B)) ** (1 / (a + b))
        ns = g * (g * U_D) ** (b / a)
        un = min(n, ns)
        expected = un + un * LAW.R_N_star * (1 - math.exp(-(n / un - 1) / LAW.R_N_star))
        assert sl.effective_params(n, U_D, LAW) == pytest.approx(expected, rel=1e-12)


@given(st.floats(1e3, 1e13), st.floats(1e3, 1e13))
@settings(max_examples=200, deadline=None)
def test_effective_params_bounds(n, u):
    un = min(n, float(sl.optimal_params(u, LAW)))
    ne = float(sl.effective_params(n, u, LAW))
    assert ne <= un * (1 + LAW.R_N_star) * (1 + 1e-12)
    assert ne <= n * (1 + 1e-12)


def test_predict_loss_dual_evaluation():
    for n in sl.MODEL_GRID_1S:
        for e in (1, 3, 8, 64):
            assert sl.predict_loss(LAW, n, U_D, e) == pytest.approx(ref_loss(LAW, n, U_D, e), rel=1e-12)


@given(st.floats(1e4, 1e12), st.floats(1e4, 1e12), st.floats(1, 1e3))
@settings(max_examples=200, deadline=None)
def test_predict_loss_above_floor_and_monotone_in_epochs(n, u, e):
    l1 = sl.predict_loss(LAW, n, u, e)
    assert l1 > LAW.E
    assert sl.predict_loss(LAW, n, u, 2 * e) <= l1


def test_predict_loss_rejects_fractional_repetition():
    with pytest.raises(ValueError):
        sl.predict_loss(LAW, 1e6, 1e6, 0.5)


def test_law_validation_and_round_trip():
    with pytest.raises(ValueError):
        sl.FittedLaw(A=-1, B=1, E=0, alpha=1, beta=1, R_D_star=1, R_N_star=1)
    assert sl.FittedLaw.from_dict(LAW.to_dict()) == LAW


def test_flops():
    assert sl.flops_per_epoch(0, 1e9) == 0
    assert sl.flops_per_epoch(1e6, 2e9) == 2 * sl.flops_per_epoch(1e6, 1e9)
    assert sl.flops_per_epoch(13.03e6, U_D) == pytest.approx(2.687e16, rel=1e-3)
    with pytest.raises(ValueError):
        sl.flops_per_epoch(1, 1, k=0)


def test_isoloss_grid():
    g = sl.isoloss_grid(LAW, U_D, [1e7], [4])
    assert g.loss.shape == (1, 1) and g.loss[0, 0] == sl.predict_loss(LAW, 1e7, U_D, 4)
    assert g.flops[0, 0] == 4 * 6 * 1e7 * U_D
    g = sl.isoloss_grid(LAW, U_D, sl.MODEL_GRID_1S, sl.EPOCH_GRID)
    assert np.all(np.diff(g.loss, axis=1) <= 0)
    with pytest.raises(ValueError):
        sl.isoloss_grid(LAW, U_D, [], [1])
    with pytest.raises(ValueError):
        sl.isoloss_grid(LAW, U_D, [2e7, 1e7], [1])


def test_frontier_single_cell_and_infeasible():
    g = sl.isoloss_grid(LAW, U_D, [1e7], [1])
    (pt,) = sl.compute_frontier(g, [g.flops[0, 0]])
    assert pt.params == 1e7 and pt.epochs == 1
    (pt,) = sl.compute_frontier(g, [g.flops[0, 0] / 2])
    assert not pt.feasible and pt.params is None
    with pytest.raises(ValueError):
        sl.compute_frontier(g, [0.0])


def test_frontier_tie_goes_to_smaller_model():
    g = sl.ComputeGrid(np.array([1.0, 2.0]), np.array([1.0]), np.array([[0.5], [0.5]]), np.array([[1.0], [1.0]]))
    assert sl.compute_frontier(g, [1.0])[0].params == 1.0


@given(st.lists(st.floats(1e15, 1e21), min_size=1, max_size=15))
@settings(max_examples=50, deadline=None)
def test_frontier_pareto_and_nesting(budgets):
    g = sl.isoloss_grid(LAW, U_D, sl.MODEL_GRID_1S, sl.EPOCH_GRID)
    pts = sl.compute_frontier(g, sorted(budgets))
    feasible = [p for p in pts if p.feasible]
    assert all(a.loss >= b.loss for a, b in zip(feasible, feasible[1:]))
    for p in feasible:
        cheaper = g.flops <= p.budget
        assert np.all(g.loss[cheaper] >= p.loss)


def test_scaled_epochs_and_estimators():
    assert sl.scaled_epochs(352_035, 1) == 1.0
    assert sl.transformer_param_estimate(1, 1, 1) == 16
    assert sl.transformer_param_estimate(1, 1, 1, extra=5) == 21
    assert sl.transformer_param_estimate(1024, 4096, 6) == pytest.approx(75.6e6, rel=2e-3)
    assert sl.estimate_epochs(10, 10, 1, 100) == 1
    assert sl.estimate_epochs(500_000, 256, 1, 3_276_720) == pytest.approx(39, abs=0.5)
    assert sl.channel_hours(0, 19, 30) == 0
    assert sl.channel_hours(1, 1, 3600) == 1


def test_fit_noiseless_recovery_and_order_invariance():
    obs = sl.synthetic_observations(LAW)
    law, info = sl.fit_law(obs)
    for k in ("A", "B", "E", "alpha", "beta", "R_D_star", "R_N_star"):
        assert getattr(law, k) == pytest.approx(getattr(LAW, k), rel=1e-4), k
    assert law.r2_log >= 1 - 1e-9 and law.r2_linear >= 1 - 1e-9
    shuffled = list(obs)
    random.Random(0).shuffle(shuffled)
    law2, _ = sl.fit_law(shuffled)
    assert law2.to_dict() == law.to_dict()


def test_fit_recovers_a_well_identified_law():
    # a law whose optimal size sits inside the grid, so every parameter leaves a trace
    truth = sl.FittedLaw(A=400.0, B=900.0, E=0.05, alpha=0.34, beta=0.28, R_D_star=15.0, R_N_star=5.0)
    obs = sl.synthetic_observations(truth, params=np.geomspace(1e6, 1e10, 8), epochs=sl.EPOCH_GRID,
                                    unique_tokens=1e9)
    law, _ = sl.fit_law(obs)
    assert law.alpha == pytest.approx(truth.alpha, rel=1e-4)
    assert law.beta == pytest.approx(truth.beta, rel=1e-4)


def test_fit_underdetermined_warns():
    obs = sl.synthetic_observations(LAW, params=(1e7,), epochs=(1, 2, 4))
    with pytest.warns(RuntimeWarning, match="under-determined"):
        sl.fit_law(obs, init_grid=[[3.0, 4.0, -4.7, 0.4, 0.35, 9.5, 3.4]], n_refine=1)


def test_observation_csv_round_trip_and_errors():
    obs = sl.synthetic_observations(LAW, params=(1e7, 2e7), epochs=(1, 2))
    back = sl.read_observations(sl.write_observations(obs))
    assert [(o.params, o.epochs) for o in back] == [(o.params, o.epochs) for o in obs]
    with pytest.raises(sl.CSVFormatError, match="row 3"):
        sl.read_observations("params,unique_tokens,epochs,loss\n1,1,1,1\n1,1,x,1\n")
    with pytest.raises(sl.CSVFormatError, match="row 2"):
        sl.read_observations("params,unique_tokens,epochs,loss\n1,1,0.5,1\n")
    with pytest.raises(sl.CSVFormatError, match="header"):
        sl.read_observations("a,b\n1,2\n")


def test_frontier_csv_sorted():
    g = sl.isoloss_grid(LAW, U_D, sl.MODEL_GRID_1S, sl.EPOCH_GRID)
    pts = sl.compute_frontier(g, [1e20, 1e17, 1e18])
    lines = sl.frontier_csv(pts).splitlines()
    assert lines[0] == "budget,params,epochs,loss"
    budgets = [float(l.split(",")[0]) for l in lines[1:]]
    assert budgets == sorted(budgets)
    assert sl.contour_csv(g).splitlines()[0] == "params,epochs,loss,flops"
