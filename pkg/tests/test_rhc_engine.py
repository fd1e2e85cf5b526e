import csv

import numpy as np
import pytest
from conftest import X0_PAPER, paper_constraint, paper_cost, paper_system, paper_x0

from gpcrhc.basis import BasisSet, Distribution
from gpcrhc.galerkin import ChaosState, UncertainSystem, lift_system
from gpcrhc.rhc_engine import (
    SURROGATE,
    TRUTH,
    PlantHandle,
    RHCSettings,
    StepControl,
    check_moment_decay,
    rhc_step,
    run_closed_loop,
    simulate_open_loop,
)
from gpcrhc.solvers.dare import lqr_gain
from gpcrhc.solvers.qp import OPTIMAL
from gpcrhc.transcription import FULL, CostSpec, InfeasibleInitialError, build_problem

UNIFORM = (Distribution("uniform"),)


def problem(chaos, mode, N=10, constraints=(), X0=None):
    X0 = paper_x0(chaos.size) if X0 is None else X0
    return build_problem(chaos, paper_cost(N), list(constraints), mode=mode, X0=X0)


@pytest.fixture(scope="module")
def fixed_trace(chaos4):
    p = problem(chaos4, "fixed-gain", constraints=[paper_constraint()])
    return p, run_closed_loop(PlantHandle.surrogate(p.X0), p, 60)


class TestStep:
    @pytest.mark.parametrize("mode", ["full", "fixed-gain", "variable-gain"])
    def test_zero_state(self, chaos4, mode):
        p = problem(chaos4, mode, X0=np.zeros(10))
        ctl, rep = rhc_step(p, np.zeros(10))
        np.testing.assert_allclose(ctl.U, 0.0, atol=1e-10)
        assert rep.objective == pytest.approx(0.0, abs=1e-12)

    def test_one_step_closed_form(self, chaos4):
        p = problem(chaos4, "full", N=1)
        S = p.terminal.P
        A, B = chaos4.Abold, chaos4.Bbold
        expected = -np.linalg.solve(p.Rbar + B.T @ S @ B, B.T @ S @ A @ p.X0)
        ctl, rep = rhc_step(p, p.X0)
        assert rep.status == OPTIMAL
        np.testing.assert_allclose(ctl.U, expected, atol=1e-8)

    def test_long_horizon_is_lqr(self, chaos4):
        p = problem(chaos4, "full", N=30)
        X = np.random.default_rng(0).standard_normal(10)
        ctl, _ = rhc_step(p, X)
        K = lqr_gain(chaos4.Abold, chaos4.Bbold, p.Rbar, p.terminal.P)
        np.testing.assert_allclose(ctl.U, K @ X, atol=1e-6)

    def test_infeasible_initial(self, chaos4):
        p = problem(chaos4, "variable-gain", constraints=[paper_constraint()])
        with pytest.raises(InfeasibleInitialError):
            rhc_step(p, ChaosState.deterministic([-1.2, 0.0], 5))

    def test_structured_control_shape(self, chaos4):
        p = problem(chaos4, "variable-gain", constraints=[paper_constraint()])
        ctl, _ = rhc_step(p, p.X0)
        assert ctl.ubar.shape == (1,) and ctl.gain.shape == (1, 2)
        # deterministic state: deviation blocks of U vanish
        np.testing.assert_array_equal(ctl.U[1:], 0.0)
        assert ctl.U[0] == ctl.ubar[0]

    def test_realize(self):
        c = StepControl("mean-plus-fixed-gain", np.zeros(2), 1, np.array([1.0]), np.array([[2.0, -1.0]]))
        np.testing.assert_allclose(c.realize([1.0, 1.0], np.array([0.5, 0.0])), [1.0 + 1.0 - 1.0])
        full = StepControl(FULL, np.array([1.0, 2.0]), 1)
        np.testing.assert_allclose(full.realize(None, None, [1.0, 0.5]), [2.0])
        with pytest.raises(ValueError):
            full.realize([0.0], [0.0])


class TestClosedLoop:
    def test_length_and_status(self, fixed_trace):
        _, trace = fixed_trace
        assert len(trace) == 61 and trace.ok
        assert all(r.status == OPTIMAL for r in trace.records[:-1])
        assert trace.degraded_steps == []

    def test_constraint_and_convergence(self, fixed_trace):
        _, trace = fixed_trace
        assert trace.means[:, 0].min() >= -1 - 1e-6
        norms = np.linalg.norm(trace.states, axis=1)
        assert norms[-1] <= 1e-2 * norms[0]

    def test_margins_match_reevaluation(self, fixed_trace):
        p, trace = fixed_trace
        for r in trace.records:
            for j, con in enumerate(p.constraints):
                assert abs(r.margins[j] - con.margin(r.state)) <= 1e-12

    def test_stable_constant_plant(self):
        A = np.array([[0.9, 0.1], [0.0, 0.8]])
        B = np.array([[0.0], [1.0]])
        s = lift_system(UncertainSystem.deterministic(A, B), BasisSet(UNIFORM, 2))
        p = build_problem(s, CostSpec(np.eye(2), np.eye(1), 5), mode="full", X0=ChaosState.deterministic([1.0, -1.0], 3))
        trace = run_closed_loop(PlantHandle.surrogate(p.X0), p, 20)
        norms = np.linalg.norm(trace.means, axis=1)
        assert np.all(np.diff(norms[1:]) < 0)
        np.testing.assert_array_equal(trace.states[:, 2:], 0.0)

    def test_sampled_truth_edge(self, chaos4):
        p = problem(chaos4, "fixed-gain", constraints=[paper_constraint()])
        plant = PlantHandle.sampled(paper_system(), [1.0], X0_PAPER)
        trace = run_closed_loop(plant, p, 100)
        assert trace.ok and trace.plant == TRUTH
        x = trace.truths
        assert np.isfinite(x).all()
        assert np.linalg.norm(x[-1]) < np.linalg.norm(x[0])
        # surrogate runs alongside from the same chaos state
        np.testing.assert_array_equal(trace.states[0], p.X0)

    def test_truth_full_mode(self, chaos4):
        p = problem(chaos4, "full")
        trace = run_closed_loop(PlantHandle.sampled(paper_system(), [-1.0], X0_PAPER), p, 40)
        assert trace.ok
        assert np.linalg.norm(trace.truths[-1]) < np.linalg.norm(X0_PAPER)

    def test_support_checked(self):
        with pytest.raises(ValueError, match="support"):
            PlantHandle.sampled(paper_system(), [1.5], X0_PAPER)

    def test_steps_validated(self, chaos4):
        p = problem(chaos4, "full")
        with pytest.raises(ValueError):
            run_closed_loop(PlantHandle.surrogate(p.X0), p, 0)

    def test_abort_returns_partial_trace(self, chaos4):
        # the surrogate starts outside the constraint, so step 0 aborts
        p = problem(chaos4, "fixed-gain", constraints=[paper_constraint()])
        trace = run_closed_loop(PlantHandle.surrogate(ChaosState.deterministic([-2.0, 0.0], 5)), p, 5)
        assert not trace.ok
        assert len(trace) == 1
        assert trace.records[0].status == "constraint-infeasible-initial"

    def test_warm_start_agrees_with_cold(self, chaos4):
        p = problem(chaos4, "fixed-gain", constraints=[paper_constraint()])
        plant = PlantHandle.surrogate(p.X0)
        warm = run_closed_loop(plant, p, 15, RHCSettings(warm_start=True))
        cold = run_closed_loop(plant, p, 15, RHCSettings(warm_start=False))
        np.testing.assert_allclose(warm.states, cold.states, atol=1e-7)

    def test_policy_replay_matches_surrogate(self, fixed_trace):
        _, trace = fixed_trace
        ubar, K, means = trace.policy()
        assert ubar.shape == (60, 1) and K.shape == (60, 1, 2) and means.shape == (60, 2)
        np.testing.assert_array_equal(means, trace.means[:-1])


class TestSerialization:
    def test_csv_columns(self, fixed_trace, tmp_path):
        _, trace = fixed_trace
        cols = trace.columns()
        assert cols[:3] == ["k", "X_0", "X_1"]
        assert cols.index("ubar_0") == 11 and cols[12:14] == ["K_0_0", "K_0_1"]
        assert cols[-5:] == ["objective", "iterations", "status", "degraded", "margin_0"]
        path = tmp_path / "trace.csv"
        trace.to_csv(path)
        with open(path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == cols and len(rows) == 62
        assert float(rows[1][1]) == trace.states[0, 0]
        assert float(rows[5][cols.index("mean_0")]) == trace.means[4, 0]

    def test_truth_columns(self, chaos4):
        p = problem(chaos4, "full", N=3)
        trace = run_closed_loop(PlantHandle.sampled(paper_system(), [0.3], X0_PAPER), p, 2)
        cols = trace.columns()
        assert "x_0" in cols and "u_0" in cols and "ubar_0" not in cols
        assert cols.index("x_0") == 11

    def test_summary(self, fixed_trace):
        _, trace = fixed_trace
        s = trace.summary(check_moment_decay(trace))
        assert s["steps"] == 60 and s["plant"] == SURROGATE
        assert s["max_constraint_violation"] <= 1e-8
        assert len(s["iterations"]) == 60


class TestMomentDecay:
    def test_zero_trace(self, chaos4):
        p = problem(chaos4, "full", X0=np.zeros(10))
        rep = check_moment_decay(simulate_open_loop(p, 10))
        assert rep.passed
        np.testing.assert_array_equal(rep.peak, 0.0)

    def test_converging_trace(self, fixed_trace):
        _, trace = fixed_trace
        rep = check_moment_decay(trace, orders=(1, 2, 3, 4), tolerance=1e-2)
        assert rep.passed and all(rep.decayed)

    def test_open_loop_fails(self, chaos4):
        p = problem(chaos4, "full")
        trace = simulate_open_loop(p, 100)
        rep = check_moment_decay(trace)
        assert not rep.passed
        m = np.abs(trace.moment_array)
        assert m[-1, 0].max() > m[0, 0].max() and m[-1, 1].max() > m[0, 1].max()

    def test_bound(self, fixed_trace):
        _, trace = fixed_trace
        assert not check_moment_decay(trace, tolerance=1e-2, bound=1e-3).passed
        assert check_moment_decay(trace, tolerance=1e-2, bound=10.0).bounded == (True,) * 4

    def test_report_dict(self, fixed_trace):
        d = check_moment_decay(fixed_trace[1]).to_dict()
        assert set(d) >= {"orders", "decayed", "bounded", "passed"}
        assert np.shape(d["final"]) == (4, 2)
