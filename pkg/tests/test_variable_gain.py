import numpy as np
import pytest
from conftest import paper_constraint, paper_cost, paper_x0

from gpcrhc.basis import BasisSet, Distribution
from gpcrhc.galerkin import ChaosState, UncertainSystem, lift_system
from gpcrhc.solvers.qp import OPTIMAL, solve_convex
from gpcrhc.solvers.variable_gain import NLPSettings, evaluate, kkt_measure, pack, solve_variable_gain, unpack
from gpcrhc.transcription import ConstraintSpec, CostSpec, VARIANCE_TRACE_STATE, build_problem, horizon_qp


@pytest.fixture(scope="module")
def paper_problem(chaos4):
    return build_problem(chaos4, paper_cost(10), [paper_constraint()], mode="variable-gain", X0=paper_x0(5))


def fixed_gain_objective(problem):
    qp, _ = horizon_qp(problem, gains=[problem.gain] * problem.N)
    rep = solve_convex(qp)
    assert rep.optimal
    return rep


class TestDerivatives:
    def test_gradient_and_jacobian_fd(self, chaos4):
        spec = ConstraintSpec(VARIANCE_TRACE_STATE, 0.3)
        p = build_problem(chaos4, paper_cost(4), [paper_constraint(), spec], mode="variable-gain", X0=paper_x0(5))
        # a state with deviation modes so the gains matter
        p = p.with_state(np.r_[-0.5, 1.0, 0.1, -0.2, 0.05, 0.0, 0.0, 0.02, 0.0, 0.0])
        rng = np.random.default_rng(1)
        z = rng.standard_normal(4 * 3)
        ev = evaluate(p, z)
        h = 1e-6
        g_fd = np.empty_like(z)
        J_fd = np.empty_like(ev.jac)
        for i in range(z.size):
            e = np.zeros_like(z)
            e[i] = h
            up, dn = evaluate(p, z + e), evaluate(p, z - e)
            g_fd[i] = (up.cost - dn.cost) / (2 * h)
            J_fd[:, i] = (up.cons - dn.cons) / (2 * h)
        np.testing.assert_allclose(ev.grad, g_fd, rtol=1e-6, atol=1e-6)
        np.testing.assert_allclose(ev.jac, J_fd, rtol=1e-6, atol=1e-7)

    def test_gauss_newton_psd(self, paper_problem):
        ev = evaluate(paper_problem, np.zeros(30))
        assert np.linalg.eigvalsh(ev.gn_hessian).min() >= -1e-10

    def test_pack_roundtrip(self, paper_problem):
        z = np.arange(30.0)
        ubar, gains = unpack(paper_problem, z)
        assert ubar.shape == (10, 1) and gains.shape == (10, 1, 2)
        np.testing.assert_array_equal(pack(ubar, gains), z)


class TestSolve:
    def test_paper_first_horizon(self, paper_problem):
        rep = solve_variable_gain(paper_problem)
        assert rep.status == OPTIMAL
        assert rep.residuals["stationarity"] <= 1e-6
        assert rep.residuals["constraint_violation"] <= 1e-8
        fixed = fixed_gain_objective(paper_problem)
        assert rep.objective <= fixed.objective + 1e-9 * abs(fixed.objective)

    def test_improves_on_deviation_state(self, paper_problem):
        # with deviation modes present the free gains can strictly help
        X = np.r_[-0.5, 1.0, 0.2, -0.1, 0.05, 0.05, 0.0, 0.0, 0.0, 0.0]
        p = paper_problem.with_state(X)
        rep = solve_variable_gain(p)
        fixed = fixed_gain_objective(p)
        assert rep.status == OPTIMAL
        assert rep.objective <= fixed.objective

    def test_freeze_reproduces_fixed_gain(self, paper_problem):
        rep = solve_variable_gain(paper_problem, freeze_gains=paper_problem.terminal.K_f)
        fixed = fixed_gain_objective(paper_problem)
        assert rep.objective == pytest.approx(fixed.objective, rel=1e-8)
        ubar, gains = unpack(paper_problem, rep.x)
        _, layout = horizon_qp(paper_problem)
        np.testing.assert_allclose(ubar, layout.inputs(fixed.x), atol=1e-8)
        np.testing.assert_array_equal(gains, np.broadcast_to(paper_problem.terminal.K_f, (10, 1, 2)))

    def test_zero_uncertainty(self):
        A = np.array([[1.02, -0.1], [0.1, 0.98]])
        B = np.array([[0.1], [0.05]])
        s = lift_system(UncertainSystem.deterministic(A, B), BasisSet((Distribution("uniform"),), 2))
        p = build_problem(s, paper_cost(8), [paper_constraint()], mode="variable-gain", X0=ChaosState.deterministic([-0.5, 1.0], 3))
        rep = solve_variable_gain(p)
        assert rep.status == OPTIMAL
        ref = fixed_gain_objective(p)
        _, layout = horizon_qp(p)
        ubar, _ = unpack(p, rep.x)
        np.testing.assert_allclose(ubar, layout.inputs(ref.x), atol=1e-6)
        assert rep.objective == pytest.approx(ref.objective, rel=1e-8)

    def test_deterministic(self, paper_problem):
        r1 = solve_variable_gain(paper_problem, settings=NLPSettings(seed=3))
        r2 = solve_variable_gain(paper_problem, settings=NLPSettings(seed=3))
        assert r1.x.tobytes() == r2.x.tobytes()
        assert r1.iterations == r2.iterations

    def test_single_start(self, paper_problem):
        rep = solve_variable_gain(paper_problem, settings=NLPSettings(n_starts=1))
        assert rep.status == OPTIMAL


class TestKKT:
    def test_unconstrained_minimum(self):
        s = lift_system(UncertainSystem.deterministic([[0.5]], [[1.0]]), BasisSet((Distribution("uniform"),), 0))
        p = build_problem(s, CostSpec([[1.0]], [[1.0]], 2), mode="variable-gain", X0=[1.0])
        rep = solve_variable_gain(p)
        stat, viol, lam = kkt_measure(evaluate(p, rep.x), 1e-8)
        assert stat <= 1e-6 and viol == 0.0 and lam.size == 0
