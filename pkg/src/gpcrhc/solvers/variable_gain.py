"""Local solver for the structured law with a free gain at every step.

Decision vector ``z = [ubar(0..N-1), vec K(0..N-1)]`` (gains row-major).
The program is nonconvex (the gains multiply the states), so it is solved
by sequential convexification:

1. for each starting gain sequence, the convex QP in ``ubar`` with the
   gains held fixed gives a feasible start;
2. SQP iterations: a convex QP model built from the analytic gradient,
   the linearized constraints and the damped Gauss-Newton Hessian (the
   cost is a sum of squares of states and inputs, so this is PSD);
3. an l1 merit line search accepts the step.

The best stationary point over all starts is returned.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls

from ..galerkin import deviation_selector
from ..transcription import RHCProblem, horizon_qp
from .qp import MAX_ITERATIONS, OPTIMAL, QPData, SolveReport, SolveSettings, solve_convex

log = logging.getLogger(__name__)

LINE_SEARCH_FAILURE = "line-search-failure"


@dataclass
class NLPSettings:
    max_iter: int = 100
    stationarity_tol: float = 1e-6
    feasibility_tol: float = 1e-8
    n_starts: int = 3
    seed: int = 0
    perturbation: float = 0.1
    damping: float = 1e-8
    qp: SolveSettings = field(default_factory=SolveSettings)


@dataclass
class Evaluation:
    cost: float
    grad: np.ndarray
    cons: np.ndarray  # canonical c(z) <= 0
    jac: np.ndarray
    gn_hessian: np.ndarray
    X: np.ndarray
    U: np.ndarray


def unpack(problem: RHCProblem, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    N, m, n = problem.N, problem.m, problem.n
    ubar = z[: N * m].reshape(N, m)
    gains = z[N * m :].reshape(N, m, n)
    return ubar, gains


def pack(ubar: np.ndarray, gains: np.ndarray) -> np.ndarray:
    return np.concatenate([np.ravel(ubar), np.ravel(gains)])


def evaluate(problem: RHCProblem, z: np.ndarray) -> Evaluation:
    """Cost, constraints and exact first derivatives by forward sensitivities."""
    sys = problem.system
    N, m, n, size = problem.N, problem.m, problem.n, problem.size
    nX, nU = n * size, m * size
    nz = z.size
    ubar, gains = unpack(problem, z)
    Msel = deviation_selector(size)
    offset_K = N * m

    X = np.empty((N + 1, nX))
    U = np.empty((N, nU))
    S = np.zeros((nX, nz))
    X[0] = problem.X0
    cost = 0.0
    grad = np.zeros(nz)
    H = np.zeros((nz, nz))
    sens_X = [S]
    sens_U = []
    for k in range(N):
        Kbig = np.kron(Msel, gains[k])
        blocks = X[k].reshape(size, n)
        U[k] = (Kbig @ X[k]).reshape(size, m).copy().ravel()
        U[k][:m] = ubar[k]
        dU = Kbig @ S
        dU[:m, k * m : (k + 1) * m] += np.eye(m)
        # d U / d K_k[a, b] : blocks i >= 1 get e_a * x_i[b]
        base = offset_K + k * m * n
        for a in range(m):
            for b in range(n):
                dU[m + a :: m, base + a * n + b] += blocks[1:, b]
        sens_U.append(dU)
        cost += X[k] @ problem.Qbar @ X[k] + U[k] @ problem.Rbar @ U[k]
        grad += 2.0 * (S.T @ (problem.Qbar @ X[k]) + dU.T @ (problem.Rbar @ U[k]))
        H += 2.0 * (S.T @ problem.Qbar @ S + dU.T @ problem.Rbar @ dU)
        X[k + 1] = sys.Abold @ X[k] + sys.Bbold @ U[k]
        S = sys.Abold @ S + sys.Bbold @ dU
        sens_X.append(S)
    Pf = problem.terminal.P
    cost += X[N] @ Pf @ X[N]
    grad += 2.0 * S.T @ (Pf @ X[N])
    H += 2.0 * S.T @ Pf @ S

    cons, jac = [], []
    for con in problem.constraints:
        last = N if con.on == "state" else N - 1
        first = 1 if con.on == "state" else 0
        for k in range(first, last + 1):
            if not con.applies(k, N):
                continue
            V, dV = (X[k], sens_X[k]) if con.on == "state" else (U[k], sens_U[k])
            cons.append(con.value(V) - con.bound)
            jac.append((2.0 * con.H @ V + con.g) @ dV)
    cons = np.asarray(cons)
    jac = np.asarray(jac).reshape(len(cons), nz)
    return Evaluation(float(cost), grad, cons, jac, 0.5 * (H + H.T), X, U)


def kkt_measure(ev: Evaluation, feas_tol: float) -> tuple[float, float, np.ndarray]:
    """(stationarity, violation, multipliers) at a point.

    Multipliers are the nonnegative least-squares fit of
    ``grad + J_A' lam = 0`` over the nearly active constraints.
    """
    violation = float(np.max(ev.cons, initial=0.0))
    lam = np.zeros(ev.cons.size)
    if ev.cons.size:
        scale = max(1.0, np.abs(ev.grad).max())
        active = np.flatnonzero(ev.cons > -1e-6 * scale)
        if active.size:
            coef, _ = nnls(ev.jac[active].T, -ev.grad, maxiter=50 * active.size)
            lam[active] = coef
    stat = float(np.abs(ev.grad + ev.jac.T @ lam).max(initial=0.0))
    return stat, violation, lam


def _fixed_gain_start(problem: RHCProblem, gains: np.ndarray, qp_settings: SolveSettings):
    """Optimal ubar for a fixed gain sequence (convex)."""
    qp, layout = horizon_qp(problem, gains=list(gains))
    rep = solve_convex(qp, qp_settings)
    if not rep.optimal:
        return None, rep
    ubar = layout.inputs(rep.x)
    return pack(ubar, gains), rep


def _sqp(problem: RHCProblem, z: np.ndarray, s: NLPSettings):
    ev = evaluate(problem, z)
    nu = 1.0
    damping = s.damping
    status = MAX_ITERATIONS
    it = 0
    for it in range(1, s.max_iter + 1):
        stat, viol, _ = kkt_measure(ev, s.feasibility_tol)
        if stat <= s.stationarity_tol and viol <= s.feasibility_tol:
            status = OPTIMAL
            break
        H = ev.gn_hessian
        scale = max(1.0, np.abs(H).max())
        H = H + damping * scale * np.eye(z.size)
        sub = QPData(
            H,
            ev.grad,
            A_in=ev.jac if ev.cons.size else None,
            b_in=-ev.cons if ev.cons.size else None,
        )
        rep = solve_convex(sub, s.qp)
        if not rep.optimal:
            damping = max(damping * 10.0, 1e-6)
            if damping > 1e3:
                status = LINE_SEARCH_FAILURE
                break
            continue
        d = rep.x
        lam_qp = rep.multipliers.get("in", np.zeros(0))
        if lam_qp.size:
            nu = max(nu, 2.0 * float(np.max(lam_qp, initial=0.0)))
        merit0 = ev.cost + nu * float(np.sum(np.maximum(ev.cons, 0.0)))
        slope = ev.grad @ d - nu * float(np.sum(np.maximum(ev.cons, 0.0)))
        t = 1.0
        accepted = None
        while t >= 1e-10:
            trial = evaluate(problem, z + t * d)
            merit = trial.cost + nu * float(np.sum(np.maximum(trial.cons, 0.0)))
            if merit <= merit0 + 1e-4 * t * min(slope, 0.0) + 1e-14 * max(1.0, abs(merit0)):
                accepted = trial
                break
            t *= 0.5
        if accepted is None:
            status = LINE_SEARCH_FAILURE
            break
        z = z + t * d
        ev = accepted
        damping = max(damping / 10.0, 1e-12) if t == 1.0 else min(damping * 10.0, 1e2)
        if np.abs(t * d).max(initial=0.0) <= 1e-14 * max(1.0, np.abs(z).max()):
            stat, viol, _ = kkt_measure(ev, s.feasibility_tol)
            status = OPTIMAL if stat <= s.stationarity_tol and viol <= s.feasibility_tol else LINE_SEARCH_FAILURE
            break
    stat, viol, lam = kkt_measure(ev, s.feasibility_tol)
    return z, ev, status, it, stat, viol, lam


def solve_variable_gain(
    problem: RHCProblem,
    initial_guess: np.ndarray | None = None,
    settings: NLPSettings | None = None,
    freeze_gains: np.ndarray | None = None,
) -> SolveReport:
    """KKT point of the variable-gain horizon problem.

    Args:
        problem: horizon problem (its ``mode`` is not consulted).
        initial_guess: optional packed ``z`` used as an extra start.
        settings: solver settings.
        freeze_gains: if given, the gains (one ``m x n`` matrix or one per
            step) are held fixed and only ``ubar`` is optimized.

    Returns:
        A report whose ``x`` is the packed decision vector; ``residuals``
        carries ``stationarity`` and ``constraint_violation``. On failure
        the best iterate found is returned with a non-optimal status.
    """
    s = settings or NLPSettings()
    N, m, n = problem.N, problem.m, problem.n

    if freeze_gains is not None:
        gains = np.broadcast_to(np.asarray(freeze_gains, dtype=float).reshape(-1, m, n), (N, m, n)).copy()
        z, rep = _fixed_gain_start(problem, gains, s.qp)
        if z is None:
            return SolveReport(rep.status, np.nan, np.full(N * m * (1 + n), np.nan), {}, rep.iterations)
        ev = evaluate(problem, z)
        res = {"stationarity": rep.residuals["dual"], "constraint_violation": float(np.max(ev.cons, initial=0.0))}
        return SolveReport(OPTIMAL, ev.cost, z, res, rep.iterations, {"in": rep.multipliers.get("in")})

    rng = np.random.default_rng(s.seed)
    K_f = np.asarray(problem.terminal.K_f)
    start_gains = [
        np.broadcast_to(K_f, (N, m, n)).copy(),
        np.zeros((N, m, n)),
        K_f + s.perturbation * np.abs(K_f).max() * rng.standard_normal((N, m, n)),
    ][: max(s.n_starts, 1)]

    starts = []
    if initial_guess is not None:
        starts.append(np.asarray(initial_guess, dtype=float))
    for gains in start_gains:
        z0, _ = _fixed_gain_start(problem, gains, s.qp)
        if z0 is not None:
            starts.append(z0)

    best = None
    total_it = 0
    for z0 in starts:
        ev0 = evaluate(problem, z0)
        if np.max(ev0.cons, initial=0.0) > s.feasibility_tol:
            continue
        z, ev, status, it, stat, viol, lam = _sqp(problem, z0, s)
        total_it += it
        cand = (status == OPTIMAL, -ev.cost, z, ev, status, stat, viol, lam)
        if best is None or (cand[0], cand[1]) > (best[0], best[1]):
            best = cand
    if best is None:
        return SolveReport("infeasible", np.nan, np.full(N * m * (1 + n), np.nan), {}, total_it)
    _, _, z, ev, status, stat, viol, lam = best
    res = {"stationarity": stat, "constraint_violation": viol}
    return SolveReport(status, ev.cost, z, res, total_it, {"in": lam})
