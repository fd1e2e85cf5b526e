"""Receding-horizon loop on the chaos surrogate or on a sampled true plant.

At every step the horizon problem is solved from the current surrogate
state, the first control of the optimal sequence is applied, and the plant
advances. With a sampled-truth plant the surrogate runs alongside and
supplies ``E[x]`` to the structured law ``u = ubar + K (x_true - E[x])``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .galerkin import ChaosControl, UncertainSystem, covariance, moments, structured_control
from .solvers.qp import MAX_ITERATIONS, OPTIMAL, SolveReport, SolveSettings, solve_convex
from .solvers.variable_gain import LINE_SEARCH_FAILURE, NLPSettings, evaluate, pack, solve_variable_gain, unpack
from .transcription import FULL, VARIABLE_GAIN, InfeasibleInitialError, RHCProblem, horizon_qp

log = logging.getLogger(__name__)

SURROGATE = "chaos-surrogate"
TRUTH = "sampled-truth"
MOMENT_ORDERS = (1, 2, 3, 4)

#: statuses for which the best iterate is applied and the step flagged
DEGRADED_STATUSES = (MAX_ITERATIONS, LINE_SEARCH_FAILURE)


class SolverError(RuntimeError):
    """The horizon solver failed without a usable iterate."""

    def __init__(self, message: str, report: SolveReport | None = None):
        super().__init__(message)
        self.report = report


@dataclass
class RHCSettings:
    qp: SolveSettings = field(default_factory=SolveSettings)
    nlp: NLPSettings = field(default_factory=NLPSettings)
    warm_start: bool = True


@dataclass(frozen=True)
class StepControl:
    """First control of a horizon solution.

    ``U`` is the chaos control applied to the surrogate. Structured modes
    also carry ``ubar`` and ``gain``.
    """

    mode: str
    U: np.ndarray
    m: int
    ubar: np.ndarray | None = None
    gain: np.ndarray | None = None
    degraded: bool = False

    @property
    def chaos(self) -> ChaosControl:
        return ChaosControl(self.U, self.m)

    def realize(self, x, mean, phi=None) -> np.ndarray:
        """Input for one realization ``x``.

        Structured modes use ``ubar + K (x - mean)``; full chaos mode
        evaluates ``sum_i U_i phi_i`` and so needs the basis values ``phi``.
        """
        if self.ubar is not None:
            return self.ubar + self.gain @ (np.asarray(x) - mean)
        if phi is None:
            raise ValueError("full chaos control needs basis values at the realization")
        return np.asarray(phi) @ self.U.reshape(-1, self.m)


@dataclass(frozen=True)
class PlantHandle:
    """What the loop drives: the surrogate itself, or one true plant ``A(D*), B(D*)``."""

    kind: str
    state: np.ndarray
    delta: np.ndarray | None = None
    A: np.ndarray | None = None
    B: np.ndarray | None = None

    @classmethod
    def surrogate(cls, X0) -> PlantHandle:
        return cls(SURROGATE, np.asarray(X0, dtype=float).ravel().copy())

    @classmethod
    def sampled(cls, system: UncertainSystem, delta, x0) -> PlantHandle:
        """True plant at the realization ``delta``.

        Raises:
            ValueError: if ``delta`` lies outside the support of its marginals.
        """
        delta = np.atleast_1d(np.asarray(delta, dtype=float))
        if delta.shape != (system.d,):
            raise ValueError(f"delta must have {system.d} entries")
        for j, (dist, v) in enumerate(zip(system.distributions, delta)):
            lo, hi = dist.support
            if not lo <= v <= hi:
                raise ValueError(f"delta[{j}] = {v} is outside the support [{lo}, {hi}]")
        return cls(
            TRUTH,
            np.asarray(x0, dtype=float).ravel().copy(),
            delta,
            system.A(delta[None])[0],
            system.B(delta[None])[0],
        )


@dataclass
class StepRecord:
    k: int
    state: np.ndarray
    truth: np.ndarray | None
    mean: np.ndarray
    cov_trace: float
    moments: np.ndarray  # (len(MOMENT_ORDERS), n)
    margins: np.ndarray  # one per lifted constraint, NaN where not applicable
    control: StepControl | None = None
    applied: np.ndarray | None = None
    status: str = ""
    objective: float = math.nan
    iterations: int = 0


@dataclass
class ClosedLoopTrace:
    mode: str
    plant: str
    n: int
    m: int
    records: list[StepRecord] = field(default_factory=list)
    error: str | None = None

    def __len__(self) -> int:
        return len(self.records)

    @property
    def states(self) -> np.ndarray:
        return np.array([r.state for r in self.records])

    @property
    def means(self) -> np.ndarray:
        return np.array([r.mean for r in self.records])

    @property
    def truths(self) -> np.ndarray:
        return np.array([r.truth for r in self.records])

    @property
    def moment_array(self) -> np.ndarray:
        """Shape ``(steps+1, orders, n)``."""
        return np.array([r.moments for r in self.records])

    @property
    def degraded_steps(self) -> list[int]:
        return [r.k for r in self.records if r.control is not None and r.control.degraded]

    @property
    def ok(self) -> bool:
        return self.error is None and not self.degraded_steps

    def policy(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Applied ``(ubar, K, E[x])`` per step for replay on sampled plants."""
        rec = [r for r in self.records if r.control is not None]
        if rec and rec[0].control.ubar is None:
            raise ValueError("full chaos control traces have no (ubar, K) policy")
        return (
            np.array([r.control.ubar for r in rec]),
            np.array([r.control.gain for r in rec]),
            np.array([r.mean for r in rec]),
        )

    def columns(self) -> list[str]:
        """CSV header, in this fixed order.

        ``k``; chaos state ``X_i``; true state ``x_a`` (sampled-truth only);
        ``ubar_a`` and row-major ``K_a_b`` (structured modes); chaos control
        ``U_i``; applied true input ``u_a`` (sampled-truth only); ``mean_a``;
        ``cov_trace``; raw moments ``m{q}_a``; ``objective``;
        ``iterations``; ``status``; ``degraded``; ``margin_j``.
        """
        rec = self.records[0]
        nX = rec.state.size
        size = nX // self.n
        cols = ["k"] + [f"X_{i}" for i in range(nX)]
        if self.plant == TRUTH:
            cols += [f"x_{a}" for a in range(self.n)]
        if self.mode != FULL:
            cols += [f"ubar_{a}" for a in range(self.m)]
            cols += [f"K_{a}_{b}" for a in range(self.m) for b in range(self.n)]
        cols += [f"U_{i}" for i in range(self.m * size)]
        if self.plant == TRUTH:
            cols += [f"u_{a}" for a in range(self.m)]
        cols += [f"mean_{a}" for a in range(self.n)] + ["cov_trace"]
        cols += [f"m{q}_{a}" for q in MOMENT_ORDERS for a in range(self.n)]
        cols += ["objective", "iterations", "status", "degraded"]
        cols += [f"margin_{j}" for j in range(rec.margins.size)]
        return cols

    def rows(self):
        size = self.records[0].state.size // self.n
        nan = float("nan")
        for r in self.records:
            c = r.control
            row = [r.k, *r.state]
            if self.plant == TRUTH:
                row += list(r.truth)
            if self.mode != FULL:
                row += list(c.ubar) if c is not None else [nan] * self.m
                row += list(np.ravel(c.gain)) if c is not None else [nan] * (self.m * self.n)
            row += list(c.U) if c is not None else [nan] * (self.m * size)
            if self.plant == TRUTH:
                row += list(r.applied) if r.applied is not None else [nan] * self.m
            row += [*r.mean, r.cov_trace, *np.ravel(r.moments)]
            row += [r.objective, r.iterations, r.status, int(bool(c is not None and c.degraded))]
            row += list(r.margins)
            yield row

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns())
            for row in self.rows():
                w.writerow([format(v, ".17g") if isinstance(v, float) else v for v in row])

    def summary(self, decay: MomentDecayReport | None = None) -> dict:
        X = self.states
        margins = np.array([r.margins for r in self.records])
        finite = margins[np.isfinite(margins)]
        out = {
            "mode": self.mode,
            "plant": self.plant,
            "steps": len(self.records) - 1,
            "error": self.error,
            "initial_state_norm": float(np.linalg.norm(X[0])),
            "final_state_norm": float(np.linalg.norm(X[-1])),
            "max_constraint_violation": float(max(0.0, -finite.min())) if finite.size else 0.0,
            "degraded_steps": self.degraded_steps,
            "iterations": [r.iterations for r in self.records if r.control is not None],
        }
        if self.plant == TRUTH:
            out["final_true_norm"] = float(np.linalg.norm(self.records[-1].truth))
        if decay is not None:
            out["moment_decay"] = decay.to_dict()
        return out

    def write_summary(self, path, decay: MomentDecayReport | None = None) -> None:
        Path(path).write_text(json.dumps(self.summary(decay), indent=2) + "\n")


def _margins(problem: RHCProblem, X: np.ndarray, U: np.ndarray | None) -> np.ndarray:
    out = np.full(len(problem.constraints), np.nan)
    for j, con in enumerate(problem.constraints):
        if con.on == "state":
            out[j] = con.margin(X)
        elif U is not None:
            out[j] = con.margin(U)
    return out


def _record(problem: RHCProblem, k: int, X: np.ndarray, truth=None) -> StepRecord:
    sys = problem.system
    cov = covariance(X, sys.tensors, sys.n)
    return StepRecord(
        k=k,
        state=X.copy(),
        truth=None if truth is None else np.array(truth, dtype=float),
        mean=X[: sys.n].copy(),
        cov_trace=float(np.trace(cov)),
        moments=moments(X, MOMENT_ORDERS, sys.basis, sys.n),
        margins=_margins(problem, X, None),
    )


def _terminal_action(problem: RHCProblem, X: np.ndarray) -> np.ndarray:
    """Chaos control of the terminal law at ``X``."""
    if problem.mode == FULL:
        return problem.terminal.Kbold @ X
    K_f = problem.terminal.K_f
    return structured_control(K_f @ X[: problem.n], K_f, X, problem.size)


def _shift_qp(problem: RHCProblem, x: np.ndarray) -> np.ndarray:
    """Previous sparse QP solution moved one step ahead, terminal law appended."""
    qp, layout = horizon_qp(problem)
    X = layout.states(x, problem.X0)
    V = layout.inputs(x)
    U_N = _terminal_action(problem, X[-1])
    X_next = problem.system.Abold @ X[-1] + problem.system.Bbold @ U_N
    V_N = U_N if problem.mode == FULL else U_N[: problem.m]
    states = np.vstack([X[2:], X_next[None]])
    inputs = np.vstack([V[1:], V_N[None]])
    return np.concatenate([states.ravel(), inputs.ravel()])


def _shift_nlp(problem: RHCProblem, z: np.ndarray) -> np.ndarray:
    ubar, gains = unpack(problem, z)
    X_N = evaluate(problem, z).X[-1]
    K_f = problem.terminal.K_f
    return pack(np.vstack([ubar[1:], (K_f @ X_N[: problem.n])[None]]), np.concatenate([gains[1:], K_f[None]]))


def rhc_step(
    problem: RHCProblem,
    X,
    settings: RHCSettings | None = None,
    warm: np.ndarray | None = None,
) -> tuple[StepControl, SolveReport]:
    """Solve the horizon problem from ``X`` and return its first control.

    Args:
        problem: problem template (its own ``X0`` is replaced by ``X``).
        X: current chaos state.
        settings: solver settings.
        warm: optional solver seed in the layout of ``report.x``.

    Raises:
        InfeasibleInitialError: if ``X`` violates a step-0 state constraint.
        SolverError: if the solver ends infeasible, unbounded or without a
            usable iterate.
    """
    s = settings or RHCSettings()
    problem = problem.with_state(X)
    m, size = problem.m, problem.size
    X = problem.X0
    if problem.mode == VARIABLE_GAIN:
        rep = solve_variable_gain(problem, initial_guess=warm, settings=s.nlp)
    else:
        qp, layout = horizon_qp(problem)
        rep = solve_convex(qp, s.qp, x0=warm)
    degraded = rep.status in DEGRADED_STATUSES
    if not (rep.status == OPTIMAL or degraded) or not np.all(np.isfinite(rep.x)):
        raise SolverError(f"horizon solve ended with status {rep.status!r}", rep)
    if degraded:
        log.warning("horizon solve ended with status %s; applying best iterate", rep.status)

    if problem.mode == VARIABLE_GAIN:
        ubar, gains = unpack(problem, rep.x)
        U = structured_control(ubar[0], gains[0], X, size)
        ctl = StepControl(problem.mode, U, m, ubar[0].copy(), gains[0].copy(), degraded)
    elif problem.mode == FULL:
        U = rep.x[layout.V_slice(0)].copy()
        ctl = StepControl(problem.mode, U, m, degraded=degraded)
    else:
        ubar = rep.x[layout.V_slice(0)]
        U = structured_control(ubar, problem.gain, X, size)
        ctl = StepControl(problem.mode, U, m, ubar.copy(), problem.gain.copy(), degraded)
    return ctl, rep


def run_closed_loop(
    plant: PlantHandle,
    problem: RHCProblem,
    steps: int,
    settings: RHCSettings | None = None,
) -> ClosedLoopTrace:
    """Apply the receding-horizon law for ``steps`` steps.

    For a surrogate plant the chaos state is ``plant.state``. For a sampled
    plant the surrogate starts from ``problem.X0`` and the true state from
    ``plant.state``; full chaos mode evaluates ``U`` at ``plant.delta``.

    A solver failure stops the loop; the partial trace is returned with
    ``error`` set.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    s = settings or RHCSettings()
    sys = problem.system
    n = sys.n
    truth = plant.kind == TRUTH
    X = np.asarray(problem.X0 if truth else plant.state, dtype=float).copy()
    x = plant.state.copy() if truth else None
    phi = sys.basis.evaluate(plant.delta[None])[0] if truth else None

    trace = ClosedLoopTrace(problem.mode, plant.kind, n, sys.m)
    warm = None
    for k in range(steps + 1):
        rec = _record(problem, k, X, x)
        trace.records.append(rec)
        if k == steps:
            break
        try:
            ctl, rep = rhc_step(problem, X, s, warm)
        except (InfeasibleInitialError, SolverError) as exc:
            rec.status = getattr(exc, "code", None) or (exc.report.status if getattr(exc, "report", None) else "error")
            trace.error = f"step {k}: {exc}"
            log.error("closed loop aborted at %s", trace.error)
            return trace
        rec.control = ctl
        rec.status = rep.status
        rec.objective = rep.objective
        rec.iterations = rep.iterations
        rec.margins = _margins(problem, X, ctl.U)
        if s.warm_start:
            current = problem.with_state(X)
            warm = _shift_nlp(current, rep.x) if problem.mode == VARIABLE_GAIN else _shift_qp(current, rep.x)
        if truth:
            u = ctl.realize(x, X[:n], phi)
            rec.applied = u
            x = plant.A @ x + plant.B @ u
        X = sys.Abold @ X + sys.Bbold @ ctl.U
    return trace


def simulate_open_loop(problem: RHCProblem, steps: int, U=None) -> ClosedLoopTrace:
    """Surrogate trace under a fixed chaos control (zero by default)."""
    sys = problem.system
    nU = sys.m * sys.size
    U = np.zeros((steps, nU)) if U is None else np.broadcast_to(np.asarray(U, dtype=float), (steps, nU))
    trace = ClosedLoopTrace("open-loop", SURROGATE, sys.n, sys.m)
    X = np.asarray(problem.X0, dtype=float).copy()
    for k in range(steps + 1):
        rec = _record(problem, k, X)
        trace.records.append(rec)
        if k == steps:
            break
        rec.control = StepControl("open-loop", U[k].copy(), sys.m, np.asarray(U[k][: sys.m]), np.zeros((sys.m, sys.n)))
        rec.status = OPTIMAL
        rec.objective = 0.0
        rec.margins = _margins(problem, X, U[k])
        X = sys.Abold @ X + sys.Bbold @ U[k]
    return trace


@dataclass(frozen=True)
class MomentDecayReport:
    """Per-order moment-stability verdicts.

    ``initial``, ``final`` and ``peak`` have shape ``(orders, n)``. An
    order decays when every component ends below ``tolerance`` times its
    reference magnitude: ``|m_q(0)|``, or the trace peak if that is zero.
    It is bounded when the peak does not exceed ``bound`` (no check when
    ``bound`` is None).
    """

    orders: tuple[int, ...]
    tolerance: float
    bound: float | None
    initial: np.ndarray
    final: np.ndarray
    peak: np.ndarray
    decayed: tuple[bool, ...]
    bounded: tuple[bool, ...]

    @property
    def passed(self) -> bool:
        return all(self.decayed) and all(self.bounded)

    def to_dict(self) -> dict:
        return {
            "orders": list(self.orders),
            "tolerance": self.tolerance,
            "bound": self.bound,
            "initial": self.initial.tolist(),
            "final": self.final.tolist(),
            "peak": self.peak.tolist(),
            "decayed": list(self.decayed),
            "bounded": list(self.bounded),
            "passed": self.passed,
        }


def check_moment_decay(
    trace: ClosedLoopTrace,
    orders: Sequence[int] = MOMENT_ORDERS,
    tolerance: float = 1e-4,
    bound: float | None = None,
) -> MomentDecayReport:
    """Check decay (and optionally boundedness) of the logged raw moments."""
    idx = [MOMENT_ORDERS.index(q) for q in orders]
    mom = np.abs(trace.moment_array[:, idx, :])
    initial, final, peak = mom[0], mom[-1], mom.max(axis=0)
    ref = np.where(initial > 0, initial, peak)
    decayed = tuple(bool(np.all(f <= tolerance * r)) for f, r in zip(final, ref))
    bounded = tuple(bool(bound is None or np.all(p <= bound)) for p in peak)
    return MomentDecayReport(tuple(orders), tolerance, bound, initial, final, peak, decayed, bounded)


__all__ = [
    "SURROGATE",
    "TRUTH",
    "MOMENT_ORDERS",
    "SolverError",
    "RHCSettings",
    "StepControl",
    "PlantHandle",
    "StepRecord",
    "ClosedLoopTrace",
    "rhc_step",
    "run_closed_loop",
    "simulate_open_loop",
    "MomentDecayReport",
    "check_moment_decay",
]
