"""Finite-horizon control problems in chaos coordinates.

Costs and constraints stated on the random state ``x(k, D)`` and input
``u(k, D)`` are rewritten as deterministic quadratic forms in the chaos
coefficients ``X(k)``, ``U(k)``. The horizon cost is::

    sum_{k=0}^{N-1} [X(k)' Qbar X(k) + U(k)' Rbar U(k)] + X(N)' P X(N)

with ``Qbar = W (x) Q``, ``Rbar = W (x) R`` and ``P`` from the terminal
synthesis.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .basis import ProductTensors
from .galerkin import ChaosSystem, deviation_selector
from .solvers.dare import SynthesisError, dare_residual, lqr_gain, solve_dare
from .solvers.qp import QPData, QuadraticConstraint

FULL = "full-chaos-control"
FIXED_GAIN = "mean-plus-fixed-gain"
VARIABLE_GAIN = "mean-plus-variable-gain"
MODES = (FULL, FIXED_GAIN, VARIABLE_GAIN)
MODE_ALIASES = {"full": FULL, "fixed-gain": FIXED_GAIN, "variable-gain": VARIABLE_GAIN}

EXPECTATION_STATE = "expectation-state"
EXPECTATION_CONTROL = "expectation-control"
VARIANCE_TRACE_STATE = "variance-trace-state"
CONSTRAINT_KINDS = (EXPECTATION_STATE, EXPECTATION_CONTROL, VARIANCE_TRACE_STATE)


class ConvexityError(ValueError):
    """A constraint is not convex but a convex solve was requested."""


class InfeasibleInitialError(ValueError):
    """The initial state violates a state constraint imposed at step 0."""

    code = "constraint-infeasible-initial"


def canonical_mode(mode: str) -> str:
    mode = MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES} or {tuple(MODE_ALIASES)}")
    return mode


def _check_spd(M: np.ndarray, name: str) -> np.ndarray:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1]:
        raise ValueError(f"{name} must be square")
    if np.abs(M - M.T).max() > 1e-12 * max(1.0, np.abs(M).max()):
        raise ValueError(f"{name} must be symmetric")
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise ValueError(f"{name} must be positive definite") from None
    return M


@dataclass(frozen=True)
class CostSpec:
    Q: np.ndarray
    R: np.ndarray
    N: int

    def __post_init__(self):
        object.__setattr__(self, "Q", _check_spd(self.Q, "Q"))
        object.__setattr__(self, "R", _check_spd(self.R, "R"))
        if int(self.N) < 1:
            raise ValueError("horizon N must be >= 1")
        object.__setattr__(self, "N", int(self.N))


@dataclass(frozen=True)
class ConstraintSpec:
    """Moment constraint on the random state or input.

    ``expectation-state``: ``E[x'Hx + Gx] (<= or >=) bound``;
    ``expectation-control``: the same on ``u``;
    ``variance-trace-state``: ``trace Cov(x) <= bound`` (H and G unused).
    ``steps`` selects time indices within ``0..N``; ``None`` means all.
    """

    kind: str
    bound: float
    H: np.ndarray | None = None
    G: np.ndarray | None = None
    direction: str = "<="
    steps: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in CONSTRAINT_KINDS:
            raise ValueError(f"unknown constraint kind {self.kind!r}")
        if self.direction not in ("<=", ">="):
            raise ValueError(f"direction must be '<=' or '>=', got {self.direction!r}")
        if self.kind == VARIANCE_TRACE_STATE:
            if self.direction != "<=":
                raise ValueError("variance constraints are upper bounds")
            if self.bound < 0:
                raise ValueError("variance bound must be nonnegative")
        if self.steps is not None:
            object.__setattr__(self, "steps", tuple(sorted({int(k) for k in self.steps})))


@dataclass(frozen=True)
class LiftedConstraint:
    """``V'HV + g'V <= bound`` on a chaos vector ``V`` (state or control)."""

    H: np.ndarray
    g: np.ndarray
    bound: float
    on: str  # "state" or "control"
    steps: tuple[int, ...] | None
    label: str = ""

    @property
    def is_linear(self) -> bool:
        return not np.any(self.H)

    @property
    def is_convex(self) -> bool:
        return self.is_linear or np.linalg.eigvalsh(self.H).min() >= -1e-12 * np.abs(self.H).max()

    def value(self, V) -> float:
        V = np.asarray(V, dtype=float)
        return float(V @ self.H @ V + self.g @ V)

    def margin(self, V) -> float:
        """``bound - value``; nonnegative when satisfied."""
        return self.bound - self.value(V)

    def applies(self, k: int, N: int) -> bool:
        last = N if self.on == "state" else N - 1
        if k < 0 or k > last:
            return False
        return self.steps is None or k in self.steps


def lift_cost(cost: CostSpec, tensors: ProductTensors) -> tuple[np.ndarray, np.ndarray]:
    """``(W (x) Q, W (x) R)``."""
    return np.kron(tensors.W, cost.Q), np.kron(tensors.W, cost.R)


def lift_expectation_constraint(
    c: ConstraintSpec, tensors: ProductTensors, dim: int, convex: bool = False
) -> LiftedConstraint:
    """Rewrite ``E[v'Hv + Gv] <= bound`` as ``V'(W (x) H)V + G [I 0] V <= bound``.

    ``>=`` constraints are negated into ``<=`` form. ``dim`` is n for state
    constraints and m for control constraints.
    """
    if c.kind == VARIANCE_TRACE_STATE:
        raise ValueError("use lift_variance_constraint for variance constraints")
    H = np.zeros((dim, dim)) if c.H is None else np.atleast_2d(np.asarray(c.H, dtype=float))
    G = np.zeros(dim) if c.G is None else np.asarray(c.G, dtype=float).ravel()
    if H.shape != (dim, dim) or G.size != dim:
        raise ValueError(f"{c.kind}: H must be {dim}x{dim} and G length {dim}")
    if np.abs(H - H.T).max() > 1e-12 * max(1.0, np.abs(H).max()):
        raise ValueError(f"{c.kind}: H must be symmetric")
    if not np.any(H) and not np.any(G):
        raise ValueError(f"{c.kind}: H = 0 and G = 0 gives a vacuous constraint")
    size = tensors.W.shape[0]
    Hbar = np.kron(tensors.W, H)
    gbar = np.concatenate([G, np.zeros(dim * (size - 1))])
    bound = float(c.bound)
    if c.direction == ">=":
        Hbar, gbar, bound = -Hbar, -gbar, -bound
    on = "state" if c.kind == EXPECTATION_STATE else "control"
    out = LiftedConstraint(Hbar, gbar, bound, on, c.steps, label=c.kind)
    if convex and not out.is_convex:
        raise ConvexityError(f"{c.kind} with direction {c.direction} is not convex")
    return out


def lift_variance_constraint(
    bound: float, tensors: ProductTensors, n: int, steps: Sequence[int] | None = None
) -> LiftedConstraint:
    """``X' ((W - FF') (x) I_n) X <= bound``."""
    if bound < 0:
        raise ValueError("variance bound must be nonnegative")
    Qs = np.kron(tensors.W - np.outer(tensors.F, tensors.F), np.eye(n))
    steps = None if steps is None else tuple(sorted(set(steps)))
    return LiftedConstraint(Qs, np.zeros(Qs.shape[0]), float(bound), "state", steps, VARIANCE_TRACE_STATE)


def lift_constraint(c: ConstraintSpec, tensors: ProductTensors, n: int, m: int, convex: bool = False):
    if c.kind == VARIANCE_TRACE_STATE:
        return lift_variance_constraint(c.bound, tensors, n, c.steps)
    dim = n if c.kind == EXPECTATION_STATE else m
    return lift_expectation_constraint(c, tensors, dim, convex=convex)


@dataclass(frozen=True)
class TerminalController:
    """Terminal cost ``X'PX`` and the laws it is the cost-to-go of.

    Attributes:
        P: lifted terminal cost matrix.
        Kbold: unstructured chaos gain, ``U = Kbold X``.
        K_f: gain in the structured form ``u = ubar + K_f (x - E[x])``.
        residual: Riccati residual of ``P``.
    """

    P: np.ndarray
    Kbold: np.ndarray
    K_f: np.ndarray
    residual: float
    spectral_radius: float


def structured_gain(Kbold: np.ndarray, tensors: ProductTensors, n: int, m: int) -> np.ndarray:
    """Project a full chaos gain onto ``I (x) K`` acting on deviation modes.

    Weighted least squares over the diagonal blocks ``i >= 1`` with weights
    ``<phi_i^2>``; falls back to the mean block when there are no
    deviation modes.
    """
    size = tensors.W.shape[0]
    blocks = Kbold.reshape(size, m, size, n)
    if size == 1:
        return blocks[0, :, 0, :].copy()
    h = tensors.norms[1:]
    diag = np.stack([blocks[i, :, i, :] for i in range(1, size)])
    return np.einsum("i,iab->ab", h, diag) / h.sum()


def synth_terminal(sys: ChaosSystem, Qbar: np.ndarray, Rbar: np.ndarray) -> TerminalController:
    """LQR on the lifted system: ``P`` solves the DARE on ``(Abold, Bbold, Qbar, Rbar)``.

    Raises:
        SynthesisError: if the Riccati iteration fails or the resulting
            closed loop is not stable.
    """
    P = solve_dare(sys.Abold, sys.Bbold, Qbar, Rbar)
    Kbold = lqr_gain(sys.Abold, sys.Bbold, Rbar, P)
    rho = float(np.abs(np.linalg.eigvals(sys.Abold + sys.Bbold @ Kbold)).max())
    if rho >= 1.0:
        raise SynthesisError(f"terminal closed loop has spectral radius {rho:.6f} >= 1")
    K_f = structured_gain(Kbold, sys.tensors, sys.n, sys.m)
    return TerminalController(P, Kbold, K_f, dare_residual(sys.Abold, sys.Bbold, Qbar, Rbar, P), rho)


@dataclass(frozen=True)
class RHCProblem:
    system: ChaosSystem
    cost: CostSpec
    Qbar: np.ndarray
    Rbar: np.ndarray
    terminal: TerminalController
    constraints: tuple[LiftedConstraint, ...]
    mode: str
    X0: np.ndarray
    gain: np.ndarray = field(default=None)

    @property
    def N(self) -> int:
        return self.cost.N

    @property
    def n(self) -> int:
        return self.system.n

    @property
    def m(self) -> int:
        return self.system.m

    @property
    def size(self) -> int:
        return self.system.size

    def with_state(self, X) -> RHCProblem:
        X = np.asarray(X, dtype=float).ravel()
        check_initial(self.constraints, X)
        return replace(self, X0=X)

    def state_constraints_at(self, k: int) -> list[LiftedConstraint]:
        return [c for c in self.constraints if c.on == "state" and c.applies(k, self.N)]

    def control_constraints_at(self, k: int) -> list[LiftedConstraint]:
        return [c for c in self.constraints if c.on == "control" and c.applies(k, self.N)]


def check_initial(constraints: Sequence[LiftedConstraint], X0, tol: float = 1e-9) -> None:
    for c in constraints:
        if c.on == "state" and (c.steps is None or 0 in c.steps):
            if c.margin(X0) < -tol * max(1.0, abs(c.bound)):
                raise InfeasibleInitialError(
                    f"initial state violates {c.label} constraint (margin {c.margin(X0):.3e})"
                )


def build_problem(
    system: ChaosSystem,
    cost: CostSpec,
    constraints: Sequence[ConstraintSpec] = (),
    mode: str = VARIABLE_GAIN,
    X0=None,
    terminal: TerminalController | None = None,
    gain=None,
) -> RHCProblem:
    """Validate inputs and lift everything to chaos coordinates.

    Raises:
        ValueError: on dimension mismatches.
        ConvexityError: if a convex mode meets a nonconvex constraint.
        InfeasibleInitialError: if ``X0`` violates a step-0 state constraint.
    """
    mode = canonical_mode(mode)
    n, m = system.n, system.m
    if cost.Q.shape != (n, n) or cost.R.shape != (m, m):
        raise ValueError(f"Q must be {n}x{n} and R {m}x{m}")
    T = system.tensors
    Qbar, Rbar = lift_cost(cost, T)
    if terminal is None:
        terminal = synth_terminal(system, Qbar, Rbar)
    convex = mode != VARIABLE_GAIN
    lifted = tuple(lift_constraint(c, T, n, m, convex=convex) for c in constraints)
    for c in constraints:
        if c.steps and max(c.steps) > cost.N:
            raise ValueError(f"constraint steps {c.steps} exceed horizon N={cost.N}")
    if X0 is None:
        X0 = np.zeros(n * system.size)
    X0 = np.asarray(X0, dtype=float).ravel()
    if X0.size != n * system.size:
        raise ValueError(f"initial chaos state must have {n * system.size} entries")
    if gain is None:
        gain = terminal.K_f
    gain = np.atleast_2d(np.asarray(gain, dtype=float))
    if gain.shape != (m, n):
        raise ValueError(f"gain must be {m}x{n}")
    check_initial(lifted, X0)
    return RHCProblem(system, cost, Qbar, Rbar, terminal, lifted, mode, X0, gain)


@dataclass(frozen=True)
class HorizonLayout:
    """Index map of the sparse horizon QP variables ``[X(1..N), V(0..N-1)]``.

    ``V`` is ``U`` (full chaos mode) or ``ubar`` (structured modes). The
    applied chaos control is ``U(k) = S V(k) + Kbig(k) X(k)``.
    """

    N: int
    nX: int
    nV: int
    S: np.ndarray
    Kbig: tuple[np.ndarray, ...]

    @property
    def nvar(self) -> int:
        return self.N * (self.nX + self.nV)

    def X_slice(self, k: int) -> slice:
        if not 1 <= k <= self.N:
            raise IndexError(k)
        return slice((k - 1) * self.nX, k * self.nX)

    def V_slice(self, k: int) -> slice:
        start = self.N * self.nX + k * self.nV
        return slice(start, start + self.nV)

    def states(self, v: np.ndarray, X0: np.ndarray) -> np.ndarray:
        return np.vstack([X0] + [v[self.X_slice(k)] for k in range(1, self.N + 1)])

    def inputs(self, v: np.ndarray) -> np.ndarray:
        return np.vstack([v[self.V_slice(k)] for k in range(self.N)])

    def controls(self, v: np.ndarray, X0: np.ndarray) -> np.ndarray:
        X = self.states(v, X0)
        V = self.inputs(v)
        return np.vstack([self.S @ V[k] + self.Kbig[k] @ X[k] for k in range(self.N)])


def _state_map(layout: HorizonLayout, k: int, X0: np.ndarray):
    """``X(k) = L v + c``."""
    L = np.zeros((layout.nX, layout.nvar))
    if k == 0:
        return L, X0.copy()
    L[:, layout.X_slice(k)] = np.eye(layout.nX)
    return L, np.zeros(layout.nX)


def _control_map(layout: HorizonLayout, k: int, X0: np.ndarray):
    Lx, cx = _state_map(layout, k, X0)
    L = layout.Kbig[k] @ Lx
    L[:, layout.V_slice(k)] += layout.S
    return L, layout.Kbig[k] @ cx


def horizon_qp(problem: RHCProblem, gains: Sequence[np.ndarray] | None = None) -> tuple[QPData, HorizonLayout]:
    """Sparse QP for the convex modes, or for fixed per-step gains.

    With ``gains`` given, the structured law is used with ``K(k) = gains[k]``
    regardless of ``problem.mode`` (this is the inner step of the
    variable-gain solver).

    Raises:
        ConvexityError: if a constraint is nonconvex.
    """
    sys = problem.system
    N, size, n, m = problem.N, problem.size, problem.n, problem.m
    nX = n * size
    if gains is None and problem.mode == FULL:
        S = np.eye(m * size)
        Kbig = tuple(np.zeros((m * size, nX)) for _ in range(N))
    else:
        if gains is None:
            gains = [problem.gain] * N
        if len(gains) != N:
            raise ValueError(f"need {N} gains")
        S = np.zeros((m * size, m))
        S[:m] = np.eye(m)
        Msel = deviation_selector(size)
        Kbig = tuple(np.kron(Msel, np.atleast_2d(K)) for K in gains)
    layout = HorizonLayout(N, nX, S.shape[1], S, Kbig)
    X0 = problem.X0
    nv = layout.nvar

    P = np.zeros((nv, nv))
    q = np.zeros(nv)
    const = 0.0

    def add_quadratic(L, c, M):
        nonlocal P, q, const
        LM = L.T @ M
        P += 2.0 * LM @ L
        q += 2.0 * LM @ c
        const += float(c @ M @ c)

    for k in range(N):
        L, c = _state_map(layout, k, X0)
        add_quadratic(L, c, problem.Qbar)
        L, c = _control_map(layout, k, X0)
        add_quadratic(L, c, problem.Rbar)
    L, c = _state_map(layout, N, X0)
    add_quadratic(L, c, problem.terminal.P)

    # dynamics: X(k+1) = Abold X(k) + Bbold U(k)
    A_eq = np.zeros((N * nX, nv))
    b_eq = np.zeros(N * nX)
    for k in range(N):
        rows = slice(k * nX, (k + 1) * nX)
        Lx, cx = _state_map(layout, k, X0)
        Lu, cu = _control_map(layout, k, X0)
        Ln, _ = _state_map(layout, k + 1, X0)
        A_eq[rows] = Ln - sys.Abold @ Lx - sys.Bbold @ Lu
        b_eq[rows] = sys.Abold @ cx + sys.Bbold @ cu

    lin_rows, lin_rhs, quads = [], [], []
    for con in problem.constraints:
        if not con.is_convex:
            raise ConvexityError(f"{con.label} constraint is not convex")
        last = N if con.on == "state" else N - 1
        for k in range(1 if con.on == "state" else 0, last + 1):
            if not con.applies(k, N):
                continue
            L, c = (_state_map if con.on == "state" else _control_map)(layout, k, X0)
            lin = L.T @ (2.0 * con.H @ c + con.g)
            rhs = con.bound - float(c @ con.H @ c + con.g @ c)
            if con.is_linear:
                lin_rows.append(lin)
                lin_rhs.append(rhs)
            else:
                quads.append(QuadraticConstraint(L.T @ con.H @ L, lin, rhs))
    A_in = np.array(lin_rows) if lin_rows else None
    b_in = np.array(lin_rhs) if lin_rhs else None
    P = 0.5 * (P + P.T)
    return QPData(P, q, A_eq, b_eq, A_in, b_in, quads, const), layout


def horizon_cost(problem: RHCProblem, X: np.ndarray, U: np.ndarray) -> float:
    """Cost of a chaos trajectory: ``X`` is ``(N+1, nX)``, ``U`` is ``(N, nU)``."""
    N = problem.N
    J = sum(X[k] @ problem.Qbar @ X[k] + U[k] @ problem.Rbar @ U[k] for k in range(N))
    return float(J + X[N] @ problem.terminal.P @ X[N])


def simulate_structured(problem: RHCProblem, ubar: np.ndarray, gains: np.ndarray):
    """Roll the lifted dynamics under ``u = ubar(k) + K(k)(x - E[x])``.

    Returns ``(X, U)`` with shapes ``(N+1, nX)`` and ``(N, m(p+1))``.
    """
    sys = problem.system
    N, size = problem.N, problem.size
    X = np.empty((N + 1, sys.n * size))
    U = np.empty((N, sys.m * size))
    X[0] = problem.X0
    for k in range(N):
        blocks = X[k].reshape(size, sys.n)
        Uk = blocks @ np.atleast_2d(gains[k]).T
        Uk[0] = ubar[k]
        U[k] = Uk.ravel()
        X[k + 1] = sys.Abold @ X[k] + sys.Bbold @ U[k]
    return X, U


def constraint_margins(problem: RHCProblem, X: np.ndarray, U: np.ndarray | None = None) -> list:
    """Margins ``bound - value`` of every applicable (constraint, step) pair."""
    out = []
    for j, con in enumerate(problem.constraints):
        last = problem.N if con.on == "state" else problem.N - 1
        for k in range(last + 1):
            if not con.applies(k, problem.N):
                continue
            if con.on == "state":
                out.append((j, k, con.margin(X[k])))
            elif U is not None:
                out.append((j, k, con.margin(U[k])))
    return out


__all__ = [
    "FULL",
    "FIXED_GAIN",
    "VARIABLE_GAIN",
    "MODES",
    "CostSpec",
    "ConstraintSpec",
    "LiftedConstraint",
    "TerminalController",
    "RHCProblem",
    "HorizonLayout",
    "ConvexityError",
    "InfeasibleInitialError",
    "lift_cost",
    "lift_expectation_constraint",
    "lift_variance_constraint",
    "synth_terminal",
    "structured_gain",
    "build_problem",
    "horizon_qp",
    "horizon_cost",
    "simulate_structured",
    "constraint_margins",
    "check_initial",
    "canonical_mode",
    "EXPECTATION_STATE",
    "EXPECTATION_CONTROL",
    "VARIANCE_TRACE_STATE",
]
