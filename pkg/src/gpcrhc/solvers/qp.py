"""Convex QP / QCQP solver: operator splitting (ADMM) with an active-set polish.

Problem form::

    minimize    1/2 x'Px + q'x + constant
    subject to  A_eq x  = b_eq
                A_in x <= b_in
                x'H_j x + g_j'x <= c_j      (H_j PSD)

Quadratic rows are handed to ADMM as second-order cones. Once ADMM has
identified the active set, the polish step solves the KKT system of the
active constraints by Newton iteration and accepts the result only if it
re-checks as primal and dual feasible; the active set is corrected and
the polish repeated a few times if not.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
MAX_ITERATIONS = "max-iterations"
NUMERIC_FAILURE = "numeric-failure"


@dataclass
class QuadraticConstraint:
    """``x'Hx + g'x <= bound`` with ``H`` symmetric PSD."""

    H: np.ndarray
    g: np.ndarray
    bound: float

    def value(self, x: np.ndarray) -> float:
        return float(x @ self.H @ x + self.g @ x)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return 2.0 * self.H @ x + self.g


@dataclass
class QPData:
    P: np.ndarray
    q: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    A_in: np.ndarray | None = None
    b_in: np.ndarray | None = None
    quadratic: list[QuadraticConstraint] = field(default_factory=list)
    constant: float = 0.0

    def __post_init__(self):
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        self.q = np.asarray(self.q, dtype=float).ravel()
        nx = self.q.size
        if self.P.shape != (nx, nx):
            raise ValueError(f"P must be {nx}x{nx}, got {self.P.shape}")
        if not np.allclose(self.P, self.P.T, atol=1e-10 * max(1.0, np.abs(self.P).max())):
            raise ValueError("P must be symmetric")
        self.P = 0.5 * (self.P + self.P.T)
        if nx and np.linalg.eigvalsh(self.P).min() < -1e-10 * max(1.0, np.abs(self.P).max()):
            raise ValueError("P must be positive semidefinite")
        self.A_eq, self.b_eq = _rows(self.A_eq, self.b_eq, nx, "equality")
        self.A_in, self.b_in = _rows(self.A_in, self.b_in, nx, "inequality")
        for c in self.quadratic:
            c.H = 0.5 * (np.asarray(c.H, dtype=float) + np.asarray(c.H, dtype=float).T)
            c.g = np.asarray(c.g, dtype=float).ravel()
            if c.H.shape != (nx, nx) or c.g.size != nx:
                raise ValueError("quadratic constraint dimensions do not match")
            if np.linalg.eigvalsh(c.H).min() < -1e-10 * max(1.0, np.abs(c.H).max()):
                raise ValueError("quadratic constraint matrix must be PSD")

    @property
    def nx(self) -> int:
        return self.q.size

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ self.P @ x + self.q @ x + self.constant)

    def violation(self, x: np.ndarray) -> float:
        """Largest constraint violation at ``x``, by direct evaluation."""
        v = 0.0
        if self.b_eq.size:
            v = max(v, float(np.abs(self.A_eq @ x - self.b_eq).max()))
        if self.b_in.size:
            v = max(v, float(np.max(self.A_in @ x - self.b_in, initial=0.0)))
        for c in self.quadratic:
            v = max(v, c.value(x) - c.bound)
        return v


def _rows(A, b, nx, name):
    if A is None or np.size(A) == 0:
        return np.zeros((0, nx)), np.zeros(0)
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float).ravel()
    if A.shape != (b.size, nx):
        raise ValueError(f"{name} constraints: A {A.shape} and b {b.shape} inconsistent with {nx} variables")
    return A, b


@dataclass
class SolveSettings:
    eps_abs: float = 1e-8
    eps_rel: float = 0.0
    max_iter: int = 20000
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    adaptive_rho_interval: int = 25
    polish: bool = True
    polish_interval: int = 25
    polish_rounds: int = 10
    eps_infeasible: float = 1e-7
    scaling_iterations: int = 10


@dataclass
class SolveReport:
    status: str
    objective: float
    x: np.ndarray
    residuals: dict
    iterations: int
    multipliers: dict = field(default_factory=dict)
    polished: bool = False

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


class _ConeLayout:
    """Row layout of ``z = Cx`` and projection onto the constraint set."""

    def __init__(self, data: QPData):
        nx = data.nx
        rows = [data.A_eq, data.A_in]
        lo = [data.b_eq, np.full(data.b_in.size, -np.inf)]
        hi = [data.b_eq, data.b_in]
        self.n_eq = data.b_eq.size
        self.n_box = data.b_eq.size + data.b_in.size
        self.cones = []  # (start, stop) row ranges
        offsets = []
        start = self.n_box
        for c in data.quadratic:
            w, V = np.linalg.eigh(c.H)
            keep = w > 1e-12 * max(1.0, w.max(initial=0.0))
            L = V[:, keep] * np.sqrt(w[keep])
            block = np.vstack([-c.g[None, :], 2.0 * L.T, -c.g[None, :]])
            off = np.concatenate([[c.bound + 1.0], np.zeros(L.shape[1]), [c.bound - 1.0]])
            rows.append(block)
            self.cones.append((start, start + block.shape[0]))
            offsets.append(off)
            start += block.shape[0]
        self.C = np.vstack(rows) if rows else np.zeros((0, nx))
        self.lo = np.concatenate(lo)
        self.hi = np.concatenate(hi)
        self.offset = np.concatenate(offsets) if offsets else np.zeros(0)

    @property
    def m(self) -> int:
        return self.C.shape[0]

    def project(self, v: np.ndarray, lo, hi, offset) -> np.ndarray:
        out = v.copy()
        out[: self.n_box] = np.clip(v[: self.n_box], lo, hi)
        nb = self.n_box
        for a, b in self.cones:
            off = offset[a - nb : b - nb]
            out[a:b] = _project_soc(v[a:b] + off) - off
        return out


def _project_soc(v: np.ndarray) -> np.ndarray:
    t, w = v[0], v[1:]
    nw = np.linalg.norm(w)
    if nw <= t:
        return v
    if nw <= -t:
        return np.zeros_like(v)
    s = 0.5 * (t + nw)
    return np.concatenate([[s], s * w / nw])


def _ruiz(P, C, cone_blocks, n_box, iterations):
    """Diagonal equilibration of ``[[P, C'], [C, 0]]``; cone rows share one factor."""
    nx, m = P.shape[0], C.shape[0]
    D = np.ones(nx)
    E = np.ones(m)
    Ps, Cs = P.copy(), C.copy()
    for _ in range(iterations):
        col = np.maximum(np.abs(Ps).max(axis=0, initial=0.0), np.abs(Cs).max(axis=0, initial=0.0))
        dx = 1.0 / np.sqrt(np.where(col > 1e-8, col, 1.0))
        row = np.abs(Cs).max(axis=1, initial=0.0) if m else np.zeros(0)
        ez = 1.0 / np.sqrt(np.where(row > 1e-8, row, 1.0))
        for a, b in cone_blocks:
            ez[a:b] = ez[a:b].min()
        dx = np.clip(dx, 1e-4, 1e4)
        ez = np.clip(ez, 1e-4, 1e4)
        Ps = dx[:, None] * Ps * dx[None, :]
        Cs = ez[:, None] * Cs * dx[None, :]
        D *= dx
        E *= ez
    return D, E


def solve_convex(
    data: QPData,
    settings: SolveSettings | None = None,
    x0: np.ndarray | None = None,
) -> SolveReport:
    """Minimize a convex QP/QCQP. See module docstring for the problem form."""
    s = settings or SolveSettings()
    nx = data.nx
    lay = _ConeLayout(data)
    m = lay.m

    D, E = _ruiz(data.P, lay.C, [(a, b) for a, b in lay.cones], lay.n_box, s.scaling_iterations)
    Pq = D[:, None] * data.P * D[None, :]
    qq = D * data.q
    cost_scale = 1.0 / max(1.0, np.abs(Pq).max(initial=0.0), np.abs(qq).max(initial=0.0))
    Pq *= cost_scale
    qq *= cost_scale
    Cq = E[:, None] * lay.C * D[None, :]
    lo = E[: lay.n_box] * lay.lo
    hi = E[: lay.n_box] * lay.hi
    offset = E[lay.n_box :] * lay.offset

    rho_vec = np.full(m, s.rho)
    rho_vec[: lay.n_eq] *= 1e3

    def factor(rv):
        K = Pq + s.sigma * np.eye(nx) + Cq.T @ (rv[:, None] * Cq)
        try:
            return linalg.cho_factor(K)
        except linalg.LinAlgError:
            log.info("KKT factorization failed; adding 1e-9 jitter")
            return linalg.cho_factor(K + 1e-9 * np.eye(nx))

    try:
        fac = factor(rho_vec)
    except linalg.LinAlgError:
        return SolveReport(NUMERIC_FAILURE, np.nan, np.full(nx, np.nan), {}, 0)

    x = np.zeros(nx) if x0 is None else np.asarray(x0, dtype=float) / D
    z = lay.project(Cq @ x, lo, hi, offset) if m else np.zeros(0)
    y = np.zeros(m)
    best_polish = None
    status = MAX_ITERATIONS
    it = 0
    for it in range(1, s.max_iter + 1):
        x_prev, y_prev = x, y
        rhs = s.sigma * x - qq + Cq.T @ (rho_vec * z - y)
        xt = linalg.cho_solve(fac, rhs)
        zt = Cq @ xt
        x = s.alpha * xt + (1 - s.alpha) * x
        zr = s.alpha * zt + (1 - s.alpha) * z
        z = lay.project(zr + y / rho_vec, lo, hi, offset) if m else z
        y = y + rho_vec * (zr - z)

        if not np.all(np.isfinite(x)):
            status = NUMERIC_FAILURE
            break

        # unscaled residuals
        xu = D * x
        yu = E * y / cost_scale
        zu = z / E if m else z
        Cx = lay.C @ xu
        r_prim = float(np.abs(Cx - zu).max(initial=0.0))
        dual_vec = data.P @ xu + data.q + lay.C.T @ yu
        r_dual = float(np.abs(dual_vec).max(initial=0.0))
        tol_p = s.eps_abs + s.eps_rel * max(np.abs(Cx).max(initial=0.0), np.abs(zu).max(initial=0.0))
        tol_d = s.eps_abs + s.eps_rel * max(
            np.abs(data.P @ xu).max(initial=0.0), np.abs(lay.C.T @ yu).max(initial=0.0), np.abs(data.q).max(initial=0.0)
        )

        if r_prim <= tol_p and r_dual <= tol_d:
            status = OPTIMAL
            break

        if s.polish and it % s.polish_interval == 0 and r_prim < 1e-3 and r_dual < 1e-3:
            best_polish = _polish(data, lay, xu, zu, yu, s)
            if best_polish is not None:
                best_polish.iterations = it
                return best_polish

        if it % s.polish_interval == 0:
            verdict = _infeasibility(data, lay, D, E, cost_scale, x - x_prev, y - y_prev, s)
            if verdict is not None:
                status = verdict
                break

        if s.adaptive_rho_interval and it % s.adaptive_rho_interval == 0 and m:
            num = r_prim / max(np.abs(Cx).max(initial=0.0), np.abs(zu).max(initial=0.0), 1e-12)
            den = r_dual / max(
                np.abs(data.P @ xu).max(initial=0.0),
                np.abs(lay.C.T @ yu).max(initial=0.0),
                np.abs(data.q).max(initial=0.0),
                1e-12,
            )
            ratio = np.sqrt(num / max(den, 1e-300))
            if ratio > 5.0 or ratio < 0.2:
                new_rho = np.clip(rho_vec * ratio, 1e-6, 1e6)
                rho_vec = new_rho
                fac = factor(rho_vec)

    xu = D * x
    yu = E * y / cost_scale
    zu = z / E if m else z
    if status in (OPTIMAL, MAX_ITERATIONS) and s.polish:
        pol = _polish(data, lay, xu, zu, yu, s)
        if pol is not None:
            pol.iterations = it
            return pol
    if status in (INFEASIBLE, UNBOUNDED, NUMERIC_FAILURE):
        return SolveReport(status, np.nan if status != UNBOUNDED else -np.inf, xu, {}, it)
    res = _residuals(data, xu, _split_multipliers(data, lay, yu, xu))
    if status == OPTIMAL and res["constraint_violation"] > s.eps_abs:
        status = MAX_ITERATIONS
    return SolveReport(status, data.objective(xu), xu, res, it, _split_multipliers(data, lay, yu, xu))


def _split_multipliers(data: QPData, lay: _ConeLayout, y: np.ndarray, x: np.ndarray) -> dict:
    ne, ni = data.b_eq.size, data.b_in.size
    mu = []
    for (a, b), c in zip(lay.cones, data.quadratic):
        # the cone block contributes C_j'y_j to stationarity; express it as mu * grad f
        contrib = lay.C[a:b].T @ y[a:b]
        gf = c.gradient(x)
        den = gf @ gf
        mu.append(max(0.0, float(contrib @ gf / den)) if den > 0 else 0.0)
    return {"eq": y[:ne].copy(), "in": y[ne : ne + ni].copy(), "quad": np.asarray(mu)}


def _residuals(data: QPData, x: np.ndarray, mult: dict) -> dict:
    grad = data.P @ x + data.q
    if data.b_eq.size:
        grad = grad + data.A_eq.T @ mult["eq"]
    if data.b_in.size:
        grad = grad + data.A_in.T @ mult["in"]
    for mu, c in zip(mult["quad"], data.quadratic):
        grad = grad + mu * c.gradient(x)
    primal = 0.0
    if data.b_eq.size:
        primal = float(np.abs(data.A_eq @ x - data.b_eq).max())
    return {
        "primal": primal,
        "dual": float(np.abs(grad).max(initial=0.0)),
        "constraint_violation": max(0.0, data.violation(x)),
    }


def _infeasibility(data, lay, D, E, cost_scale, dx, dy, s):
    """OSQP-style certificates from successive iterate differences."""
    m = lay.m
    if m:
        dyu = E * dy / cost_scale
        ny = np.abs(dyu).max()
        if ny > 1e-12:
            ok = np.abs(lay.C.T @ dyu).max() <= s.eps_infeasible * ny
            support = 0.0
            nb = lay.n_box
            for i in range(nb):
                if dyu[i] > s.eps_infeasible * ny:
                    if not np.isfinite(lay.hi[i]):
                        ok = False
                        break
                    support += lay.hi[i] * dyu[i]
                elif dyu[i] < -s.eps_infeasible * ny:
                    if not np.isfinite(lay.lo[i]):
                        ok = False
                        break
                    support += lay.lo[i] * dyu[i]
            if ok:
                for a, b in lay.cones:
                    blk = dyu[a:b]
                    if -blk[0] + s.eps_infeasible * ny < np.linalg.norm(blk[1:]):
                        ok = False
                        break
                    support -= lay.offset[a - nb : b - nb] @ blk
            if ok and support < -s.eps_infeasible * ny:
                return INFEASIBLE
    dxu = D * dx
    nx_ = np.abs(dxu).max(initial=0.0)
    if nx_ > 1e-12:
        tol = s.eps_infeasible * nx_
        if np.abs(data.P @ dxu).max() <= tol and data.q @ dxu < -tol:
            Cd = lay.C @ dxu
            nb = lay.n_box
            ok = True
            for i in range(nb):
                if np.isfinite(lay.hi[i]) and Cd[i] > tol:
                    ok = False
                if np.isfinite(lay.lo[i]) and Cd[i] < -tol:
                    ok = False
            for a, b in lay.cones:
                blk = Cd[a:b]
                if blk[0] + tol < np.linalg.norm(blk[1:]):
                    ok = False
            if ok:
                return UNBOUNDED
    return None


def _polish(data: QPData, lay: _ConeLayout, x, z, y, s: SolveSettings) -> SolveReport | None:
    """Active-set refinement from an approximate ADMM point."""
    ne, ni = data.b_eq.size, data.b_in.size
    scale = max(1.0, np.abs(y).max(initial=0.0))
    act_in = set()
    if ni:
        slack = data.b_in - data.A_in @ x
        yin = y[ne : ne + ni]
        act_in = {i for i in range(ni) if slack[i] < yin[i] or slack[i] < 1e-9 * scale}
    act_q = set()
    for j, c in enumerate(data.quadratic):
        slack = c.bound - c.value(x)
        a, b = lay.cones[j]
        if np.linalg.norm(y[a:b]) > 1e-9 * scale and slack < np.linalg.norm(y[a:b]) + 1e-9:
            act_q.add(j)
    tried = set()
    for _ in range(s.polish_rounds):
        key = (frozenset(act_in), frozenset(act_q))
        if key in tried:
            return None
        tried.add(key)
        sol = _kkt_newton(data, x, sorted(act_in), sorted(act_q))
        if sol is None:
            return None
        xp, lam_eq, lam_in, mu = sol
        tol = s.eps_abs
        changed = False
        # drop constraints with wrong-sign multipliers (one at a time, most negative first)
        neg = [(lam_in[k], ("in", i)) for k, i in enumerate(sorted(act_in)) if lam_in[k] < -tol]
        neg += [(mu[k], ("q", j)) for k, j in enumerate(sorted(act_q)) if mu[k] < -tol]
        if neg:
            _, (kind, idx) = min(neg)
            (act_in if kind == "in" else act_q).discard(idx)
            changed = True
        else:
            # add violated constraints
            if ni:
                viol = data.A_in @ xp - data.b_in
                for i in np.flatnonzero(viol > tol):
                    if i not in act_in:
                        act_in.add(int(i))
                        changed = True
            for j, c in enumerate(data.quadratic):
                if c.value(xp) - c.bound > tol and j not in act_q:
                    act_q.add(j)
                    changed = True
        if changed:
            x = xp
            continue
        full_in = np.zeros(ni)
        full_in[sorted(act_in)] = lam_in
        full_mu = np.zeros(len(data.quadratic))
        full_mu[sorted(act_q)] = mu
        mult = {"eq": lam_eq, "in": np.maximum(full_in, 0.0), "quad": np.maximum(full_mu, 0.0)}
        res = _residuals(data, xp, mult)
        if res["dual"] <= tol and res["primal"] <= tol and res["constraint_violation"] <= tol:
            return SolveReport(OPTIMAL, data.objective(xp), xp, res, 0, mult, polished=True)
        return None
    return None


def _kkt_newton(data: QPData, x, act_in, act_q, max_newton: int = 30):
    """Solve the KKT system with the given active rows as equalities."""
    nx = data.nx
    A_lin = np.vstack([data.A_eq, data.A_in[act_in]]) if act_in else data.A_eq
    b_lin = np.concatenate([data.b_eq, data.b_in[act_in]]) if act_in else data.b_eq
    nl = b_lin.size
    quads = [data.quadratic[j] for j in act_q]
    nq = len(quads)
    x = np.array(x, dtype=float)
    lam = np.zeros(nl)
    mu = np.zeros(nq)
    for it in range(max_newton):
        gq = np.array([c.gradient(x) for c in quads]).reshape(nq, nx)
        grad = data.P @ x + data.q + A_lin.T @ lam + gq.T @ mu
        F = np.concatenate(
            [grad, A_lin @ x - b_lin, np.array([c.value(x) - c.bound for c in quads])]
        )
        if np.abs(F).max(initial=0.0) <= 1e-13 * max(1.0, np.abs(data.q).max(initial=0.0)) and it:
            break
        Hxx = data.P + sum((2.0 * mu_j * c.H for mu_j, c in zip(mu, quads)), np.zeros((nx, nx)))
        J = np.zeros((nx + nl + nq, nx + nl + nq))
        J[:nx, :nx] = Hxx
        J[:nx, nx : nx + nl] = A_lin.T
        J[nx : nx + nl, :nx] = A_lin
        J[:nx, nx + nl :] = gq.T
        J[nx + nl :, :nx] = gq
        step = _solve_kkt(J, -F)
        x = x + step[:nx]
        lam = lam + step[nx : nx + nl]
        mu = mu + step[nx + nl :]
        if not nq and it >= 1:
            # linear KKT: one step plus one refinement is exact
            break
    if not np.all(np.isfinite(x)):
        return None
    ne = data.b_eq.size
    return x, lam[:ne], lam[ne:], mu


def _solve_kkt(J: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        with np.errstate(all="ignore"):
            lu = linalg.lu_factor(J, check_finite=False)
            step = linalg.lu_solve(lu, rhs)
        if np.all(np.isfinite(step)) and np.abs(J @ step - rhs).max() <= 1e-10 * max(
            1.0, np.abs(rhs).max()
        ):
            return step
    except (linalg.LinAlgError, ValueError):
        pass
    return np.linalg.lstsq(J, rhs, rcond=None)[0]
