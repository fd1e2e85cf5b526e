"""Monte-Carlo and quadrature oracles for the chaos surrogate.

Samples of the uncertain vector are drawn with a Philox counter-based
generator and mapped through inverse CDFs, so a seed fixes the draws on
every platform. Trajectories are simulated under the exact matrices
``A(D_j), B(D_j)`` and compared with the moments predicted by the chaos
expansion.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import special

from .basis import BasisSet, Distribution, tensor_quadrature
from .galerkin import ChaosSystem, UncertainSystem, structured_control

SUPPORTED = ("uniform", "normal", "gamma", "beta")


@dataclass(frozen=True)
class SampleSet:
    samples: np.ndarray  # (M, d)
    seed: int
    distributions: tuple[Distribution, ...]

    @property
    def M(self) -> int:
        return self.samples.shape[0]


def _inverse_cdf(dist: Distribution, u: np.ndarray) -> np.ndarray:
    if dist.kind == "uniform":
        return 2.0 * u - 1.0
    if dist.kind == "normal":
        return special.ndtri(u)
    if dist.kind == "gamma":
        return special.gammaincinv(dist.alpha + 1.0, u)
    if dist.kind == "beta":
        # density ~ (1-x)^alpha (1+x)^beta on [-1, 1]; y = (1+x)/2 ~ Beta(beta+1, alpha+1)
        return 2.0 * special.betaincinv(dist.beta + 1.0, dist.alpha + 1.0, u) - 1.0
    raise ValueError(f"unsupported distribution {dist.kind!r}; expected one of {SUPPORTED}")


def sample_delta(distributions: Sequence[Distribution] | Distribution, M: int, seed: int) -> SampleSet:
    """``M`` i.i.d. draws of the uncertain vector.

    Uniforms come from ``numpy.random.Generator(Philox(seed))``; column
    ``j`` of the ``M x d`` uniform block is mapped through the inverse CDF
    of marginal ``j``.
    """
    if isinstance(distributions, Distribution):
        distributions = (distributions,)
    distributions = tuple(distributions)
    if M < 1:
        raise ValueError("M must be >= 1")
    for dist in distributions:
        if dist.kind not in SUPPORTED:
            raise ValueError(f"unsupported distribution {dist.kind!r}")
    rng = np.random.Generator(np.random.Philox(seed))
    u = rng.random((M, len(distributions)))
    u = np.where(u == 0.0, np.nextafter(0.0, 1.0), u)
    cols = [_inverse_cdf(dist, u[:, j]) for j, dist in enumerate(distributions)]
    return SampleSet(np.column_stack(cols), seed, distributions)


@dataclass(frozen=True)
class OpenLoopPolicy:
    """Chaos control sequence ``U(k)``, evaluated per sample as ``sum_i U_i(k) phi_i(D)``."""

    U: np.ndarray  # (steps, m(p+1))
    basis: BasisSet


@dataclass(frozen=True)
class FeedbackPolicy:
    """``u(k) = ubar(k) + K(k) (x(k) - mean(k))`` with ``mean`` from the surrogate."""

    ubar: np.ndarray  # (steps, m)
    gains: np.ndarray  # (steps, m, n)
    means: np.ndarray  # (steps, n)


@dataclass(frozen=True)
class Ensemble:
    states: np.ndarray  # (steps+1, M, n)
    controls: np.ndarray  # (steps, M, m)


def _simulate_chunk(system: UncertainSystem, delta: np.ndarray, x0: np.ndarray, policy, steps: int):
    A = system.A(delta)
    B = system.B(delta)
    M = delta.shape[0]
    x = np.empty((steps + 1, M, system.n))
    u = np.empty((steps, M, system.m))
    x[0] = x0
    phi = policy.basis.evaluate(delta) if isinstance(policy, OpenLoopPolicy) else None
    for k in range(steps):
        if phi is not None:
            u[k] = phi @ policy.U[k].reshape(-1, system.m)
        else:
            u[k] = policy.ubar[k] + (x[k] - policy.means[k]) @ policy.gains[k].T
        x[k + 1] = np.einsum("sij,sj->si", A, x[k]) + np.einsum("sij,sj->si", B, u[k])
    return x, u


def simulate_ensemble(
    system: UncertainSystem,
    samples: SampleSet,
    policy: OpenLoopPolicy | FeedbackPolicy | None,
    steps: int,
    x0,
    threads: int = 1,
) -> Ensemble:
    """Trajectories ``x(k, D_j)`` under the exact per-sample matrices.

    Args:
        system: uncertain plant.
        samples: draws of ``D``.
        policy: control policy; ``None`` means zero input.
        steps: number of steps.
        x0: initial state, shape ``(n,)`` or ``(M, n)``.
        threads: worker threads over sample chunks (results do not depend
            on this).
    """
    delta = samples.samples
    M = delta.shape[0]
    if policy is None:
        policy = FeedbackPolicy(np.zeros((steps, system.m)), np.zeros((steps, system.m, system.n)), np.zeros((steps, system.n)))
    x0 = np.broadcast_to(np.asarray(x0, dtype=float), (M, system.n))
    n_chunks = max(1, min(threads, M))
    bounds = np.linspace(0, M, n_chunks + 1).astype(int)
    parts = [(delta[a:b], x0[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]
    if n_chunks == 1:
        results = [_simulate_chunk(system, d, x, policy, steps) for d, x in parts]
    else:
        with ThreadPoolExecutor(n_chunks) as pool:
            results = list(pool.map(lambda p: _simulate_chunk(system, p[0], p[1], policy, steps), parts))
    return Ensemble(np.concatenate([r[0] for r in results], axis=1), np.concatenate([r[1] for r in results], axis=1))


def chaos_trajectory(sys: ChaosSystem, X0, policy: OpenLoopPolicy | FeedbackPolicy | None, steps: int) -> np.ndarray:
    """Surrogate trajectory ``(steps+1, n(p+1))`` under the same policy."""
    X = np.empty((steps + 1, sys.n * sys.size))
    X[0] = np.asarray(X0, dtype=float).ravel()
    for k in range(steps):
        if policy is None:
            U = np.zeros(sys.m * sys.size)
        elif isinstance(policy, OpenLoopPolicy):
            U = policy.U[k]
        else:
            U = structured_control(policy.ubar[k], policy.gains[k], X[k], sys.size)
        X[k + 1] = sys.Abold @ X[k] + sys.Bbold @ U
    return X


def chaos_moments(
    X: np.ndarray, basis: BasisSet, n: int, orders: Sequence[int]
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean, variance and central moments from a chaos trajectory.

    Returns ``(mean, var, central)`` with shapes ``(T, n)``, ``(T, n)`` and
    ``(len(orders), T, n)``. Mean and variance use the coefficient formulas
    ``x_0`` and ``sum_{i>0} <phi_i^2> x_i^2``; higher central moments are
    integrated exactly under a Gauss rule.
    """
    C = X.reshape(X.shape[0], -1, n)
    norms = basis.tensors.norms
    mean = C[:, 0, :].copy()
    var = np.einsum("i,tin->tn", norms[1:], C[:, 1:, :] ** 2)
    central = np.zeros((len(orders), X.shape[0], n))
    high = [q for q in orders if q > 2]
    if high:
        rule = basis.quadrature(max(high))
        dev = np.einsum("qi,tin->tqn", basis.evaluate(rule.nodes)[:, 1:], C[:, 1:, :])
    for a, q in enumerate(orders):
        if q == 2:
            central[a] = var
        elif q > 2:
            central[a] = np.einsum("q,tqn->tn", rule.weights, dev**q)
    return mean, var, central


def _pairwise_mean(a: np.ndarray, axis: int) -> np.ndarray:
    # numpy's add.reduce over a contiguous axis uses pairwise summation,
    # so the result does not depend on how samples were chunked
    a = np.moveaxis(a, axis, -1)
    return np.ascontiguousarray(a).sum(axis=-1) / a.shape[-1]


def _sample_mean(x: np.ndarray) -> np.ndarray:
    """Mean over axis 1, shifted by the first sample (exact for constant data)."""
    ref = x[:, :1, :]
    return ref[:, 0, :] + _pairwise_mean(x - ref, axis=1)


def _discrepancy(gpc: np.ndarray, mc: np.ndarray, se: np.ndarray) -> np.ndarray:
    diff = np.abs(gpc - mc)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = diff / se
    degenerate = ~(se > 0)
    # zero spread: equal up to rounding counts as agreement
    tol = 8.0 * np.finfo(float).eps * np.maximum(np.abs(gpc), np.abs(mc))
    out[degenerate] = np.where(diff[degenerate] <= tol[degenerate], 0.0, np.inf)
    return out


@dataclass(frozen=True)
class MomentReport:
    """Per-step comparison of surrogate and Monte-Carlo moments.

    Arrays have shape ``(steps+1, n)``, or ``(orders, steps+1, n)`` for
    central moments. Discrepancies are ``|gPC - MC| / SE``; a zero
    standard error gives 0 when the values agree to rounding and inf
    otherwise.
    """

    M: int
    seed: int
    orders: tuple[int, ...]
    gpc_mean: np.ndarray
    gpc_var: np.ndarray
    mc_mean: np.ndarray
    mc_var: np.ndarray
    se_mean: np.ndarray
    se_var: np.ndarray
    disc_mean: np.ndarray
    disc_var: np.ndarray
    gpc_central: np.ndarray
    mc_central: np.ndarray

    def max_discrepancy(self, upto: int | None = None) -> tuple[float, float]:
        sl = slice(None if upto is None else upto + 1)
        return float(self.disc_mean[sl].max()), float(self.disc_var[sl].max())

    def passed(self, threshold: float = 3.0, upto: int | None = None) -> bool:
        return max(self.max_discrepancy(upto)) <= threshold

    def to_dict(self) -> dict:
        def enc(a):
            return np.where(np.isfinite(a), a, None).tolist() if np.ndim(a) else a

        return {
            "M": self.M,
            "seed": self.seed,
            "orders": list(self.orders),
            "gpc_mean": enc(self.gpc_mean),
            "gpc_var": enc(self.gpc_var),
            "mc_mean": enc(self.mc_mean),
            "mc_var": enc(self.mc_var),
            "se_mean": enc(self.se_mean),
            "se_var": enc(self.se_var),
            "disc_mean": enc(self.disc_mean),
            "disc_var": enc(self.disc_var),
            "gpc_central": enc(self.gpc_central),
            "mc_central": enc(self.mc_central),
        }

    def write_json(self, path, extra: dict | None = None) -> None:
        data = self.to_dict()
        if extra:
            data.update(extra)
        Path(path).write_text(json.dumps(data, indent=2) + "\n")


def compare_moments(
    ensemble: Ensemble,
    X: np.ndarray,
    basis: BasisSet,
    orders: Sequence[int] = (1, 2, 3, 4),
    seed: int = -1,
) -> MomentReport:
    """Compare surrogate moments of ``X`` (``(steps+1, n(p+1))``) with the ensemble."""
    if any(q > 4 for q in orders):
        raise ValueError("moments above order 4 are not validated by Monte Carlo")
    x = ensemble.states
    T, M, n = x.shape
    if X.shape[0] != T:
        raise ValueError(f"chaos trajectory has {X.shape[0]} steps, ensemble {T}")
    gm, gv, gc = chaos_moments(X, basis, n, orders)
    mm = _sample_mean(x)
    dev = x - mm[:, None, :]
    m2 = _pairwise_mean(dev**2, axis=1)
    m4 = _pairwise_mean(dev**4, axis=1)
    mv = m2 * M / max(M - 1, 1)
    se_mean = np.sqrt(mv / M)
    se_var = np.sqrt(np.maximum(m4 - m2**2, 0.0) / M)
    mc_central = np.array([_pairwise_mean(dev**q, axis=1) if q > 1 else np.zeros_like(mm) for q in orders])
    return MomentReport(
        M=M,
        seed=seed,
        orders=tuple(orders),
        gpc_mean=gm,
        gpc_var=gv,
        mc_mean=mm,
        mc_var=mv,
        se_mean=se_mean,
        se_var=se_var,
        disc_mean=_discrepancy(gm, mm, se_mean),
        disc_var=_discrepancy(gv, mv, se_var),
        gpc_central=gc,
        mc_central=mc_central,
    )


def quadrature_moments(
    system: UncertainSystem,
    x0,
    steps: int,
    policy: OpenLoopPolicy | FeedbackPolicy | None = None,
    n_nodes: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Exact mean and variance of the true trajectory (no sampling).

    Each ``x(k, D)`` is a polynomial in ``D`` of degree at most
    ``k * (deg A + deg policy)``; a tensor Gauss rule of sufficient size
    integrates its first two moments exactly. Returns ``(mean, var)`` of
    shape ``(steps+1, n)``.
    """
    if n_nodes is None:
        deg_u = policy.basis.r if isinstance(policy, OpenLoopPolicy) else 0
        degree = 2 * steps * max(system.degree, 1) + 2 * deg_u
        n_nodes = math.ceil((degree + 1) / 2) + 1
    rule = tensor_quadrature([dist.family for dist in system.distributions], n_nodes)
    samples = SampleSet(rule.nodes, -1, tuple(system.distributions))
    ens = simulate_ensemble(system, samples, policy, steps, x0)
    mean = np.einsum("q,tqn->tn", rule.weights, ens.states)
    var = np.einsum("q,tqn->tn", rule.weights, (ens.states - mean[:, None, :]) ** 2)
    return mean, var


def active_set_oracle(P, q, A_in=None, b_in=None, A_eq=None, b_eq=None, tol: float = 1e-9):
    """Brute-force QP solution by enumerating every active set.

    For each subset of inequality rows the equality-constrained KKT system
    is solved; the candidate is kept if it is primal feasible and its
    multipliers are nonnegative. Exponential in the number of inequality
    rows, so meant for small test problems with positive definite ``P``.

    Returns:
        ``(x, objective)`` of the best KKT point, objective excluding
        constants (``1/2 x'Px + q'x``).

    Raises:
        ValueError: if no subset yields a KKT point (infeasible problem).
    """
    P = np.atleast_2d(np.asarray(P, dtype=float))
    q = np.asarray(q, dtype=float).ravel()
    nx = q.size
    A_in = np.zeros((0, nx)) if A_in is None else np.atleast_2d(np.asarray(A_in, dtype=float))
    b_in = np.zeros(0) if b_in is None else np.asarray(b_in, dtype=float).ravel()
    A_eq = np.zeros((0, nx)) if A_eq is None else np.atleast_2d(np.asarray(A_eq, dtype=float))
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float).ravel()
    n_in, n_eq = b_in.size, b_eq.size
    scale = max(1.0, np.abs(b_in).max(initial=0.0), np.abs(b_eq).max(initial=0.0))
    best = None
    for mask in range(1 << n_in):
        act = [j for j in range(n_in) if mask >> j & 1]
        C = np.vstack([A_eq, A_in[act]])
        d = np.concatenate([b_eq, b_in[act]])
        K = np.block([[P, C.T], [C, np.zeros((C.shape[0], C.shape[0]))]])
        sol, *_ = np.linalg.lstsq(K, np.concatenate([-q, d]), rcond=None)
        x, lam = sol[:nx], sol[nx + n_eq :]
        if np.abs(C @ x - d).max(initial=0.0) > tol * scale:
            continue
        if np.any(A_in @ x - b_in > tol * scale) or np.any(lam < -tol * max(1.0, np.abs(lam).max(initial=0.0))):
            continue
        obj = float(0.5 * x @ P @ x + q @ x)
        if best is None or obj < best[1]:
            best = (x, obj)
    if best is None:
        raise ValueError("no KKT point: the problem is infeasible")
    return best


__all__ = [
    "SampleSet",
    "sample_delta",
    "OpenLoopPolicy",
    "FeedbackPolicy",
    "Ensemble",
    "simulate_ensemble",
    "chaos_trajectory",
    "chaos_moments",
    "MomentReport",
    "compare_moments",
    "quadrature_moments",
    "active_set_oracle",
]
