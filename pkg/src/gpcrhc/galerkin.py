"""Galerkin projection of uncertain linear systems onto a gPC basis.

A system ``x+ = A(D) x + B(D) u`` whose matrices are polynomials in the
uncertain vector ``D`` becomes the deterministic lifted system
``X+ = Abold X + Bbold U`` acting on stacked chaos coefficients
``X = [x_0; x_1; ...; x_p]``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .basis import BasisSet, Distribution, MultiIndex, ProductTensors, tensor_quadrature

log = logging.getLogger(__name__)

#: default cap on the number of coefficient products in :func:`moment`
MOMENT_TERM_CAP = 10**7


class MomentLimitError(ArithmeticError):
    """Requested moment exceeds the configured term-count cap."""


def _as_terms(terms, d: int, shape: tuple[int, int], name: str):
    out = []
    for exps, mat in terms:
        exps = tuple(int(e) for e in exps)
        mat = np.atleast_2d(np.asarray(mat, dtype=float))
        if len(exps) != d or any(e < 0 for e in exps):
            raise ValueError(f"{name}: monomial exponent {exps} does not match d={d}")
        if mat.shape != shape:
            raise ValueError(f"{name}: matrix shape {mat.shape}, expected {shape}")
        out.append((exps, mat))
    return tuple(out)


@dataclass(frozen=True)
class UncertainSystem:
    """Linear system with polynomial dependence on independent random parameters.

    ``A(D) = sum_a A_a D^a`` with ``D^a = prod_j D_j^{a_j}``; same for B.

    Attributes:
        A_terms: sequence of ``(exponents, n x n matrix)``.
        B_terms: sequence of ``(exponents, n x m matrix)``.
        distributions: one marginal per uncertain parameter.
    """

    A_terms: tuple
    B_terms: tuple
    distributions: tuple[Distribution, ...]

    def __post_init__(self):
        dists = tuple(self.distributions)
        object.__setattr__(self, "distributions", dists)
        if not self.A_terms or not self.B_terms:
            raise ValueError("A and B need at least one monomial term each")
        A0 = np.atleast_2d(np.asarray(self.A_terms[0][1], dtype=float))
        B0 = np.atleast_2d(np.asarray(self.B_terms[0][1], dtype=float))
        n, m = A0.shape[0], B0.shape[1]
        if A0.shape != (n, n):
            raise ValueError(f"A must be square, got {A0.shape}")
        d = len(dists)
        object.__setattr__(self, "A_terms", _as_terms(self.A_terms, d, (n, n), "A"))
        object.__setattr__(self, "B_terms", _as_terms(self.B_terms, d, (n, m), "B"))

    @classmethod
    def deterministic(cls, A, B, distributions=(Distribution("uniform"),)):
        d = len(distributions)
        return cls((((0,) * d, A),), (((0,) * d, B),), distributions)

    @property
    def n(self) -> int:
        return self.A_terms[0][1].shape[0]

    @property
    def m(self) -> int:
        return self.B_terms[0][1].shape[1]

    @property
    def d(self) -> int:
        return len(self.distributions)

    @property
    def degree(self) -> int:
        return max(sum(e) for e, _ in self.A_terms + self.B_terms)

    def A(self, delta) -> np.ndarray:
        """``A`` at samples ``delta`` of shape ``(M, d)``; returns ``(M, n, n)``."""
        return _evaluate_terms(self.A_terms, delta, self.d)

    def B(self, delta) -> np.ndarray:
        return _evaluate_terms(self.B_terms, delta, self.d)


def _monomials(exps_list, delta: np.ndarray) -> np.ndarray:
    return np.stack([np.prod(delta ** np.asarray(e), axis=1) for e in exps_list], axis=1)


def _evaluate_terms(terms, delta, d) -> np.ndarray:
    delta = np.asarray(delta, dtype=float).reshape(-1, d)
    mono = _monomials([e for e, _ in terms], delta)
    mats = np.stack([m for _, m in terms])
    return np.einsum("qt,tij->qij", mono, mats)


@dataclass(frozen=True)
class ChaosState:
    """Stacked chaos coefficients ``[x_0; ...; x_p]`` of an n-vector."""

    coefficients: np.ndarray
    n: int

    def __post_init__(self):
        c = np.asarray(self.coefficients, dtype=float).ravel()
        if c.size % self.n:
            raise ValueError(f"{c.size} coefficients do not split into blocks of {self.n}")
        object.__setattr__(self, "coefficients", c)

    def __array__(self, dtype=None, copy=None):
        return self.coefficients if dtype is None else self.coefficients.astype(dtype)

    @classmethod
    def deterministic(cls, x0, size: int) -> ChaosState:
        """State with mean ``x0`` and no uncertainty, for a basis of ``size`` terms."""
        x0 = np.asarray(x0, dtype=float).ravel()
        c = np.zeros(x0.size * size)
        c[: x0.size] = x0
        return cls(c, x0.size)

    @property
    def blocks(self) -> np.ndarray:
        return self.coefficients.reshape(-1, self.n)

    @property
    def mean(self) -> np.ndarray:
        return self.blocks[0].copy()


class ChaosControl(ChaosState):
    """Stacked chaos coefficients ``[u_0; ...; u_p]`` of an m-vector."""


@dataclass(frozen=True)
class ChaosSystem:
    """Lifted deterministic system ``X+ = Abold X + Bbold U``."""

    basis: BasisSet
    Abold: np.ndarray
    Bbold: np.ndarray
    n: int
    m: int

    @property
    def size(self) -> int:
        return self.basis.size

    @property
    def tensors(self) -> ProductTensors:
        return self.basis.tensors


def project_matrix(terms: Sequence[tuple[MultiIndex, np.ndarray]], basis: BasisSet) -> np.ndarray:
    """gPC coefficients ``M_i = <M(D) phi_i> / <phi_i^2>`` of a polynomial matrix.

    Returns an array of shape ``(p+1, rows, cols)``. Components of degree
    above the basis order are dropped, as orthogonal projection does.
    """
    deg = max(sum(e) for e, _ in terms)
    nodes = math.ceil((deg + basis.r + 1) / 2) + 1
    rule = tensor_quadrature(basis.families, nodes)
    V = basis.evaluate(rule.nodes)
    exps = np.array([e for e, _ in terms])
    mats = np.array([M for _, M in terms])
    mono = _monomials(exps, rule.nodes)
    # normalize by the rule's computed mass, as the tensors are
    c = np.einsum("q,qi,qt->it", rule.weights, V, mono) / rule.weights.sum() / basis.tensors.norms[:, None]
    # <D^a phi_i> vanishes exactly when i_j > a_j in some direction
    idx = np.array(basis.terms)
    c[np.any(idx[:, None, :] > exps[None, :, :], axis=2)] = 0.0
    c[np.abs(c) <= 1e-14] = 0.0
    coeffs = np.einsum("it,tab->iab", c, mats)
    if deg > basis.r and log.isEnabledFor(logging.DEBUG):
        vals = _evaluate_terms(terms, rule.nodes, basis.d)
        energy = np.einsum("q,qab->", rule.weights, vals**2)
        kept = np.einsum("i,iab->", basis.tensors.norms, coeffs**2)
        log.debug("projection drops %.3e of the matrix energy", (energy - kept) / max(energy, 1e-300))
    return coeffs


def assemble(A_coeffs: np.ndarray, B_coeffs: np.ndarray, basis: BasisSet) -> ChaosSystem:
    """Build Abold and Bbold from projected coefficient matrices.

    Block ``(i, k)`` of Abold is ``sum_j A_j <phi_i phi_j phi_k> / <phi_i^2>``,
    i.e. ``(W (x) I)^-1 [H_A (E_i (x) I)]_i``; Bbold likewise with m columns
    per block, so it is ``n(p+1) x m(p+1)``.
    """
    T = basis.tensors
    A_coeffs = np.asarray(A_coeffs, dtype=float)
    B_coeffs = np.asarray(B_coeffs, dtype=float)
    P = basis.size
    if A_coeffs.shape[0] != P or B_coeffs.shape[0] != P:
        raise ValueError(f"need {P} coefficient matrices")
    n, m = A_coeffs.shape[1], B_coeffs.shape[2]
    scale = T.E / T.norms[:, None, None]
    Abold = np.einsum("ijk,jab->iakb", scale, A_coeffs).reshape(P * n, P * n)
    Bbold = np.einsum("ijk,jab->iakb", scale, B_coeffs).reshape(P * n, P * m)
    return ChaosSystem(basis, Abold, Bbold, n, m)


def lift_system(system: UncertainSystem, basis: BasisSet) -> ChaosSystem:
    """Project ``system`` onto ``basis`` and assemble the lifted matrices."""
    if basis.distributions != system.distributions:
        raise ValueError("basis and system use different distributions")
    if system.degree > basis.r:
        log.warning(
            "system matrices have degree %d > basis order %d; projection truncates",
            system.degree,
            basis.r,
        )
    return assemble(project_matrix(system.A_terms, basis), project_matrix(system.B_terms, basis), basis)


def propagate(sys: ChaosSystem, X, U) -> ChaosState:
    """One step of the lifted dynamics."""
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float)
    return ChaosState(sys.Abold @ X + sys.Bbold @ U, sys.n)


def deviation_selector(size: int) -> np.ndarray:
    """``M = diag(0, 1, ..., 1)``: keeps the non-mean chaos modes."""
    M = np.eye(size)
    M[0, 0] = 0.0
    return M


def structured_control(ubar, K, X, size: int) -> np.ndarray:
    """Chaos coefficients of ``u = ubar + K (x - E[x])``.

    Equals ``e_1 (x) ubar + (M (x) K) X``.
    """
    ubar = np.atleast_1d(np.asarray(ubar, dtype=float))
    K = np.atleast_2d(np.asarray(K, dtype=float))
    blocks = np.asarray(X, dtype=float).reshape(size, -1)
    U = blocks @ K.T
    U[0] = ubar
    return U.ravel()


def closed_loop_matrix(sys: ChaosSystem, K) -> np.ndarray:
    """``Abold + Bbold (M (x) K)`` for the structured law ``ubar + K (x - E[x])``."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    if K.shape != (sys.m, sys.n):
        raise ValueError(f"gain must be {sys.m}x{sys.n}, got {K.shape}")
    return sys.Abold + sys.Bbold @ np.kron(deviation_selector(sys.size), K)


def mean(X) -> np.ndarray:
    if isinstance(X, ChaosState):
        return X.mean
    raise TypeError("mean() needs a ChaosState (block size is otherwise unknown)")


def covariance(X, tensors: ProductTensors, n: int | None = None) -> np.ndarray:
    """``M_X G M_X^T - E[x] E[x]^T`` with ``G = <Phi Phi^T>``."""
    if n is None:
        n = X.n
    blocks = np.asarray(X, dtype=float).reshape(-1, n)
    MX = blocks.T
    Ex = MX @ tensors.F
    cov = MX @ tensors.G @ MX.T - np.outer(Ex, Ex)
    return 0.5 * (cov + cov.T)


def moment(
    X,
    q: int,
    component: int,
    basis: BasisSet,
    n: int | None = None,
    term_cap: int = MOMENT_TERM_CAP,
) -> float:
    """``q``-th raw moment of one state component.

    Evaluates ``sum x_{i1}...x_{iq} <phi_{i1}...phi_{iq}>`` as the integral of
    ``(sum_i x_i phi_i)^q`` under a rule exact for that degree.
    """
    if q < 1:
        raise ValueError("q must be >= 1")
    if n is None:
        n = X.n
    terms = basis.size**q
    if terms > term_cap:
        raise MomentLimitError(f"moment of order {q} needs {terms} terms (cap {term_cap})")
    coeffs = np.asarray(X, dtype=float).reshape(-1, n)[:, component]
    if q == 1:
        return float(coeffs @ basis.tensors.F)
    rule = basis.quadrature(q)
    vals = basis.evaluate(rule.nodes) @ coeffs
    return float(rule.weights @ vals**q)


def moments(X, orders: Sequence[int], basis: BasisSet, n: int) -> np.ndarray:
    """Raw moments, shape ``(len(orders), n)``."""
    coeffs = np.asarray(X, dtype=float).reshape(-1, n)
    out = np.empty((len(orders), n))
    for a, q in enumerate(orders):
        rule = basis.quadrature(q)
        vals = basis.evaluate(rule.nodes) @ coeffs
        out[a] = rule.weights @ vals**q
    return out


def evaluate_expansion(X, basis: BasisSet, delta, n: int) -> np.ndarray:
    """Values ``sum_i x_i phi_i(D)`` at samples ``delta``; shape ``(M, n)``."""
    coeffs = np.asarray(X, dtype=float).reshape(-1, n)
    return basis.evaluate(delta) @ coeffs


def project_function(fun, basis: BasisSet, n: int, degree: int) -> np.ndarray:
    """Chaos coefficients of a vector function of ``D`` (degree bound ``degree``).

    ``fun`` maps samples ``(Q, d)`` to values ``(Q, n)``.
    """
    nodes = math.ceil((degree + basis.r + 1) / 2) + 1
    rule = tensor_quadrature(basis.families, nodes)
    V = basis.evaluate(rule.nodes)
    vals = np.asarray(fun(rule.nodes), dtype=float).reshape(-1, n)
    coeffs = (V * rule.weights[:, None]).T @ vals / basis.tensors.norms[:, None]
    return coeffs.ravel()
