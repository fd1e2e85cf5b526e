"""Orthogonal polynomial bases matched to probability densities.

Polynomials are the classical (non-normalized) Askey families with
``phi_0 == 1``; every inner product is taken against the *probability*
density, so ``<phi_0^2> = 1`` and the mean of an expansion is its
zeroth coefficient.

Supported pairings::

    normal  <-> probabilists' Hermite   He_n
    uniform <-> Legendre                P_n          on [-1, 1]
    gamma   <-> generalized Laguerre    L_n^(alpha)  density x^alpha e^-x / Gamma(alpha+1)
    beta    <-> Jacobi                  P_n^(alpha, beta) on [-1, 1],
                density proportional to (1-x)^alpha (1+x)^beta
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy import linalg, special

__all__ = [
    "Distribution",
    "PolynomialFamily",
    "MultiIndex",
    "QuadratureRule",
    "ProductTensors",
    "BasisSet",
    "DomainError",
    "basis_size",
    "total_degree_indices",
    "eval_poly",
    "recurrence_coefficients",
    "gauss_quadrature",
    "tensor_quadrature",
    "build_tensors",
    "nproduct",
    "analytic_norms",
]

_FAMILY_FOR = {
    "normal": "hermite",
    "uniform": "legendre",
    "gamma": "laguerre",
    "beta": "jacobi",
}
_DISTRIBUTION_FOR = {v: k for k, v in _FAMILY_FOR.items()}

MultiIndex = tuple[int, ...]


class DomainError(ValueError):
    """Evaluation point outside the support of a polynomial family."""


@dataclass(frozen=True)
class Distribution:
    """Marginal distribution of one uncertain parameter.

    ``alpha``/``beta`` are the shape parameters of the paired polynomial
    family: gamma uses ``alpha`` (shape ``alpha + 1``, unit scale), beta
    uses both (density on [-1, 1] proportional to
    ``(1 - x)**alpha * (1 + x)**beta``). Uniform is on [-1, 1] and normal
    is standard.
    """

    kind: str
    alpha: float = 0.0
    beta: float = 0.0

    def __post_init__(self):
        if self.kind not in _FAMILY_FOR:
            raise ValueError(
                f"unsupported distribution {self.kind!r}; "
                f"expected one of {sorted(_FAMILY_FOR)}"
            )
        if self.kind in ("gamma", "beta") and self.alpha <= -1:
            raise ValueError(f"{self.kind} shape alpha must be > -1, got {self.alpha}")
        if self.kind == "beta" and self.beta <= -1:
            raise ValueError(f"beta shape beta must be > -1, got {self.beta}")

    @property
    def family(self) -> PolynomialFamily:
        kind = _FAMILY_FOR[self.kind]
        if kind == "laguerre":
            return PolynomialFamily(kind, alpha=self.alpha)
        if kind == "jacobi":
            return PolynomialFamily(kind, alpha=self.alpha, beta=self.beta)
        return PolynomialFamily(kind)

    @property
    def support(self) -> tuple[float, float]:
        return self.family.support


@dataclass(frozen=True)
class PolynomialFamily:
    """One of the classical Askey families.

    Attributes:
        kind: ``"hermite"`` (probabilists'), ``"legendre"``, ``"laguerre"``
            or ``"jacobi"``.
        alpha: Laguerre/Jacobi shape parameter, > -1.
        beta: Jacobi shape parameter, > -1.
    """

    kind: str
    alpha: float = 0.0
    beta: float = 0.0

    def __post_init__(self):
        if self.kind not in _DISTRIBUTION_FOR:
            raise ValueError(f"unknown polynomial family {self.kind!r}")
        if self.alpha <= -1 or self.beta <= -1:
            raise ValueError("shape parameters must be > -1")
        if self.kind in ("hermite", "legendre") and (self.alpha or self.beta):
            raise ValueError(f"{self.kind} takes no shape parameters")
        if self.kind == "laguerre" and self.beta:
            raise ValueError("laguerre takes only alpha")

    @property
    def distribution(self) -> Distribution:
        return Distribution(_DISTRIBUTION_FOR[self.kind], self.alpha, self.beta)

    @property
    def support(self) -> tuple[float, float]:
        if self.kind == "hermite":
            return (-math.inf, math.inf)
        if self.kind == "laguerre":
            return (0.0, math.inf)
        return (-1.0, 1.0)

    def check_pairing(self, distribution: Distribution) -> None:
        if distribution.family != self:
            raise ValueError(
                f"{self.kind} polynomials do not match a {distribution.kind} "
                f"distribution with parameters ({distribution.alpha}, {distribution.beta})"
            )


def basis_size(d: int, r: int) -> int:
    """Number of multivariate polynomials of total degree <= r in d variables.

    Raises:
        OverflowError: if the result does not fit in a signed 64-bit integer.
    """
    if d < 1 or r < 0:
        raise ValueError(f"need d >= 1 and r >= 0, got d={d}, r={r}")
    size = math.comb(d + r, r)
    if size > np.iinfo(np.int64).max:
        raise OverflowError(f"basis size C({d + r}, {r}) overflows int64")
    return size


def total_degree_indices(d: int, r: int) -> list[MultiIndex]:
    """Multi-indices of total degree <= r in graded lexicographic order.

    Degree ascends; within a degree, tuples are in descending lexicographic
    order so that the first variable's powers come first, e.g. for d=2:
    (0,0), (1,0), (0,1), (2,0), (1,1), (0,2), ...
    """
    out: list[MultiIndex] = []
    for degree in range(r + 1):
        level = [
            idx
            for idx in itertools.product(range(degree, -1, -1), repeat=d)
            if sum(idx) == degree
        ]
        out.extend(level)
    return out


def _check_support(family: PolynomialFamily, x: np.ndarray, strict: bool) -> None:
    if not strict:
        return
    lo, hi = family.support
    tol = 1e-12
    if np.any(x < lo - tol) or np.any(x > hi + tol):
        raise DomainError(f"point outside {family.kind} support [{lo}, {hi}]")


def eval_poly(
    family: PolynomialFamily,
    degree: int,
    point,
    strict: bool = False,
):
    """Evaluate the classical polynomial of ``degree`` by three-term recurrence.

    ``point`` may be a scalar or an array. With ``strict=True`` points
    outside the family's support raise :class:`DomainError`.
    """
    if degree < 0:
        raise ValueError("degree must be nonnegative")
    x = np.asarray(point, dtype=float)
    _check_support(family, x, strict)
    values = eval_all(family, degree, x)[..., degree]
    return float(values) if values.ndim == 0 else values


def eval_all(family: PolynomialFamily, degree: int, x: np.ndarray) -> np.ndarray:
    """Values of degrees 0..degree at ``x``; shape ``x.shape + (degree+1,)``."""
    x = np.asarray(x, dtype=float)
    out = np.empty(x.shape + (degree + 1,))
    out[..., 0] = 1.0
    if degree == 0:
        return out
    a, b = family.alpha, family.beta
    kind = family.kind
    if kind == "hermite":
        out[..., 1] = x
        for n in range(1, degree):
            out[..., n + 1] = x * out[..., n] - n * out[..., n - 1]
    elif kind == "legendre":
        out[..., 1] = x
        for n in range(1, degree):
            out[..., n + 1] = ((2 * n + 1) * x * out[..., n] - n * out[..., n - 1]) / (n + 1)
    elif kind == "laguerre":
        out[..., 1] = 1.0 + a - x
        for n in range(1, degree):
            out[..., n + 1] = (
                (2 * n + 1 + a - x) * out[..., n] - (n + a) * out[..., n - 1]
            ) / (n + 1)
    else:
        out[..., 1] = (a + 1) + (a + b + 2) * (x - 1) / 2
        for n in range(1, degree):
            c = 2 * n + a + b
            lead = 2 * (n + 1) * (n + a + b + 1) * c
            out[..., n + 1] = (
                (c + 1) * ((c + 2) * c * x + a * a - b * b) * out[..., n]
                - 2 * (n + a) * (n + b) * (c + 2) * out[..., n - 1]
            ) / lead
    return out


def recurrence_coefficients(family: PolynomialFamily, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Monic recurrence ``pi_{k+1} = (x - a_k) pi_k - b_k pi_{k-1}``.

    Returns ``a[0:n]`` and ``b[0:n]`` for the probability measure of the
    family; ``b[0] = 1`` is the total mass.
    """
    k = np.arange(n, dtype=float)
    a = np.zeros(n)
    b = np.ones(n)
    if family.kind == "hermite":
        b[1:] = k[1:]
    elif family.kind == "legendre":
        b[1:] = k[1:] ** 2 / (4 * k[1:] ** 2 - 1)
    elif family.kind == "laguerre":
        al = family.alpha
        a = 2 * k + al + 1
        b[1:] = k[1:] * (k[1:] + al)
    else:
        al, be = family.alpha, family.beta
        s = al + be
        for i in range(n):
            c = 2 * i + s
            if i == 0:
                a[i] = (be - al) / (s + 2)
            else:
                a[i] = (be * be - al * al) / (c * (c + 2))
            if i == 1:
                b[i] = 4 * (1 + al) * (1 + be) / ((2 + s) ** 2 * (3 + s))
            elif i > 1:
                b[i] = 4 * i * (i + al) * (i + be) * (i + s) / (c * c * (c + 1) * (c - 1))
    return a, b


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes (shape ``(q, d)``) and probability weights (shape ``(q,)``)."""

    nodes: np.ndarray
    weights: np.ndarray

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Weighted sum over the leading (node) axis."""
        return np.tensordot(self.weights, values, axes=(0, 0))


def gauss_quadrature(family: PolynomialFamily, n_nodes: int) -> QuadratureRule:
    """Gauss rule for the family's probability density (Golub-Welsch).

    Exact for polynomials of degree <= ``2 * n_nodes - 1``.
    """
    if n_nodes < 1:
        raise ValueError("n_nodes must be >= 1")
    a, b = recurrence_coefficients(family, n_nodes)
    off = np.sqrt(b[1:])
    try:
        nodes, vecs = linalg.eigh_tridiagonal(a, off)
    except linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
        raise ArithmeticError(f"Golub-Welsch eigensolver failed: {exc}") from exc
    weights = vecs[0, :] ** 2
    weights /= weights.sum()
    if family.kind in ("hermite", "legendre") or (
        family.kind == "jacobi" and family.alpha == family.beta
    ):
        # symmetric measures: enforce exact symmetry of the rule
        nodes = 0.5 * (nodes - nodes[::-1])
        weights = 0.5 * (weights + weights[::-1])
    return QuadratureRule(nodes.reshape(-1, 1), weights)


def tensor_quadrature(
    families: Sequence[PolynomialFamily], nodes_per_dim: int
) -> QuadratureRule:
    """Tensor product of one-dimensional Gauss rules."""
    rules = [gauss_quadrature(f, nodes_per_dim) for f in families]
    grids = np.meshgrid(*[r.nodes[:, 0] for r in rules], indexing="ij")
    wgrids = np.meshgrid(*[r.weights for r in rules], indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)
    weights = np.prod(np.stack([w.ravel() for w in wgrids], axis=1), axis=1)
    return QuadratureRule(nodes, weights)


def nodes_for_products(q: int, r: int) -> int:
    """Per-dimension node count for a ``q``-fold product of degree-``r`` terms."""
    return math.ceil((q * r + 1) / 2) + 1


@dataclass(frozen=True)
class ProductTensors:
    """Inner-product tensors of a basis.

    Attributes:
        W: diagonal matrix of norms ``<phi_i^2>``.
        E: array of shape ``(P, P, P)``, ``E[i, j, k] = <phi_i phi_j phi_k>``;
            ``E[i]`` is the matrix E_i.
        F: vector ``<phi_i>``.
        G: Gram matrix ``<phi_i phi_j>``; equals ``W`` once rounding-level
            entries are cleared (checked at construction).
    """

    W: np.ndarray
    E: np.ndarray
    F: np.ndarray
    G: np.ndarray

    @property
    def norms(self) -> np.ndarray:
        return np.diag(self.W).copy()


@dataclass(frozen=True)
class BasisSet:
    """Total-degree multivariate basis over independent marginals.

    Args:
        distributions: one marginal per uncertain parameter.
        r: maximum total degree.
        families: optional explicit families; each must match its
            distribution.
    """

    distributions: tuple[Distribution, ...]
    r: int
    families: tuple[PolynomialFamily, ...] = field(default=())

    def __post_init__(self):
        dists = tuple(self.distributions)
        object.__setattr__(self, "distributions", dists)
        if not dists:
            raise ValueError("at least one uncertain parameter is required")
        if self.r < 0:
            raise ValueError("r must be nonnegative")
        if self.families:
            fams = tuple(self.families)
            if len(fams) != len(dists):
                raise ValueError("need one polynomial family per distribution")
            for fam, dist in zip(fams, dists):
                fam.check_pairing(dist)
        else:
            fams = tuple(dist.family for dist in dists)
        object.__setattr__(self, "families", fams)

    @property
    def d(self) -> int:
        return len(self.distributions)

    @cached_property
    def terms(self) -> list[MultiIndex]:
        return total_degree_indices(self.d, self.r)

    @property
    def size(self) -> int:
        return basis_size(self.d, self.r)

    def evaluate(self, points) -> np.ndarray:
        """Basis values at ``points`` (shape ``(q, d)`` or ``(q,)`` for d=1).

        Returns an array of shape ``(q, p+1)``.
        """
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1 and self.d == 1:
            pts = pts[:, None]
        pts = np.atleast_2d(pts)
        uni = [eval_all(f, self.r, pts[:, j]) for j, f in enumerate(self.families)]
        out = np.ones((pts.shape[0], self.size))
        for col, idx in enumerate(self.terms):
            for j, deg in enumerate(idx):
                if deg:
                    out[:, col] *= uni[j][:, deg]
        return out

    def quadrature(self, q: int) -> QuadratureRule:
        """Rule exact for ``q``-fold products of basis polynomials."""
        return tensor_quadrature(self.families, nodes_for_products(q, self.r))

    @cached_property
    def tensors(self) -> ProductTensors:
        return build_tensors(self)


def build_tensors(basis: BasisSet) -> ProductTensors:
    """Compute W, E_i and F for ``basis`` by exact tensor quadrature.

    Products are normalized by the rule's computed total mass. Entries
    that vanish analytically come out of quadrature at rounding level; anything below ``1e-13`` relative to the product of norms is
    set to exactly zero, and each triple product is computed once and
    copied to all index permutations.
    """
    rule = basis.quadrature(3)
    V = basis.evaluate(rule.nodes)
    Vw = V * rule.weights[:, None]
    G = Vw.T @ V
    G = 0.5 * (G + G.T)
    h = np.diag(G).copy()
    scale = np.sqrt(np.outer(h, h))
    off = np.abs(G - np.diag(h)) / np.maximum(scale, 1.0)
    if off.max() > 1e-12:
        raise ArithmeticError(f"basis is not orthogonal to quadrature accuracy ({off.max():.2e})")

    P = basis.size
    raw = np.einsum("qi,qj,qk->ijk", Vw, V, V)
    # divide out the rule's total mass so that <phi_0> = 1 holds exactly
    raw /= raw[0, 0, 0]
    E = np.zeros((P, P, P))
    sq = np.sqrt(h)
    for i, j, k in itertools.combinations_with_replacement(range(P), 3):
        value = raw[i, j, k]
        if abs(value) <= 1e-13 * max(sq[i] * sq[j] * sq[k], 1.0):
            value = 0.0
        for a, b, c in set(itertools.permutations((i, j, k))):
            E[a, b, c] = value
    W = np.diag(np.diag(E[0]))
    F = E[0, 0].copy()
    return ProductTensors(W=W, E=E, F=F, G=E[0].copy())


def nproduct(basis: BasisSet, indices: Sequence[int]) -> float:
    """``<phi_{i1} ... phi_{iq}>`` under the joint density."""
    q = len(indices)
    if q < 1:
        raise ValueError("need at least one index")
    if any(i < 0 or i >= basis.size for i in indices):
        raise IndexError(f"basis index out of range 0..{basis.size - 1}")
    rule = basis.quadrature(q)
    V = basis.evaluate(rule.nodes)
    vals = np.prod(V[:, list(indices)], axis=1)
    return float(rule.weights @ vals)


def analytic_norms(family: PolynomialFamily, r: int) -> np.ndarray:
    """Closed-form ``<phi_n^2>`` for n = 0..r (reference values)."""
    n = np.arange(r + 1)
    if family.kind == "hermite":
        return special.factorial(n).astype(float)
    if family.kind == "legendre":
        return 1.0 / (2 * n + 1)
    if family.kind == "laguerre":
        a = family.alpha
        return np.array([math.gamma(k + a + 1) / (math.gamma(a + 1) * math.factorial(k)) for k in n])
    a, b = family.alpha, family.beta
    out = []
    for k in n:
        if k == 0:
            out.append(1.0)
            continue
        num = special.gamma(k + a + 1) * special.gamma(k + b + 1)
        den = (2 * k + a + b + 1) * special.gamma(k + a + b + 1) * math.factorial(k)
        mass = special.gamma(a + 1) * special.gamma(b + 1) / special.gamma(a + b + 2)
        # unnormalized norm carries 2^(a+b+1); the density's mass carries the same factor
        out.append(num / den / mass)
    return np.asarray(out, dtype=float)
