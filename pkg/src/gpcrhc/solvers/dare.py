"""Discrete algebraic Riccati equation by the structured doubling algorithm."""

from __future__ import annotations

import numpy as np
from scipy import linalg


class SynthesisError(RuntimeError):
    """Riccati iteration did not converge."""


def dare_residual(A, B, Q, R, P) -> float:
    """Frobenius norm of ``A'PA - P - A'PB (R + B'PB)^-1 B'PA + Q``."""
    BtPA = B.T @ P @ A
    res = A.T @ P @ A - P - BtPA.T @ np.linalg.solve(R + B.T @ P @ B, BtPA) + Q
    return float(np.linalg.norm(res))


def lqr_gain(A, B, R, P) -> np.ndarray:
    """``K = -(R + B'PB)^-1 B'PA`` so that ``u = K x``."""
    return -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)


def solve_dare(
    A,
    B,
    Q,
    R,
    tol: float = 1e-9,
    max_iter: int = 200,
    history: list | None = None,
) -> np.ndarray:
    """Stabilizing solution ``P`` of the DARE.

    Doubling iterates converge quadratically; a few Newton (Hewer) steps
    then bring the residual down to ``tol * max(1, ||P||_F)``. If
    ``history`` is a list, the residual after each doubling step is
    appended to it.

    Raises:
        SynthesisError: if the iteration does not converge within
            ``max_iter`` steps or the residual stays above tolerance.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    n = A.shape[0]
    if np.linalg.eigvalsh(0.5 * (R + R.T)).min() <= 0:
        raise ValueError("R must be positive definite")
    if np.linalg.eigvalsh(0.5 * (Q + Q.T)).min() < -1e-12 * max(1.0, np.abs(Q).max()):
        raise ValueError("Q must be positive semidefinite")

    Ak = A.copy()
    Gk = B @ np.linalg.solve(R, B.T)
    Gk = 0.5 * (Gk + Gk.T)
    Hk = 0.5 * (Q + Q.T)
    eye = np.eye(n)
    converged = False
    for _ in range(max_iter):
        Wk = eye + Gk @ Hk
        lu = linalg.lu_factor(Wk)
        WinvA = linalg.lu_solve(lu, Ak)
        WinvG = linalg.lu_solve(lu, Gk)
        H_next = Hk + Ak.T @ Hk @ WinvA
        G_next = Gk + Ak @ WinvG @ Ak.T
        Ak = Ak @ WinvA
        H_next = 0.5 * (H_next + H_next.T)
        G_next = 0.5 * (G_next + G_next.T)
        with np.errstate(over="ignore", invalid="ignore"):
            step = np.linalg.norm(H_next - Hk)
            growth = np.linalg.norm(H_next)
        Hk, Gk = H_next, G_next
        if not np.all(np.isfinite(Hk)) or not np.isfinite(growth) or growth > 1e150:
            raise SynthesisError("doubling iteration diverged (system not stabilizable?)")
        if history is not None:
            history.append(dare_residual(A, B, Q, R, Hk))
        if step <= 1e-14 * max(1.0, np.linalg.norm(Hk)):
            converged = True
            break
    if not converged:
        raise SynthesisError(f"doubling did not converge in {max_iter} iterations")

    P = Hk
    if not np.isfinite(np.linalg.norm(P)):
        raise SynthesisError("doubling iteration diverged (system not stabilizable?)")
    for _ in range(3):
        if dare_residual(A, B, Q, R, P) <= 0.1 * tol * max(1.0, np.linalg.norm(P)):
            break
        K = lqr_gain(A, B, R, P)
        Acl = A + B @ K
        P = linalg.solve_discrete_lyapunov(Acl.T, Q + K.T @ R @ K)
        P = 0.5 * (P + P.T)
    res = dare_residual(A, B, Q, R, P)
    if not np.isfinite(res) or res > tol * max(1.0, np.linalg.norm(P)):
        raise ArithmeticError(f"DARE residual {res:.3e} above tolerance")
    return P
