"""Symmetric eigendecomposition by cyclic Jacobi rotations."""

from __future__ import annotations

import numpy as np

from ldelab.errors import ContractError, ShapeError


def _round_robin(m: int):
    """Yield ``m - 1`` rounds of disjoint index pairs covering every pair once."""
    players = list(range(m))
    for _ in range(m - 1):
        half = m // 2
        yield [(players[i], players[m - 1 - i]) for i in range(half)]
        players = [players[0], players[-1]] + players[1:-1]


def sym_eig(a, tol: float = 1e-12, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (descending) and orthonormal eigenvectors (columns) of symmetric ``a``.

    Each sweep applies n-1 rounds of n/2 disjoint rotations (Brent-Luk
    ordering), vectorised across the pairs of a round.  Iteration stops when
    the off-diagonal Frobenius norm drops to ``tol * ||a||_F`` or after
    ``max_sweeps`` sweeps.
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"sym_eig: expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ContractError("sym_eig: matrix has non-finite entries")
    if np.max(np.abs(a - a.T), initial=0.0) > 1e-10:
        raise ContractError("sym_eig: matrix is not symmetric within 1e-10")
    a = 0.5 * (a + a.T)
    n = a.shape[0]
    v = np.eye(n)
    norm = np.linalg.norm(a)
    if n > 1 and norm > 0:
        m = n + (n % 2)
        rounds = []
        for pairs in _round_robin(m):
            pairs = [(min(p, q), max(p, q)) for p, q in pairs if p < n and q < n]
            rounds.append((np.array([p for p, _ in pairs]), np.array([q for _, q in pairs])))
        offdiag = ~np.eye(n, dtype=bool)
        for _ in range(max_sweeps):
            off = np.linalg.norm(a[offdiag])
            if off <= tol * norm:
                break
            for p, q in rounds:
                apq = a[p, q]
                if not np.any(apq):
                    continue
                app = a[p, p]
                aqq = a[q, q]
                with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                    tau = (aqq - app) / (2.0 * apq)
                    t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau) + np.hypot(1.0, tau))
                t = np.where(apq == 0, 0.0, t)
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                cp, cq = a[:, p], a[:, q]
                a[:, p] = c * cp - s * cq
                a[:, q] = s * cp + c * cq
                rp, rq = a[p, :], a[q, :]
                a[p, :] = c[:, None] * rp - s[:, None] * rq
                a[q, :] = s[:, None] * rp + c[:, None] * rq
                vp, vq = v[:, p], v[:, q]
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    vals = np.diag(a).copy()
    order = np.argsort(-vals, kind="stable")
    return vals[order], v[:, order]
