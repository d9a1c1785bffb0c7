"""Dense SVD by one-sided Jacobi rotations.

Column pairs are swept in round-robin order so that each step rotates
n/2 disjoint pairs at once with vectorised numpy arithmetic.
"""
from __future__ import annotations

import numpy as np

from ..errors import InputError

_EPS = np.finfo(np.float64).eps


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """n-1 rounds of n/2 disjoint pairs covering every pair once (n even)."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        top = players[: n // 2]
        bot = players[n // 2:][::-1]
        rounds.append((np.array(top), np.array(bot)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _complete_basis(u: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace the columns of ``u`` not flagged in ``keep`` with an orthonormal completion."""
    m, k = u.shape
    basis = [u[:, j] for j in range(k) if keep[j]]
    out = u.copy()
    e = 0
    for j in range(k):
        if keep[j]:
            continue
        while True:
            v = np.zeros(m)
            v[e % m] = 1.0
            e += 1
            for _ in range(2):
                for b in basis:
                    v -= (b @ v) * b
            nv = np.linalg.norm(v)
            if nv > 1e-8:
                break
        v /= nv
        basis.append(v)
        out[:, j] = v
    return out


def _jacobi_tall(a: np.ndarray, max_sweeps: int = 80):
    m, n = a.shape
    a = a.copy()
    npad = n + (n % 2)
    if npad != n:
        a = np.hstack([a, np.zeros((m, 1))])
    v = np.eye(npad)
    tol = max(1e-15, m * _EPS)
    rounds = _round_robin(npad) if npad > 1 else []
    for _ in range(max_sweeps):
        rotated = False
        for p, q in rounds:
            ap, aq = a[:, p], a[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            scale = np.sqrt(alpha * beta)
            active = (scale > 0) & (np.abs(gamma) > tol * scale)
            if not active.any():
                continue
            rotated = True
            g = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * g)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = np.where(active, 1.0 / np.sqrt(1.0 + t * t), 1.0)
            s = np.where(active, c * t, 0.0)
            a[:, p], a[:, q] = c * ap - s * aq, s * ap + c * aq
            vp, vq = v[:, p], v[:, q]
            v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            break
    a, v = a[:, :n], v[:n, :n]
    s = np.linalg.norm(a, axis=0)
    order = np.argsort(-s, kind="stable")
    s, a, v = s[order], a[:, order], v[:, order]
    keep = s > 1e-300
    u = np.zeros_like(a)
    u[:, keep] = a[:, keep] / s[keep]
    if not keep.all():
        u = _complete_basis(u, keep)
    return u, s, v.T


def svd(m: np.ndarray):
    """Thin SVD ``m = u @ diag(s) @ vt`` with ``s`` descending.

    Returns ``u`` (P x k), ``s`` (k,), ``vt`` (k x Q) where k = min(P, Q).
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise InputError(f"svd needs a matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InputError("svd input has non-finite entries")
    p, q = m.shape
    if p == 0 or q == 0:
        k = min(p, q)
        return np.zeros((p, k)), np.zeros(k), np.zeros((k, q))
    if p >= q:
        return _jacobi_tall(m)
    u, s, vt = _jacobi_tall(m.T)
    return vt.T, s, u.T


def truncated_svd(m: np.ndarray, k: int):
    u, s, vt = svd(m)
    return u[:, :k], s[:k], vt[:k]
