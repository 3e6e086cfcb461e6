"""Small dense linear algebra: weight folding, one-sided Jacobi SVD, centering."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_SWEEPS = 60
OFF_TOL = 1e-14


class SVDConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class SvdFactors:
    U: np.ndarray   # (m, R)
    S: np.ndarray   # (R,), nonincreasing
    Vt: np.ndarray  # (R, n)

    @property
    def rank(self) -> int:
        return self.S.shape[0]


def fold_weight(alpha: np.ndarray) -> np.ndarray:
    """(Co, Ci, K, K) conv weight -> (Co, Ci*K*K) matrix, row-major per output channel."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim != 4:
        raise ValueError(f"expected a 4-d weight, got shape {alpha.shape}")
    return alpha.reshape(alpha.shape[0], -1).copy()


def unfold_weight(matrix: np.ndarray, shape: tuple[int, int, int, int]) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape != (shape[0], shape[1] * shape[2] * shape[3]):
        raise ValueError(f"matrix {matrix.shape} does not fold back to {shape}")
    return matrix.reshape(shape).copy()


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    # circle-method tournament: n-1 rounds of n/2 disjoint pairs (n even)
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        p = np.array(players[:half])
        q = np.array(players[half:][::-1])
        rounds.append((np.minimum(p, q), np.maximum(p, q)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _jacobi_columns(a: np.ndarray, v0: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Orthogonalise the columns of a (m >= n) by plane rotations; returns (A V, V).

    ``v0`` is an optional orthogonal starting rotation (n x n); the sweeps then
    only have to remove whatever non-orthogonality is left in ``a @ v0``.
    """
    m, n = a.shape
    pad = n % 2
    if pad:
        a = np.hstack([a, np.zeros((m, 1))])
    nn = a.shape[1]
    v = np.eye(nn)
    if v0 is not None:
        v[:n, :n] = v0
        a = a @ v
    rounds = _round_robin(nn) if nn > 1 else []
    total = float(np.sum(a * a))
    if total == 0.0 or nn == 1:
        return a[:, :n], v[:n, :n]
    for _ in range(MAX_SWEEPS):
        gram = a.T @ a
        off = np.sqrt(np.sum(np.triu(gram, 1) ** 2)) / np.trace(gram)
        if off < OFF_TOL:
            return a[:, :n], v[:n, :n]
        for p, q in rounds:
            ap, aq = a[:, p], a[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            active = np.abs(gamma) > 1e-300
            safe_g = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * safe_g)
            t = np.sign(zeta) / (np.abs(zeta) + np.hypot(1.0, zeta))
            t = np.where(zeta == 0, 1.0, t)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c = np.where(active, c, 1.0)
            s = np.where(active, s, 0.0)
            a[:, p], a[:, q] = c * ap - s * aq, s * ap + c * aq
            vp, vq = v[:, p], v[:, q]
            v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
    raise SVDConvergenceError(f"Jacobi SVD did not converge in {MAX_SWEEPS} sweeps")


def _complete_basis(u: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Replace columns of u flagged bad with an orthonormal completion."""
    m, r = u.shape
    basis = [u[:, i] for i in range(r) if good[i]]
    out = u.copy()
    eye = np.eye(m)
    cand = 0
    for i in range(r):
        if good[i]:
            continue
        while True:
            vec = eye[:, cand].copy()
            cand += 1
            for b in basis:
                vec -= (b @ vec) * b
            for b in basis:  # second pass for stability
                vec -= (b @ vec) * b
            nrm = np.linalg.norm(vec)
            if nrm > 1e-8:
                vec /= nrm
                break
        basis.append(vec)
        out[:, i] = vec
    return out


def svd(m: np.ndarray, warm: SvdFactors | None = None) -> SvdFactors:
    """Thin SVD ``m = U diag(S) Vt`` by one-sided Jacobi, sorted and sign-canonical.

    Each pair (u_i, v_i) is flipped so that the largest-magnitude entry of u_i is
    positive.  ``warm`` (factors of a nearby matrix of the same shape) only seeds
    the rotation; the result is converged to the same tolerance either way.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("svd expects a matrix")
    if not np.all(np.isfinite(m)):
        raise ValueError("svd input has non-finite entries")
    rows, cols = m.shape
    transposed = rows < cols
    a = m.T.copy() if transposed else m.copy()
    v0 = None
    if warm is not None and not transposed and warm.Vt.shape == (cols, cols):
        v0 = warm.Vt.T
        if not np.allclose(v0.T @ v0, np.eye(cols), atol=1e-10):
            v0 = None
    av, v = _jacobi_columns(a, v0)
    s = np.linalg.norm(av, axis=0)
    order = np.argsort(-s, kind="stable")
    s, av, v = s[order], av[:, order], v[:, order]
    smax = s[0] if s.size else 0.0
    good = s > max(smax * 1e-13, 1e-300)
    u = np.where(good, av / np.where(good, s, 1.0), 0.0)
    if not np.all(good):
        u = _complete_basis(u, good)
        s = np.where(good, s, 0.0)
    if transposed:
        u, v = v, u
    # sign convention on the left factor
    pivot = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[pivot, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    u = u * signs
    v = v * signs
    return SvdFactors(U=u, S=s, Vt=v.T.copy())


def reconstruct(U: np.ndarray, S: np.ndarray, Vt: np.ndarray) -> np.ndarray:
    """``U diag(S) Vt``."""
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 1 or S.shape[0] != U.shape[1] or S.shape[0] != Vt.shape[0]:
        raise ValueError(f"factor shapes disagree: U {U.shape}, S {S.shape}, Vt {Vt.shape}")
    return (U * S) @ Vt


def singular_value_grad(factors: SvdFactors, grad_matrix: np.ndarray) -> np.ndarray:
    """dL/dS = diag(U^T G V) for a loss gradient G w.r.t. the folded matrix."""
    return np.einsum("ir,ij,rj->r", factors.U, grad_matrix, factors.Vt)


def centering_matrix(n: int) -> np.ndarray:
    if n < 2:
        raise ValueError("centering matrix needs n >= 2")
    return np.eye(n) - np.full((n, n), 1.0 / n)


def spectral_norm(m: np.ndarray, iters: int = 1000, tol: float = 1e-14, seed: int = 0) -> float:
    """Largest singular value by power iteration on m^T m."""
    m = np.asarray(m, dtype=np.float64)
    x = np.random.default_rng(seed).standard_normal(m.shape[1])
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(iters):
        y = m.T @ (m @ x)
        ny = np.linalg.norm(y)
        if ny == 0:
            return 0.0
        x = y / ny
        new = np.sqrt(ny)
        if abs(new - est) <= tol * new:
            return float(new)
        est = new
    return float(est)
