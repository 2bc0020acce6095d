"""Small dense convex QP with box and consecutive-difference bounds.

    minimise   0.5 u'Hu + g'u
    subject to lo <= u <= hi,  dlo <= u[j] - u[j-1] <= dhi  (j >= 1)

A short ADMM run on the stacked constraint z = Cu (C = [I; diff]) supplies a
starting point for a primal active-set method, which terminates at the exact
optimum with exact multipliers. Full ADMM is the fallback.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.linalg import LinAlgError


@dataclass
class QpProblem:
    H: np.ndarray
    g: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    dlo: np.ndarray | None = None  # len n-1
    dhi: np.ndarray | None = None

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=float)
        self.g = np.asarray(self.g, dtype=float)
        n = len(self.g)
        if self.H.shape != (n, n):
            raise ValueError("H must be n x n")
        if np.max(np.abs(self.H - self.H.T), initial=0.0) > 1e-12 * max(1.0, np.max(np.abs(self.H))):
            raise ValueError("H must be symmetric")
        self.lo = np.broadcast_to(np.asarray(self.lo, dtype=float), (n,)).copy()
        self.hi = np.broadcast_to(np.asarray(self.hi, dtype=float), (n,)).copy()
        if self.dlo is None:
            self.dlo = np.full(max(n - 1, 0), -np.inf)
        if self.dhi is None:
            self.dhi = np.full(max(n - 1, 0), np.inf)
        self.dlo = np.broadcast_to(np.asarray(self.dlo, dtype=float), (max(n - 1, 0),)).copy()
        self.dhi = np.broadcast_to(np.asarray(self.dhi, dtype=float), (max(n - 1, 0),)).copy()
        if np.any(self.lo > self.hi) or np.any(self.dlo > self.dhi):
            raise ValueError("inconsistent bounds (lo > hi)")

    @property
    def n(self) -> int:
        return len(self.g)

    def constraint_matrix(self) -> np.ndarray:
        n = self.n
        diff = np.zeros((max(n - 1, 0), n))
        idx = np.arange(n - 1)
        diff[idx, idx + 1] = 1.0
        diff[idx, idx] = -1.0
        return np.vstack([np.eye(n), diff])

    def bounds(self):
        return np.concatenate([self.lo, self.dlo]), np.concatenate([self.hi, self.dhi])

    def objective(self, u) -> float:
        return float(0.5 * u @ self.H @ u + self.g @ u)


@dataclass
class QpResult:
    x: np.ndarray
    y: np.ndarray  # multipliers of C x (positive at upper bounds, negative at lower)
    converged: bool
    iterations: int
    kkt: float
    polished: bool  # finished by the active-set stage


def kkt_residual(qp: QpProblem, x, y) -> float:
    """Max of stationarity, primal violation, dual-sign and complementarity residuals."""
    C = qp.constraint_matrix()
    l, u = qp.bounds()
    cx = C @ x
    stat = np.max(np.abs(qp.H @ x + qp.g + C.T @ y), initial=0.0)
    prim = np.max(np.maximum(np.maximum(l - cx, cx - u), 0.0), initial=0.0)
    # y > 0 only at an upper bound, y < 0 only at a lower bound
    up_slack = np.where(np.isfinite(u), u - cx, np.inf)
    lo_slack = np.where(np.isfinite(l), cx - l, np.inf)
    comp = np.max(np.concatenate([
        np.maximum(y, 0.0) * np.minimum(up_slack, 1e12),
        np.maximum(-y, 0.0) * np.minimum(lo_slack, 1e12),
    ]), initial=0.0)
    # stationarity and complementarity carry objective units; normalise both by |g|
    scale = 1.0 + np.max(np.abs(qp.g), initial=0.0)
    return float(max(stat / scale, prim, comp / scale))


class _Forest:
    """Union-find over the variables plus a ground node.

    A box row ties variable i to ground and a difference row ties j-1 to j, so
    a set of rows is linearly dependent exactly when it closes a cycle.
    """

    def __init__(self, n):
        self.parent = list(range(n + 1))

    def find(self, a):
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a, b) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.parent[ra] = rb
        return True


def _row_ends(i, n):
    return (n, i) if i < n else (i - n, i - n + 1)


def _independent(rows, n):
    forest = _Forest(n)
    return [i for i in rows if forest.union(*_row_ends(i, n))]


def _feasible_start(qp: QpProblem, x) -> np.ndarray | None:
    """Sequential clip into the box and difference bounds; None if that fails."""
    out = np.clip(np.asarray(x, dtype=float).copy(), qp.lo, qp.hi)
    for j in range(1, qp.n):
        out[j] = min(max(out[j], out[j - 1] + qp.dlo[j - 1]), out[j - 1] + qp.dhi[j - 1])
        out[j] = min(max(out[j], qp.lo[j]), qp.hi[j])
    C = qp.constraint_matrix()
    l, u = qp.bounds()
    cx = C @ out
    if np.any(cx < l - 1e-12) or np.any(cx > u + 1e-12):
        return None
    return out


def _active_set(qp: QpProblem, x0, max_iter: int):
    """Primal active-set method from a feasible point; returns (x, y, iterations); x is None on failure."""
    n = qp.n
    C = qp.constraint_matrix()
    l, u = qp.bounds()
    x = _feasible_start(qp, x0)
    if x is None:
        return None, None, 0
    cx = C @ x
    near_lo = np.isfinite(l) & (cx - l <= 1e-12)
    near_hi = np.isfinite(u) & (u - cx <= 1e-12)
    side = {}
    for i in _independent(np.flatnonzero(near_lo | near_hi), n):
        side[i] = 1 if near_hi[i] else -1
    scale = 1.0 + np.max(np.abs(qp.g), initial=0.0)
    for it in range(1, max_iter + 1):
        W = list(side)
        A = C[W]
        K = np.block([[qp.H, A.T], [A, np.zeros((len(W), len(W)))]])
        rhs = np.concatenate([-(qp.H @ x + qp.g), np.zeros(len(W))])
        try:
            sol = np.linalg.solve(K, rhs)
        except LinAlgError:
            return None, None, it
        if not np.all(np.isfinite(sol)):
            return None, None, it
        p, lam = sol[:n], sol[n:]
        if np.max(np.abs(p), initial=0.0) > 1e-11 * (1.0 + np.max(np.abs(x), initial=0.0)):
            forest = _Forest(n)
            for i in W:
                forest.union(*_row_ends(i, n))
            cp = C @ p
            cx = C @ x
            alpha, block = 1.0, None
            for i in np.flatnonzero(cp != 0.0):
                if i in side:
                    continue
                if cp[i] > 0 and np.isfinite(u[i]):
                    t, b = max(u[i] - cx[i], 0.0) / cp[i], 1
                elif cp[i] < 0 and np.isfinite(l[i]):
                    t, b = max(cx[i] - l[i], 0.0) / -cp[i], -1
                else:
                    continue
                # rows dependent on the working set only move through roundoff
                if t < alpha and forest.find(_row_ends(i, n)[0]) != forest.find(_row_ends(i, n)[1]):
                    alpha, block = t, (i, b)
            x = x + alpha * p
            if block is not None:
                side[block[0]] = block[1]
                continue
        # x minimises over the working set; check multiplier signs
        # (>= 0 at upper bounds, <= 0 at lower bounds)
        wrong = np.array([-lam[k] if side[i] > 0 else lam[k] for k, i in enumerate(W)])
        if len(W) == 0 or np.max(wrong) <= 1e-12 * scale:
            return _pin(qp, C, l, u, W, side, x, lam) + (it,)
        del side[W[int(np.argmax(wrong))]]
    return None, None, max_iter


def _pin(qp, C, l, u, W, side, x, lam):
    """Re-solve with the working rows placed exactly on their bounds (removes step drift)."""
    y = np.zeros(len(l))
    y[W] = lam
    if not W:
        return x, y
    A = C[W]
    b = np.array([u[i] if side[i] > 0 else l[i] for i in W])
    K = np.block([[qp.H, A.T], [A, np.zeros((len(W), len(W)))]])
    try:
        sol = np.linalg.solve(K, np.concatenate([-qp.g, b]))
    except LinAlgError:
        return x, y
    xs = sol[:qp.n]
    cx = C @ xs
    if not np.all(np.isfinite(sol)) or np.any(cx < l - 1e-9) or np.any(cx > u + 1e-9):
        return x, y
    ys = np.zeros(len(l))
    ys[W] = sol[qp.n:]
    return xs, ys


def _admm(qp, C, l, u, x, z, y, rho, sigma, alpha, max_iter, tol):
    """Over-relaxed ADMM; returns (x, z, y, iterations, done)."""
    n = qp.n
    CtC = C.T @ C

    def factor(r):
        return np.linalg.cholesky(qp.H + sigma * np.eye(n) + r * CtC)

    Lc = factor(rho)
    it = 0
    for it in range(1, max_iter + 1):
        rhs = sigma * x - qp.g + C.T @ (rho * z - y)
        xt = np.linalg.solve(Lc.T, np.linalg.solve(Lc, rhs))
        zt = C @ xt
        x = alpha * xt + (1 - alpha) * x
        zr = alpha * zt + (1 - alpha) * z
        z = np.clip(zr + y / rho, l, u)
        y = y + rho * (zr - z)
        if it % 10 == 0 or it == max_iter:
            r_prim = np.max(np.abs(C @ x - z), initial=0.0)
            r_dual = np.max(np.abs(qp.H @ x + qp.g + C.T @ y), initial=0.0)
            if r_prim < tol and r_dual < tol:
                return x, z, y, it, True
            if it % 50 == 0 and r_prim > 0 and r_dual > 0:
                ratio = np.sqrt(r_prim / r_dual)
                if ratio > 5 or ratio < 0.2:
                    rho = float(np.clip(rho * ratio, 1e-6, 1e6))
                    Lc = factor(rho)
    return x, z, y, it, False


def qp_solve(qp: QpProblem, tol: float = 1e-6, max_iter: int = 4000, rho: float = 0.1,
             sigma: float = 1e-6, alpha: float = 1.6, warm: tuple | None = None,
             admm_warmup: int = 100) -> QpResult:
    """Solve ``qp``; ``converged`` means the KKT residual is below ``tol``.

    ``warm`` is a previous (x, z, y) triple; with it the ADMM warm-up is skipped.
    """
    n = qp.n
    C = qp.constraint_matrix()
    l, u = qp.bounds()
    m = len(l)
    x, z, y = np.zeros(n), np.clip(np.zeros(m), l, u), np.zeros(m)
    if warm is not None:
        wx, wz, wy = (np.array(w, dtype=float) for w in warm)
        if len(wx) == n and len(wz) == m and len(wy) == m:
            x, z, y = wx, wz, wy
    used = 0
    if warm is None and admm_warmup > 0:
        x, z, y, used, _ = _admm(qp, C, l, u, x, z, y, rho, sigma, alpha,
                                 min(admm_warmup, max_iter), 1e-3 * tol ** 0.5)
    ax, ay, it = _active_set(qp, x, min(max_iter - used, 10 * (n + m)))
    used += it
    if ax is not None:
        k = kkt_residual(qp, ax, ay)
        if k < tol:
            return QpResult(ax, ay, True, used, k, True)
    x, z, y, it, _ = _admm(qp, C, l, u, x, z, y, rho, sigma, alpha, max_iter - used, tol)
    used += it
    k = kkt_residual(qp, x, y)
    if k < tol:
        return QpResult(x, y, True, used, k, False)
    fx = _feasible_start(qp, x)
    return QpResult(np.clip(x, qp.lo, qp.hi) if fx is None else fx, y, False, used, k, False)
