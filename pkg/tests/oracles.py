"""Independent reference implementations shared by the unit and acceptance tests."""
import itertools
import math

import numpy as np

from glclab.qp import QpProblem


def euler_oracle(X, delta, T, p, t_s):
    """Written out independently: kinematic bicycle with CW at mid wheelbase."""
    x, y, th, v = X
    beta = math.atan(math.tan(delta) / 2.0)
    drag = 0.5 * p.drag_coefficient * p.frontal_area * p.air_density * v ** 2
    acc = 6.5 * T ** 2 + 0.6 * T + 0.08 - drag / p.mass
    return np.array([x + t_s * v * math.cos(th + beta), y + t_s * v * math.sin(th + beta),
                     th + t_s * v * math.tan(delta) * math.cos(beta) / p.wheelbase, v + t_s * acc])


def random_qp(rng, n, rate=True):
    M = rng.normal(size=(n, n))
    H = M @ M.T + 0.1 * np.eye(n)
    g = rng.normal(size=n) * 3
    if rate:
        return QpProblem(H, g, -1.0, 1.0, -0.4, 0.4)
    return QpProblem(H, g, -1.0, 1.0)


def brute_force_qp(qp: QpProblem):
    """Enumerate every (free, at-lower, at-upper) pattern of the constraint rows."""
    C = qp.constraint_matrix()
    l, u = qp.bounds()
    best = None
    for pattern in itertools.product((0, 1, 2), repeat=len(l)):
        act = [i for i, s in enumerate(pattern) if s]
        b = np.array([l[i] if pattern[i] == 1 else u[i] for i in act])
        if np.any(~np.isfinite(b)):
            continue
        Ca = C[act]
        n, m = qp.n, len(act)
        K = np.block([[qp.H, Ca.T], [Ca, np.zeros((m, m))]])
        try:
            sol = np.linalg.solve(K, np.concatenate([-qp.g, b]))
        except np.linalg.LinAlgError:
            continue
        x = sol[:n]
        if np.any(C @ x < l - 1e-9) or np.any(C @ x > u + 1e-9):
            continue
        if best is None or qp.objective(x) < qp.objective(best) - 1e-12:
            best = x
    return best
