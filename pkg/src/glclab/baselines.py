"""Reference controllers: LTV-MPC on the kinematic bicycle, Stanley, and the speed PID."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .gvm import bicycle_derivative_np
from .plant import PlantParams
from .qp import QpProblem, qp_solve
from .track import ReferencePath, wrap_angle

STANLEY_GAIN = 1.0
STANLEY_V_SOFT = 0.1


# ----------------------------------------------------------------------- PID

@dataclass
class PidState:
    integral: float = 0.0
    prev_error: float | None = None


@dataclass
class PidGains:
    kp: float = 0.8
    ki: float = 0.1
    kd: float = 0.01
    integral_limit: float = 2.0


def pid_throttle(v_ref: float, v: float, st: PidState, t_s: float = 0.1,
                 gains: PidGains = PidGains()) -> float:
    """PID on the speed error, output clamped to [0, 1]; mutates ``st``."""
    err = v_ref - v
    st.integral = min(max(st.integral + err * t_s, -gains.integral_limit), gains.integral_limit)
    deriv = 0.0 if st.prev_error is None else (err - st.prev_error) / t_s
    st.prev_error = err
    out = gains.kp * err + gains.ki * st.integral + gains.kd * deriv
    return min(max(out, 0.0), 1.0)


# ------------------------------------------------------------------- Stanley

def stanley_law(psi: float, e_ct: float, v: float, k: float = STANLEY_GAIN) -> float:
    """delta = psi + arctan(k e_ct / v)."""
    return psi + math.atan(k * e_ct / v)


def stanley_steer(X, path: ReferencePath, params: PlantParams, k: float = STANLEY_GAIN,
                  s_hint=None, v_soft: float = STANLEY_V_SOFT, max_steer: float = 1.0):
    """Stanley steering from the front-axle error; returns (delta, front-axle s)."""
    x, y, th, v = (float(c) for c in X)
    front = np.array([x + params.a_f * math.cos(th), y + params.a_f * math.sin(th)])
    proj = path.project(front, s_hint=s_hint)
    psi = wrap_angle(proj.heading - th)
    e_ct = -proj.d  # left of the path (d > 0) must steer right
    delta = stanley_law(psi, e_ct, abs(v) + v_soft, k)
    return min(max(delta, -max_steer), max_steer), proj.s


# ----------------------------------------------------------------------- MPC

@dataclass
class MpcConfig:
    horizon: int = 40
    steer_min: float = -1.0
    steer_max: float = 1.0
    steer_rate_max: float = 0.5  # rad/s
    t_s: float = 0.1
    r_d: float = 1.0
    q: tuple = (2.5, 2.5)
    q_f: tuple = (3.5, 3.5)
    tol: float = 1e-6
    max_iter: int = 4000

    def __post_init__(self):
        if self.horizon < 2:
            raise ValueError("horizon must be at least 2")
        if abs(self.steer_min + self.steer_max) > 1e-12:
            raise ValueError("steering bounds must be symmetric")
        if min(self.q + self.q_f) < 0 or self.r_d < 0:
            raise ValueError("weights must be non-negative")

    def to_dict(self):
        return asdict(self)


def linearize_model(X_op, delta_op: float, T: float, params: PlantParams, t_s: float = 0.1):
    """A, B, c of the Euler-discretised kinematic bicycle at (X_op, delta_op).

    X_next ~= A X + B delta + c, exact at the operating point.
    """
    _, _, th, v = (float(c) for c in X_op)
    tan_d = math.tan(delta_op)
    beta = math.atan(0.5 * tan_d)
    cb = math.cos(beta)
    l = params.wheelbase
    # d beta / d delta = 0.5 sec^2 / (1 + 0.25 tan^2)
    sec2 = 1.0 + tan_d * tan_d
    dbeta = 0.5 * sec2 / (1.0 + 0.25 * tan_d * tan_d)
    c_hb, s_hb = math.cos(th + beta), math.sin(th + beta)
    drag = params.drag_coefficient * params.frontal_area * params.air_density * v / params.mass
    Jx = np.zeros((4, 4))
    Jx[0, 2], Jx[0, 3] = -v * s_hb, c_hb
    Jx[1, 2], Jx[1, 3] = v * c_hb, s_hb
    Jx[2, 3] = tan_d * cb / l
    Jx[3, 3] = -drag
    Ju = np.array([
        -v * s_hb * dbeta,
        v * c_hb * dbeta,
        v / l * (sec2 * cb - tan_d * math.sin(beta) * dbeta),
        0.0,
    ])
    A = np.eye(4) + t_s * Jx
    B = (t_s * Ju)[:, None]
    X_op = np.asarray(X_op, dtype=float)
    f = X_op + t_s * bicycle_derivative_np(X_op, delta_op, T, params)
    c = f - A @ X_op - B[:, 0] * delta_op
    return A, B, c


def reference_horizon(path: ReferencePath, s_k: float, v: float, p: int, t_s: float) -> np.ndarray:
    """p reference positions spaced v t_s apart along the path, starting one step ahead."""
    step = max(v, 0.1) * t_s
    out = np.empty((p, 2))
    for j in range(p):
        s = s_k + (j + 1) * step
        if not path.closed:
            s = min(s, path.total_length)
        out[j] = path.point_at(s)
    return out


def build_mpc_qp(X_k, ref: np.ndarray, delta_prev: float, A, B, c, cfg: MpcConfig) -> QpProblem:
    """Condensed QP in the steering sequence for the four weighted-norm cost terms."""
    p = cfg.horizon
    X_k = np.asarray(X_k, dtype=float)
    # X_j = Phi_j X_k + Gam_j u + w_j, j = 1..p
    D = np.zeros((2, 4))
    D[0, 0] = D[1, 1] = 1.0
    Sx = np.zeros((2 * p, p))
    free = np.zeros(2 * p)
    state = X_k.copy()
    cols = np.zeros((4, p))  # effect of each input on the current predicted state
    for j in range(p):
        cols = A @ cols
        cols[:, j] = B[:, 0]
        state = A @ state + c
        Sx[2 * j:2 * j + 2] = D @ cols
        free[2 * j:2 * j + 2] = D @ state
    w = np.concatenate([np.tile(cfg.q, p - 1), cfg.q_f])
    err0 = free - ref.reshape(-1)
    H = Sx.T @ (w[:, None] * Sx)
    g = Sx.T @ (w * err0)
    # input and rate penalties, both weighted by r_d
    Dd = np.eye(p) - np.eye(p, k=-1)
    H += cfg.r_d * np.eye(p) + cfg.r_d * Dd.T @ Dd
    e0 = np.zeros(p)
    e0[0] = 1.0
    g += -cfg.r_d * delta_prev * e0
    H = 2.0 * 0.5 * (H + H.T)
    g = 2.0 * g
    rate = cfg.steer_rate_max * cfg.t_s
    lo = np.full(p, cfg.steer_min)
    hi = np.full(p, cfg.steer_max)
    lo[0] = max(lo[0], delta_prev - rate)
    hi[0] = min(hi[0], delta_prev + rate)
    if lo[0] > hi[0]:  # previous command outside the box: move toward it at full rate
        lo[0] = hi[0] = min(max(delta_prev, cfg.steer_min), cfg.steer_max)
    return QpProblem(H, g, lo, hi, np.full(p - 1, -rate), np.full(p - 1, rate))


@dataclass
class MpcSolution:
    delta: float
    sequence: np.ndarray
    converged: bool
    kkt: float
    iterations: int


@dataclass
class MpcController:
    params: PlantParams
    cfg: MpcConfig = field(default_factory=MpcConfig)
    _warm: tuple | None = None
    flagged_steps: int = 0
    kkt_log: list = field(default_factory=list)

    def reset(self):
        self._warm = None
        self.flagged_steps = 0
        self.kkt_log = []

    def solve(self, X_k, ref, delta_prev: float, T: float) -> MpcSolution:
        cfg = self.cfg
        A, B, c = linearize_model(X_k, delta_prev, T, self.params, cfg.t_s)
        qp = build_mpc_qp(X_k, ref, delta_prev, A, B, c, cfg)
        res = qp_solve(qp, tol=cfg.tol, max_iter=cfg.max_iter, warm=self._warm)
        self.kkt_log.append(res.kkt)
        if not res.converged:
            self.flagged_steps += 1
            self._warm = None
            return MpcSolution(delta_prev, res.x, False, res.kkt, res.iterations)
        seq = _project_feasible(res.x, qp)
        x = np.append(seq[1:], seq[-1])
        z = qp.constraint_matrix() @ x
        y = np.append(res.y[1:cfg.horizon], 0.0)
        y = np.concatenate([y, np.append(res.y[cfg.horizon + 1:], 0.0)])
        self._warm = (x, z, y)
        return MpcSolution(float(seq[0]), seq, True, res.kkt, res.iterations)

    def steer(self, X_k, path: ReferencePath, delta_prev: float, T: float, s_hint=None):
        s_k = path.project(np.asarray(X_k[:2], dtype=float), s_hint=s_hint).s
        ref = reference_horizon(path, s_k, float(X_k[3]), self.cfg.horizon, self.cfg.t_s)
        sol = self.solve(X_k, ref, delta_prev, T)
        return sol.delta, s_k, sol


def _project_feasible(x, qp: QpProblem) -> np.ndarray:
    """Sequential clip so box and rate bounds hold exactly."""
    out = np.clip(np.asarray(x, dtype=float).copy(), qp.lo, qp.hi)
    for j in range(1, len(out)):
        out[j] = min(max(out[j], out[j - 1] + qp.dlo[j - 1]), out[j - 1] + qp.dhi[j - 1])
        out[j] = min(max(out[j], qp.lo[j]), qp.hi[j])
    return out


def mpc_solve(X_k, ref, delta_prev: float, cfg: MpcConfig, params: PlantParams, T: float = 0.0):
    return MpcController(params, cfg).solve(X_k, ref, delta_prev, T)
