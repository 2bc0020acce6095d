"""Graph vehicle model: a kinematic bicycle corrected by a learned gain vector Gamma.

    X_hat[k+1] = X[k] + t_s * Gamma * f_bicycle(X[k], delta[k], T[k])

Gamma comes from a G2O network over a 6-node graph (four wheels plus the
steering and throttle actuators) followed by an MLP.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .gnn import G2O, EdgeSet, EdgeType, GraphSchema, HeteroGraph, fully_connected
from .nn import Adam, Mlp, Module, config_from_checkpoint, load_checkpoint, save_checkpoint
from .plant import (ControlInput, Perturbation, PlantParams, PlantState, observe,
                    plant_step, throttle_acceleration, wheel_poses)
from .track import EndOfPath, ReferencePath, path_from_points, wrap_angle

MODEL_SCHEMA = GraphSchema(
    node_types=(("wheel", 4, 4), ("actuator", 1, 2)),
    edge_types=(
        ("wheel_wheel", EdgeType("wheel", "wheel", 1)),
        ("actuator_wheel", EdgeType("actuator", "wheel", 1)),
        ("actuator_actuator", EdgeType("actuator", "actuator", 0)),
    ),
)


class PredictionError(ArithmeticError):
    pass


# ------------------------------------------------------------ bicycle model

def net_acceleration(v, T, params: PlantParams):
    return throttle_acceleration(T) - params.drag_force(v) / params.mass


def bicycle_derivative_np(X, delta, T, params: PlantParams) -> np.ndarray:
    _, _, th, v = X
    beta = math.atan(0.5 * math.tan(delta))
    return np.array([
        v * math.cos(th + beta),
        v * math.sin(th + beta),
        v * math.tan(delta) * math.cos(beta) / params.wheelbase,
        net_acceleration(v, T, params),
    ])


def bicycle_derivative(X, delta, T, params: PlantParams) -> ad.Tensor:
    """Kinematic bicycle rates [x', y', theta', v'], differentiable in ``delta``."""
    th, v = float(X[2]), float(X[3])
    tan_d = ad.tan(ad.constant(delta))
    beta = ad.arctan(ad.scale(tan_d, 0.5))
    heading = ad.add(beta, th)
    return ad.stack([
        ad.scale(ad.cos(heading), v),
        ad.scale(ad.sin(heading), v),
        ad.scale(ad.mul(tan_d, ad.cos(beta)), v / params.wheelbase),
        ad.constant(np.asarray(net_acceleration(v, T, params))),
    ])


def euler_bicycle_step(X, delta, T, params: PlantParams, t_s: float) -> np.ndarray:
    return np.asarray(X, dtype=float) + t_s * bicycle_derivative_np(X, delta, T, params)


# ------------------------------------------------------------- graph build

def wheel_distances(params: PlantParams) -> np.ndarray:
    """(4, 4) centre-to-centre distances in FL, FR, RL, RR order."""
    pos, _ = wheel_poses(np.zeros(3), params)
    return np.hypot(*(pos[:, None, :] - pos[None, :, :]).transpose(2, 0, 1))


def wheel_features(path: ReferencePath, X, delta_prev, params: PlantParams, s_hint=None,
                   heading_frame: str = "world", with_velocity: bool = True):
    """Per-wheel [s_w - s_k, d_w - d_k, (v), heading] rows plus the CW Frenet pose.

    Front wheels carry heading theta + delta_prev. ``heading_frame='path'``
    reports headings relative to the path direction at s_k instead.
    """
    pts, heading = wheel_poses(X, params, delta_prev)
    allp = np.vstack([np.asarray(X[:2], dtype=float)[None, :], pts])
    s, d, seg_heading, _ = path.project_many(allp, s_hint=s_hint)
    path.check_domain(s)
    s_k, d_k = float(s[0]), float(d[0])
    ds = path.ds(s[1:], s_k)
    if heading_frame == "path":
        heading = wrap_angle(heading - seg_heading[0])
    elif heading_frame != "world":
        raise ValueError(f"unknown heading frame {heading_frame!r}")
    cols = [ds, d[1:] - d_k]
    if with_velocity:
        cols.append(np.full(4, float(X[3])))
    cols.append(heading)
    return np.column_stack(cols), (s_k, d_k)


@dataclass
class GvmConfig:
    hidden: int = 32
    heads: int = 2
    out_dim: int = 16
    layers: int = 2
    mlp_hidden: tuple = (64,)
    lr: float = 1e-3  # pre-training
    online_lr: float = 1e-4
    epsilon: float = 0.0
    t_s: float = 0.1
    heading_frame: str = "world"
    max_grad_norm: float | None = 10.0
    init_scale: float = 0.1  # shrinks the output layer so Gamma starts near its bias (1)
    lr_decay: float = 0.5  # per pre-training epoch

    def to_dict(self):
        return asdict(self)


class GvmNet(Module):
    def __init__(self, params: PlantParams, config: GvmConfig | None = None, seed: int = 0):
        self.config = config or GvmConfig()
        self.params = params
        c = self.config
        rng = np.random.default_rng(seed)
        self.g2o = G2O(MODEL_SCHEMA, rng, c.hidden, c.heads, c.out_dim, c.layers)
        self.mlp = Mlp([MODEL_SCHEMA.num_nodes * self.g2o.out_dim, *c.mlp_hidden, 4], rng)
        last = self.mlp.layers[-1]
        last.weight.data *= c.init_scale
        last.bias.data[:] = 1.0
        self.gamma_override = None  # test hook: fixed Gamma bypasses the network
        self.health = {"nonfinite_gamma": 0, "skipped_updates": 0}
        self._template = self._make_template()

    def _make_template(self) -> HeteroGraph:
        dist = wheel_distances(self.params)
        ww = fully_connected(4)
        aw = np.array([[a for a in range(2) for _ in range(4)], [w for _ in range(2) for w in range(4)]])
        edges = {
            "wheel_wheel": EdgeSet("wheel", "wheel", ww, dist[ww[0], ww[1]][:, None]),
            "actuator_wheel": EdgeSet("actuator", "wheel", aw, np.full((8, 1), self.config.t_s)),
            "actuator_actuator": EdgeSet("actuator", "actuator", fully_connected(2)),
        }
        return HeteroGraph(nodes={}, edges=edges)

    def build_graph(self, X, delta, T, delta_prev, path: ReferencePath, s_hint=None):
        """Model graph G_m; ``delta`` may be a tensor so that gradients reach it."""
        feats, frenet = wheel_features(path, X, delta_prev, self.params, s_hint,
                                       self.config.heading_frame)
        act = ad.reshape(ad.stack([ad.constant(delta), ad.constant(np.asarray(float(T)))]), (2, 1))
        tpl = self._template
        return HeteroGraph(nodes={"wheel": feats, "actuator": act}, edges=tpl.edges,
                           _cache=tpl._cache), frenet

    def gamma(self, graph: HeteroGraph) -> ad.Tensor:
        if self.gamma_override is not None:
            return ad.constant(np.asarray(self.gamma_override, dtype=float))
        phi = self.g2o(graph)
        return self.mlp(ad.flatten(phi))

    def predict(self, X, delta, T, delta_prev, path: ReferencePath, s_hint=None):
        """Return (X_hat tensor, Gamma array, CW Frenet pose)."""
        graph, frenet = self.build_graph(X, delta, T, delta_prev, path, s_hint)
        gam = self.gamma(graph)
        if not np.all(np.isfinite(gam.data)):
            self.health["nonfinite_gamma"] += 1
            raise PredictionError("non-finite Gamma")
        rate = ad.mul(gam, bicycle_derivative(X, delta, T, self.params))
        X_hat = ad.add(np.asarray(X, dtype=float), ad.scale(rate, self.config.t_s))
        return X_hat, gam.data.copy(), frenet

    def make_optimizer(self, online: bool = False) -> Adam:
        lr = self.config.online_lr if online else self.config.lr
        return Adam(self.parameters(), lr=lr, max_grad_norm=self.config.max_grad_norm)

    def save(self, path, meta: dict | None = None):
        info = {"kind": "gvm", "config": self.config.to_dict(), "profile": self.params.name,
                "schema": _schema_dict(MODEL_SCHEMA)}
        info.update(meta or {})
        save_checkpoint(self, path, info)

    @classmethod
    def load(cls, path, params: PlantParams, config: GvmConfig | None = None):
        if config is None:
            config = config_from_checkpoint(path, GvmConfig)
        net = cls(params, config)
        load_checkpoint(net, path)
        return net


def _schema_dict(schema: GraphSchema) -> dict:
    return {"nodes": [list(t) for t in schema.node_types],
            "edges": {n: [e.src, e.dst, e.dim] for n, e in schema.edge_types}}


def predict_next(net: GvmNet, X, delta, T, delta_prev, path: ReferencePath, s_hint=None):
    return net.predict(X, delta, T, delta_prev, path, s_hint)[0]


def model_error(X_next, X_hat: ad.Tensor) -> ad.Tensor:
    """e = X_next - X_hat with the heading component wrapped to (-pi, pi]."""
    target = np.asarray(X_next, dtype=float).copy()
    target[2] = X_hat.data[2] + wrap_angle(target[2] - X_hat.data[2])
    return ad.sub(target, X_hat)


def gvm_loss(X_next, X_hat: ad.Tensor) -> ad.Tensor:
    return ad.smooth_l1(model_error(X_next, X_hat))


def gvm_update(net: GvmNet, X_next, X_hat: ad.Tensor, opt: Adam, epsilon: float | None = None) -> float:
    """One SmoothL1 step on e_m; skipped when max|e_m| <= epsilon (epsilon > 0)."""
    eps = net.config.epsilon if epsilon is None else epsilon
    err = model_error(X_next, X_hat)
    loss = ad.smooth_l1(err)
    value = float(loss.data)
    if not math.isfinite(value):
        net.health["skipped_updates"] += 1
        return value
    if eps > 0 and np.max(np.abs(err.data)) <= eps:
        return value
    opt.zero_grad()
    loss.backward()
    opt.step()
    return value


# ---------------------------------------------------------------- training

@dataclass
class ExcitationSchedule:
    steer: np.ndarray
    throttle: np.ndarray
    reset_speed: np.ndarray  # NaN except at episode starts, where it holds the initial speed
    t_s: float = 0.1
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.steer)


def pretraining_track(length: float = 20000.0) -> ReferencePath:
    """Long straight line along +x; the Frenet frame is defined everywhere on it."""
    pts = np.array([[-100.0, 0.0], [length, 0.0]])
    return path_from_points(pts, closed=False, spacing=5.0, name="straight")


def excitation_schedule(params: PlantParams, steps: int = 1200, seed: int = 0, t_s: float = 0.1,
                        v_max: float = 12.0, steer_max: float = 0.4, a_lat_max: float = 5.0,
                        episode_steps: int = 200) -> ExcitationSchedule:
    """Pre-computed steering and throttle commands covering sweeps, steps and chirps.

    The plant creeps forward at zero throttle and has no brake, so the
    schedule is split into short episodes with their own starting speed.
    Commands are generated against the nominal plant: steering amplitude
    respects a lateral acceleration budget and a weak heading hold keeps the
    car roughly aligned with the straight.
    """
    rng = np.random.default_rng(seed)
    steer = np.zeros(steps)
    throttle = np.zeros(steps)
    reset = np.full(steps, np.nan)
    kinds = ("chirp", "hold", "sweep", "random", "straight")
    seg_len = seg_pos = 0
    seg_kind, seg_amp, seg_f = "straight", 0.0, 0.0
    state, v_ref, integ = None, 0.0, 0.0
    for k in range(steps):
        if k % episode_steps == 0:
            v0 = rng.uniform(2.0, v_max - 1.0)
            reset[k] = v0
            state = PlantState(v_x=v0)
            integ, seg_pos, seg_len = 0.0, 0, 0
        if k % 50 == 0:
            v_ref = rng.uniform(2.0, v_max)
        v = max(math.hypot(state.v_x, state.v_y), 0.5)
        amp_cap = min(steer_max, a_lat_max * params.wheelbase / (v * v))
        if seg_pos >= seg_len:
            seg_kind = kinds[rng.integers(len(kinds))]
            seg_len = int(rng.integers(30, 90))
            seg_pos = 0
            seg_amp = rng.uniform(0.3, 1.0)
            seg_f = rng.uniform(0.1, 0.6)
        t = seg_pos * t_s
        if seg_kind == "chirp":
            u = seg_amp * math.sin(2 * math.pi * seg_f * (0.3 + seg_pos / seg_len) * t)
        elif seg_kind == "sweep":
            u = seg_amp * math.sin(2 * math.pi * seg_f * t)
        elif seg_kind == "hold":
            u = seg_amp * (0.6 if seg_pos < seg_len // 2 else -0.6)
        elif seg_kind == "random":
            u = float(np.clip(rng.normal(0.0, 0.5 * seg_amp), -1, 1))
        else:
            u = 0.0
        seg_pos += 1
        hold = -0.4 * wrap_angle(state.theta)
        steer[k] = float(np.clip((u + hold) * amp_cap, -steer_max, steer_max))
        err = v_ref - v
        integ = float(np.clip(integ + err * t_s, -2.0, 2.0))
        throttle[k] = float(np.clip(0.3 * err + 0.05 * integ, 0.0, 1.0))
        state = plant_step(state, ControlInput(steer[k], throttle[k]), params, t_s=t_s)
    return ExcitationSchedule(steer, throttle, reset, t_s, {"seed": seed, "v_max": v_max})


def stream_update(net: GvmNet, opt, plant_params: PlantParams, state: PlantState, delta, T,
                  delta_prev, path, pert: Perturbation = Perturbation(), s_hint=None, train=True):
    """Predict, advance the plant, then learn from the observed next state."""
    X = observe(state)
    X_hat, gam, frenet = net.predict(X, float(delta), T, delta_prev, path, s_hint)
    nxt = plant_step(state, ControlInput(float(delta), T), plant_params, pert, net.config.t_s)
    X_next = observe(nxt)
    loss = gvm_update(net, X_next, X_hat, opt) if train else float(gvm_loss(X_next, X_hat).data)
    return nxt, X_hat.data.copy(), X_next, loss, frenet


def _start_pose(path: ReferencePath, v: float) -> PlantState:
    p = path.waypoints[0]
    return PlantState(x=float(p[0]), y=float(p[1]), theta=float(path.headings[0]), v_x=v)


def pretrain_gvm(net: GvmNet, plant_params: PlantParams, schedule: ExcitationSchedule | None = None,
                 epochs: int = 5, opt: Adam | None = None, path: ReferencePath | None = None,
                 log=None) -> list[float]:
    """Stream the excitation schedule through predict/observe/update; return per-epoch mean loss."""
    if epochs <= 0:
        return []
    schedule = schedule or excitation_schedule(plant_params)
    path = path or pretraining_track()
    opt = opt or net.make_optimizer()
    curve = []
    base_lr = opt.lr
    for epoch in range(epochs):
        opt.lr = base_lr * net.config.lr_decay ** epoch
        state = _start_pose(path, 8.0)
        delta_prev, s_hint, total = 0.0, None, 0.0
        for k in range(len(schedule)):
            if not math.isnan(schedule.reset_speed[k]):
                state = _start_pose(path, float(schedule.reset_speed[k]))
                delta_prev, s_hint = 0.0, None
            d, T = schedule.steer[k], schedule.throttle[k]
            try:
                state, _, _, loss, frenet = stream_update(net, opt, plant_params, state, d, T,
                                                          delta_prev, path, s_hint=s_hint)
            except EndOfPath:
                state, delta_prev, s_hint = _start_pose(path, state.v_x), 0.0, None
                continue
            s_hint = frenet[0]
            delta_prev = d
            total += loss
        curve.append(total / len(schedule))
        if log:
            log(f"gvm epoch {epoch + 1}/{epochs} loss {curve[-1]:.6f}")
    return curve
