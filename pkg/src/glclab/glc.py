"""Graph-based lateral controller.

Steering comes from the embedded difference between four "desired" wheel
nodes (the car placed at the next waypoint) and four "current" wheel nodes:

    delta = HardTanh(MLP_c(flat(phi_desired) - flat(phi_current)))

The controller learns online by pushing the GVM's predicted next position
toward the desired waypoint, with the GVM itself held fixed.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .baselines import PidState, pid_throttle
from .episode import Policy, StepContext, simulate
from .gnn import G2O, EdgeSet, EdgeType, GraphSchema, HeteroGraph, fully_connected
from .gvm import GvmNet, PredictionError, gvm_loss, gvm_update, wheel_distances
from .nn import (Adam, Mlp, Module, config_from_checkpoint, frozen, load_checkpoint,
                 save_checkpoint)
from .plant import Perturbation, PlantParams, wheel_poses
from .track import EndOfPath, ReferencePath, waypoint_after, wrap_angle

CONTROL_SCHEMA = GraphSchema(
    node_types=(("current", 4, 4), ("desired", 3, 4)),
    edge_types=(
        ("current_link", EdgeType("current", "current", 1)),
        ("desired_link", EdgeType("desired", "desired", 1)),
        ("transition", EdgeType("current", "desired", 1)),
    ),
)


@dataclass
class GlcConfig:
    hidden: int = 32
    heads: int = 2
    out_dim: int = 16
    layers: int = 2
    mlp_hidden: tuple = (64,)
    lr: float = 1e-4  # pre-training
    online_lr: float = 5e-6
    t_s: float = 0.1
    # "ego": desired offsets relative to the current CW Frenet pose; "target": relative to Y_d's own
    desired_origin: str = "ego"
    # "path": headings relative to the path direction at s_k; "world": absolute
    heading_frame: str = "path"
    max_grad_norm: float | None = 10.0
    init_scale: float = 0.01
    reset_distance: float = 3.0

    def to_dict(self):
        return asdict(self)


class GlcNet(Module):
    def __init__(self, params: PlantParams, config: GlcConfig | None = None, seed: int = 0):
        self.config = config or GlcConfig()
        self.params = params
        c = self.config
        rng = np.random.default_rng(seed)
        self.g2o = G2O(CONTROL_SCHEMA, rng, c.hidden, c.heads, c.out_dim, c.layers)
        self.mlp = Mlp([4 * self.g2o.out_dim, *c.mlp_hidden, 1], rng)
        self.mlp.layers[-1].weight.data *= c.init_scale
        self.output_override = None  # test hook: fixed MLP output (before HardTanh)
        self.health = {"nonfinite_output": 0, "skipped_updates": 0}
        self._template = self._make_template()

    def _make_template(self) -> HeteroGraph:
        return control_template(self.params, self.config.t_s)

    def build_graph(self, X, y_d, theta_d, delta_prev, path: ReferencePath, s_hint=None):
        return build_control_graph(X, y_d, theta_d, delta_prev, path, self.params, s_hint,
                                   self.config, self._template)

    def __call__(self, graph: HeteroGraph) -> ad.Tensor:
        """Steering tensor (scalar) for a control graph."""
        if self.output_override is not None:
            omega = ad.constant(np.asarray([float(self.output_override)]))
        else:
            phi = self.g2o(graph)
            n = self.g2o.out_dim
            cur = ad.take(ad.flatten(phi), slice(0, 4 * n))
            des = ad.take(ad.flatten(phi), slice(4 * n, 8 * n))
            omega = self.mlp(ad.sub(des, cur))
        return ad.reshape(ad.hard_tanh(omega), ())

    def make_optimizer(self, online: bool = False) -> Adam:
        lr = self.config.online_lr if online else self.config.lr
        return Adam(self.parameters(), lr=lr, max_grad_norm=self.config.max_grad_norm)

    def save(self, path, meta: dict | None = None):
        info = {"kind": "glc", "config": self.config.to_dict(), "profile": self.params.name,
                "schema": {"nodes": [list(t) for t in CONTROL_SCHEMA.node_types],
                           "edges": {n: [e.src, e.dst, e.dim] for n, e in CONTROL_SCHEMA.edge_types}}}
        info.update(meta or {})
        save_checkpoint(self, path, info)

    @classmethod
    def load(cls, path, params: PlantParams, config: GlcConfig | None = None):
        if config is None:
            config = config_from_checkpoint(path, GlcConfig)
        net = cls(params, config)
        load_checkpoint(net, path)
        return net


def control_template(params: PlantParams, t_s: float) -> HeteroGraph:
    """Fixed G_c topology: wheel links within each time slice plus current -> desired."""
    dist = wheel_distances(params)
    fc = fully_connected(4)
    wd = dist[fc[0], fc[1]][:, None]
    edges = {
        "current_link": EdgeSet("current", "current", fc, wd),
        "desired_link": EdgeSet("desired", "desired", fc, wd.copy()),
        "transition": EdgeSet("current", "desired", np.vstack([np.arange(4), np.arange(4)]),
                              np.full((4, 1), t_s)),
    }
    return HeteroGraph(nodes={}, edges=edges)


def build_control_graph(X, y_d, theta_d, delta_prev, path: ReferencePath, params: PlantParams,
                        s_hint=None, config: GlcConfig | None = None,
                        template: HeteroGraph | None = None) -> HeteroGraph:
    """Control graph G_c: 4 current wheel nodes (dim 4) and 4 desired wheel nodes (dim 3)."""
    config = config or GlcConfig()
    X = np.asarray(X, dtype=float)
    cur_pts, cur_head = wheel_poses(X, params, delta_prev)
    pose_d = np.array([y_d[0], y_d[1], theta_d])
    des_pts, des_head = wheel_poses(pose_d, params, 0.0)
    pts = np.vstack([X[None, :2], np.asarray(y_d, dtype=float)[None, :], cur_pts, des_pts])
    s, d, seg_heading, _ = path.project_many(pts, s_hint=s_hint)
    path.check_domain(s[2:])
    s_k, d_k = s[0], d[0]
    if config.desired_origin == "ego":
        s_o, d_o = s_k, d_k
    elif config.desired_origin == "target":
        s_o, d_o = s[1], d[1]
    else:
        raise ValueError(f"unknown desired origin {config.desired_origin!r}")
    if config.heading_frame == "path":
        cur_head = wrap_angle(cur_head - seg_heading[0])
        des_head = wrap_angle(des_head - seg_heading[0])
    elif config.heading_frame != "world":
        raise ValueError(f"unknown heading frame {config.heading_frame!r}")
    current = np.column_stack([path.ds(s[2:6], s_k), d[2:6] - d_k, np.full(4, X[3]), cur_head])
    desired = np.column_stack([path.ds(s[6:10], s_o), d[6:10] - d_o, des_head])
    template = template or control_template(params, config.t_s)
    return HeteroGraph(nodes={"current": current, "desired": desired}, edges=template.edges,
                       _cache=template._cache)


def steer(net: GlcNet, graph: HeteroGraph, delta_prev: float = 0.0):
    """Return (steering tensor, ok). Non-finite output falls back to ``delta_prev``."""
    out = net(graph)
    if not math.isfinite(float(out.data)):
        net.health["nonfinite_output"] += 1
        return ad.constant(np.asarray(float(delta_prev))), False
    return out, True


def controller_loss(gvm: GvmNet, X, delta: ad.Tensor, T, delta_prev, y_d, path, s_hint=None):
    """SmoothL1 of e_c = Y_d - D X_hat_{k+1} with the GVM's parameters frozen."""
    with frozen(gvm):
        X_hat, _, _ = gvm.predict(X, delta, T, delta_prev, path, s_hint)
    e_c = ad.sub(np.asarray(y_d, dtype=float), ad.take(X_hat, slice(0, 2)))
    return ad.smooth_l1(e_c), X_hat


def glc_update(net: GlcNet, gvm: GvmNet, X, delta: ad.Tensor, T, y_d, opt: Adam,
               delta_prev: float = 0.0, path: ReferencePath | None = None, s_hint=None) -> float:
    loss, _ = controller_loss(gvm, X, delta, T, delta_prev, y_d, path, s_hint)
    value = float(loss.data)
    if not math.isfinite(value):
        net.health["skipped_updates"] += 1
        return value
    opt.zero_grad()
    loss.backward()
    opt.step()
    return value


# -------------------------------------------------------------- online loop

class GlcPolicy(Policy):
    name = "glc"

    def __init__(self, net: GlcNet, gvm: GvmNet, learn_glc: bool = True, learn_gvm: bool = True,
                 glc_opt: Adam | None = None, gvm_opt: Adam | None = None):
        self.net, self.gvm = net, gvm
        self.learn_glc, self.learn_gvm = learn_glc, learn_gvm
        self.glc_opt = glc_opt or net.make_optimizer(online=True)
        self.gvm_opt = gvm_opt or gvm.make_optimizer(online=True)
        self._delta = None
        self._s_hint = None

    def reset(self, path):
        self._s_hint = None

    def act(self, ctx: StepContext) -> float:
        graph = self.net.build_graph(ctx.X, ctx.y_d, ctx.theta_d, ctx.delta_prev, ctx.path, ctx.s_k)
        self._delta, _ = steer(self.net, graph, ctx.delta_prev)
        return float(self._delta.data)

    def learn(self, ctx: StepContext, delta: float, X_next):
        path = ctx.path
        try:
            X_hat, _, _ = self.gvm.predict(ctx.X, delta, ctx.throttle, ctx.delta_prev, path, ctx.s_k)
        except PredictionError:
            return None, math.nan, math.nan
        if self.learn_gvm:
            loss_m = gvm_update(self.gvm, X_next, X_hat, self.gvm_opt)
        else:
            loss_m = float(gvm_loss(X_next, X_hat).data)
        loss_c, _ = controller_loss(self.gvm, ctx.X, self._delta, ctx.throttle, ctx.delta_prev,
                                    ctx.y_d, path, ctx.s_k)
        value = float(loss_c.data)
        if self.learn_glc and self._delta.requires_grad and math.isfinite(value):
            self.glc_opt.zero_grad()
            loss_c.backward()
            self.glc_opt.step()
        return X_hat.data.copy(), loss_m, value


def run_online(net: GlcNet, gvm: GvmNet, params: PlantParams, path: ReferencePath,
               pert: Perturbation = Perturbation(), steps: int | None = None, v_ref: float = 10.0,
               laps: float = 2.0, learn: bool = True, **kw):
    policy = GlcPolicy(net, gvm, learn_glc=learn, learn_gvm=learn)
    return simulate(policy, params, path, pert, v_ref=v_ref, laps=laps, max_steps=steps,
                    t_s=net.config.t_s, **kw)


# --------------------------------------------------------------- pretraining

def pretrain_glc(net: GlcNet, gvm: GvmNet, tracks, epochs: int = 3, steps_per_epoch: int = 1500,
                 v_ref: float = 10.0, seed: int = 0, opt: Adam | None = None, log=None) -> list[float]:
    """Closed loop entirely inside the GVM: X_hat drives the controller and is rolled forward.

    Episodes start at random poses near the path and reset when |d| exceeds
    ``config.reset_distance`` or the model state becomes non-finite.
    """
    if epochs <= 0:
        return []
    tracks = list(tracks) if isinstance(tracks, (list, tuple)) else [tracks]
    rng = np.random.default_rng(seed)
    opt = opt or net.make_optimizer()
    t_s = net.config.t_s
    curve = []

    def fresh(path):
        s0 = rng.uniform(0, path.total_length if path.closed else 0.5 * path.total_length)
        p = path.point_at(s0)
        th = path.heading_at(s0)
        off = rng.uniform(-1.0, 1.0)
        X = np.array([p[0] - off * math.sin(th), p[1] + off * math.cos(th),
                      wrap_angle(th + rng.uniform(-0.1, 0.1)), v_ref * rng.uniform(0.8, 1.1)])
        return X, s0, PidState(), 0.0

    for epoch in range(epochs):
        total, count = 0.0, 0
        for ti, path in enumerate(tracks):
            X, s_hint, pid, delta_prev = fresh(path)
            for _ in range(steps_per_epoch // len(tracks)):
                proj = path.project(X[:2], s_hint=s_hint)
                if abs(proj.d) > net.config.reset_distance:
                    X, s_hint, pid, delta_prev = fresh(path)
                    continue
                s_hint = proj.s
                try:
                    wp = waypoint_after(path, proj.s)
                    graph = net.build_graph(X, wp.position, wp.heading, delta_prev, path, s_hint)
                except EndOfPath:
                    X, s_hint, pid, delta_prev = fresh(path)
                    continue
                T = pid_throttle(v_ref, X[3], pid, t_s)
                delta, _ = steer(net, graph, delta_prev)
                try:
                    loss, X_hat = controller_loss(gvm, X, delta, T, delta_prev, wp.position, path, s_hint)
                except (PredictionError, EndOfPath):
                    X, s_hint, pid, delta_prev = fresh(path)
                    continue
                value = float(loss.data)
                if math.isfinite(value) and delta.requires_grad:
                    opt.zero_grad()
                    loss.backward()
                    opt.step()
                    total += value
                    count += 1
                X = X_hat.data.copy()
                if not np.all(np.isfinite(X)):
                    X, s_hint, pid, delta_prev = fresh(path)
                    continue
                X[2] = wrap_angle(X[2])
                delta_prev = float(delta.data)
        curve.append(total / max(count, 1))
        if log:
            log(f"glc epoch {epoch + 1}/{epochs} loss {curve[-1]:.6f}")
    return curve
