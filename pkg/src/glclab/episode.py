"""Closed-loop episode runner shared by every lateral controller."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .baselines import PidGains, PidState, pid_throttle
from .metrics import TraceLog
from .plant import (ControlInput, Perturbation, PlantParams, PlantState, SimulationDiverged,
                    observe, plant_step)
from .track import EndOfPath, ReferencePath, classify_segments, waypoint_after

FAIL_DISTANCE = 5.0


@dataclass
class StepContext:
    k: int
    X: np.ndarray
    s_k: float
    d_k: float
    y_d: np.ndarray
    theta_d: float
    delta_prev: float
    throttle: float
    path: ReferencePath


class Policy:
    """Lateral controller interface: ``act`` then, after the plant moves, ``learn``."""

    name = "policy"

    def reset(self, path: ReferencePath):
        pass

    def act(self, ctx: StepContext) -> float:
        raise NotImplementedError

    def learn(self, ctx: StepContext, delta: float, X_next) -> tuple:
        """Return (X_hat for the next row or None, loss_m, loss_c)."""
        return None, math.nan, math.nan


def start_state(path: ReferencePath, v0: float, lateral: float = 0.0, heading: float = 0.0) -> PlantState:
    p0 = path.waypoints[0]
    th = float(path.headings[0])
    normal = np.array([-math.sin(th), math.cos(th)])
    p = p0 + lateral * normal
    return PlantState(x=float(p[0]), y=float(p[1]), theta=th + heading, v_x=v0)


def simulate(policy: Policy, params: PlantParams, path: ReferencePath,
             pert: Perturbation = Perturbation(), v_ref: float = 10.0, laps: float = 2.0,
             max_steps: int | None = None, t_s: float = 0.1, fail_distance: float = FAIL_DISTANCE,
             pid_gains: PidGains = PidGains(), initial: PlantState | None = None) -> TraceLog:
    """Run until ``laps`` laps are covered (closed paths), the path ends, or ``max_steps``."""
    trace = TraceLog(t_s=t_s)
    trace.info.update(controller=policy.name, track=path.name, profile=params.name)
    if max_steps == 0:
        return trace
    classes = classify_segments(path)
    policy.reset(path)
    state = initial or start_state(path, v_ref)
    pid = PidState()
    L = path.total_length
    goal = laps * L if path.closed else L
    cap = max_steps if max_steps is not None else int(3 * goal / max(v_ref * t_s, 0.1)) + 10
    s_hint = None
    s_prev = None
    progress = 0.0
    delta_prev = 0.0
    x_hat = np.full(4, math.nan)
    loss_m = math.nan
    for k in range(cap):
        X = observe(state)
        proj = path.project(X[:2], s_hint=s_hint)
        s_k, d_k = proj.s, proj.d
        s_hint = s_k
        if s_prev is not None:
            progress += path.ds(s_k, s_prev)
        s_prev = s_k
        if progress >= goal:
            break
        try:
            wp = waypoint_after(path, s_k)
        except EndOfPath:
            break
        T = pid_throttle(v_ref, X[3], pid, t_s, pid_gains)
        ctx = StepContext(k, X, s_k, d_k, wp.position, wp.heading, delta_prev, T, path)
        try:
            delta = float(policy.act(ctx))
        except EndOfPath:
            break
        delta_eff = min(max(delta, -params.max_steer), params.max_steer) + pert.steer_bias
        try:
            nxt = plant_step(state, ControlInput(delta, T), params, pert, t_s)
        except SimulationDiverged:
            trace.failed = True
            break
        X_next = observe(nxt)
        try:
            x_hat_next, loss_m_next, loss_c = policy.learn(ctx, delta, X_next)
        except EndOfPath:
            break
        trace.append(
            lap=int(max(progress, 0.0) // L) if path.closed else 0,
            t=k * t_s, x=X[0], y=X[1], theta=X[2], v=X[3],
            x_hat=x_hat[0], y_hat=x_hat[1], theta_hat=x_hat[2], v_hat=x_hat[3],
            delta=delta, delta_eff=delta_eff, throttle=T, yd_x=wp.position[0], yd_y=wp.position[1],
            d_err=d_k, kappa_class=str(classes[proj.index]), loss_m=loss_m, loss_c=loss_c,
        )
        if abs(d_k) > fail_distance:
            trace.failed = True
            break
        x_hat = np.full(4, math.nan) if x_hat_next is None else np.asarray(x_hat_next, dtype=float)
        loss_m = loss_m_next
        delta_prev = delta
        state = nxt
    return trace
