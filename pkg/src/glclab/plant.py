"""Ground-truth vehicle: 3-DOF dynamic bicycle with linear tires, RK4 integrated."""
from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .track import wrap_angle

GRAVITY = 9.81
LOW_SPEED = 1.0  # below this body speed the lateral tire model is replaced by kinematics
RELAX_TIME = 0.02
D1_BIAS = math.radians(2.5)
D2_FRICTION = 0.5


class SimulationDiverged(RuntimeError):
    pass


def throttle_acceleration(T):
    """Fitted throttle-to-acceleration polynomial, m/s^2."""
    return 6.5 * T * T + 0.6 * T + 0.08


@dataclass(frozen=True)
class PlantParams:
    mass: float = 1845.0
    wheelbase: float = 2.875
    track_width: float = 1.58
    a_f: float = 1.4375
    b_r: float = 1.4375
    yaw_inertia: float = 2900.0
    c_f: float = 100000.0
    c_r: float = 110000.0
    drag_coefficient: float = 0.23
    frontal_area: float = 2.22
    air_density: float = 1.225
    rolling_resistance: float = 0.0  # optional extension, off by default
    max_steer: float = 1.0
    max_steer_rate: float = math.inf
    name: str = "default"

    def __post_init__(self):
        for f in fields(self):
            if f.name == "name":
                continue
            if not getattr(self, f.name) > 0 and f.name != "rolling_resistance":
                raise ValueError(f"{f.name} must be positive")
        if abs(self.a_f + self.b_r - self.wheelbase) > 1e-9:
            raise ValueError("a_f + b_r must equal the wheelbase")

    def drag_force(self, v):
        return 0.5 * self.drag_coefficient * self.frontal_area * self.air_density * v * v


@dataclass(frozen=True)
class Perturbation:
    steer_bias: float = 0.0
    friction_scale: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.friction_scale <= 1.0:
            raise ValueError("friction_scale must lie in (0, 1]")

    @classmethod
    def named(cls, key: str) -> "Perturbation":
        """``none``, ``d1+``, ``d1-`` (+/-2.5 deg steering bias) or ``d2`` (half friction)."""
        table = {
            "none": cls(),
            "d1": cls(steer_bias=D1_BIAS),
            "d1+": cls(steer_bias=D1_BIAS),
            "d1-": cls(steer_bias=-D1_BIAS),
            "d2": cls(friction_scale=D2_FRICTION),
        }
        try:
            return table[key.lower()]
        except KeyError:
            raise ValueError(f"unknown perturbation {key!r}") from None


@dataclass(frozen=True)
class PlantState:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0
    v_x: float = 0.0
    v_y: float = 0.0
    r: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta, self.v_x, self.v_y, self.r])

    @classmethod
    def from_array(cls, a) -> "PlantState":
        return cls(*(float(v) for v in a))


@dataclass(frozen=True)
class ControlInput:
    steer: float
    throttle: float


def _derivative(q, delta, T, p: PlantParams, friction, creep):
    _, _, th, vx, vy, r = q
    c, s = math.cos(th), math.sin(th)
    accel = throttle_acceleration(T) if creep else 6.5 * T * T + 0.6 * T
    ax = accel - p.drag_force(vx) / p.mass - p.rolling_resistance * GRAVITY * math.tanh(vx / 0.5)
    if vx < LOW_SPEED:
        beta = math.atan(p.b_r * math.tan(delta) / p.wheelbase)
        vy_kin = vx * math.tan(beta)
        r_kin = vx * math.tan(delta) / p.wheelbase
        return np.array([vx * c - vy * s, vx * s + vy * c, r, ax,
                         (vy_kin - vy) / RELAX_TIME, (r_kin - r) / RELAX_TIME])
    alpha_f = delta - math.atan2(vy + p.a_f * r, vx)
    alpha_r = -math.atan2(vy - p.b_r * r, vx)
    fyf = friction * p.c_f * alpha_f
    fyr = friction * p.c_r * alpha_r
    cd, sd = math.cos(delta), math.sin(delta)
    return np.array([
        vx * c - vy * s,
        vx * s + vy * c,
        r,
        ax - fyf * sd / p.mass + vy * r,
        (fyf * cd + fyr) / p.mass - vx * r,
        (p.a_f * fyf * cd - p.b_r * fyr) / p.yaw_inertia,
    ])


def plant_step(state: PlantState, u: ControlInput, params: PlantParams,
               pert: Perturbation = Perturbation(), t_s: float = 0.1,
               substeps: int = 10, creep: bool = True) -> PlantState:
    """Advance the plant by ``t_s`` seconds with classic RK4 on ``substeps`` sub-intervals."""
    if not t_s > 0:
        raise ValueError("t_s must be positive")
    delta = min(max(u.steer, -params.max_steer), params.max_steer) + pert.steer_bias
    T = min(max(u.throttle, 0.0), 1.0)
    q = state.as_array()
    h = t_s / substeps
    f = _derivative
    for _ in range(substeps):
        k1 = f(q, delta, T, params, pert.friction_scale, creep)
        k2 = f(q + 0.5 * h * k1, delta, T, params, pert.friction_scale, creep)
        k3 = f(q + 0.5 * h * k2, delta, T, params, pert.friction_scale, creep)
        k4 = f(q + h * k3, delta, T, params, pert.friction_scale, creep)
        q = q + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.all(np.isfinite(q)):
        raise SimulationDiverged(f"non-finite plant state {q}")
    return PlantState.from_array(q)


def observe(state: PlantState) -> np.ndarray:
    """Ego state X = [x, y, theta, v] with v the speed magnitude."""
    return np.array([state.x, state.y, wrap_angle(state.theta), math.hypot(state.v_x, state.v_y)])


WHEEL_NAMES = ("front_left", "front_right", "rear_left", "rear_right")


def wheel_poses(X, params: PlantParams, delta_prev: float = 0.0):
    """Positions (4, 2) and headings (4,) of FL, FR, RL, RR wheel centres."""
    x, y, th = float(X[0]), float(X[1]), float(X[2])
    half = 0.5 * params.track_width
    local = np.array([[params.a_f, half], [params.a_f, -half],
                      [-params.b_r, half], [-params.b_r, -half]])
    c, s = math.cos(th), math.sin(th)
    rot = np.array([[c, -s], [s, c]])
    pos = local @ rot.T + np.array([x, y])
    heading = np.array([th + delta_prev, th + delta_prev, th, th])
    return pos, heading


# ------------------------------------------------------------------ profiles

def _profile_file():
    return resources.files("glclab").joinpath("data/profiles.ini")


def load_profiles(path=None) -> dict[str, PlantParams]:
    """Read vehicle profiles (one INI section each, SI units)."""
    parser = configparser.ConfigParser()
    if path is None:
        parser.read_string(_profile_file().read_text())
    else:
        if not Path(path).exists():
            raise FileNotFoundError(path)
        parser.read(path)
    names = {f.name for f in fields(PlantParams)}
    out = {}
    for section in parser.sections():
        kw = {}
        for key, value in parser[section].items():
            if key not in names:
                raise ValueError(f"[{section}] unknown key {key!r}")
            kw[key] = float(value)
        out[section] = PlantParams(name=section, **kw)
    return out


def get_profile(name: str = "profile-A", path=None) -> PlantParams:
    profiles = load_profiles(path)
    if name not in profiles:
        raise KeyError(f"unknown profile {name!r}; have {sorted(profiles)}")
    return profiles[name]


def with_overrides(params: PlantParams, **kw) -> PlantParams:
    return replace(params, **kw)
