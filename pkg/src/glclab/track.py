"""Reference paths: loading, synthetic circuits, Frenet projection, Y_d lookup."""
from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

STRAIGHT, TURN = "Straight", "Turn"
DEFAULT_SPACING = 1.0
DEFAULT_SPEED = 10.0
MAX_CURVATURE = 0.1


class MalformedTrackError(ValueError):
    pass


class TrackParseError(ValueError):
    pass


class FeasibilityError(ValueError):
    pass


class EndOfPath(Exception):
    """The query point lies past the end of an open path."""


class FrenetCoord(NamedTuple):
    s: float
    d: float


class Projection(NamedTuple):
    s: float
    d: float
    heading: float  # direction of the segment carrying the foot point
    index: int  # segment index (segment i runs from waypoint i to i+1)


class DesiredWaypoint(NamedTuple):
    position: np.ndarray
    heading: float
    velocity: float
    index: int
    s_k: float


def wrap_angle(a):
    """Map angles to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.ndim(w) == 0 else w


@dataclass
class ReferencePath:
    waypoints: np.ndarray
    headings: np.ndarray
    velocities: np.ndarray
    cumulative_distance: np.ndarray
    curvatures: np.ndarray
    closed: bool = False
    name: str = "path"
    _seg: tuple = field(default=None, init=False, repr=False)

    def __post_init__(self):
        n = len(self.waypoints)
        if n < 2:
            raise MalformedTrackError("a path needs at least 2 waypoints")
        for arr in (self.headings, self.velocities, self.cumulative_distance, self.curvatures):
            if len(arr) != n:
                raise MalformedTrackError("all per-waypoint arrays must have equal length")
        start = self.waypoints
        end = np.roll(start, -1, axis=0) if self.closed else start[1:]
        start = start if self.closed else start[:-1]
        vec = end - start
        length = np.hypot(vec[:, 0], vec[:, 1])
        if np.any(length <= 0):
            raise MalformedTrackError("consecutive waypoints coincide")
        s0 = np.concatenate([[0.0], np.cumsum(length)[:-1]])
        self._seg = (start, vec, length, s0, np.arctan2(vec[:, 1], vec[:, 0]))

    def __len__(self):
        return len(self.waypoints)

    @property
    def total_length(self) -> float:
        _, _, length, s0, _ = self._seg
        return float(s0[-1] + length[-1])

    @property
    def spacing(self) -> float:
        return float(np.mean(self._seg[2]))

    def wrap_s(self, s):
        return np.mod(s, self.total_length) if self.closed else s

    def ds(self, a, b):
        """Signed arc-length difference a - b, shortest way round on closed paths."""
        diff = np.asarray(a, dtype=float) - b
        if self.closed:
            L = self.total_length
            diff = np.mod(diff + 0.5 * L, L) - 0.5 * L
        return float(diff) if np.ndim(diff) == 0 else diff

    def heading_at(self, s: float) -> float:
        """Heading of the segment containing arc length ``s``."""
        _, _, length, s0, seg_heading = self._seg
        s = float(self.wrap_s(s))
        i = int(np.clip(np.searchsorted(s0, s, side="right") - 1, 0, len(s0) - 1))
        return float(seg_heading[i])

    def point_at(self, s: float) -> np.ndarray:
        """Linear interpolation of the polyline at arc length ``s``."""
        start, vec, length, s0, _ = self._seg
        s = float(self.wrap_s(s))
        i = int(np.clip(np.searchsorted(s0, s, side="right") - 1, 0, len(s0) - 1))
        t = (s - s0[i]) / length[i]
        if not self.closed:
            t = min(max(t, 0.0), 1.0) if 0 < i < len(s0) - 1 else t
        return start[i] + t * vec[i]

    def project_many(self, points, s_hint=None, window: float = 15.0):
        """Vectorised projection of (P, 2) points; returns (s, d, heading, index) arrays."""
        start, vec, length, s0, seg_heading = self._seg
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        rel = pts[:, None, :] - start[None, :, :]
        t = np.einsum("psk,sk->ps", rel, vec) / (length * length)
        lo = np.zeros_like(length)
        hi = np.ones_like(length)
        if not self.closed:
            lo[0] = -np.inf
            hi[-1] = np.inf
        t = np.clip(t, lo, hi)
        foot = start[None] + t[..., None] * vec[None]
        off = pts[:, None, :] - foot
        dist = np.hypot(off[..., 0], off[..., 1])
        if s_hint is not None:
            mid = s0 + 0.5 * length
            hint = np.broadcast_to(np.asarray(s_hint, dtype=float), (len(pts),))
            gap = np.abs(self.ds(mid[None, :], hint[:, None])) if self.closed \
                else np.abs(mid[None, :] - hint[:, None])
            far = gap > window + 0.5 * length[None, :]
            far[far.all(axis=1)] = False
            dist = np.where(far, np.inf, dist)
        idx = np.argmin(dist, axis=1)
        rows = np.arange(len(pts))
        tt = t[rows, idx]
        s = s0[idx] + tt * length[idx]
        cross = vec[idx, 0] * off[rows, idx, 1] - vec[idx, 1] * off[rows, idx, 0]
        d = np.sign(cross) * dist[rows, idx]
        if self.closed:
            s = np.mod(s, self.total_length)
        return s, d, seg_heading[idx], idx

    def check_domain(self, s):
        """Raise EndOfPath if any arc length lies beyond the far end of an open path."""
        if not self.closed and np.max(s) > self.total_length:
            raise EndOfPath(f"s={float(np.max(s)):.2f} m is past the end of the path")

    def project(self, p, s_hint=None, window: float = 15.0) -> Projection:
        s, d, h, i = self.project_many(np.asarray(p, dtype=float)[None, :], s_hint, window)
        return Projection(float(s[0]), float(d[0]), float(h[0]), int(i[0]))


# ------------------------------------------------------------------ builders

def menger_curvature(points: np.ndarray, closed: bool) -> np.ndarray:
    """Signed curvature (left turns positive) through consecutive triples."""
    n = len(points)
    if n < 3:
        return np.zeros(n)
    if closed:
        a, b, c = np.roll(points, 1, axis=0), points, np.roll(points, -1, axis=0)
    else:
        a, b, c = points[:-2], points[1:-1], points[2:]
    ab, bc, ca = b - a, c - b, a - c
    cross = ab[:, 0] * bc[:, 1] - ab[:, 1] * bc[:, 0]
    denom = np.hypot(*ab.T) * np.hypot(*bc.T) * np.hypot(*ca.T)
    k = np.where(denom > 0, 2.0 * cross / np.where(denom > 0, denom, 1.0), 0.0)
    if not closed:
        k = np.concatenate([[k[0]], k, [k[-1]]])
    return k


def resample_polyline(points: np.ndarray, spacing: float, closed: bool) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    ring = np.vstack([pts, pts[:1]]) if closed else pts
    seg = np.hypot(*np.diff(ring, axis=0).T)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1]
    if closed:
        n = max(int(round(total / spacing)), 3)
        targets = np.arange(n) * (total / n)
    else:
        n = max(int(round(total / spacing)), 1)
        targets = np.linspace(0.0, total, n + 1)
    return np.column_stack([np.interp(targets, s, ring[:, 0]), np.interp(targets, s, ring[:, 1])])


def path_from_points(points, closed: bool, speed: float = DEFAULT_SPEED,
                     spacing: float | None = DEFAULT_SPACING, name: str = "path") -> ReferencePath:
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
        raise MalformedTrackError("need at least 2 (x, y) points")
    if not np.all(np.isfinite(pts)):
        raise TrackParseError("non-finite coordinate")
    if spacing is not None:
        pts = resample_polyline(pts, spacing, closed)
    nxt = np.roll(pts, -1, axis=0) if closed else np.vstack([pts[1:], pts[-1:]])
    vec = nxt - pts
    if not closed:
        vec[-1] = pts[-1] - pts[-2]
    headings = np.arctan2(vec[:, 1], vec[:, 0])
    seg = np.hypot(*np.diff(pts, axis=0).T)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    return ReferencePath(pts, headings, np.full(len(pts), float(speed)), cum,
                         menger_curvature(pts, closed), closed=closed, name=name)


class _Turtle:
    """Closed or open path built from straight lines and circular arcs."""

    def __init__(self, x=0.0, y=0.0, heading=0.0):
        self.start = (x, y, heading)
        self.pieces = []  # (length, curvature, x0, y0, h0)
        self.x, self.y, self.h = x, y, heading

    def line(self, length):
        self.pieces.append((length, 0.0, self.x, self.y, self.h))
        self.x += length * math.cos(self.h)
        self.y += length * math.sin(self.h)
        return self

    def arc(self, radius, angle):
        """Turn by ``angle`` (positive = left) on a circle of ``radius``."""
        k = math.copysign(1.0 / radius, angle)
        length = radius * abs(angle)
        self.pieces.append((length, k, self.x, self.y, self.h))
        x, y, h = self._advance(self.x, self.y, self.h, k, length)
        self.x, self.y, self.h = x, y, h
        return self

    @staticmethod
    def _advance(x, y, h, k, s):
        if k == 0.0:
            return x + s * math.cos(h), y + s * math.sin(h), h
        h1 = h + k * s
        return x + (math.sin(h1) - math.sin(h)) / k, y - (math.cos(h1) - math.cos(h)) / k, h1

    @property
    def length(self):
        return sum(p[0] for p in self.pieces)

    @property
    def max_curvature(self):
        return max(abs(p[1]) for p in self.pieces)

    def closure_error(self):
        x0, y0, h0 = self.start
        return math.hypot(self.x - x0, self.y - y0), abs(wrap_angle(self.h - h0))

    def sample(self, s_values):
        bounds = np.cumsum([0.0] + [p[0] for p in self.pieces])
        out = np.empty((len(s_values), 2))
        for j, s in enumerate(s_values):
            i = int(np.clip(np.searchsorted(bounds, s, side="right") - 1, 0, len(self.pieces) - 1))
            _, k, x, y, h = self.pieces[i]
            out[j] = self._advance(x, y, h, k, s - bounds[i])[:2]
        return out

    def to_path(self, spacing, speed, name):
        dist, ang = self.closure_error()
        if dist > 1e-6 or ang > 1e-9:
            raise MalformedTrackError(f"{name}: construction does not close ({dist:.3g} m)")
        n = max(int(round(self.length / spacing)), 3)
        pts = self.sample(np.arange(n) * (self.length / n))
        return path_from_points(pts, closed=True, speed=speed, spacing=None, name=name)


def _check_feasible(kappa: float, limit: float, name: str):
    if kappa > limit + 1e-12:
        raise FeasibilityError(f"{name}: curvature {kappa:.4f} 1/m exceeds the feasible {limit:.4f} 1/m")


def oval(r: float = 30.0, straight: float = 200.0, spacing=DEFAULT_SPACING,
         speed=DEFAULT_SPEED, max_curvature=MAX_CURVATURE) -> ReferencePath:
    """Two straights joined by two left semicircles, driven counter-clockwise."""
    _check_feasible(1.0 / r, max_curvature, "oval")
    t = _Turtle().line(straight).arc(r, math.pi).line(straight).arc(r, math.pi)
    return t.to_path(spacing, speed, f"oval(r={r:g},straight={straight:g})")


def figure_eight(r: float = 40.0, spacing=DEFAULT_SPACING, speed=DEFAULT_SPEED,
                 max_curvature=MAX_CURVATURE) -> ReferencePath:
    """Two 270-degree lobes (right-hand then left-hand) joined by crossing diagonals."""
    _check_feasible(1.0 / r, max_curvature, "figure_eight")
    a = r / math.sqrt(2.0)
    t = _Turtle(-a, -a, math.pi / 4)
    t.line(2.0 * r).arc(r, -1.5 * math.pi).line(2.0 * r).arc(r, 1.5 * math.pi)
    return t.to_path(spacing, speed, f"figure_eight(r={r:g})")


def chicane(r: float = 30.0, straight: float = 200.0, chicane_radius: float = 25.0,
            chicane_angle: float = 0.5, spacing=DEFAULT_SPACING, speed=DEFAULT_SPEED,
            max_curvature=MAX_CURVATURE) -> ReferencePath:
    """Oval whose first straight carries a left-right-left S bend."""
    _check_feasible(max(1.0 / r, 1.0 / chicane_radius), max_curvature, "chicane")
    s_len = 4.0 * chicane_radius * math.sin(chicane_angle)
    if s_len >= straight:
        raise MalformedTrackError("chicane longer than the straight carrying it")
    lead = 0.5 * (straight - s_len)
    t = _Turtle().line(lead)
    t.arc(chicane_radius, chicane_angle).arc(chicane_radius, -2 * chicane_angle)
    t.arc(chicane_radius, chicane_angle).line(lead)
    t.arc(r, math.pi).line(straight).arc(r, math.pi)
    return t.to_path(spacing, speed, f"chicane(r={r:g},straight={straight:g})")


def random_circuit(seed: int = 0, kappa_max: float = 0.05, harmonics: int = 4,
                   spacing=DEFAULT_SPACING, speed=DEFAULT_SPEED,
                   max_curvature=MAX_CURVATURE) -> ReferencePath:
    """Star-shaped closed curve r(phi) = 1 + sum a_k cos(k phi + p_k), scaled to kappa_max."""
    _check_feasible(kappa_max, max_curvature, "random_circuit")
    rng = np.random.default_rng(seed)
    ks = np.arange(2, 2 + harmonics)
    amp = rng.uniform(0.3, 1.0, harmonics) / ks ** 1.5
    amp *= 0.3 / amp.sum()
    phase = rng.uniform(0.0, 2.0 * np.pi, harmonics)
    phi = np.linspace(0.0, 2.0 * np.pi, 20000, endpoint=False)
    arg = np.outer(phi, ks) + phase
    rad = 1.0 + np.cos(arg) @ amp
    d1 = -(np.sin(arg) * ks) @ amp
    d2 = -(np.cos(arg) * ks ** 2) @ amp
    kappa = (rad ** 2 + 2 * d1 ** 2 - rad * d2) / (rad ** 2 + d1 ** 2) ** 1.5
    scale = np.max(np.abs(kappa)) / kappa_max
    pts = scale * np.column_stack([rad * np.cos(phi), rad * np.sin(phi)])
    return path_from_points(pts, closed=True, speed=speed, spacing=spacing,
                            name=f"random_circuit(seed={seed})")


GENERATORS = {
    "oval": oval,
    "figure_eight": figure_eight,
    "chicane": chicane,
    "random_circuit": random_circuit,
}


def generate_synthetic_track(kind: str, **params) -> ReferencePath:
    if kind not in GENERATORS:
        raise ValueError(f"unknown track kind {kind!r}; choose from {sorted(GENERATORS)}")
    return GENERATORS[kind](**params)


_SPEC_RE = re.compile(r"^\s*([a-z_]+)\s*(?:[:(]\s*(.*?)\s*\)?\s*)?$")


def parse_generator_spec(spec: str) -> tuple[str, dict]:
    """``oval:r=30,straight=200`` or ``oval(r=30, straight=200)`` -> (kind, params)."""
    m = _SPEC_RE.match(spec)
    if not m or m.group(1) not in GENERATORS:
        raise TrackParseError(f"not a generator spec: {spec!r}")
    params = {}
    body = m.group(2) or ""
    for item in filter(None, (p.strip() for p in body.split(","))):
        key, _, value = item.partition("=")
        if not value:
            raise TrackParseError(f"bad parameter {item!r} in {spec!r}")
        value = float(value)
        params[key.strip()] = int(value) if key.strip() == "seed" else value
    return m.group(1), params


def read_track_csv(path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"x", "y"} <= set(reader.fieldnames):
            raise TrackParseError(f"{path}: header must contain x,y")
        for line_no, row in enumerate(reader, start=2):
            try:
                x, y = float(row["x"]), float(row["y"])
            except (TypeError, ValueError):
                raise TrackParseError(f"{path}:{line_no}: unreadable coordinate") from None
            if not (math.isfinite(x) and math.isfinite(y)):
                raise TrackParseError(f"{path}:{line_no}: non-finite coordinate")
            rows.append((x, y))
    if len(rows) < 2:
        raise MalformedTrackError(f"{path}: fewer than 2 points")
    return np.array(rows)


def load_track(source, closed: bool | None = None, spacing: float = DEFAULT_SPACING,
               speed: float = DEFAULT_SPEED) -> ReferencePath:
    """Load a CSV of x,y waypoints or build a named generator spec.

    For CSV input ``closed=None`` auto-detects a loop: a duplicated first point,
    or a closing gap no larger than 1.5 times the median spacing.
    """
    if isinstance(source, ReferencePath):
        return source
    text = str(source)
    if not Path(text).suffix.lower() == ".csv" and _SPEC_RE.match(text):
        kind, params = parse_generator_spec(text)
        params.setdefault("spacing", spacing)
        params.setdefault("speed", speed)
        return generate_synthetic_track(kind, **params)
    pts = read_track_csv(text)
    if closed is None:
        gaps = np.hypot(*np.diff(pts, axis=0).T)
        gap = float(np.hypot(*(pts[-1] - pts[0])))
        if gap < 1e-9 and len(pts) > 3:
            pts, closed = pts[:-1], True
        else:
            closed = len(pts) > 3 and gap <= 1.5 * float(np.median(gaps))
    return path_from_points(pts, closed=closed, speed=speed, spacing=spacing,
                            name=Path(text).stem)


# ---------------------------------------------------------------- operations

def frenet_coordinate(path: ReferencePath, p, s_hint=None) -> FrenetCoord:
    proj = path.project(p, s_hint=s_hint)
    return FrenetCoord(proj.s, proj.d)


def desired_waypoint(path: ReferencePath, state, s_hint=None) -> DesiredWaypoint:
    """First waypoint whose cumulative distance exceeds the ego's arc length."""
    s_k = path.project(np.asarray(state[:2], dtype=float), s_hint=s_hint).s
    return waypoint_after(path, s_k)


def waypoint_after(path: ReferencePath, s_k: float) -> DesiredWaypoint:
    cd = path.cumulative_distance
    idx = int(np.searchsorted(cd, s_k, side="right"))
    if idx >= len(cd):
        if not path.closed:
            raise EndOfPath(f"s={s_k:.2f} m is past the end of the path")
        idx = 0
    return DesiredWaypoint(path.waypoints[idx].copy(), float(path.headings[idx]),
                           float(path.velocities[idx]), idx, float(s_k))


def classify_segments(path: ReferencePath, threshold: float = 0.03) -> np.ndarray:
    """Per-waypoint labels: Straight iff |kappa| < threshold."""
    return np.where(np.abs(path.curvatures) < threshold, STRAIGHT, TURN)
