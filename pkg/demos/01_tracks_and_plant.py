"""Tracks, Frenet coordinates and the vehicle plant.

Builds the three synthetic circuits, shows how a point is projected onto a path,
then drives the plant open-loop to show what the D1 and D2 perturbations do.
"""
import math

import numpy as np

from glclab.plant import ControlInput, Perturbation, PlantState, get_profile, observe, plant_step
from glclab.track import classify_segments, frenet_coordinate, load_track

print("Synthetic circuits (1 m waypoint spacing):")
for name in ("oval", "figure_eight", "chicane"):
    path = load_track(name)
    labels = classify_segments(path)
    print(f"  {name:13s} length {path.total_length:6.1f} m  max |kappa| {np.abs(path.curvatures).max():.3f}"
          f"  turn share {np.mean(labels == 'Turn'):.0%}")

oval = load_track("oval")
base, th = oval.point_at(100.0), oval.heading_at(100.0)
left = np.array([-math.sin(th), math.cos(th)])
for off in (1.0, -1.0):
    p = base + off * left
    s, d = frenet_coordinate(oval, p)
    print(f"point ({p[0]:.1f}, {p[1]:.1f}): s = {s:.2f} m, d = {d:+.2f} m (left of travel is positive)")

params = get_profile("profile-A")
print(f"\nprofile-A: mass {params.mass} kg, wheelbase {params.wheelbase} m")


def coast(pert, steps=50, delta=0.0):
    s = PlantState(v_x=10.0)
    for _ in range(steps):
        s = plant_step(s, ControlInput(delta, 0.2), params, pert)
    return observe(s)


# 5 s straight ahead with zero commanded steering
for name in ("none", "d1+", "d1-"):
    x, y, th, v = coast(Perturbation.named(name))
    print(f"  {name:5s} after 5 s: y = {y:+6.2f} m, heading {math.degrees(th):+6.2f} deg")

# a hard 0.2 rad turn: halved friction lets the rear slide out
for name in ("none", "d2"):
    x, y, th, v = coast(Perturbation.named(name), steps=30, delta=0.2)
    print(f"  {name:5s} 3 s at delta=0.2: heading {math.degrees(th):6.1f} deg")
