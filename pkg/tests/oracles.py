"""Independent reference computations used to freeze expected test values."""

from __future__ import annotations

import math

import numpy as np

from sttrack.core import Box7, StateVector


def mc_bev_iou(a: Box7, b: Box7, n_samples: int = 1_000_000, seed: int = 0) -> float:
    """Monte-Carlo BEV IoU: uniform samples over the joint bounding region."""
    rng = np.random.default_rng(seed)
    corners = np.array(a.footprint() + b.footprint())
    lo = corners.min(axis=0)
    hi = corners.max(axis=0)
    pts = rng.uniform(lo, hi, size=(n_samples, 2))

    def inside(box: Box7) -> np.ndarray:
        ch, sh = math.cos(box.heading), math.sin(box.heading)
        dx = pts[:, 0] - box.center[0]
        dy = pts[:, 1] - box.center[1]
        along = dx * ch + dy * sh
        across = -dx * sh + dy * ch
        return (np.abs(along) <= 0.5 * box.size[1]) & (np.abs(across) <= 0.5 * box.size[0])

    in_a = inside(a)
    in_b = inside(b)
    union = (in_a | in_b).sum()
    if union == 0:
        return 0.0
    return float((in_a & in_b).sum() / union)


def euler_extrapolate(s: StateVector, dt: float, n_steps: int = 1000) -> StateVector:
    """Sub-stepped explicit integration of the constant-acceleration ODE."""
    px, py = s.position
    vx, vy = s.velocity
    ax, ay = s.acceleration
    h = dt / n_steps
    for _ in range(n_steps):
        px += vx * h + 0.5 * ax * h * h
        py += vy * h + 0.5 * ay * h * h
        vx += ax * h
        vy += ay * h
    return StateVector((px, py), (vx, vy), (ax, ay))
