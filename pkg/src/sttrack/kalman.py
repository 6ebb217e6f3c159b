"""Constant-acceleration Kalman filter baseline.

State is [x, y, vx, vy, ax, ay] with a white-noise-jerk process model, so
the filter estimates the same position/velocity/acceleration triple the
learned tracker emits. Only the box center is measured; box size and
heading ride along from the latest associated detection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .assign import FORBIDDEN
from .core import Box7, Detection, StateVector, bev_iou


class KalmanDivergenceError(RuntimeError):
    """Covariance lost positive-definiteness: the run cannot continue."""


@dataclass(frozen=True, slots=True)
class KfParams:
    process_noise_accel_sigma: float = 1.5  # jerk intensity, (m/s^2)/sqrt(s)
    meas_noise_sigma: float = 0.1  # meters
    initial_velocity_sigma: float = 10.0
    initial_accel_sigma: float = 10.0
    iou_gate: float = 0.1

    def __post_init__(self) -> None:
        positives = (
            self.process_noise_accel_sigma,
            self.meas_noise_sigma,
            self.initial_velocity_sigma,
            self.initial_accel_sigma,
        )
        if any(p <= 0 for p in positives):
            raise ValueError("Kalman noise parameters must be positive")
        if not 0.0 <= self.iou_gate < 1.0:
            raise ValueError(f"iou_gate must be in [0, 1), got {self.iou_gate}")


@dataclass(frozen=True, slots=True)
class KfState:
    mean: np.ndarray  # (6,) [x, y, vx, vy, ax, ay]
    covariance: np.ndarray  # (6, 6)

    def state_vector(self) -> StateVector:
        m = self.mean
        return StateVector(
            (float(m[0]), float(m[1])),
            (float(m[2]), float(m[3])),
            (float(m[4]), float(m[5])),
        )


_H = np.zeros((2, 6))
_H[0, 0] = 1.0
_H[1, 1] = 1.0


def transition_matrix(dt: float) -> np.ndarray:
    f = np.eye(6)
    f[0, 2] = f[1, 3] = f[2, 4] = f[3, 5] = dt
    f[0, 4] = f[1, 5] = 0.5 * dt * dt
    return f


def process_noise(dt: float, sigma_jerk: float) -> np.ndarray:
    """Discretized continuous white-noise jerk covariance."""
    q = sigma_jerk * sigma_jerk
    d5, d4, d3, d2 = dt**5 / 20.0, dt**4 / 8.0, dt**3 / 6.0, dt**2 / 2.0
    block = q * np.array([[d5, d4, d3], [d4, dt**3 / 3.0, d2], [d3, d2, dt]])
    out = np.zeros((6, 6))
    for axis in range(2):
        idx = [axis, axis + 2, axis + 4]
        out[np.ix_(idx, idx)] = block
    return out


def init_state(position: tuple[float, float], p: KfParams) -> KfState:
    mean = np.zeros(6)
    mean[0], mean[1] = position
    cov = np.diag(
        [
            p.meas_noise_sigma**2,
            p.meas_noise_sigma**2,
            p.initial_velocity_sigma**2,
            p.initial_velocity_sigma**2,
            p.initial_accel_sigma**2,
            p.initial_accel_sigma**2,
        ]
    )
    return KfState(mean, cov)


def predict(s: KfState, dt: float, p: KfParams) -> KfState:
    if dt <= 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    f = transition_matrix(dt)
    mean = f @ s.mean
    cov = f @ s.covariance @ f.T + process_noise(dt, p.process_noise_accel_sigma)
    cov = 0.5 * (cov + cov.T)
    return KfState(mean, cov)


def update(s: KfState, z: np.ndarray | tuple[float, float], p: KfParams) -> KfState:
    z = np.asarray(z, dtype=float).reshape(2)
    if not np.isfinite(z).all():
        raise ValueError(f"measurement must be finite, got {z}")
    r = p.meas_noise_sigma**2 * np.eye(2)
    innovation = z - _H @ s.mean
    s_mat = _H @ s.covariance @ _H.T + r
    gain = s.covariance @ _H.T @ np.linalg.inv(s_mat)
    mean = s.mean + gain @ innovation
    ikh = np.eye(6) - gain @ _H
    cov = ikh @ s.covariance @ ikh.T + gain @ r @ gain.T  # Joseph form
    cov = 0.5 * (cov + cov.T)
    _check_covariance(cov, s)
    return KfState(mean, cov)


def _check_covariance(cov: np.ndarray, before: KfState) -> None:
    asym = float(np.abs(cov - cov.T).max())
    eigmin = float(np.linalg.eigvalsh(cov).min())
    # materially negative relative to the covariance scale, not roundoff
    floor = -1e-12 * (1.0 + abs(float(np.trace(cov))))
    if asym >= 1e-9 or eigmin <= floor:
        raise KalmanDivergenceError(
            "covariance update failed: "
            f"max|P - P^T| = {asym:.3e}, min eigenvalue = {eigmin:.3e}, "
            f"prior trace = {float(np.trace(before.covariance)):.3e}"
        )


def predicted_box(s: KfState, last_box: Box7) -> Box7:
    """Carry the last associated box to the predicted center."""
    return Box7(
        (float(s.mean[0]), float(s.mean[1]), last_box.center[2]),
        last_box.size,
        last_box.heading,
    )


def kf_association_cost(
    track_pred: KfState, last_box: Box7, det: Detection, p: KfParams
) -> float:
    """1 - BEV IoU between the predicted box and the detection, gated."""
    iou = bev_iou(predicted_box(track_pred, last_box), det.box)
    if iou <= p.iou_gate:
        return FORBIDDEN
    return 1.0 - iou
