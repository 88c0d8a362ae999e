"""Policy-rate action filtering, reference interpolation and the joint impedance law."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


@dataclass
class FilterState:
    """First-order Butterworth low-pass, discretized with the bilinear transform.

    ``y_k = b (u_k + u_{k-1}) + a y_{k-1}`` with ``w = tan(pi fc dt)``,
    ``a = (1 - w) / (1 + w)`` and ``b = w / (1 + w)``.  The bilinear map
    keeps the -3 dB point exactly at ``fc``.
    """

    cutoff_hz: float
    dt: float
    prev_in: np.ndarray | None = None
    prev_out: np.ndarray | None = None
    a: float = field(init=False)
    b: float = field(init=False)

    def __post_init__(self):
        if self.cutoff_hz <= 0 or self.dt <= 0:
            raise ContractError("filter cutoff and sample interval must be positive")
        if self.cutoff_hz >= 0.5 / self.dt:
            raise ContractError(
                f"cutoff {self.cutoff_hz} Hz is not below Nyquist ({0.5 / self.dt} Hz)")
        w = math.tan(math.pi * self.cutoff_hz * self.dt)
        self.a = (1.0 - w) / (1.0 + w)
        self.b = w / (1.0 + w)

    def reset(self):
        self.prev_in = self.prev_out = None


def lowpass_step(fs: FilterState, u) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if fs.prev_in is None:
        fs.prev_in = u.copy()
        fs.prev_out = u.copy()
    y = fs.b * (u + fs.prev_in) + fs.a * fs.prev_out
    fs.prev_in = u.copy()
    fs.prev_out = y
    return y


@dataclass(frozen=True)
class RateLimiter:
    max_speed: float   # rad/s
    dt: float          # substep interval, s

    def __post_init__(self):
        if self.max_speed <= 0 or self.dt <= 0:
            raise ContractError("speed limit and substep interval must be positive")


def interpolate_and_limit(prev_ref, next_ref, substeps: int, limiter: RateLimiter) -> np.ndarray:
    """Linear ramp prev -> next over ``substeps``, per-substep increment clipped.

    Returns a (substeps, n_joints) array; the last row is the reference
    reached at the end of the policy step (short of ``next_ref`` if clipped).
    """
    if substeps < 1:
        raise ContractError("substeps must be >= 1")
    prev = np.asarray(prev_ref, dtype=np.float64)
    nxt = np.asarray(next_ref, dtype=np.float64)
    cap = limiter.max_speed * limiter.dt
    inc = np.clip((nxt - prev) / substeps, -cap, cap)
    k = np.arange(1, substeps + 1, dtype=np.float64)[:, None]
    return prev + k * inc


@dataclass(frozen=True)
class ImpedanceGains:
    kp: np.ndarray
    kd: np.ndarray

    def __post_init__(self):
        kp = np.atleast_1d(np.asarray(self.kp, dtype=np.float64))
        kd = np.atleast_1d(np.asarray(self.kd, dtype=np.float64))
        if kp.shape != kd.shape or np.any(kp < 0) or np.any(kd < 0):
            raise ContractError("gains must be non-negative and of equal length")
        object.__setattr__(self, "kp", kp)
        object.__setattr__(self, "kd", kd)


def impedance_torque(q_des, q_meas, qd_meas, gains: ImpedanceGains,
                     torque_limit: float | None = None) -> np.ndarray:
    """Spring-damper law ``Kp (q_des - q) - Kd qdot``, optionally saturated."""
    q_des = np.asarray(q_des, dtype=np.float64)
    q_meas = np.asarray(q_meas, dtype=np.float64)
    qd_meas = np.asarray(qd_meas, dtype=np.float64)
    if not (q_des.shape == q_meas.shape == qd_meas.shape == gains.kp.shape):
        raise ContractError("impedance inputs and gains must have equal lengths")
    tau = gains.kp * (q_des - q_meas) - gains.kd * qd_meas
    if torque_limit is not None:
        tau = np.clip(tau, -torque_limit, torque_limit)
    return tau
