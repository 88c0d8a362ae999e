"""Planar two-link pendulum with impedance-mode joints and multimodal tasks.

Conventions: ``q1`` is the absolute angle of link 1 measured from the upward
vertical, ``q2`` the relative elbow angle, both wrapped to (-pi, pi].  The
link direction for absolute angle ``th`` is ``(sin th, cos th)`` in the
(x, z) plane, so ``q = (0, 0)`` is fully upright and ``q = (pi, 0)`` hangs.
Link 2 plays the role of the robot body: its orientation, the tip height and
the tip velocity are what the reward terms and observations see.

Tasks:

* ``recovery``   - bring link 2 upright from any catalogue pose and hold it.
* ``rhythmic``   - phase-locked swing ``q_ref(t) = (A sin wt, -A sin wt)`` that
  keeps link 2 vertical while the tip oscillates.
* ``multimodal`` - both of the above plus a tip goal sampled per episode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .control import FilterState, ImpedanceGains, RateLimiter, interpolate_and_limit, lowpass_step
from .errors import ContractError
from .rewards import FeatureRecord, PhaseClock, RewardSpec, TASK_WEIGHTS, phase_vector, term_values

TASKS = ("recovery", "rhythmic", "multimodal")
NETWORKS = ("gating", "synthesized", "stage1-recovery", "stage1-rhythmic", "full")
MODES = ("recovery", "rhythmic", "goal-tracking")

# Full observation layout.  Raw wrapped angles come first (the smoothing loss
# reads them); networks see the continuous (sin, cos) encoding instead.
FULL_LAYOUT = ("q1", "q2", "sin_q1", "cos_q1", "sin_q2", "cos_q2",
               "grav_x", "grav_y", "grav_z", "ang_vel_1", "ang_vel_2",
               "tip_vx", "tip_vz", "phase_sin", "phase_cos", "goal_dx", "goal_dz")
JOINT_INDEX = (0, 1)
GATING_LAYOUT = ("grav_x", "grav_y", "grav_z", "ang_vel_1", "ang_vel_2",
                 "tip_vx", "tip_vz", "goal_dx", "goal_dz")
POLICY_LAYOUT = FULL_LAYOUT[2:15]
CRITIC_LAYOUT = FULL_LAYOUT[2:]
GATING_INDEX = np.array([FULL_LAYOUT.index(k) for k in GATING_LAYOUT])
POLICY_INDEX = np.array([FULL_LAYOUT.index(k) for k in POLICY_LAYOUT])
CRITIC_INDEX = np.array([FULL_LAYOUT.index(k) for k in CRITIC_LAYOUT])
# Stage-1 networks use the synthesized layout so they can seed an expert bank;
# inputs a task does not select are held at zero.
STAGE1_MASK = {
    "recovery": np.array([k not in ("tip_vx", "tip_vz", "phase_sin", "phase_cos")
                          for k in POLICY_LAYOUT], dtype=np.float64),
    "rhythmic": np.ones(len(POLICY_LAYOUT)),
}

# Task-phase analog of the reward columns: terms the pendulum can produce.
PENDULUM_TERMS = {
    "recovery": {"base_pose", "base_height", "base_velocity", "torque_regularisation",
                 "joint_velocity_regularisation"},
    "rhythmic": {"base_pose", "base_height", "base_velocity", "torque_regularisation",
                 "joint_velocity_regularisation", "yaw_velocity", "joint_reference"},
    "multimodal": {"base_pose", "base_height", "base_velocity", "torque_regularisation",
                   "joint_velocity_regularisation", "yaw_velocity", "joint_reference",
                   "heading", "goal_position"},
}
TASK_COLUMN = {"recovery": "recovery", "rhythmic": "trotting", "multimodal": "mela"}

_PI = math.pi
_TWO_PI = 2.0 * math.pi


def wrap_angle(x):
    """Map angles to (-pi, pi]."""
    return _PI - np.mod(_PI - np.asarray(x, dtype=np.float64), _TWO_PI)


@dataclass(frozen=True)
class EnvParams:
    l1: float = 0.5
    l2: float = 0.5
    m1: float = 1.0
    m2: float = 1.0
    gravity: float = 9.81
    damping: float = 0.05
    torque_limit: float = 15.0
    dt: float = 0.001

    def __post_init__(self):
        if min(self.l1, self.l2, self.m1, self.m2, self.dt, self.torque_limit) <= 0:
            raise ContractError("pendulum lengths, masses, dt and torque limit must be positive")
        if self.damping < 0:
            raise ContractError("damping must be non-negative")


@dataclass(frozen=True)
class TaskParams:
    policy_rate_hz: float = 25.0
    control_rate_hz: float = 1000.0
    filter_cutoff_hz: float = 5.0
    speed_limit_rad_s: float = 8.0
    kp: float = 700.0
    kd: float = 10.0
    episode_seconds: float = 20.0
    runaway_speed: float = 25.0
    orientation_limit_deg: float = 90.0
    rhythm_period: float = 0.6
    rhythm_amplitude: float = 0.15
    target_height: float = 1.0
    reset_noise: float = 0.05
    goal_radius_min: float = 0.3
    goal_radius_max: float = 1.0

    @property
    def substeps(self) -> int:
        n = self.control_rate_hz / self.policy_rate_hz
        if abs(n - round(n)) > 1e-9 or n < 1:
            raise ContractError("control rate must be an integer multiple of the policy rate")
        return int(round(n))


@dataclass
class EnvState:
    q: np.ndarray
    qd: np.ndarray
    t: float = 0.0
    goal: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0]))
    mode: str = "recovery"
    start: str = ""

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        self.qd = np.asarray(self.qd, dtype=np.float64)
        self.goal = np.asarray(self.goal, dtype=np.float64)
        if not (np.isfinite(self.q).all() and np.isfinite(self.qd).all() and math.isfinite(self.t)):
            raise ContractError("EnvState must be finite")
        self.q = wrap_angle(self.q)


# Nine reset poses (q1, q2, qd1, qd2) spanning easy and hard starts.
CATALOGUE: dict[str, tuple[float, float, float, float]] = {
    "upright": (0.0, 0.0, 0.0, 0.0),
    "hanging": (_PI, 0.0, 0.0, 0.0),
    "folded-left": (_PI / 2, 2.5, 0.0, 0.0),
    "folded-right": (-_PI / 2, -2.5, 0.0, 0.0),
    "horizontal-left": (_PI / 2, 0.0, 0.0, 0.0),
    "horizontal-right": (-_PI / 2, 0.0, 0.0, 0.0),
    "near-upright-perturbed": (0.3, -0.4, 0.5, -0.5),
    "fast-spinning": (2.0, 0.0, 6.0, -6.0),
    "crouched": (2.5, -2.2, 0.0, 0.0),
}
RHYTHMIC_CATALOGUE = ("rhythm-start",)


# -- dynamics ----------------------------------------------------------------

def _accel(p: EnvParams, q1, q2, w1, w2, t1, t2):
    lc1, lc2 = 0.5 * p.l1, 0.5 * p.l2
    i1 = p.m1 * p.l1 * p.l1 / 12.0
    i2 = p.m2 * p.l2 * p.l2 / 12.0
    c2, s2 = math.cos(q2), math.sin(q2)
    m11 = i1 + i2 + p.m1 * lc1 * lc1 + p.m2 * (p.l1 * p.l1 + lc2 * lc2 + 2.0 * p.l1 * lc2 * c2)
    m12 = i2 + p.m2 * (lc2 * lc2 + p.l1 * lc2 * c2)
    m22 = i2 + p.m2 * lc2 * lc2
    h = -p.m2 * p.l1 * lc2 * s2
    cor1 = h * (2.0 * w1 * w2 + w2 * w2)
    cor2 = -h * w1 * w1
    s12 = math.sin(q1 + q2)
    g1 = -(p.m1 * lc1 + p.m2 * p.l1) * p.gravity * math.sin(q1) - p.m2 * p.gravity * lc2 * s12
    g2 = -p.m2 * p.gravity * lc2 * s12
    r1 = t1 - p.damping * w1 - cor1 - g1
    r2 = t2 - p.damping * w2 - cor2 - g2
    det = m11 * m22 - m12 * m12
    return (m22 * r1 - m12 * r2) / det, (m11 * r2 - m12 * r1) / det


def _rk4(p: EnvParams, q1, q2, w1, w2, t1, t2):
    # torque held constant over the step (zero-order hold at the control rate)
    h = p.dt
    a1, b1 = _accel(p, q1, q2, w1, w2, t1, t2)
    a2, b2 = _accel(p, q1 + 0.5 * h * w1, q2 + 0.5 * h * w2, w1 + 0.5 * h * a1, w2 + 0.5 * h * b1, t1, t2)
    a3, b3 = _accel(p, q1 + 0.5 * h * (w1 + 0.5 * h * a1), q2 + 0.5 * h * (w2 + 0.5 * h * b1),
                    w1 + 0.5 * h * a2, w2 + 0.5 * h * b2, t1, t2)
    a4, b4 = _accel(p, q1 + h * (w1 + 0.5 * h * a2), q2 + h * (w2 + 0.5 * h * b2),
                    w1 + h * a3, w2 + h * b3, t1, t2)
    nq1 = q1 + h * (w1 + h / 6.0 * (a1 + a2 + a3))
    nq2 = q2 + h * (w2 + h / 6.0 * (b1 + b2 + b3))
    nw1 = w1 + h / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
    nw2 = w2 + h / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4)
    return nq1, nq2, nw1, nw2


def step(state: EnvState, tau, params: EnvParams = EnvParams()) -> EnvState:
    """Advance one control period ``params.dt`` with classical RK4."""
    tau = np.asarray(tau, dtype=np.float64)
    if tau.shape != (2,) or not np.isfinite(tau).all():
        raise ContractError(f"torque must be a finite 2-vector, got {tau}")
    if np.any(np.abs(tau) > params.torque_limit + 1e-12):
        raise ContractError(f"torque {tau} exceeds the limit {params.torque_limit}")
    q1, q2 = float(state.q[0]), float(state.q[1])
    w1, w2 = float(state.qd[0]), float(state.qd[1])
    q1, q2, w1, w2 = _rk4(params, q1, q2, w1, w2, float(tau[0]), float(tau[1]))
    return replace(state, q=np.array([q1, q2]), qd=np.array([w1, w2]), t=state.t + params.dt)


def kinematics(q, qd, p: EnvParams = EnvParams()):
    """Return (elbow, tip, tip velocity) in the (x, z) plane."""
    th1, th2 = q[0], q[0] + q[1]
    w1, w2 = qd[0], qd[0] + qd[1]
    elbow = np.array([p.l1 * math.sin(th1), p.l1 * math.cos(th1)])
    tip = elbow + np.array([p.l2 * math.sin(th2), p.l2 * math.cos(th2)])
    tip_v = np.array([p.l1 * math.cos(th1) * w1 + p.l2 * math.cos(th2) * w2,
                      -p.l1 * math.sin(th1) * w1 - p.l2 * math.sin(th2) * w2])
    return elbow, tip, tip_v


def mechanical_energy(q, qd, p: EnvParams = EnvParams()) -> float:
    """Kinetic + potential energy from link centre-of-mass motion (zero at the lowest pose)."""
    th1, th2 = q[0], q[0] + q[1]
    w1, w2 = qd[0], qd[0] + qd[1]
    lc1, lc2 = 0.5 * p.l1, 0.5 * p.l2
    v1 = np.array([lc1 * math.cos(th1), -lc1 * math.sin(th1)]) * w1
    v2 = (np.array([p.l1 * math.cos(th1), -p.l1 * math.sin(th1)]) * w1
          + np.array([lc2 * math.cos(th2), -lc2 * math.sin(th2)]) * w2)
    kin = 0.5 * p.m1 * v1 @ v1 + 0.5 * p.m2 * v2 @ v2
    kin += 0.5 * (p.m1 * p.l1 ** 2 / 12.0) * w1 ** 2 + 0.5 * (p.m2 * p.l2 ** 2 / 12.0) * w2 ** 2
    z1 = lc1 * math.cos(th1)
    z2 = p.l1 * math.cos(th1) + lc2 * math.cos(th2)
    z_min = -(p.m1 * lc1 + p.m2 * (p.l1 + lc2)) * p.gravity
    return kin + p.gravity * (p.m1 * z1 + p.m2 * z2) - z_min


def link2_angle(q) -> float:
    """Absolute link-2 angle from the upward vertical, wrapped."""
    return float(wrap_angle(q[0] + q[1]))


def gravity_vector(q) -> np.ndarray:
    """Gravity direction expressed in the link-2 frame; (0, 0, -1) when upright."""
    th = q[0] + q[1]
    return np.array([math.sin(th), 0.0, -math.cos(th)])


# -- tasks ---------------------------------------------------------------------

def rhythm_reference(t: float, tp: TaskParams):
    """Reference joint positions and velocities of the rhythmic swing."""
    w = _TWO_PI / tp.rhythm_period
    s, c = math.sin(w * t), math.cos(w * t)
    a = tp.rhythm_amplitude
    return np.array([a * s, -a * s]), np.array([a * w * c, -a * w * c])


def reset(task: str, rng: np.random.Generator, tp: TaskParams = TaskParams(),
          catalogue: dict = CATALOGUE) -> EnvState:
    if task not in TASKS:
        raise ContractError(f"unknown task {task!r}")
    names = list(catalogue) if task == "recovery" else (
        list(RHYTHMIC_CATALOGUE) if task == "rhythmic" else list(catalogue) + list(RHYTHMIC_CATALOGUE))
    name = names[int(rng.integers(len(names)))]
    if name in RHYTHMIC_CATALOGUE:
        q, qd = rhythm_reference(0.0, tp)
    else:
        q1, q2, w1, w2 = catalogue[name]
        q, qd = np.array([q1, q2]), np.array([w1, w2])
    noise = tp.reset_noise
    q = q + rng.uniform(-noise, noise, 2)
    qd = qd + rng.uniform(-noise, noise, 2)
    goal = np.array([0.0, 1.0])
    if task == "multimodal":
        r = math.sqrt(rng.uniform(tp.goal_radius_min ** 2, tp.goal_radius_max ** 2))
        ang = rng.uniform(0.0, _TWO_PI)
        goal = np.array([r * math.sin(ang), r * math.cos(ang)])
    state = EnvState(q=q, qd=qd, t=0.0, goal=goal, start=name)
    state.mode = mode_label(state, task)
    return state


def mode_label(state: EnvState, task: str) -> str:
    """Scripted mode label: fallen -> recovery, otherwise by task / goal bearing."""
    if task == "recovery":
        return "recovery"
    if task == "rhythmic":
        return "rhythmic"
    if abs(link2_angle(state.q)) > math.radians(45.0):
        return "recovery"
    bearing = math.atan2(state.goal[0], state.goal[1])
    return "goal-tracking" if abs(bearing) > math.radians(30.0) else "rhythmic"


def terminate(state: EnvState, task: str, tp: TaskParams = TaskParams()) -> tuple[bool, str | None]:
    """First triggered termination criterion, or (False, None)."""
    if task not in TASKS:
        raise ContractError(f"unknown task {task!r}")
    if task != "recovery":
        if np.any(np.abs(state.qd) > tp.runaway_speed):
            return True, "runaway"
        if task == "rhythmic" and abs(link2_angle(state.q)) > math.radians(tp.orientation_limit_deg):
            return True, "orientation"
    if state.t >= tp.episode_seconds - 1e-9:
        return True, "timeout"
    return False, None


def observe(state: EnvState, network: str, tp: TaskParams = TaskParams(),
            params: EnvParams = EnvParams()) -> np.ndarray:
    if network not in NETWORKS:
        raise ContractError(f"unknown observation layout {network!r}")
    full = full_observation(state, tp, params)
    if network == "full":
        return full
    if network == "gating":
        return full[GATING_INDEX]
    obs = full[POLICY_INDEX]
    if network.startswith("stage1-"):
        obs = obs * STAGE1_MASK[network[len("stage1-"):]]
    return obs


def full_observation(state: EnvState, tp: TaskParams = TaskParams(),
                     params: EnvParams = EnvParams()) -> np.ndarray:
    _, tip, tip_v = kinematics(state.q, state.qd, params)
    ph = phase_vector(PhaseClock(tp.rhythm_period, state.t))
    rel_goal = state.goal - tip
    q = state.q
    return np.concatenate([q, [math.sin(q[0]), math.cos(q[0]), math.sin(q[1]), math.cos(q[1])],
                           gravity_vector(q), [state.qd[0], state.qd[0] + state.qd[1]],
                           tip_v, ph, rel_goal])


def features(state: EnvState, tau, task: str = "multimodal", tp: TaskParams = TaskParams(),
             params: EnvParams = EnvParams()) -> FeatureRecord:
    """Map the pendulum onto the reward feature record (robot-only fields stay None).

    The tip-velocity target is zero for recovery and follows the rhythmic
    reference otherwise.
    """
    elbow, tip, tip_v = kinematics(state.q, state.qd, params)
    q_ref, qd_ref = rhythm_reference(state.t, tp)
    v_ref = kinematics(q_ref, qd_ref, params)[2] if task != "recovery" else np.zeros(2)
    th2 = state.q[0] + state.q[1]
    d = state.goal - elbow
    n = float(np.hypot(*d))
    d = d / n if n > 0 else np.array([math.sin(th2), math.cos(th2)])
    along = d[0] * math.sin(th2) + d[1] * math.cos(th2)
    across = d[0] * math.cos(th2) - d[1] * math.sin(th2)
    return FeatureRecord(
        orientation=gravity_vector(state.q),
        height=float(tip[1]),
        base_velocity=tip_v,
        base_velocity_local=tip_v,
        base_velocity_target=v_ref,
        yaw_rate=float(state.qd[0] + state.qd[1]),
        q=state.q.copy(),
        qd=state.qd.copy(),
        tau=np.asarray(tau, dtype=np.float64),
        q_ref=q_ref,
        base_position=tip,
        goal_position=state.goal.copy(),
        goal_direction=np.array([along, 0.0, across]),
    )


def task_reward_spec(task: str, tp: TaskParams = TaskParams()) -> RewardSpec:
    """Weighted reward terms for a pendulum task (unavailable robot terms dropped)."""
    if task not in TASKS:
        raise ContractError(f"unknown task {task!r}")
    targets = {"base_height": tp.target_height}
    return RewardSpec.from_weights(TASK_WEIGHTS[TASK_COLUMN[task]], targets=targets,
                                   only=PENDULUM_TERMS[task])


class PendulumEnv:
    """Policy-rate environment: filter -> interpolate -> 1 kHz impedance + dynamics."""

    def __init__(self, task: str, params: EnvParams = EnvParams(), tp: TaskParams = TaskParams(),
                 reward_spec: RewardSpec | None = None):
        if task not in TASKS:
            raise ContractError(f"unknown task {task!r}")
        self.task = task
        self.params = params
        self.tp = tp
        self.reward_spec = reward_spec or task_reward_spec(task, tp)
        self.gains = ImpedanceGains(np.full(2, tp.kp), np.full(2, tp.kd))
        self.limiter = RateLimiter(tp.speed_limit_rad_s, 1.0 / tp.control_rate_hz)
        self.state: EnvState | None = None

    def reset(self, rng: np.random.Generator) -> EnvState:
        self.state = reset(self.task, rng, self.tp)
        self.filter = FilterState(self.tp.filter_cutoff_hz, 1.0 / self.tp.policy_rate_hz)
        self.ref = self.state.q.copy()
        self.last_tau = np.zeros(2)
        return self.state

    def observe(self, network: str) -> np.ndarray:
        return observe(self.state, network, self.tp, self.params)

    def step(self, action):
        """Advance one policy step; returns (reward, done, truncated, info)."""
        if self.state is None:
            raise ContractError("reset() must be called before step()")
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (2,) or not np.isfinite(action).all():
            raise ContractError(f"action must be a finite 2-vector, got {action}")
        # lift the action onto the branch nearest the current reference so the
        # filter and the speed limit never sweep the long way round the circle
        lifted = self.ref + wrap_angle(action - self.ref)
        target = lowpass_step(self.filter, lifted)
        refs = interpolate_and_limit(self.ref, target, self.tp.substeps, self.limiter)
        self.ref = refs[-1].copy()
        p = self.params
        s = self.state
        q1, q2 = float(s.q[0]), float(s.q[1])
        w1, w2 = float(s.qd[0]), float(s.qd[1])
        kp, kd, lim, dt = self.tp.kp, self.tp.kd, p.torque_limit, p.dt
        tau_sum1 = tau_sum2 = 0.0
        for r1, r2 in refs.tolist():
            # wrapped joint error: references live on the circle like q
            e1 = _PI - (_PI - (r1 - q1)) % _TWO_PI
            e2 = _PI - (_PI - (r2 - q2)) % _TWO_PI
            t1 = min(max(kp * e1 - kd * w1, -lim), lim)
            t2 = min(max(kp * e2 - kd * w2, -lim), lim)
            q1, q2, w1, w2 = _rk4(p, q1, q2, w1, w2, t1, t2)
            q1 = _PI - (_PI - q1) % _TWO_PI
            q2 = _PI - (_PI - q2) % _TWO_PI
            tau_sum1 += t1
            tau_sum2 += t2
        n = len(refs)
        self.last_tau = np.array([tau_sum1 / n, tau_sum2 / n])
        t_new = s.t + n * dt
        self.state = EnvState(q=np.array([q1, q2]), qd=np.array([w1, w2]), t=t_new, goal=s.goal,
                              start=s.start)
        self.state.mode = mode_label(self.state, self.task)
        feats = features(self.state, self.last_tau, self.task, self.tp, self.params)
        terms = term_values(self.reward_spec, feats)
        reward = float(sum(t.weight * terms[t.name] for t in self.reward_spec.terms))
        done, reason = terminate(self.state, self.task, self.tp)
        truncated = reason == "timeout"
        info = {"terms": terms, "reason": reason, "tau": self.last_tau, "mode": self.state.mode,
                "target": target}
        return reward, done, truncated, info
