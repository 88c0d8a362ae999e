"""Bounded RBF reward terms, task weightings and the gait phase clock.

Every continuous term is ``exp(width * ||target - x||^2)`` with a
non-positive ``width``, so each term lies in (0, 1] and peaks at the target.
Contact terms are 0/1 indicators.  Terms read from a :class:`FeatureRecord`;
fields an environment cannot produce stay ``None`` and any term that needs
them raises.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .errors import ContractError

# name -> (default width, default static target or None)
TERM_TABLE: dict[str, tuple[float | None, object]] = {
    "base_pose": (-2.35, (0.0, 0.0, -1.0)),
    "base_height": (-51.16, None),
    "base_velocity": (-18.42, 0.0),
    "torque_regularisation": (-0.003, 0.0),
    "joint_velocity_regularisation": (-0.026, 0.0),
    "foot_contact": (None, None),
    "body_contact": (None, None),
    "yaw_velocity": (-7.47, 0.0),
    "foot_clearance": (-51.16, 0.1),
    "joint_reference": (-29.88, None),
    "foot_contact_reference": (None, None),
    "foot_placement": (-18.42, None),
    "heading": (-2.35, (1.0, 0.0, 0.0)),
    "goal_position": (-0.74, None),
    "swing_stance": (-460.50, 0.0),
}
_TINY = float(np.finfo(np.float64).tiny)
INDICATOR_TERMS = frozenset({"foot_contact", "body_contact", "foot_contact_reference"})

# Task weight columns (trotting / fall recovery / multimodal).
TASK_WEIGHTS: dict[str, dict[str, float]] = {
    "trotting": {
        "base_pose": 0.071, "base_height": 0.036, "base_velocity": 0.178,
        "torque_regularisation": 0.018, "joint_velocity_regularisation": 0.018,
        "foot_contact": 0.018, "body_contact": 0.018, "yaw_velocity": 0.071,
        "foot_clearance": 0.036, "joint_reference": 0.416,
        "foot_contact_reference": 0.083, "foot_placement": 0.036,
        "heading": 0.0, "goal_position": 0.0,
    },
    "recovery": {
        "base_pose": 0.333, "base_height": 0.333, "base_velocity": 0.067,
        "torque_regularisation": 0.067, "joint_velocity_regularisation": 0.067,
        "foot_contact": 0.067, "body_contact": 0.067, "yaw_velocity": 0.0,
        "foot_clearance": 0.0, "joint_reference": 0.0,
        "foot_contact_reference": 0.0, "foot_placement": 0.0,
        "heading": 0.0, "goal_position": 0.0,
    },
    "mela": {
        "base_pose": 0.100, "base_height": 0.100, "base_velocity": 0.071,
        "torque_regularisation": 0.020, "joint_velocity_regularisation": 0.020,
        "foot_contact": 0.020, "body_contact": 0.020, "yaw_velocity": 0.020,
        "foot_clearance": 0.036, "joint_reference": 0.167,
        "foot_contact_reference": 0.033, "foot_placement": 0.036,
        "heading": 0.143, "goal_position": 0.214,
    },
}


def rbf(x, target, width: float) -> float:
    """exp(width * ||target - x||^2); ``width`` must be <= 0."""
    if width > 0:
        raise ContractError(f"RBF width must be <= 0 (got {width}); reward would be unbounded")
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if x.shape != t.shape and t.ndim != 0:
        raise ContractError(f"RBF argument shapes differ: {x.shape} vs {t.shape}")
    d = np.broadcast_to(t, x.shape) - x
    # floor at the smallest normal double so far-off values stay strictly positive
    return max(math.exp(width * float(np.sum(d * d))), _TINY)


@dataclass
class PhaseClock:
    period: float = 0.6
    t: float = 0.0

    def __post_init__(self):
        if self.period <= 0:
            raise ContractError("phase clock period must be positive")


def phase_vector(clock: PhaseClock) -> np.ndarray:
    if clock.period <= 0:
        raise ContractError("phase clock period must be positive")
    ang = 2.0 * math.pi * clock.t / clock.period
    return np.array([math.sin(ang), math.cos(ang)])


@dataclass
class FeatureRecord:
    """Physical quantities for one step; ``None`` marks a field as absent."""

    orientation: np.ndarray | None = None        # gravity direction in body frame (3,)
    height: float | None = None
    base_velocity: np.ndarray | None = None      # world frame
    base_velocity_local: np.ndarray | None = None
    base_velocity_target: np.ndarray | None = None
    yaw_rate: float | None = None
    q: np.ndarray | None = None
    qd: np.ndarray | None = None
    tau: np.ndarray | None = None
    q_ref: np.ndarray | None = None
    foot_heights: np.ndarray | None = None
    foot_heights_nominal: np.ndarray | None = None
    foot_velocities: np.ndarray | None = None    # (n_feet, 2)
    foot_positions: np.ndarray | None = None     # (n_feet, 2)
    foot_contacts: np.ndarray | None = None      # (n_feet,) bool
    foot_contacts_desired: np.ndarray | None = None
    body_contact: bool | None = None
    base_position: np.ndarray | None = None
    goal_position: np.ndarray | None = None
    goal_direction: np.ndarray | None = None     # unit vector base -> goal, body frame (3,)


def _need(f: FeatureRecord, term: str, *names):
    vals = []
    for n in names:
        v = getattr(f, n)
        if v is None:
            raise ContractError(f"reward term '{term}' needs feature '{n}'")
        vals.append(v)
    return vals if len(vals) > 1 else vals[0]


def term_value(name: str, features: FeatureRecord, width: float | None = None,
               target=None) -> float:
    """Value of one reward term; ``width``/``target`` override the table defaults."""
    if name not in TERM_TABLE:
        raise ContractError(f"unknown reward term {name!r}")
    w0, t0 = TERM_TABLE[name]
    width = w0 if width is None else width
    target = t0 if target is None else target
    f = features

    if name == "foot_contact":
        return 1.0 if np.any(_need(f, name, "foot_contacts")) else 0.0
    if name == "body_contact":
        return 0.0 if bool(_need(f, name, "body_contact")) else 1.0
    if name == "foot_contact_reference":
        c, want = _need(f, name, "foot_contacts", "foot_contacts_desired")
        return 1.0 if np.array_equal(np.asarray(c, bool), np.asarray(want, bool)) else 0.0

    if name == "base_pose":
        return rbf(_need(f, name, "orientation"), target, width)
    if name == "base_height":
        h = _need(f, name, "height")
        if target is None:
            raise ContractError("reward term 'base_height' needs a target height")
        return rbf(h, target, width)
    if name == "base_velocity":
        v = np.asarray(_need(f, name, "base_velocity"), dtype=np.float64)
        t = f.base_velocity_target if f.base_velocity_target is not None else target
        return rbf(v, np.broadcast_to(np.asarray(t, dtype=np.float64), v.shape), width)
    if name == "torque_regularisation":
        return rbf(_need(f, name, "tau"), target, width)
    if name == "joint_velocity_regularisation":
        return rbf(_need(f, name, "qd"), target, width)
    if name == "yaw_velocity":
        return rbf(_need(f, name, "yaw_rate"), target, width)
    if name == "joint_reference":
        q, q_ref = _need(f, name, "q", "q_ref")
        return rbf(q, q_ref, width)
    if name == "heading":
        return rbf(_need(f, name, "goal_direction"), target, width)
    if name == "goal_position":
        g, p = _need(f, name, "goal_position", "base_position")
        return rbf(g, p, width)
    if name == "swing_stance":
        h, h_nom, v = _need(f, name, "foot_heights", "foot_heights_nominal", "foot_velocities")
        dh = np.asarray(h, dtype=np.float64) - np.asarray(h_nom, dtype=np.float64)
        inner = np.mean(dh[:, None] * np.asarray(v, dtype=np.float64), axis=0)
        return rbf(inner, np.zeros_like(inner), width)
    if name == "foot_placement":
        pf, pb = _need(f, name, "foot_positions", "base_position")
        return rbf(np.mean(np.asarray(pf, dtype=np.float64), axis=0), pb, width)
    if name == "foot_clearance":
        h, c = _need(f, name, "foot_heights", "foot_contacts")
        swing = np.asarray(h, dtype=np.float64)[~np.asarray(c, bool)]
        if swing.size == 0:
            return 1.0
        return rbf(float(np.mean(swing)), target, width)
    raise AssertionError(name)  # pragma: no cover


@dataclass(frozen=True)
class RewardTerm:
    name: str
    weight: float
    width: float | None = None
    target: object = None

    def __post_init__(self):
        if self.name not in TERM_TABLE:
            raise ContractError(f"unknown reward term {self.name!r}")
        if self.weight < 0:
            raise ContractError(f"negative weight for {self.name}")
        if self.width is not None and self.width > 0:
            raise ContractError(f"positive RBF width for {self.name}")


@dataclass(frozen=True)
class RewardSpec:
    terms: tuple[RewardTerm, ...] = field(default_factory=tuple)

    @classmethod
    def from_weights(cls, weights: Mapping[str, float], targets: Mapping[str, object] | None = None,
                     only: set[str] | None = None) -> "RewardSpec":
        targets = targets or {}
        terms = tuple(RewardTerm(n, float(w), target=targets.get(n))
                      for n, w in weights.items() if only is None or n in only)
        return cls(terms)

    @classmethod
    def for_task(cls, column: str, **kw) -> "RewardSpec":
        if column not in TASK_WEIGHTS:
            raise ContractError(f"unknown weight column {column!r}")
        return cls.from_weights(TASK_WEIGHTS[column], **kw)

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.terms]

    @property
    def max_total(self) -> float:
        return float(sum(t.weight for t in self.terms))

    def with_overrides(self, overrides: Mapping[str, Mapping[str, object]]) -> "RewardSpec":
        """Apply {term: {weight|width|target: value}}; unknown terms are added."""
        terms = {t.name: t for t in self.terms}
        for name, fields_ in overrides.items():
            base = terms.get(name, RewardTerm(name, 0.0))
            bad = set(fields_) - {"weight", "width", "target"}
            if bad:
                raise ContractError(f"unknown reward fields {sorted(bad)} for {name}")
            terms[name] = replace(base, **fields_)
        return RewardSpec(tuple(terms.values()))


def term_values(spec: RewardSpec, features: FeatureRecord) -> dict[str, float]:
    return {t.name: term_value(t.name, features, t.width, t.target) for t in spec.terms}


def total_reward(spec: RewardSpec, features: FeatureRecord) -> float:
    """Weighted sum; zero-weight terms are skipped and need no features."""
    return float(sum(t.weight * term_value(t.name, features, t.width, t.target)
                     for t in spec.terms if t.weight != 0.0))
