"""Fixed two-hidden-layer MLPs, the Gaussian policy head and tanh squashing.

Layout convention is row-vector: ``h = relu(x @ W0 + B0)``.  A ``ParamSet``
holds plain numpy arrays (immutable snapshots); training code wraps them in
tape leaves when gradients are needed.  Stacking N parameter sets along a new
leading axis gives the ensemble layout used by expert banks and twin critics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
PARAM_NAMES = ("W0", "W1", "W2", "B0", "B1", "B2")


@dataclass(frozen=True)
class MlpSpec:
    x: int
    h: int
    y: int
    activation: str = "relu"

    def __post_init__(self):
        if min(self.x, self.h, self.y) < 1:
            raise ContractError(f"MLP dimensions must be >= 1, got {self}")
        if self.activation != "relu":
            raise ContractError("only ReLU hidden layers are supported")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        x, h, y = self.x, self.h, self.y
        return {"W0": (x, h), "W1": (h, h), "W2": (h, y), "B0": (h,), "B1": (h,), "B2": (y,)}


def expert_spec(obs_dim: int, action_dim: int, hidden: int = 256) -> MlpSpec:
    return MlpSpec(obs_dim, hidden, 2 * action_dim)


def gating_spec(obs_dim: int, n_experts: int, hidden: int = 128) -> MlpSpec:
    return MlpSpec(obs_dim, hidden, n_experts)


def critic_spec(state_dim: int, action_dim: int, hidden: int = 256) -> MlpSpec:
    return MlpSpec(state_dim + action_dim, hidden, 1)


@dataclass(frozen=True)
class ParamSet:
    """Weights and biases of one MLP (or N stacked MLPs along axis 0)."""

    W0: np.ndarray
    W1: np.ndarray
    W2: np.ndarray
    B0: np.ndarray
    B1: np.ndarray
    B2: np.ndarray

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Tensor):
                continue
            arr = np.asarray(v, dtype=np.float64)
            if not np.isfinite(arr).all():
                raise ContractError(f"ParamSet.{f.name} has non-finite values")
            object.__setattr__(self, f.name, arr)
        lead = self.W0.shape[:-2]
        x, h = self.W0.shape[-2:]
        y = self.W2.shape[-1]
        want = {"W0": (x, h), "W1": (h, h), "W2": (h, y), "B0": (h,), "B1": (h,), "B2": (y,)}
        for name, shp in want.items():
            got = getattr(self, name).shape
            if got != lead + shp:
                raise ContractError(f"ParamSet.{name} has shape {got}, expected {lead + shp}")

    @property
    def spec(self) -> MlpSpec:
        x, h = self.W0.shape[-2:]
        return MlpSpec(x, h, self.W2.shape[-1])

    @property
    def stacked(self) -> int | None:
        """Number of stacked networks, or None for a single network."""
        return self.W0.shape[0] if self.W0.ndim == 3 else None

    def as_dict(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in PARAM_NAMES}

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self.as_dict().items())

    @classmethod
    def from_dict(cls, d) -> "ParamSet":
        return cls(**{n: d[n] for n in PARAM_NAMES})

    def map(self, fn) -> "ParamSet":
        return ParamSet(**{n: fn(v) for n, v in self.items()})

    def copy(self) -> "ParamSet":
        return self.map(np.array)

    def __getitem__(self, k: int) -> "ParamSet":
        if self.stacked is None:
            raise ContractError("indexing requires a stacked ParamSet")
        return self.map(lambda v: np.array(v[k]))

    def equals(self, other: "ParamSet") -> bool:
        return all(np.array_equal(a, b) for (_, a), (_, b) in zip(self.items(), other.items()))


def stack_params(sets: Sequence[ParamSet]) -> ParamSet:
    shapes = {tuple(s.spec.shapes().items()) for s in sets}
    if len(shapes) != 1:
        raise ContractError("cannot stack parameter sets with different shapes")
    return ParamSet(**{n: np.stack([getattr(s, n) for s in sets]) for n in PARAM_NAMES})


def init_params(spec: MlpSpec, rng: np.random.Generator, out_scale: float = 1e-2) -> ParamSet:
    """He-uniform hidden layers, zero biases, small uniform output layer."""
    def he(fan_in, shape):
        bound = math.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)

    return ParamSet(
        W0=he(spec.x, (spec.x, spec.h)),
        W1=he(spec.h, (spec.h, spec.h)),
        W2=rng.uniform(-out_scale, out_scale, size=(spec.h, spec.y)),
        B0=np.zeros(spec.h),
        B1=np.zeros(spec.h),
        B2=np.zeros(spec.y),
    )


def zeros_params(spec: MlpSpec) -> ParamSet:
    return ParamSet(**{n: np.zeros(s) for n, s in spec.shapes().items()})


def mlp_forward(params, x) -> Tensor:
    """ReLU -> ReLU -> linear.  ``x`` is (x,) or (batch, x)."""
    x = ad.as_tensor(x)
    p = params.as_dict() if isinstance(params, ParamSet) else params
    if x.shape[-1] != np.shape(_val(p["W0"]))[-2]:
        raise ContractError(
            f"input has dimension {x.shape[-1]}, network expects {np.shape(_val(p['W0']))[-2]}")
    single = x.ndim == 1
    if single:
        x = ad.reshape(x, (1, -1))
    h = ad.relu(x @ p["W0"] + p["B0"])
    h = ad.relu(h @ p["W1"] + p["B1"])
    out = h @ p["W2"] + p["B2"]
    return ad.reshape(out, (-1,)) if single else out


def ensemble_forward(stack, x) -> Tensor:
    """Evaluate N stacked MLPs on a shared (batch, x) input -> (N, batch, y)."""
    p = stack.as_dict() if isinstance(stack, ParamSet) else stack
    x = ad.as_tensor(x)
    if x.ndim != 2:
        raise ContractError("ensemble_forward expects a (batch, x) input")
    n = np.shape(_val(p["W0"]))[0]
    h = ad.relu(x @ p["W0"] + ad.reshape(p["B0"], (n, 1, -1)))
    h = ad.relu(h @ p["W1"] + ad.reshape(p["B1"], (n, 1, -1)))
    return h @ p["W2"] + ad.reshape(p["B2"], (n, 1, -1))


def _val(v):
    return v.value if isinstance(v, Tensor) else v


@dataclass
class PolicyOutput:
    mean: Tensor      # pre-squash mean
    log_std: Tensor   # clamped to [LOG_STD_MIN, LOG_STD_MAX]


def split_head(raw) -> PolicyOutput:
    raw = ad.as_tensor(raw)
    k = raw.shape[-1]
    if k % 2:
        raise ContractError(f"policy head needs an even width, got {k}")
    half = k // 2
    mean = ad.take(raw, range(half), axis=-1)
    log_std = ad.clip(ad.take(raw, range(half, k), axis=-1), LOG_STD_MIN, LOG_STD_MAX)
    return PolicyOutput(mean, log_std)


@dataclass(frozen=True)
class ActionBound:
    """Joint ranges; actions are mapped affinely from (-1, 1) onto (low, high)."""

    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.low, dtype=np.float64))
        hi = np.atleast_1d(np.asarray(self.high, dtype=np.float64))
        if lo.shape != hi.shape or not np.all(hi > lo):
            raise ContractError("joint ranges need high > low per joint")
        object.__setattr__(self, "low", lo)
        object.__setattr__(self, "high", hi)

    @classmethod
    def symmetric(cls, half_range) -> "ActionBound":
        q = np.atleast_1d(np.asarray(half_range, dtype=np.float64))
        if np.any(q <= 0):
            raise ContractError("joint half-range must be positive")
        return cls(-q, q)

    @property
    def scale(self) -> np.ndarray:
        return 0.5 * (self.high - self.low)

    @property
    def offset(self) -> np.ndarray:
        return 0.5 * (self.high + self.low)


_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
_LOG2 = math.log(2.0)


def squash_correction(u) -> Tensor:
    """sum_j log(1 - tanh(u_j)^2), computed as 2(log 2 - u - softplus(-2u))."""
    u = ad.as_tensor(u)
    return ad.sum(2.0 * (_LOG2 - u - ad.softplus(-2.0 * u)), axis=-1)


def squashed_action(out: PolicyOutput, bound: ActionBound, noise=None):
    """Reparameterized squashed sample.

    ``noise`` is standard normal with the mean's shape; ``None`` gives the
    deterministic (mean) action.  Returns (action, log_prob) as tensors.
    """
    if noise is None:
        u = out.mean
        z2 = np.zeros(out.mean.shape)
    else:
        noise = np.asarray(noise, dtype=np.float64)
        u = out.mean + ad.exp(out.log_std) * noise
        z2 = noise * noise
    gauss = ad.sum(-0.5 * z2 - out.log_std - _HALF_LOG_2PI, axis=-1)
    log_prob = gauss - squash_correction(u)
    action = ad.tanh(u) * bound.scale + bound.offset
    return action, log_prob


def sample_squashed(out: PolicyOutput, bound: ActionBound, rng: np.random.Generator | None,
                    deterministic: bool = False) -> tuple[np.ndarray, float | np.ndarray]:
    """Draw an action (numpy) and its log-probability under the squashed Gaussian."""
    noise = None if deterministic else rng.standard_normal(out.mean.shape)
    a, lp = squashed_action(out, bound, noise)
    return np.clip(a.value, bound.low, bound.high), lp.value
