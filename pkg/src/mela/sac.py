"""Soft Actor-Critic with twin critics, auto-tuned temperature and a smoothing loss.

The actor is one of three architectures sharing the same Gaussian head:

* ``single`` - one expert MLP (stage-1 training),
* ``mela``   - gating network + parameter-fused expert bank,
* ``moe``    - gating network + output-blended expert bank.

All networks work on rows of the *full* environment observation; the agent
slices out the policy and gating inputs with index arrays supplied by the
caller, so this module knows nothing about the pendulum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tape, adam_step
from .errors import ConfigError, ContractError
from .fusion import ExpertBank, mela_forward, moe_forward
from .nets import (PARAM_NAMES, ActionBound, ParamSet, critic_spec, ensemble_forward, init_params,
                   mlp_forward, split_head, squashed_action, stack_params)

ARCHS = ("single", "mela", "moe")


@dataclass
class TrainConfig:
    smoothing_coef: float = 2.0
    lr: float = 3e-4
    weight_decay: float = 1e-6
    gamma: float = 0.987
    tau_target: float = 0.001
    steps_per_epoch: int = 5000
    batch_size: int = 256
    grad_steps_per_env_step: int = 1
    target_entropy: float | None = None
    init_temperature: float = 0.1
    init_log_std: float = 0.0
    replay_capacity: int = 200_000
    warmup_steps: int = 1000
    episodes: int = 200
    expert_hidden: int = 256
    gating_hidden: int = 128
    critic_hidden: int = 256
    n_experts: int = 8
    eval_every: int = 10
    eval_episodes: int = 5

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not 0.0 < self.tau_target <= 1.0:
            raise ConfigError(f"tau_target must lie in (0, 1], got {self.tau_target}")
        if self.smoothing_coef < 0:
            raise ConfigError("smoothing_coef must be >= 0")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be > 0 and weight_decay >= 0")
        for name in ("batch_size", "replay_capacity", "grad_steps_per_env_step", "steps_per_epoch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("warmup_steps", "episodes", "eval_every", "eval_episodes"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.n_experts < 2:
            raise ConfigError("n_experts must be >= 2")
        if self.init_temperature <= 0:
            raise ConfigError("init_temperature must be positive")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s2: np.ndarray
    done: np.ndarray

    def __len__(self):
        return len(self.r)


class ReplayBuffer:
    """FIFO ring buffer of transitions."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        if capacity < 1:
            raise ContractError("replay capacity must be >= 1")
        self.capacity = capacity
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, state_dim))
        self.done = np.zeros(capacity)
        self.size = 0
        self.head = 0

    def __len__(self):
        return self.size

    def push(self, s, a, r, s2, done):
        if not math.isfinite(r):
            raise ContractError("reward must be finite")
        i = self.head
        self.s[i], self.a[i], self.r[i], self.s2[i], self.done[i] = s, a, r, s2, float(done)
        self.head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if self.size == 0:
            raise ContractError("cannot sample from an empty buffer")
        k = min(batch_size, self.size)
        idx = rng.choice(self.size, size=k, replace=False)
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.done[idx])


# -- parameter plumbing ------------------------------------------------------

def bank_params(bank: ExpertBank) -> dict[str, np.ndarray]:
    d = {f"experts.{k}": v for k, v in bank.experts.items()}
    d.update({f"gating.{k}": v for k, v in bank.gating.items()})
    return d


def params_to_bank(params: dict) -> ExpertBank:
    return ExpertBank(ParamSet(**{k: params[f"experts.{k}"] for k in PARAM_NAMES}),
                      ParamSet(**{k: params[f"gating.{k}"] for k in PARAM_NAMES}))


def _group(params: dict, prefix: str) -> dict:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def actor_forward(arch: str, params: dict, policy_obs, gating_obs, alpha=None):
    """Raw head output (B, 2|A|) and gating weights (B, N) or None."""
    if arch == "single":
        return mlp_forward(params, policy_obs), None
    experts, gating = _group(params, "experts"), _group(params, "gating")
    if arch == "mela":
        return mela_forward(experts, gating, gating_obs, policy_obs, alpha=alpha)
    if arch == "moe":
        return moe_forward(experts, gating, gating_obs, policy_obs, alpha=alpha)
    raise ContractError(f"unknown architecture {arch!r}")


def soft_update(target: ParamSet, online: ParamSet, tau: float) -> ParamSet:
    """target <- (1 - tau) target + tau online, elementwise."""
    if not 0.0 <= tau <= 1.0:
        raise ContractError("tau must lie in [0, 1]")
    out = {}
    for (k, t), (_, o) in zip(target.items(), online.items()):
        if t.shape != o.shape:
            raise ContractError(f"soft_update: shape mismatch for {k}: {t.shape} vs {o.shape}")
        out[k] = (1.0 - tau) * t + tau * o
    return ParamSet(**out)


@dataclass
class Temperature:
    """SAC temperature alpha_T, stored as its logarithm."""

    log_value: float = 0.0
    opt: AdamState = field(default_factory=lambda: AdamState(weight_decay=0.0))

    @property
    def value(self) -> float:
        return math.exp(self.log_value)


def _wrapped_offset(mu: np.ndarray, q: np.ndarray) -> np.ndarray:
    # shift q by whole turns so mu - q is the short way round
    return q + 2.0 * np.pi * np.round((mu - q) / (2.0 * np.pi))


@dataclass
class SACAgent:
    arch: str
    actor: dict                     # name -> array (see bank_params for banks)
    critic: ParamSet                # two critics stacked
    critic_target: ParamSet
    bound: ActionBound
    config: TrainConfig
    policy_index: np.ndarray
    gating_index: np.ndarray | None = None
    policy_mask: np.ndarray | None = None
    critic_index: np.ndarray | None = None
    joint_index: tuple[int, ...] | None = (0, 1)
    temp: "Temperature | None" = None
    actor_opt: AdamState = field(default=None)
    critic_opt: AdamState = field(default=None)
    frozen_alpha: np.ndarray | None = None   # force a fixed gate (sanity harness)

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ContractError(f"unknown architecture {self.arch!r}")
        c = self.config
        for name in ("actor_opt", "critic_opt"):
            if getattr(self, name) is None:
                setattr(self, name, AdamState(lr=c.lr, weight_decay=c.weight_decay))
        if self.temp is None:
            self.temp = Temperature(math.log(c.init_temperature), AdamState(lr=c.lr, weight_decay=0.0))

    @property
    def temperature(self) -> float:
        return self.temp.value

    @property
    def log_temperature(self) -> float:
        return self.temp.log_value

    @property
    def action_dim(self) -> int:
        return len(self.bound.low)

    @property
    def target_entropy(self) -> float:
        te = self.config.target_entropy
        return -float(self.action_dim) if te is None else te

    def policy_obs(self, states: np.ndarray) -> np.ndarray:
        x = states[..., self.policy_index]
        return x * self.policy_mask if self.policy_mask is not None else x

    def gating_obs(self, states: np.ndarray):
        return None if self.gating_index is None else states[..., self.gating_index]

    def forward(self, params, states):
        alpha = None
        if self.frozen_alpha is not None:
            alpha = np.broadcast_to(self.frozen_alpha, (len(states), len(self.frozen_alpha)))
        raw, a = actor_forward(self.arch, params, self.policy_obs(states), self.gating_obs(states),
                               alpha=alpha)
        return split_head(raw), a

    def act(self, states: np.ndarray, rng: np.random.Generator | None = None,
            deterministic: bool = False):
        """Actions (B, A) for full-state rows, plus gating weights (or None)."""
        states = np.atleast_2d(states)
        out, alpha = self.forward(self.actor, states)
        noise = None if deterministic else rng.standard_normal(out.mean.shape)
        a, _ = squashed_action(out, self.bound, noise)
        return a.value, (None if alpha is None else ad.as_tensor(alpha).value)

    def mean_action(self, states: np.ndarray) -> np.ndarray:
        return self.act(states, deterministic=True)[0]

    def q_values(self, critic: ParamSet, states, actions):
        if self.critic_index is not None:
            states = states[..., self.critic_index]
        x = ad.concat([ad.as_tensor(states), ad.as_tensor(actions)], axis=-1)
        return ensemble_forward(critic, x)    # (2, B, 1)


def make_agent(arch: str, actor_params: dict, state_dim: int, config: TrainConfig,
               bound: ActionBound, rng: np.random.Generator, **kw) -> SACAgent:
    ci = kw.get("critic_index")
    spec = critic_spec(state_dim if ci is None else len(ci), len(bound.low), config.critic_hidden)
    critic = stack_params([init_params(spec, rng, out_scale=0.1) for _ in range(2)])
    return SACAgent(arch=arch, actor=dict(actor_params), critic=critic,
                    critic_target=critic.copy(), bound=bound, config=config, **kw)


# -- updates -----------------------------------------------------------------

def critic_update(batch: Batch, agent: SACAgent, rng: np.random.Generator) -> float:
    """Regress both critics onto the soft double-Q target; returns the summed MSE."""
    if len(batch) == 0:
        raise ContractError("critic_update needs a non-empty batch")
    y = critic_targets(batch, agent, rng)

    with Tape() as tape:
        leaves = {k: tape.watch(v, k) for k, v in agent.critic.items()}
        q = agent.q_values(leaves, batch.s, batch.a)            # (2, B, 1)
        err = q - y.reshape(1, -1, 1)
        loss = ad.sum(ad.mean(ad.square(err), axis=(1, 2)))
        grads = tape.backward(loss)
    new = adam_step(agent.critic.as_dict(), {k: grads[t] for k, t in leaves.items()}, agent.critic_opt)
    agent.critic = ParamSet(**new)
    return loss.item()


def critic_targets(batch: Batch, agent: SACAgent, rng: np.random.Generator) -> np.ndarray:
    """The bootstrap targets used by :func:`critic_update` (exposed for tests)."""
    out2, _ = agent.forward(agent.actor, batch.s2)
    a2, logp2 = squashed_action(out2, agent.bound, rng.standard_normal(out2.mean.shape))
    q_next = agent.q_values(agent.critic_target, batch.s2, a2.value).value[:, :, 0]
    soft_v = q_next.min(axis=0) - agent.temperature * logp2.value
    return batch.r + agent.config.gamma * (1.0 - batch.done) * soft_v


def actor_loss(agent: SACAgent, params: dict, states: np.ndarray, noise: np.ndarray,
               smoothing_coef: float):
    """Actor objective as a tensor; returns (loss, logp, smoothing term)."""
    out, alpha = agent.forward(params, states)
    a, logp = squashed_action(out, agent.bound, noise)
    q = agent.q_values(agent.critic, states, a)
    q_min = ad.minimum(ad.take(q, [0], axis=0), ad.take(q, [1], axis=0))
    sac_term = ad.mean(agent.temperature * logp - ad.reshape(q_min, (-1,)))
    if smoothing_coef == 0.0:
        return sac_term, logp, None
    ji = agent.joint_index
    if ji is None or max(ji) >= states.shape[-1]:
        raise ContractError("smoothing loss needs the joint positions in the state")
    mu, _ = squashed_action(out, agent.bound, None)
    q_meas = _wrapped_offset(mu.value, states[:, list(ji)])
    smooth = ad.mean(ad.norm(mu - q_meas, axis=-1))
    return sac_term + smoothing_coef * smooth, logp, smooth


def actor_update(batch: Batch, agent: SACAgent, rng: np.random.Generator) -> dict:
    noise = rng.standard_normal((len(batch), agent.action_dim))
    with Tape() as tape:
        leaves = {k: tape.watch(v, k) for k, v in agent.actor.items()}
        loss, logp, smooth = actor_loss(agent, leaves, batch.s, noise, agent.config.smoothing_coef)
        grads = tape.backward(loss)
    agent.actor = adam_step(agent.actor, {k: grads[t] for k, t in leaves.items()}, agent.actor_opt)
    return {"actor_loss": loss.item(), "logp": logp.value,
            "smoothing_term": float("nan") if smooth is None else smooth.item()}


def temperature_update(logp, temp: Temperature, target_entropy: float) -> float:
    """Adam step on log(alpha_T) for the loss E[-alpha_T (logp + target_entropy)].

    The log-parameterization keeps alpha_T positive; returns the new value.
    """
    with Tape() as tape:
        log_t = tape.watch(np.array(temp.log_value), "log_temperature")
        loss = ad.mean(-ad.exp(log_t) * (np.asarray(logp) + target_entropy))
        g = tape.backward(loss)[log_t]
    new = adam_step({"log_t": np.array(temp.log_value)}, {"log_t": g}, temp.opt)
    temp.log_value = float(new["log_t"])
    return temp.value


def temperature_gradient(logp, log_temperature: float, target_entropy: float) -> float:
    """d/d log(alpha_T) of E[-alpha_T (logp + target_entropy)]."""
    return float(-math.exp(log_temperature) * np.mean(np.asarray(logp) + target_entropy))


def sac_update(batch: Batch, agent: SACAgent, rng: np.random.Generator) -> dict:
    """Critic, actor, temperature and target updates on one batch."""
    c_loss = critic_update(batch, agent, rng)
    stats = actor_update(batch, agent, rng)
    temperature_update(stats.pop("logp"), agent.temp, agent.target_entropy)
    agent.critic_target = soft_update(agent.critic_target, agent.critic, agent.config.tau_target)
    stats["critic_loss"] = c_loss
    stats["alpha_T"] = agent.temperature
    return stats
