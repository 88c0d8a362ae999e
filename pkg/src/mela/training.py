"""Rollouts, evaluation and the two-stage training protocol."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import env as E
from .errors import ContractError, NumericError
from .fusion import ExpertBank, init_stage2
from .io import Checkpoint
from .nets import ActionBound, ParamSet, expert_spec, gating_spec, init_params
from .sac import (ARCHS, ReplayBuffer, SACAgent, TrainConfig, actor_forward, bank_params,
                  make_agent, sac_update)

ACTION_BOUND = ActionBound.symmetric([math.pi, math.pi])
STATE_DIM = len(E.FULL_LAYOUT)
SUCCESS_ANGLE = math.radians(15.0)
SUCCESS_RATE = 1.0
SUCCESS_HOLD_S = 1.0


def _rngs(seed: int, n: int):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def new_stage1_agent(task: str, config: TrainConfig, rng: np.random.Generator) -> SACAgent:
    if task not in E.STAGE1_MASK:
        raise ContractError(f"stage 1 trains 'recovery' or 'rhythmic', not {task!r}")
    spec = expert_spec(len(E.POLICY_LAYOUT), 2, config.expert_hidden)
    actor = init_params(spec, rng).as_dict()
    actor["B2"][2:] = config.init_log_std
    return make_agent("single", actor, STATE_DIM, config, ACTION_BOUND, rng,
                      policy_index=E.POLICY_INDEX, policy_mask=E.STAGE1_MASK[task],
                      critic_index=E.CRITIC_INDEX, joint_index=E.JOINT_INDEX)


def agent_from_actor(arch: str, actor: dict, config: TrainConfig, rng: np.random.Generator,
                     mask: np.ndarray | None = None) -> SACAgent:
    """Wrap stored actor parameters in an agent with fresh critics."""
    validate_actor(arch, actor)
    kw = {"policy_index": E.POLICY_INDEX, "policy_mask": mask, "critic_index": E.CRITIC_INDEX,
          "joint_index": E.JOINT_INDEX}
    if arch != "single":
        kw["gating_index"] = E.GATING_INDEX
    return make_agent(arch, actor, STATE_DIM, config, ACTION_BOUND, rng, **kw)


def validate_actor(arch: str, actor: dict):
    """Shape-check actor parameters against the architecture (graceful errors)."""
    if arch not in ARCHS:
        raise ContractError(f"unknown architecture {arch!r}")
    try:
        if arch == "single":
            ps = ParamSet.from_dict(actor)
            if ps.stacked is not None:
                raise ContractError("a single-expert actor must not be stacked")
            spec = ps.spec
            n = None
        else:
            bank = ExpertBank(ParamSet.from_dict({k: actor[f"experts.{k}"] for k in ("W0", "W1", "W2", "B0", "B1", "B2")}),
                              ParamSet.from_dict({k: actor[f"gating.{k}"] for k in ("W0", "W1", "W2", "B0", "B1", "B2")}))
            spec = bank.expert_spec
            n = bank.n
            if bank.gating.spec.x != len(E.GATING_LAYOUT):
                raise ContractError(f"gating input is {bank.gating.spec.x}, layout has {len(E.GATING_LAYOUT)}")
    except KeyError as e:
        raise ContractError(f"actor parameters missing {e} for architecture {arch!r}") from None
    if spec.x != len(E.POLICY_LAYOUT) or spec.y != 4:
        raise ContractError(f"expert shape {spec.x}->{spec.y} does not fit the policy layout")
    return n


# -- rollouts ----------------------------------------------------------------

@dataclass
class EpisodeStats:
    ret: float = 0.0
    steps: int = 0
    success: bool = False
    success_step: int | None = None
    smoothing: float = 0.0          # mean per-step ||mu(s) - q||
    mode_transitions: int = 0
    reason: str | None = None
    alpha: list = field(default_factory=list)       # per-step gating weights
    modes: list = field(default_factory=list)
    rows: list = field(default_factory=list)        # trajectory rows when recorded


def _upright(state: E.EnvState) -> bool:
    return abs(E.link2_angle(state.q)) < SUCCESS_ANGLE and bool(np.all(np.abs(state.qd) < SUCCESS_RATE))


def run_episode(agent: SACAgent, env: E.PendulumEnv, rng: np.random.Generator,
                deterministic: bool = True, record: bool = False,
                max_steps: int | None = None) -> EpisodeStats:
    st = EpisodeStats()
    env.reset(rng)
    hold_needed = int(round(SUCCESS_HOLD_S * env.tp.policy_rate_hz))
    limit = max_steps or int(round(env.tp.episode_seconds * env.tp.policy_rate_hz))
    held = 0
    gap = 0.0
    prev_mode = env.state.mode
    for k in range(limit):
        s = env.observe("full")
        q_now = env.state.q.copy()
        a, alpha = agent.act(s, None if deterministic else rng, deterministic=deterministic)
        a = a[0]
        mu = a if deterministic else agent.mean_action(s)[0]
        d = mu - q_now
        gap += float(np.linalg.norm(d - 2 * np.pi * np.round(d / (2 * np.pi))))
        r, done, trunc, info = env.step(a)
        st.ret += r
        st.steps += 1
        if alpha is not None:
            st.alpha.append(alpha[0])
            st.modes.append(info["mode"])
        if info["mode"] != prev_mode:
            st.mode_transitions += 1
            prev_mode = info["mode"]
        held = held + 1 if _upright(env.state) else 0
        if held >= hold_needed and not st.success:
            st.success, st.success_step = True, k + 1
        if record:
            s2 = env.state
            row = {"t": s2.t, "q1": s2.q[0], "q2": s2.q[1], "qd1": s2.qd[0], "qd2": s2.qd[1],
                   "tau1": info["tau"][0], "tau2": info["tau"][1], "a1": a[0], "a2": a[1],
                   "reward": r, "mode": info["mode"]}
            row.update({f"r_{n}": v for n, v in info["terms"].items()})
            if alpha is not None:
                row.update({f"alpha_{i}": float(v) for i, v in enumerate(alpha[0])})
            st.rows.append(row)
        if done:
            st.reason = info["reason"]
            break
    st.smoothing = gap / max(st.steps, 1)
    return st


def evaluate(agent: SACAgent, task: str, episodes: int, seed: int,
             tp: E.TaskParams = E.TaskParams(), params: E.EnvParams = E.EnvParams(),
             record: bool = False) -> dict:
    """Deterministic evaluation; returns summary plus per-episode stats."""
    env = E.PendulumEnv(task, params, tp)
    rng = np.random.default_rng(seed)
    eps = [run_episode(agent, env, rng, deterministic=True, record=record) for _ in range(episodes)]
    if not eps:
        return {"episodes": 0, "mean_return": None, "success_rate": None, "smoothing": None,
                "per_episode": []}
    return {
        "episodes": len(eps),
        "mean_return": float(np.mean([e.ret for e in eps])),
        "success_rate": float(np.mean([e.success for e in eps])),
        "smoothing": float(np.mean([e.smoothing for e in eps])),
        "per_episode": eps,
    }


# -- training ----------------------------------------------------------------

@dataclass
class TrainResult:
    agent: SACAgent
    best_actor: dict
    metrics: list[dict]
    evals: list[dict]
    best_eval: float | None

    def checkpoint(self, config: TrainConfig, meta: dict | None = None, best: bool = True) -> Checkpoint:
        a = self.agent
        return Checkpoint(arch=a.arch, actor=dict(self.best_actor if best else a.actor),
                          critic=a.critic, critic_target=a.critic_target,
                          log_temperature=a.log_temperature,
                          config=dataclasses.asdict(config), meta=meta or {})


def train(agent: SACAgent, task: str, config: TrainConfig, seed: int,
          tp: E.TaskParams = E.TaskParams(), params: E.EnvParams = E.EnvParams(),
          eval_seed: int | None = None, callback=None) -> TrainResult:
    """Generic SAC loop: rollout at the policy rate, one update per env step after warm-up."""
    rng_env, rng_act, rng_upd, rng_buf = _rngs(seed, 4)
    env = E.PendulumEnv(task, params, tp)
    buf = ReplayBuffer(config.replay_capacity, STATE_DIM, 2)
    limit = int(round(tp.episode_seconds * tp.policy_rate_hz))
    eval_seed = seed + 10_000 if eval_seed is None else eval_seed
    metrics, evals = [], []
    best_actor = dict(agent.actor)
    best = None
    total = 0
    low, high = agent.bound.low, agent.bound.high
    for ep in range(1, config.episodes + 1):
        env.reset(rng_env)
        ret = 0.0
        stats: dict[str, list] = {"critic_loss": [], "actor_loss": [], "smoothing_term": []}
        alphas = []
        for _ in range(limit):
            s = env.observe("full")
            if total < config.warmup_steps:
                a = rng_act.uniform(low, high)
            else:
                a, alpha = agent.act(s, rng_act)
                a = a[0]
                if alpha is not None:
                    alphas.append(alpha[0])
            r, done, trunc, info = env.step(a)
            buf.push(s, a, r, env.observe("full"), done and not trunc)
            ret += r
            total += 1
            if total >= config.warmup_steps and len(buf) >= min(config.batch_size, config.warmup_steps or 1):
                for _ in range(config.grad_steps_per_env_step):
                    out = sac_update(buf.sample(config.batch_size, rng_buf), agent, rng_upd)
                    for k in stats:
                        stats[k].append(out[k])
            if done:
                break
        row = {"episode": ep, "env_steps": total, "return": ret,
               "critic_loss": _mean(stats["critic_loss"]), "actor_loss": _mean(stats["actor_loss"]),
               "smoothing_term": _mean(stats["smoothing_term"]), "alpha_T": agent.temperature}
        if not all(math.isfinite(v) for v in (row["critic_loss"], row["actor_loss"])
                   if v is not None):
            raise NumericError(f"training diverged at episode {ep}")
        if alphas:
            row["alpha_mean"] = np.mean(alphas, axis=0).tolist()
        metrics.append(row)
        if config.eval_every and (ep % config.eval_every == 0 or ep == config.episodes):
            ev = evaluate(agent, task, config.eval_episodes, eval_seed, tp, params)
            evals.append({"episode": ep, "mean_return": ev["mean_return"],
                          "success_rate": ev["success_rate"], "smoothing": ev["smoothing"]})
            if best is None or ev["mean_return"] > best:
                best, best_actor = ev["mean_return"], dict(agent.actor)
        elif not config.eval_every:
            best_actor = dict(agent.actor)
        if callback is not None:
            callback(row)
    return TrainResult(agent, best_actor, metrics, evals, best)


def _mean(xs):
    return float(np.mean(xs)) if xs else None


def run_stage1(task: str, config: TrainConfig, seed: int, tp: E.TaskParams = E.TaskParams(),
               params: E.EnvParams = E.EnvParams(), init_seed: int | None = None, **kw) -> TrainResult:
    """Train a single expert on ``recovery`` or ``rhythmic``.

    ``init_seed`` fixes the actor initialization independently of ``seed``
    (stage-1 experts sharing an initialization average more gracefully).
    """
    rng_init = np.random.default_rng(seed if init_seed is None else init_seed)
    agent = new_stage1_agent(task, config, rng_init)
    res = train(agent, task, config, seed, tp, params, **kw)
    res.best_actor = dict(res.best_actor)
    return res


def frozen_expert_agent(actor: dict, config: TrainConfig, task: str | None = None) -> SACAgent:
    mask = None if task is None else E.STAGE1_MASK[task]
    return agent_from_actor("single", actor, config, np.random.default_rng(0), mask=mask)


def stage2_agent(pretrained_a: dict, pretrained_b: dict, config: TrainConfig, seed: int,
                 arch: str = "mela") -> SACAgent:
    if arch not in ("mela", "moe"):
        raise ContractError(f"stage 2 trains 'mela' or 'moe', not {arch!r}")
    try:
        pa, pb = ParamSet.from_dict(pretrained_a), ParamSet.from_dict(pretrained_b)
    except (KeyError, ValueError) as e:
        raise ContractError(f"incompatible stage-1 checkpoints: {e}") from None
    if pa.spec != pb.spec:
        raise ContractError(f"stage-1 experts differ in shape: {pa.spec} vs {pb.spec}")
    validate_actor("single", pretrained_a)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    bank = init_stage2(pa, pb, config.n_experts, rng,
                       gating_spec(len(E.GATING_LAYOUT), config.n_experts, config.gating_hidden))
    return agent_from_actor(arch, bank_params(bank), config, rng)


def run_stage2(pretrained_a: dict, pretrained_b: dict, config: TrainConfig, seed: int,
               arch: str = "mela", tp: E.TaskParams = E.TaskParams(),
               params: E.EnvParams = E.EnvParams(), **kw) -> TrainResult:
    """Co-train gating, all experts and fresh critics on the multimodal task."""
    agent = stage2_agent(pretrained_a, pretrained_b, config, seed, arch)
    return train(agent, "multimodal", config, seed, tp, params, **kw)


def alpha_log(agent: SACAgent, episodes: int, seed: int, tp: E.TaskParams = E.TaskParams(),
              params: E.EnvParams = E.EnvParams(), task: str = "multimodal"):
    """(modes, alphas, actions) from deterministic evaluation episodes."""
    ev = evaluate(agent, task, episodes, seed, tp, params, record=True)
    modes, alphas, actions = [], [], []
    for e in ev["per_episode"]:
        modes += e.modes
        alphas += e.alpha
    return modes, np.array(alphas).reshape(len(alphas), -1), ev


__all__ = ["ACTION_BOUND", "run_stage1", "run_stage2", "evaluate", "run_episode", "train",
           "stage2_agent", "frozen_expert_agent", "agent_from_actor", "alpha_log", "actor_forward"]
