import math

import numpy as np
import pytest

from mela import autodiff as ad
from mela import env as E
from mela.autodiff import AdamState, Tape, adam_step
from mela.errors import ConfigError, ContractError
from mela.fusion import init_stage2
from mela.nets import ActionBound, MlpSpec, ParamSet, expert_spec, gating_spec, init_params
from mela.sac import (Batch, ReplayBuffer, Temperature, TrainConfig, actor_loss, actor_update,
                      bank_params, critic_targets, critic_update, make_agent, sac_update,
                      soft_update, temperature_gradient, temperature_update)

BOUND = ActionBound.symmetric([math.pi, math.pi])
SMALL = dict(expert_hidden=16, gating_hidden=8, critic_hidden=16, batch_size=32)


def single_agent(seed=0, **cfg):
    rng = np.random.default_rng(seed)
    config = TrainConfig(**{**SMALL, **cfg})
    actor = init_params(expert_spec(len(E.POLICY_LAYOUT), 2, config.expert_hidden), rng).as_dict()
    return make_agent("single", actor, len(E.FULL_LAYOUT), config, BOUND, rng,
                      policy_index=E.POLICY_INDEX, critic_index=E.CRITIC_INDEX,
                      joint_index=E.JOINT_INDEX)


def mela_agent(seed=0, arch="mela", **cfg):
    rng = np.random.default_rng(seed)
    config = TrainConfig(**{**SMALL, "n_experts": 4, **cfg})
    es = expert_spec(len(E.POLICY_LAYOUT), 2, config.expert_hidden)
    bank = init_stage2(init_params(es, rng, 0.3), init_params(es, rng, 0.3), 4, rng,
                       gating_spec(len(E.GATING_LAYOUT), 4, config.gating_hidden))
    return make_agent(arch, bank_params(bank), len(E.FULL_LAYOUT), config, BOUND, rng,
                      policy_index=E.POLICY_INDEX, gating_index=E.GATING_INDEX,
                      critic_index=E.CRITIC_INDEX, joint_index=E.JOINT_INDEX)


def random_states(n, rng):
    out = []
    for _ in range(n):
        s = E.EnvState(q=rng.uniform(-math.pi, math.pi, 2), qd=rng.normal(size=2),
                       t=rng.uniform(0, 5), goal=rng.uniform(-1, 1, 2))
        out.append(E.full_observation(s))
    return np.array(out)


def random_batch(n=32, seed=0, done=0.0, reward=None):
    rng = np.random.default_rng(seed)
    r = rng.uniform(0, 1, n) if reward is None else np.full(n, reward)
    return Batch(random_states(n, rng), rng.uniform(-3, 3, (n, 2)), r,
                 random_states(n, rng), np.full(n, done))


def test_config_defaults_and_invariants():
    c = TrainConfig()
    assert (c.smoothing_coef, c.lr, c.weight_decay, c.gamma, c.tau_target, c.steps_per_epoch) == \
        (2.0, 3e-4, 1e-6, 0.987, 0.001, 5000)
    for bad in ({"gamma": 1.0}, {"gamma": 0.0}, {"tau_target": 0.0}, {"tau_target": 1.5},
                {"smoothing_coef": -1.0}, {"n_experts": 1}):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


def test_replay_buffer_is_fifo_and_bounded():
    buf = ReplayBuffer(5, 1, 1)
    for i in range(8):
        buf.push(np.array([i]), np.zeros(1), float(i), np.zeros(1), False)
    assert len(buf) == 5
    assert sorted(buf.r.tolist()) == [3, 4, 5, 6, 7]
    b = buf.sample(5, np.random.default_rng(0))
    assert sorted(b.r.tolist()) == [3, 4, 5, 6, 7]  # no repeats within a batch


def test_replay_buffer_contracts():
    with pytest.raises(ContractError):
        ReplayBuffer(2, 1, 1).sample(1, np.random.default_rng(0))
    with pytest.raises(ContractError):
        ReplayBuffer(0, 1, 1)
    with pytest.raises(ContractError):
        ReplayBuffer(2, 1, 1).push(np.zeros(1), np.zeros(1), math.nan, np.zeros(1), False)


def test_terminal_transitions_bootstrap_nothing():
    agent = single_agent()
    b = random_batch(done=1.0)
    assert np.array_equal(critic_targets(b, agent, np.random.default_rng(0)), b.r)


def test_zero_discount_targets_equal_rewards():
    agent = single_agent(gamma=1e-300)
    b = random_batch()
    assert np.allclose(critic_targets(b, agent, np.random.default_rng(0)), b.r, atol=1e-290)


def test_bandit_critics_converge_to_the_reward():
    agent = single_agent(gamma=1e-12, lr=3e-3)
    rng = np.random.default_rng(1)
    s = random_states(1, rng)
    b = Batch(np.repeat(s, 32, 0), rng.uniform(-1, 1, (32, 2)), np.ones(32), np.repeat(s, 32, 0),
              np.zeros(32))
    for _ in range(500):
        critic_update(b, agent, rng)
    q = agent.q_values(agent.critic, b.s, b.a).value
    assert np.max(np.abs(q - 1.0)) < 0.05


def test_critic_update_rejects_empty_batch():
    agent = single_agent()
    empty = Batch(np.zeros((0, 17)), np.zeros((0, 2)), np.zeros(0), np.zeros((0, 17)), np.zeros(0))
    with pytest.raises(ContractError):
        critic_update(empty, agent, np.random.default_rng(0))


def test_targets_receive_no_gradient_from_the_critic_step():
    agent = single_agent()
    before = agent.critic_target.copy()
    critic_update(random_batch(), agent, np.random.default_rng(0))
    assert agent.critic_target.equals(before)
    assert not agent.critic.equals(before)


def test_soft_update_limits_and_geometric_recurrence():
    a = ParamSet(**{k: np.zeros(s) for k, s in MlpSpec(1, 1, 1).shapes().items()})
    b = a.map(lambda v: np.ones_like(v))
    assert soft_update(a, b, 1.0).equals(b)
    assert soft_update(a, b, 0.0).equals(a)
    t = a
    for _ in range(1000):
        t = soft_update(t, b, 0.001)
    assert math.isclose(float(t.W0[0, 0]), 1 - 0.999**1000, rel_tol=1e-12)
    assert abs(float(t.W0[0, 0]) - 0.632) < 5e-4
    with pytest.raises(ContractError):
        soft_update(a, ParamSet(**{k: np.zeros(s) for k, s in MlpSpec(2, 1, 1).shapes().items()}), 0.5)


def test_smoothing_term_matches_hand_computation():
    agent = single_agent(3)
    b = random_batch(16, 3)
    noise = np.random.default_rng(4).normal(size=(16, 2))
    _, _, smooth = actor_loss(agent, agent.actor, b.s, noise, 2.0)
    mu = agent.mean_action(b.s)
    d = mu - b.s[:, :2]
    d = d - 2 * np.pi * np.round(d / (2 * np.pi))
    assert math.isclose(smooth.item(), float(np.mean(np.linalg.norm(d, axis=1))), rel_tol=1e-12)


def test_zero_coefficient_is_plain_sac_loss():
    agent = single_agent(5)
    b = random_batch(16, 5)
    noise = np.random.default_rng(6).normal(size=(16, 2))
    loss, logp, smooth = actor_loss(agent, agent.actor, b.s, noise, 0.0)
    assert smooth is None
    out, _ = agent.forward(agent.actor, b.s)
    from mela.nets import squashed_action
    a, lp = squashed_action(out, BOUND, noise)
    q = agent.q_values(agent.critic, b.s, a.value).value[:, :, 0].min(0)
    assert math.isclose(loss.item(), float(np.mean(agent.temperature * lp.value - q)), rel_tol=1e-12)


def test_smoothing_needs_joint_positions():
    agent = single_agent()
    agent.joint_index = None
    with pytest.raises(ContractError):
        actor_update(random_batch(), agent, np.random.default_rng(0))


def test_actor_gradient_reaches_gating_logits():
    agent = mela_agent()
    b = random_batch(32, 7)
    noise = np.random.default_rng(8).normal(size=(32, 2))
    with Tape() as tape:
        leaves = {k: tape.watch(v) for k, v in agent.actor.items()}
        loss, _, _ = actor_loss(agent, leaves, b.s, noise, 2.0)
        g = tape.backward(loss)
    assert np.linalg.norm(g[leaves["gating.W2"]]) > 0
    assert np.linalg.norm(g[leaves["experts.W0"]]) > 0


def test_huge_smoothing_coefficient_pins_mean_to_measured_joints():
    b = random_batch(64, 9)
    gaps = {}
    for c in (0.0, 1e6):
        agent = single_agent(9, smoothing_coef=c, lr=3e-3)
        rng = np.random.default_rng(10)
        for _ in range(600):
            actor_update(b, agent, rng)
        d = agent.mean_action(b.s) - b.s[:, :2]
        d = d - 2 * np.pi * np.round(d / (2 * np.pi))
        gaps[c] = float(np.mean(np.linalg.norm(d, axis=1)))
    assert gaps[1e6] < 0.1 * gaps[0.0]


def test_temperature_gradient_vanishes_at_target_entropy():
    assert temperature_gradient(np.full(10, 2.0), 0.3, -2.0) == 0.0


def test_temperature_falls_when_entropy_is_far_above_target():
    t = Temperature(0.0, AdamState(lr=0.01, weight_decay=0.0))
    logp = np.full(8, -10.0)  # entropy 10 >> target -2
    temperature_update(logp, t, -2.0)
    assert t.value < 1.0


def test_temperature_tuning_drives_gaussian_to_target_entropy():
    # 1-D Gaussian policy, critic Q(a) = -a^2, temperature tuned towards entropy -1
    rng = np.random.default_rng(0)
    log_sigma = np.array(0.0)
    opt = AdamState(lr=1e-2, weight_decay=0.0)
    temp = Temperature(0.0, AdamState(lr=1e-2, weight_decay=0.0))
    for _ in range(6000):
        eps = rng.normal(size=256)
        with Tape() as tape:
            ls = tape.watch(log_sigma)
            a = ad.exp(ls) * eps
            logp = -0.5 * eps**2 - ls - 0.5 * math.log(2 * math.pi)
            loss = ad.mean(temp.value * logp + ad.square(a))
            g = tape.backward(loss)[ls]
        log_sigma = adam_step({"s": log_sigma}, {"s": g}, opt)["s"]
        temperature_update(logp.value, temp, -1.0)
    entropy = 0.5 * math.log(2 * math.pi * math.e) + float(log_sigma)
    assert abs(entropy - (-1.0)) < 0.1


@pytest.mark.parametrize("arch", ["single", "mela", "moe"])
def test_update_is_deterministic_given_seed(arch):
    def run():
        agent = single_agent(11) if arch == "single" else mela_agent(11, arch)
        rng = np.random.default_rng(12)
        stats = [sac_update(random_batch(32, i), agent, rng) for i in range(3)]
        return stats, agent.actor

    (s1, a1), (s2, a2) = run(), run()
    assert s1 == s2
    assert all(np.array_equal(a1[k], a2[k]) for k in a1)


def test_frozen_one_hot_gate_reproduces_a_single_expert():
    agent = mela_agent(13)
    agent.frozen_alpha = np.eye(4)[0]
    s = random_states(10, np.random.default_rng(14))
    from mela.nets import mlp_forward
    from mela.fusion import ExpertBank
    from mela.sac import params_to_bank
    bank = params_to_bank(agent.actor)
    raw = mlp_forward(bank.expert(0), s[:, E.POLICY_INDEX]).value
    got, _ = agent.forward(agent.actor, s)
    assert np.max(np.abs(got.mean.value - raw[:, :2])) <= 1e-12
