"""Acceptance criteria 1-12.

Each test records one PASS/FAIL line (printed again in the terminal summary).
The training criteria share session fixtures so every run happens once; the
whole file is desk-scale but still takes about an hour on one CPU.
"""

import math
import time

import numpy as np
import pytest

from mela import analysis
from mela import env as E
from mela import io
from mela.autodiff import Tape
from mela.cli import main
from mela.control import FilterState, lowpass_step
from mela.fusion import ExpertBank, init_stage2, mela_forward
from mela.nets import ActionBound, MlpSpec, expert_spec, gating_spec, init_params, mlp_forward
from mela.rewards import TERM_TABLE, rbf
from mela.sac import TrainConfig, actor_loss, bank_params, make_agent
from mela.training import (agent_from_actor, alpha_log, evaluate, frozen_expert_agent, run_stage1,
                           run_stage2)

SEEDS = (0, 1, 2)
BOUND = ActionBound.symmetric([math.pi, math.pi])

# -- 1. fusion vertex identity ------------------------------------------------


def test_c1_one_hot_fusion_reproduces_each_expert(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    es = expert_spec(len(E.POLICY_LAYOUT), 2, 64)
    experts = [init_params(es, rng, out_scale=1.0) for _ in range(8)]
    for e in experts:
        for name in ("B0", "B1", "B2"):
            getattr(e, name)[:] = rng.normal(size=getattr(e, name).shape)
    bank = ExpertBank.from_list(experts, init_params(gating_spec(len(E.GATING_LAYOUT), 8, 32), rng))
    x = rng.normal(size=(100, es.x))
    worst = 0.0
    for k in range(bank.n):
        alpha = np.zeros((100, bank.n))
        alpha[:, k] = 1.0
        raw, _ = mela_forward(bank.experts, bank.gating, None, x, alpha=alpha)
        worst = max(worst, float(np.max(np.abs(raw.value - mlp_forward(bank.expert(k), x).value))))
    took = time.perf_counter() - t0
    ok = worst <= 1e-12 and took < 1.0
    report(1, ok, f"one-hot fusion max |err| = {worst:.2e} (<= 1e-12), {took:.2f} s (< 1 s)")
    assert ok


# -- 2. gradient integrity ----------------------------------------------------


def _fd_instance(seed):
    rng = np.random.default_rng(seed)
    cfg = TrainConfig(expert_hidden=8, gating_hidden=6, critic_hidden=8, n_experts=4,
                      smoothing_coef=2.0)
    es = expert_spec(len(E.POLICY_LAYOUT), 2, cfg.expert_hidden)
    bank = init_stage2(init_params(es, rng, 0.5), init_params(es, rng, 0.5), 4, rng,
                       gating_spec(len(E.GATING_LAYOUT), 4, cfg.gating_hidden))
    bank.gating.W2[:] = rng.normal(scale=0.5, size=bank.gating.W2.shape)  # non-uniform alpha
    # random biases keep every ReLU pre-activation off its kink, where central
    # differences are not a valid oracle
    for net in (bank.gating, bank.experts):
        for name in ("B0", "B1"):
            getattr(net, name)[:] = rng.normal(scale=0.3, size=getattr(net, name).shape)
    agent = make_agent("mela", bank_params(bank), len(E.FULL_LAYOUT), cfg, BOUND, rng,
                       policy_index=E.POLICY_INDEX, gating_index=E.GATING_INDEX,
                       critic_index=E.CRITIC_INDEX, joint_index=E.JOINT_INDEX)
    states = []
    for _ in range(6):
        s = E.EnvState(q=rng.uniform(-2.5, 2.5, 2), qd=rng.normal(size=2), t=rng.uniform(0, 5),
                       goal=rng.uniform(-1, 1, 2))
        states.append(E.full_observation(s))
    return agent, np.array(states), rng.standard_normal((6, 2)), rng


def test_c2_actor_gradients_match_central_differences(report):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        agent, states, noise, rng = _fd_instance(seed)
        params = {k: v.copy() for k, v in agent.actor.items()}

        def loss_at(p):
            return actor_loss(agent, p, states, noise, 2.0)[0].item()

        with Tape() as tape:
            leaves = {k: tape.watch(v, k) for k, v in params.items()}
            loss = actor_loss(agent, leaves, states, noise, 2.0)[0]
            g = tape.backward(loss)
        grads = {k: g[t] for k, t in leaves.items()}
        ad_vals, fd_vals = [], []
        for name in sorted(params):
            flat = params[name].reshape(-1)
            for idx in rng.choice(flat.size, size=min(4, flat.size), replace=False):
                h = 1e-6
                old = flat[idx]
                flat[idx] = old + h
                up = loss_at(params)
                flat[idx] = old - h
                down = loss_at(params)
                flat[idx] = old
                fd_vals.append((up - down) / (2 * h))
                ad_vals.append(grads[name].reshape(-1)[idx])
        ad_vals, fd_vals = np.array(ad_vals), np.array(fd_vals)
        rel = np.linalg.norm(ad_vals - fd_vals) / max(np.linalg.norm(fd_vals), 1e-300)
        worst = max(worst, float(rel))
    took = time.perf_counter() - t0
    ok = worst < 1e-4 and took < 30.0
    report(2, ok, f"worst relative gradient error over 20 instances = {worst:.2e} (< 1e-4), "
                  f"{took:.1f} s (< 30 s)")
    assert ok


# -- 5. filter response -------------------------------------------------------


def _gain(freq, cutoff=5.0, dt=1 / 25, periods=400):
    fs = FilterState(cutoff, dt)
    n = int(round(periods / (freq * dt)))
    t = np.arange(n) * dt
    y = np.array([lowpass_step(fs, v) for v in np.sin(2 * np.pi * freq * t)])
    half = n // 2
    basis = np.stack([np.sin(2 * np.pi * freq * t[half:]), np.cos(2 * np.pi * freq * t[half:])], 1)
    coef, *_ = np.linalg.lstsq(basis, y[half:], rcond=None)
    return float(np.hypot(*coef))


def test_c5_filter_dc_gain_and_cutoff(report):
    fs = FilterState(5.0, 1 / 25)
    lowpass_step(fs, 0.0)
    for _ in range(2000):
        dc = float(lowpass_step(fs, 1.0))
    g = _gain(5.0)
    ok = abs(dc - 1) <= 1e-9 and abs(g - 1 / math.sqrt(2)) <= 0.02 / math.sqrt(2)
    report(5, ok, f"DC gain {dc:.12f} (1 +- 1e-9), gain at fc {g:.5f} (0.7071 +- 2%)")
    assert ok


# -- 6. RBF bounds ------------------------------------------------------------


def test_c6_rbf_bounded_and_peaked(report):
    widths = sorted({w for w, _ in TERM_TABLE.values() if w is not None})
    rng = np.random.default_rng(6)
    ok = True
    for w in widths:
        x = rng.uniform(-3, 3, size=(10**5, 3))
        xh = rng.uniform(-3, 3, size=(10**5, 3))
        vals = np.maximum(np.exp(w * np.sum((x - xh) ** 2, axis=1)), np.finfo(float).tiny)
        for i in rng.choice(10**5, 100, replace=False):
            ok &= math.isclose(rbf(x[i], xh[i], w), vals[i], rel_tol=1e-12)
        ok &= bool(np.all(vals > 0) and np.all(vals <= 1))
        for i in range(20):
            ok &= rbf(xh[i], xh[i], w) == 1.0
            for eps in (1e-1, 1e-3):
                ok &= all(rbf(xh[i] + eps * d, xh[i], w) < 1.0 for d in rng.normal(size=(10, 3)))
    report(6, ok, f"{len(widths)} widths x 1e5 draws: outputs in (0, 1], peak only at x = target")
    assert ok


# -- 12. energy gate ----------------------------------------------------------


def test_c12_energy_drift(report):
    p = E.EnvParams(damping=0.0)
    worst = 0.0
    for q1, q2, w1, w2 in E.CATALOGUE.values():
        s = E.EnvState(q=np.array([q1, q2]), qd=np.array([w1, w2]))
        e0 = E.mechanical_energy(s.q, s.qd, p)
        scale = max(abs(e0), 1e-9)
        for _ in range(1000):
            s = E.step(s, np.zeros(2), p)
            worst = max(worst, abs(E.mechanical_energy(s.q, s.qd, p) - e0) / scale)
    ok = worst < 0.005
    report(12, ok, f"worst relative energy drift over 1 s from 9 poses = {worst:.2e} (< 5e-3)")
    assert ok


# -- 11. determinism ----------------------------------------------------------

TINY = ["--expert-hidden", "8", "--gating-hidden", "8", "--critic-hidden", "8", "--n-experts", "2",
        "--batch-size", "16", "--warmup-steps", "50", "--eval-every", "1", "--eval-episodes", "1",
        "--episodes", "2"]


def test_c11_reruns_are_byte_identical(tmp_path, monkeypatch, report):
    def run_all(root):
        # relative paths, because the eval summary records the checkpoint path
        root.mkdir()
        monkeypatch.chdir(root)
        for task in ("recovery", "rhythmic"):
            assert main(["train", "--stage", "1", "--task", task, "--seed", "5", "--out", task,
                         *TINY]) == 0
        assert main(["train", "--stage", "2", "--arch", "mela", "--seed", "5",
                     "--expert-a", "recovery/checkpoint.npz", "--expert-b", "rhythmic/checkpoint.npz",
                     "--out", "mela", *TINY]) == 0
        assert main(["eval", "--checkpoint", "mela/checkpoint.npz", "--episodes", "2",
                     "--seed", "5", "--out", "eval"]) == 0
        return [root / "recovery" / "metrics.jsonl", root / "rhythmic" / "metrics.jsonl",
                root / "mela" / "metrics.jsonl", root / "mela" / "checkpoint.npz",
                root / "eval" / "summary.json", root / "eval" / "alpha_log.jsonl"]

    a = run_all(tmp_path / "a")
    b = run_all(tmp_path / "b")
    same = [x.read_bytes() == y.read_bytes() for x, y in zip(a, b)]
    ok = all(same)
    report(11, ok, f"{sum(same)}/{len(same)} artifacts byte-identical across reruns "
                   "(stage-1 x2, stage-2, checkpoint, eval summary, alpha log)")
    assert ok


# -- training criteria (3, 4, 7, 8, 9, 10) -----------------------------------
# Desk calibration shared by every training run below; see the decisions ledger.
DESK = dict(expert_hidden=64, gating_hidden=32, critic_hidden=128, batch_size=128,
            tau_target=0.005, lr=1e-3, init_log_std=-2.3, smoothing_coef=2.0)
RECOVERY_EPISODES = 60
RHYTHMIC_EPISODES = 400
STAGE2_EPISODES = 60
EVAL_EPISODES = 50
EVAL_SEED = 999

_CACHE: dict = {}


def _cached(key, build):
    if key not in _CACHE:
        t0 = time.perf_counter()
        value = build()
        _CACHE[key] = (value, time.perf_counter() - t0)
    return _CACHE[key]


def _stage1(task, seed, c=2.0):
    episodes = RECOVERY_EPISODES if task == "recovery" else RHYTHMIC_EPISODES
    every = 10 if task == "recovery" else 50
    cfg = TrainConfig(**{**DESK, "smoothing_coef": c}, episodes=episodes, eval_every=every,
                      eval_episodes=9)
    return _cached(("stage1", task, seed, c), lambda: (run_stage1(task, cfg, seed), cfg))


def _stage2(arch, seed):
    def build():
        (rec, _), _ = _stage1("recovery", seed)
        (rhy, _), _ = _stage1("rhythmic", seed)
        cfg = TrainConfig(**DESK, episodes=STAGE2_EPISODES, eval_every=5, eval_episodes=5)
        return run_stage2(rec.best_actor, rhy.best_actor, cfg, seed, arch), cfg
    return _cached(("stage2", arch, seed), build)


def test_c4_smoothing_loss_lowers_tracking_offset(report):
    per = {}
    for c in (0.0, 2.0):
        vals = []
        for seed in SEEDS:
            (res, _), _ = _stage1("rhythmic", seed, c)
            vals.append(evaluate(res.agent, "rhythmic", 10, EVAL_SEED)["smoothing"])
        per[c] = vals
    m0, m2 = float(np.mean(per[0.0])), float(np.mean(per[2.0]))
    ok = m2 <= 0.75 * m0
    report(4, ok, f"rhythmic mean |mu - q| at convergence: c=2 {m2:.4f} vs c=0 {m0:.4f} "
                  f"({100 * (1 - m2 / m0):.0f}% lower, need >= 25%); per seed c=2 "
                  f"{np.round(per[2.0], 4).tolist()}, c=0 {np.round(per[0.0], 4).tolist()}")
    assert ok


def test_c7_recovery_success_rate(report):
    rates, times = [], []
    for seed in SEEDS:
        (res, cfg), took = _stage1("recovery", seed)
        ev = evaluate(frozen_expert_agent(res.best_actor, cfg, "recovery"), "recovery",
                      EVAL_EPISODES, EVAL_SEED)
        rates.append(ev["success_rate"])
        times.append(took)
    ok = min(rates) >= 0.9 and max(times) <= 15 * 60
    report(7, ok, f"recovery success over {EVAL_EPISODES} episodes per seed "
                  f"{[round(r, 2) for r in rates]} (need >= 0.90 each), "
                  f"train time {[round(t) for t in times]} s (<= 900 s)")
    assert ok


def _alpha_log(seed, arch="mela"):
    def build():
        (res, _), _ = _stage2(arch, seed)
        return alpha_log(res.agent, 10, EVAL_SEED)
    return _cached(("alpha", arch, seed), build)[0]


def test_c3_logged_alpha_stays_on_the_simplex(report):
    rows = 0
    worst = 0.0
    in_range = True
    for arch in ("mela", "moe"):
        for seed in SEEDS:
            (res, _), _ = _stage2(arch, seed)
            logs = [np.array(r["alpha_mean"]) for r in res.metrics if r.get("alpha_mean")]
            logs.extend(_alpha_log(seed, arch)[1])
            for a in logs:
                worst = max(worst, abs(float(a.sum()) - 1))
                in_range &= bool(np.all((a >= 0) & (a <= 1)))
                rows += 1
    ok = rows > 0 and worst <= 1e-6 and in_range
    report(3, ok, f"{rows} logged alpha vectors, max |sum - 1| = {worst:.1e} (<= 1e-6), "
                  f"entries in [0, 1]: {in_range}")
    assert ok


def test_c8_each_mode_has_a_dominant_expert(report):
    verdicts = []
    for seed in SEEDS:
        modes, alphas, _ = _alpha_log(seed)
        labels, mat, _ = analysis.activation_matrix(modes, alphas)
        dom = analysis.dominance(labels, mat)
        verdicts.append((dom["all_strict"] and dom["distinct"], dom["dominant"]))
    ok = all(v for v, _ in verdicts)
    report(8, ok, "dominant expert per mode by seed: "
                  + "; ".join(f"{d}" for _, d in verdicts)
                  + " (need a strict argmax per mode and recovery != rhythmic)")
    assert ok


def test_c9_cotrained_mela_beats_frozen_experts(report):
    mela, frozen = [], []
    for seed in SEEDS:
        (res, cfg), _ = _stage2("mela", seed)
        best = agent_from_actor("mela", res.best_actor, cfg, np.random.default_rng(0))
        mela.append(evaluate(best, "multimodal", EVAL_EPISODES, EVAL_SEED)["mean_return"])
        experts = []
        for task in ("recovery", "rhythmic"):
            (r1, c1), _ = _stage1(task, seed)
            agent = frozen_expert_agent(r1.best_actor, c1, task)
            experts.append(evaluate(agent, "multimodal", EVAL_EPISODES, EVAL_SEED)["mean_return"])
        frozen.append(max(experts))
    mm, fm = float(np.mean(mela)), float(np.mean(frozen))
    ok = mm >= fm
    report(9, ok, f"multimodal return over {EVAL_EPISODES} episodes: MELA {mm:.1f} vs best frozen "
                  f"expert {fm:.1f} (seed means; per seed {np.round(mela, 1).tolist()} vs "
                  f"{np.round(frozen, 1).tolist()})")
    assert ok


def test_c10_mela_vs_moe_learning_curve_area(report):
    aucs = {}
    for arch in ("mela", "moe"):
        aucs[arch] = [analysis.auc([r["return"] for r in _stage2(arch, s)[0][0].metrics])
                      for s in SEEDS]
    rows = {label: (mean, std) for label, mean, std, _ in analysis.summarize(aucs)}
    (m, ms), (o, os_) = rows["mela"], rows["moe"]
    verdict = "MELA >= MoE" if m >= o else "MELA < MoE"
    report(10, True, f"reported, not gated: AUC of training return MELA {m:.1f} +- {ms:.1f} vs "
                     f"MoE {o:.1f} +- {os_:.1f} over {len(SEEDS)} seeds ({verdict})")
