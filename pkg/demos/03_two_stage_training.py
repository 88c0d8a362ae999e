"""Two-stage training in miniature.

Stage 1 trains one expert per skill with SAC (here: rhythmic stepping, twice,
with and without the smoothing loss). Stage 2 copies the two experts into an
8-expert bank, adds a gating network and fresh critics, and co-trains
everything on the multimodal task. Budgets are tiny so the script finishes in
a few minutes; the acceptance tests use the same code with larger budgets.
"""
import sys

import numpy as np

from mela import analysis
from mela.sac import TrainConfig
from mela.training import alpha_log, evaluate, frozen_expert_agent, run_stage1, run_stage2

scale = float(sys.argv[1]) if len(sys.argv) > 1 else 1.0
desk = dict(expert_hidden=32, gating_hidden=16, critic_hidden=64, batch_size=64,
            tau_target=0.005, lr=1e-3, init_log_std=-2.3, eval_every=0)

experts = {}
for c in (0.0, 2.0):
    cfg = TrainConfig(**desk, smoothing_coef=c, episodes=int(150 * scale))
    res = run_stage1("rhythmic", cfg, seed=0)
    ev = evaluate(res.agent, "rhythmic", 5, seed=100)
    print(f"rhythmic expert, c = {c}: return {ev['mean_return']:.1f}, "
          f"mean |mu - q| {ev['smoothing']:.4f}")
    experts[c] = res

cfg = TrainConfig(**desk, episodes=int(40 * scale))
recovery = run_stage1("recovery", cfg, seed=0).agent.actor
rhythmic = experts[2.0].agent.actor
for name, actor, task in (("recovery", recovery, "recovery"), ("rhythmic", rhythmic, "rhythmic")):
    ev = evaluate(frozen_expert_agent(actor, cfg, task), "multimodal", 5, seed=100)
    print(f"frozen {name} expert on the multimodal task: return {ev['mean_return']:.1f}")

mela = run_stage2(recovery, rhythmic, TrainConfig(**desk, episodes=int(20 * scale)), seed=0)
print(f"co-trained MELA on the multimodal task: "
      f"return {evaluate(mela.agent, 'multimodal', 5, seed=100)['mean_return']:.1f}")

modes, alphas, _ = alpha_log(mela.agent, 3, seed=100)
labels, mat, counts = analysis.activation_matrix(modes, alphas)
print("\nmean gating weight per mode (rows) and expert (columns):")
for label, row, n in zip(labels, mat, counts):
    print(f"  {label:<14} ({n:4d} steps) {np.round(row, 2)}")
print("dominance:", analysis.dominance(labels, mat))
