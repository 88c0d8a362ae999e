"""The action pipeline and the plant.

A policy emits absolute joint references at 25 Hz. Each one is low-pass
filtered, then interpolated over 40 substeps under a speed limit and tracked by
a 1 kHz impedance loop that drives the two-link pendulum. Holding the reference
at zero is enough to stand the arm up from every pose in the recovery catalogue.
"""
import numpy as np

from mela import env as E
from mela.control import FilterState, lowpass_step

fs = FilterState(5.0, 1 / 25)
lowpass_step(fs, 0.0)  # the filter starts at rest on its first input
step_response = [float(lowpass_step(fs, 1.0)) for _ in range(8)]
print("5 Hz filter, unit step at 25 Hz:", np.round(step_response, 3))

tp = E.TaskParams()
steps = int(tp.episode_seconds * tp.policy_rate_hz)
print(f"\nzero reference from each recovery pose ({steps} steps):")
for name, (q1, q2, w1, w2) in E.CATALOGUE.items():
    env = E.PendulumEnv("recovery", tp=tp)
    env.reset(np.random.default_rng(0))
    env.state = E.EnvState(q=np.array([q1, q2]), qd=np.array([w1, w2]), start=name)
    env.ref = env.state.q.copy()
    total = 0.0
    for _ in range(steps):
        r, done, _, _ = env.step(np.zeros(2))
        total += r
        if done:
            break
    s = env.state
    print(f"  {name:<24} return {total:6.1f}  final q = {np.round(s.q, 3)}  |qd| = {np.abs(s.qd).max():.3f}")
