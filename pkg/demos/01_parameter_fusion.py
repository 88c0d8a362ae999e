"""Parameter-space fusion versus output blending.

Two experts share one architecture, so a gating weight vector can blend
their *parameters* into a single synthesized network. At a one-hot weight the
synthesized network is exactly that expert; in between it is a new network,
not an average of the two experts' outputs.
"""
import numpy as np

from mela.fusion import ExpertBank, fuse_parameters, mela_forward, moe_forward
from mela.nets import expert_spec, gating_spec, init_params, mlp_forward

rng = np.random.default_rng(0)
spec = expert_spec(6, 2, 16)
experts = [init_params(spec, rng, out_scale=1.0) for _ in range(3)]
bank = ExpertBank.from_list(experts, init_params(gating_spec(4, 3, 8), rng))
x = rng.normal(size=(5, spec.x))

print("one-hot weights reproduce each expert:")
for k in range(bank.n):
    alpha = np.tile(np.eye(bank.n)[k], (len(x), 1))
    fused, _ = mela_forward(bank.experts, bank.gating, None, x, alpha=alpha)
    err = np.max(np.abs(fused.value - mlp_forward(bank.expert(k), x).value))
    print(f"  expert {k}: max |difference| = {err:.1e}")

# halfway between experts 0 and 1
alpha = np.tile([0.5, 0.5, 0.0], (len(x), 1))
mela, _ = mela_forward(bank.experts, bank.gating, None, x, alpha=alpha)
moe, _ = moe_forward(bank.experts, bank.gating, None, x, alpha=alpha)
print("\nat alpha = (0.5, 0.5, 0) the two blends disagree:")
print("  parameter fusion :", np.round(mela.value[0], 3))
print("  output blending  :", np.round(moe.value[0], 3))

# the same fusion, written out for one weight vector
single = fuse_parameters(bank.experts, np.array([0.2, 0.3, 0.5]))
print("\nfused W0 equals the weighted sum of expert W0:",
      np.allclose(single.W0.value, sum(w * e.W0 for w, e in zip([0.2, 0.3, 0.5], experts))))
