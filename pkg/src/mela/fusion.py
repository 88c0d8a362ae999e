"""Gating, parameter-space fusion of experts, and the output-blending baseline.

A bank of N shape-identical experts is kept stacked along axis 0.  For one
state the gating network yields simplex weights ``alpha`` and the synthesized
network is the MLP whose every weight and bias is ``sum_n alpha_n * theta_n``
(:func:`fuse_parameters`).  For a batch, where every row has its own alpha,
:func:`mela_forward` computes the same network layer by layer using
``x @ (sum_n a_n W_n) = sum_n a_n (x @ W_n)`` so no per-row weight matrices
are materialized.  :func:`moe_forward` instead blends the experts' outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .nets import (PARAM_NAMES, MlpSpec, ParamSet, PolicyOutput, ensemble_forward,
                   init_params, mlp_forward, split_head, stack_params)


@dataclass(frozen=True)
class ExpertBank:
    experts: ParamSet   # stacked, leading axis N
    gating: ParamSet

    def __post_init__(self):
        if self.experts.stacked is None:
            raise ContractError("ExpertBank.experts must be a stacked ParamSet")
        if self.n < 2:
            raise ContractError(f"an expert bank needs at least 2 experts, got {self.n}")
        if self.gating.spec.y != self.n:
            raise ContractError(
                f"gating network emits {self.gating.spec.y} logits for {self.n} experts")

    @classmethod
    def from_list(cls, experts, gating: ParamSet) -> "ExpertBank":
        return cls(stack_params(list(experts)), gating)

    @property
    def n(self) -> int:
        return self.experts.stacked

    def expert(self, k: int) -> ParamSet:
        return self.experts[k]

    @property
    def expert_spec(self) -> MlpSpec:
        return self.experts.spec

    def permuted(self, order) -> "ExpertBank":
        """Reorder experts and the gating output channels together."""
        order = np.asarray(order)
        g = self.gating
        gating = ParamSet(W0=g.W0, W1=g.W1, W2=g.W2[:, order], B0=g.B0, B1=g.B1, B2=g.B2[order])
        return ExpertBank(self.experts.map(lambda v: v[order]), gating)


def _simplex_check(alpha: np.ndarray, n: int | None = None):
    a = np.asarray(alpha)
    if n is not None and a.shape[-1] != n:
        raise ContractError(f"got {a.shape[-1]} gating weights for {n} experts")
    if np.any(a < 0) or np.any(a > 1) or np.any(np.abs(a.sum(-1) - 1.0) > 1e-9):
        raise ContractError("gating weights are not on the simplex")


def gating_forward(gating, gating_state) -> Tensor:
    """Softmax over the gating MLP's logits; (g,) -> (N,) or (B, g) -> (B, N)."""
    return ad.softmax(mlp_forward(gating, gating_state), axis=-1)


def fuse_parameters(experts, alpha) -> ParamSet:
    """Convex combination of every expert tensor; differentiable in both inputs.

    ``experts`` is a stacked ParamSet (or a dict of stacked tensors) and
    ``alpha`` a single weight vector of length N.
    """
    p = experts.as_dict() if isinstance(experts, ParamSet) else experts
    alpha = ad.as_tensor(alpha)
    n = np.shape(p["W0"].value if isinstance(p["W0"], Tensor) else p["W0"])[0]
    if alpha.shape != (n,):
        raise ContractError(f"expected {n} gating weights, got shape {alpha.shape}")
    _simplex_check(alpha.value, n)
    a = ad.reshape(alpha, (1, n))
    fused = {}
    for name in PARAM_NAMES:
        t = ad.as_tensor(p[name])
        flat = ad.reshape(t, (n, -1))
        fused[name] = ad.reshape(a @ flat, t.shape[1:])
    return ParamSet(**fused)


def synthesized_forward(bank: ExpertBank, gating_state, policy_state) -> PolicyOutput:
    """Single-state MELA policy: gate, fuse, run the synthesized network."""
    alpha = gating_forward(bank.gating, gating_state)
    fused = fuse_parameters(bank.experts, alpha)
    return split_head(mlp_forward(fused, policy_state))


def _blend_linear(x, W, B, alpha_nb1):
    # x: (batch, in); W: (N, in, out); B: (N, out); alpha_nb1: (N, batch, 1)
    n = alpha_nb1.shape[0]
    z = x @ W + ad.reshape(B, (n, 1, -1))
    return ad.sum(z * alpha_nb1, axis=0)


def mela_forward(experts, gating, gating_states, policy_states, alpha=None):
    """Batched MELA forward -> (raw head output (B, y), alpha (B, N)).

    ``alpha`` may be supplied to bypass the gating network (e.g. frozen
    one-hot gates).  ``experts``/``gating`` may be ParamSets or dicts of tape
    leaves.
    """
    p = experts.as_dict() if isinstance(experts, ParamSet) else experts
    if alpha is None:
        alpha = gating_forward(gating, gating_states)
    alpha = ad.as_tensor(alpha)
    x = ad.as_tensor(policy_states)
    if x.ndim != 2 or alpha.ndim != 2:
        raise ContractError("mela_forward expects batched (B, dim) inputs")
    a = ad.reshape(ad.transpose(alpha), (alpha.shape[1], alpha.shape[0], 1))
    h = ad.relu(_blend_linear(x, p["W0"], p["B0"], a))
    h = ad.relu(_blend_linear(h, p["W1"], p["B1"], a))
    return _blend_linear(h, p["W2"], p["B2"], a), alpha


def moe_forward(experts, gating, gating_states, policy_states, alpha=None):
    """Batched output blending: every expert runs on the state, outputs mixed by alpha."""
    if alpha is None:
        alpha = gating_forward(gating, gating_states)
    alpha = ad.as_tensor(alpha)
    outs = ensemble_forward(experts, policy_states)          # (N, B, y)
    a = ad.reshape(ad.transpose(alpha), (alpha.shape[1], alpha.shape[0], 1))
    return ad.sum(outs * a, axis=0), alpha


def moe_forward_single(bank: ExpertBank, gating_state, policy_state) -> PolicyOutput:
    alpha = ad.reshape(gating_forward(bank.gating, gating_state), (1, -1))
    raw, _ = moe_forward(bank.experts, None, None, ad.reshape(ad.as_tensor(policy_state), (1, -1)),
                         alpha=alpha)
    return split_head(ad.reshape(raw, (-1,)))


def init_stage2(pretrained_a: ParamSet, pretrained_b: ParamSet, n: int,
                rng: np.random.Generator, gating_spec: MlpSpec) -> ExpertBank:
    """Experts 1..N/2 copy ``pretrained_a``, the rest copy ``pretrained_b``; fresh gating."""
    if n < 2 or n % 2:
        raise ContractError(f"number of experts must be even and >= 2, got {n}")
    if pretrained_a.spec != pretrained_b.spec:
        raise ContractError("pretrained experts have different shapes")
    if gating_spec.y != n:
        raise ContractError("gating output width must equal the number of experts")
    experts = [pretrained_a.copy() for _ in range(n // 2)] + [pretrained_b.copy() for _ in range(n // 2)]
    return ExpertBank.from_list(experts, init_params(gating_spec, rng))
