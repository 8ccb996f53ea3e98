"""Group-relative policy optimisation surrogate.

Per group of n responses the objective is

    (1/n) sum_i (1/T_i) sum_j [ min(R_ij A_i, clip(R_ij, 1-eps, 1+eps) A_i) - beta * k3_ij ]

with R_ij = pi_theta / pi_old and k3 = r - log r - 1, r = pi_ref / pi_theta,
averaged over the groups in a batch.  Advantages are constants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .policy import PolicyParams, PolicySnapshot, batch_logprobs
from .rollout import Group, StateError

STD_FLOOR = 1e-8


@dataclass(frozen=True)
class AdvantageRecord:
    rewards: tuple[float, ...]
    advantages: tuple[float, ...]
    group_mean: float
    group_std: float


@dataclass(frozen=True)
class SurrogateConfig:
    eps: float = 0.2
    beta: float = 0.04

    def __post_init__(self):
        if not 0.0 < self.eps < 1.0:
            raise ValueError(f"eps must lie in (0, 1), got {self.eps}")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")


def group_advantage(rewards) -> AdvantageRecord:
    r = [float(x) for x in rewards]
    if len(r) < 2:
        raise ValueError("need at least 2 rewards per group")
    mean = math.fsum(r) / len(r)
    std = math.sqrt(math.fsum((x - mean) ** 2 for x in r) / len(r))
    if std <= STD_FLOOR:
        adv = tuple(0.0 for _ in r)
    else:
        adv = tuple((x - mean) / std for x in r)
    return AdvantageRecord(tuple(r), adv, mean, std)


def _finite(*xs):
    for x in xs:
        if not math.isfinite(x):
            raise FloatingPointError(f"non-finite log-probability {x}")


def importance_ratio(logp_theta: float, logp_old: float) -> float:
    _finite(logp_theta, logp_old)
    return math.exp(logp_theta - logp_old)


def clipped_term(R: float, A: float, eps: float) -> float:
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    return min(R * A, min(max(R, 1.0 - eps), 1.0 + eps) * A)


def kl_token(logp_ref: float, logp_theta: float) -> float:
    d = logp_ref - logp_theta
    return math.expm1(d) - d


def k3(logp_ref: torch.Tensor, logp_theta: torch.Tensor) -> torch.Tensor:
    d = logp_ref - logp_theta
    return torch.expm1(d) - d


def surrogate(logp: torch.Tensor, logp_old: torch.Tensor, logp_ref: torch.Tensor, weights: torch.Tensor,
              mask: torch.Tensor, group_size: int, cfg: SurrogateConfig):
    """Batch-mean clipped objective over rows grouped in blocks of ``group_size``.

    ``weights`` holds one advantage (A_i or B_i) per row.  Returns the scalar
    objective and a dict of detached diagnostics.
    """
    maskf = mask.to(logp.dtype)
    ratio = torch.exp(logp - logp_old)
    w = weights.to(logp.dtype).unsqueeze(1)
    clipped = torch.clamp(ratio, 1.0 - cfg.eps, 1.0 + cfg.eps)
    policy_term = torch.minimum(ratio * w, clipped * w)
    kl = k3(logp_ref, logp)
    per_token = (policy_term - cfg.beta * kl) * maskf
    T = maskf.sum(dim=1)
    per_row = per_token.sum(dim=1) / T
    per_group = per_row.view(-1, group_size).mean(dim=1)
    objective = per_group.mean()
    with torch.no_grad():
        ntok = maskf.sum()
        stats = {
            "mean_kl_ref": float(((kl * maskf).sum(dim=1) / T).mean()),
            "clip_fraction": float((((ratio < 1 - cfg.eps) | (ratio > 1 + cfg.eps)) & mask).sum() / ntok),
        }
    return objective, stats


def _gather_old(groups: list[Group], Tmax: int, dtype) -> torch.Tensor:
    rows = []
    for g in groups:
        if g.old_logps is None:
            raise StateError("group has no old_logps; sample it through rollout.sample_group")
        for lp, y in zip(g.old_logps, g.responses):
            if len(lp) != len(y):
                raise StateError("old_logps length does not match response length")
            rows.append(list(lp) + [0.0] * (Tmax - len(lp)))
    return torch.tensor(rows, dtype=dtype)


def response_logprobs(model: PolicyParams, groups: list[Group]):
    ctx = [g.q for g in groups for _ in g.responses]
    cont = [y for g in groups for y in g.responses]
    return batch_logprobs(model, ctx, cont)


def ref_logprobs(groups: list[Group], old: PolicySnapshot, ref: PolicySnapshot, Tmax: int, dtype):
    """Reference log-probs; reuses the cached old log-probs when ref is the sampling snapshot."""
    if ref is old or ref.params is old.params:
        return _gather_old(groups, Tmax, dtype)
    with torch.no_grad():
        lp, _ = response_logprobs(ref.params, groups)
    return lp.to(dtype)


def batch_advantages(groups: list[Group]) -> list[AdvantageRecord]:
    recs = []
    for g in groups:
        if g.rewards is None:
            raise StateError("group has no rewards")
        recs.append(group_advantage(g.rewards))
    return recs


def grpo_objective(groups: list[Group], params: PolicyParams, old: PolicySnapshot, ref: PolicySnapshot,
                   cfg: SurrogateConfig, advantages: list[AdvantageRecord] | None = None):
    """Returns (objective tensor, diagnostics); maximise the objective."""
    n = groups[0].n
    if any(g.n != n for g in groups):
        raise ValueError("all groups in a batch must have the same size")
    advantages = batch_advantages(groups) if advantages is None else advantages
    logp, mask = response_logprobs(params, groups)
    old_lp = _gather_old(groups, logp.shape[1], logp.dtype)
    ref_lp = ref_logprobs(groups, old, ref, logp.shape[1], logp.dtype)
    A = torch.tensor([a for rec in advantages for a in rec.advantages], dtype=torch.float64)
    obj, stats = surrogate(logp, old_lp, ref_lp, A, mask, n, cfg)
    stats["mean_abs_advantage"] = float(A.abs().mean())
    return obj, stats
