"""Causal weighting and causal reference KL on top of the group surrogate.

For each response y_i of a group:

* ``z_i``     final-token representation of (q, y_i); ``z_bar`` their mean;
* ``Z_bar_i`` mean representation of m continuations of the leave-one-out
  context x_i;
* ``Zp_bar_i`` mean over collider variants j of the same quantity for x_{i,j};
* ``upsilon_i = alpha * sim(z_i, Z_bar_i - Zp_bar_i + z_bar)`` and
  ``B_i = A_i * upsilon_i`` replaces A_i in the clipped term.

The second regulariser is a token-wise k3 KL between pi_theta(. | x_i, y_<j)
and the clamped per-token reference

    pi'_ref = pi(y_ij | x_i, y_<j) - mean_l pi(y_ij | x_{i,l}, y_<j) + pi(y_ij | q, y_<j).

Everything on the right-hand side is evaluated under the frozen sampling
snapshot and enters the objective as a constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import rng
from .grpo import (AdvantageRecord, SurrogateConfig, _gather_old, batch_advantages, k3, ref_logprobs,
                   response_logprobs, surrogate)
from .policy import PolicyParams, PolicySnapshot, TokenSeq, batch_logprobs, final_hiddens, sample_many
from .rollout import (ColliderSet, GenerationCounter, Group, LooContext, StateError, build_x_i, build_x_ij,
                      collider_context, prompt)

PROB_FLOOR = 1e-8
NORM_FLOOR = 1e-12
METRICS = ("cosine", "euclidean", "gaussian")


@dataclass
class CausalReps:
    z: np.ndarray        # [n, d]
    z_bar: np.ndarray    # [d]
    Z_bar: np.ndarray    # [n, d]
    Zp_bar: np.ndarray   # [n, d]

    @property
    def target(self) -> np.ndarray:
        return self.Z_bar - self.Zp_bar + self.z_bar


@dataclass
class CausalWeights:
    alpha: float
    upsilon: list[float]
    b: list[float]
    degenerate: int = 0


@dataclass
class CausalRefTokens:
    values: list[list[float]]       # clamped pi'_ref per (i, j)
    raw: list[list[float]]
    clamp_count: int


@dataclass
class CausalInputs:
    """Per-group inputs of the GCPO objective."""

    x_i: list[LooContext]
    weights: CausalWeights
    ref: CausalRefTokens
    reps: CausalReps | None = None
    collider: ColliderSet | None = None
    generations: GenerationCounter = field(default_factory=GenerationCounter)


# ---------------------------------------------------------------- representations


def rep_query_baseline(zs) -> np.ndarray:
    zs = [np.asarray(z, dtype=np.float64) for z in zs]
    if len(zs) < 2:
        raise ValueError("need at least 2 representations")
    if len({z.shape for z in zs}) != 1:
        raise ValueError("representation dimensions differ")
    return np.mean(np.stack(zs), axis=0)


def _continuation_reps(snapshot: PolicySnapshot, contexts: list[TokenSeq], seeds: list[int], max_len: int,
                       temperature: float, greedy: bool) -> np.ndarray:
    sep = snapshot.vocab.sep
    prompts = [prompt(c, sep) for c in contexts]
    outs = sample_many(snapshot, prompts, seeds, max_len, temperature, greedy)
    with torch.no_grad():
        h = final_hiddens(snapshot.params, [p + y for p, y in zip(prompts, outs)])
    return h.double().numpy()


def _sample_seeds(seed: int, m: int) -> list[int]:
    return [rng.derive_seed(seed, "rep", s) for s in range(m)]


def rep_conditional(snapshot: PolicySnapshot, x_i: LooContext | TokenSeq, m: int, seed: int, max_len: int = 6,
                    temperature: float = 1.0, greedy: bool = False) -> np.ndarray:
    """Mean final representation over m continuations of one context."""
    if m < 1:
        raise ValueError("m must be >= 1")
    ctx = x_i.tokens if isinstance(x_i, LooContext) else x_i
    reps = _continuation_reps(snapshot, [ctx] * m, _sample_seeds(seed, m), max_len, temperature, greedy)
    return reps.mean(axis=0)


def rep_collider(snapshot: PolicySnapshot, contexts, m: int, seed: int, max_len: int = 6,
                 temperature: float = 1.0, greedy: bool = False) -> np.ndarray:
    """Mean over collider variants j of rep_conditional(x_{i,j}); seeds derive from (seed, j)."""
    contexts = list(contexts)
    if not contexts:
        raise ValueError("need at least one context")
    ctxs, seeds = [], []
    for j, c in enumerate(contexts):
        ctxs += [c.tokens if isinstance(c, LooContext) else c] * m
        seeds += _sample_seeds(rng.derive_seed(seed, j), m)
    reps = _continuation_reps(snapshot, ctxs, seeds, max_len, temperature, greedy)
    return reps.reshape(len(contexts), m, -1).mean(axis=1).mean(axis=0)


# ---------------------------------------------------------------- similarity and weights


def similarity(a, b, metric: str = "cosine") -> float | None:
    """Similarity in [-1, 1]; None when a vector is (numerically) zero.

    ``euclidean``: 1 - 2 |a - b| / (|a| + |b|)
    ``gaussian``:  2 exp(-|a - b|^2 / (|a|^2 + |b|^2)) - 1
    Both decrease monotonically in the distance and equal 1 iff a == b.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na < NORM_FLOOR or nb < NORM_FLOOR:
        return None
    if metric == "cosine":
        return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))
    dist = float(np.linalg.norm(a - b))
    if metric == "euclidean":
        return float(np.clip(1.0 - 2.0 * dist / (na + nb), -1.0, 1.0))
    if metric == "gaussian":
        return 2.0 * math.exp(-(dist**2) / (na**2 + nb**2)) - 1.0
    raise ValueError(f"unknown metric {metric!r}; choose from {METRICS}")


def upsilon(z_i, target_i, alpha: float, metric: str = "cosine", counter: list | None = None) -> float:
    """alpha * sim(z_i, target_i); 0 (and a tick on ``counter``) for zero-norm inputs."""
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    s = similarity(z_i, target_i, metric)
    if s is None:
        if counter is not None:
            counter.append(1)
        return 0.0
    return alpha * s


def causal_advantage(A, ups) -> list[float]:
    A, ups = list(A), list(ups)
    if len(A) != len(ups):
        raise ValueError(f"length mismatch: {len(A)} advantages vs {len(ups)} weights")
    return [a * u for a, u in zip(A, ups)]


def causal_weights(reps: CausalReps, advantages: AdvantageRecord, alpha: float, metric: str = "cosine",
                   upsilon_floor: float | None = None) -> CausalWeights:
    ticks: list = []
    target = reps.target
    ups = [upsilon(reps.z[i], target[i], alpha, metric, ticks) for i in range(len(reps.z))]
    if upsilon_floor is not None:
        ups = [max(u, upsilon_floor) for u in ups]
    return CausalWeights(alpha, ups, causal_advantage(advantages.advantages, ups), len(ticks))


# ---------------------------------------------------------------- causal reference


def combine_variant_probs(probs_per_variant, mode: str = "mean") -> float:
    """Combine pi(y_ij | x_{i,l}, y_<j) over collider variants l (mean, or the literal sum)."""
    vals = [float(p) for p in probs_per_variant]
    if not vals:
        raise ValueError("need at least one collider variant")
    total = math.fsum(vals)
    if mode == "mean":
        return total / len(vals)
    if mode == "sum":
        return total
    raise ValueError(f"phi_sum_mode must be 'mean' or 'sum', got {mode!r}")


def phi_token_prob(params: PolicyParams, variants, response: TokenSeq, j: int, mode: str = "mean") -> float:
    """Projected probability of token j of ``response`` over the contexts x_{i,l}, l = 0..n-1."""
    ctxs = [v.tokens if isinstance(v, LooContext) else v for v in variants]
    probs = variant_token_probs(params, ctxs, response)
    return combine_variant_probs(probs[:, j], mode)


def causal_ref_prob(pi_xi: float, phi_mean: float, pi_q: float) -> tuple[float, float]:
    """(clamped, raw) causally projected reference probability."""
    raw = pi_xi - phi_mean + pi_q
    return min(max(raw, PROB_FLOOR), 1.0), raw


def variant_token_probs(model: PolicyParams, contexts: list[TokenSeq], response: TokenSeq) -> np.ndarray:
    """[len(contexts), T] probabilities of ``response`` tokens after each context's prompt."""
    sep = model.vocab.sep
    with torch.no_grad():
        lp, _ = batch_logprobs(model, [prompt(c, sep) for c in contexts], [response] * len(contexts))
    return lp.double().exp().numpy()[:, : len(response)]


def causal_ref_tokens(pi_xi: np.ndarray, phi_terms: np.ndarray, pi_q: np.ndarray, mode: str = "mean"):
    """Vectorised causal_ref_prob over tokens.  phi_terms is [variants, T]."""
    if mode not in ("sum", "mean"):
        raise ValueError(f"phi_sum_mode must be 'mean' or 'sum', got {mode!r}")
    phi = phi_terms.sum(axis=0) if mode == "sum" else phi_terms.mean(axis=0)
    raw = pi_xi - phi + pi_q
    clamped = np.minimum(np.maximum(raw, PROB_FLOOR), 1.0)
    clamps = int(np.sum((raw < PROB_FLOOR) | (raw > 1.0)))
    return clamped, raw, clamps


# ---------------------------------------------------------------- pipeline


def compute_causal_inputs(snapshot: PolicySnapshot, groups: list[Group], seeds: list[int], cfg) -> list[CausalInputs]:
    """Collider outputs, representations, weights and pi'_ref for each group.

    ``cfg`` supplies ``m, alpha, max_len, temperature, metric, phi_sum_mode,
    upsilon_floor, aux_greedy`` and optionally ``force_upsilon`` (test hook).
    All generations of the batch run through one batched sampler call per stage.
    """
    model = snapshot.params
    sep = snapshot.vocab.sep
    m, greedy = cfg.m, cfg.aux_greedy
    n = groups[0].n

    # collider outputs y_n, y_{n,1..n-1}
    coll_prompts, coll_seeds = [], []
    for g, s in zip(groups, seeds):
        ctx = prompt(collider_context(g, sep), sep)
        for l in range(n):
            coll_prompts.append(ctx)
            coll_seeds.append(rng.derive_seed(s, "collider", l))
    coll_out = sample_many(snapshot, coll_prompts, coll_seeds, cfg.max_len, cfg.temperature, greedy)
    colliders = []
    for b in range(len(groups)):
        block = coll_out[b * n: (b + 1) * n]
        colliders.append(ColliderSet(block[0], tuple(block[1:]), tuple(coll_seeds[b * n: (b + 1) * n])))

    # representation rollouts: m samples from x_i, and m from each x_{i,j}
    rep_ctx, rep_seeds = [], []
    x_is, x_ijs = [], []
    counters = [GenerationCounter(collider=len(c.extras) + 1) for c in colliders]
    for g, c, s, cnt in zip(groups, colliders, seeds, counters):
        xi = [build_x_i(g.q, g, c, i, sep) for i in range(n)]
        xij = [[build_x_ij(g.q, g, c, i, j, sep) for j in range(n)] for i in range(n)]
        x_is.append(xi)
        x_ijs.append(xij)
        for i in range(n):
            rep_ctx += [xi[i].tokens] * m
            rep_seeds += _sample_seeds(rng.derive_seed(s, "cond", i), m)
            cnt.conditional += m
        for i in range(n):
            for j in range(n):
                rep_ctx += [xij[i][j].tokens] * m
                rep_seeds += _sample_seeds(rng.derive_seed(rng.derive_seed(s, "proj", i), j), m)
                cnt.projected += m
    reps_flat = _continuation_reps(snapshot, rep_ctx, rep_seeds, cfg.max_len, cfg.temperature, greedy)
    if len(reps_flat) != sum(c.conditional + c.projected for c in counters):
        raise RuntimeError("representation rollout count mismatch")

    # token probabilities of every response under x_i and each x_{i,l}, one batched call
    prob_ctx, prob_cont = [], []
    for b, g in enumerate(groups):
        for i, y in enumerate(g.responses):
            for ctx in [x_is[b][i].tokens] + [x_ijs[b][i][l].tokens for l in range(n)]:
                prob_ctx.append(prompt(ctx, sep))
                prob_cont.append(y)
    with torch.no_grad():
        lp_all, _ = batch_logprobs(model, prob_ctx, prob_cont)
    probs_all = lp_all.double().exp().numpy().reshape(len(groups), n, n + 1, -1)
    with torch.no_grad():
        z_all = final_hiddens(model, [g.q + y for g in groups for y in g.responses]).double().numpy()

    per_group = n * m + n * n * m
    advantages = batch_advantages(groups)
    out = []
    for b, g in enumerate(groups):
        block = reps_flat[b * per_group: (b + 1) * per_group]
        Z_bar = block[: n * m].reshape(n, m, -1).mean(axis=1)
        Zp_bar = block[n * m:].reshape(n, n, m, -1).mean(axis=2).mean(axis=1)
        z = z_all[b * n: (b + 1) * n]
        reps = CausalReps(z, rep_query_baseline(list(z)), Z_bar, Zp_bar)
        weights = causal_weights(reps, advantages[b], cfg.alpha, cfg.metric, cfg.upsilon_floor)
        if getattr(cfg, "force_upsilon", None) is not None:
            ups = [float(cfg.force_upsilon)] * n
            weights = CausalWeights(cfg.alpha, ups, causal_advantage(advantages[b].advantages, ups))

        values, raws, clamps = [], [], 0
        for i, y in enumerate(g.responses):
            probs = probs_all[b, i, :, : len(y)]
            pi_q = np.exp(np.asarray(g.old_logps[i], dtype=np.float64))
            cl, raw, k = causal_ref_tokens(probs[0], probs[1:], pi_q, cfg.phi_sum_mode)
            values.append([float(v) for v in cl])
            raws.append([float(v) for v in raw])
            clamps += k
        out.append(CausalInputs(x_is[b], weights, CausalRefTokens(values, raws, clamps), reps, colliders[b],
                                counters[b]))
    return out


# ---------------------------------------------------------------- objective


def causal_logprobs(model: PolicyParams, groups: list[Group], causal: list[CausalInputs]):
    """log pi_theta(y_ij | x_i, y_<j) for every response, differentiable."""
    sep = model.vocab.sep
    ctx = [prompt(x.tokens, sep) for c in causal for x in c.x_i]
    cont = [y for g in groups for y in g.responses]
    return batch_logprobs(model, ctx, cont)


def kl_causal_from(logp_x: torch.Tensor, mask: torch.Tensor, ref_probs: torch.Tensor, group_size: int):
    """Batch mean of (1/n) sum_i (1/T_i) sum_j k3(log pi'_ref, log pi_theta)."""
    maskf = mask.to(logp_x.dtype)
    safe_ref = torch.where(mask, ref_probs.to(logp_x.dtype), torch.ones_like(logp_x))
    kl = k3(torch.log(safe_ref), logp_x) * maskf
    per_row = kl.sum(dim=1) / maskf.sum(dim=1)
    return per_row.view(-1, group_size).mean(dim=1).mean()


def _ref_tensor(causal: list[CausalInputs], Tmax: int, dtype) -> torch.Tensor:
    rows = [list(v) + [1.0] * (Tmax - len(v)) for c in causal for v in c.ref.values]
    return torch.tensor(rows, dtype=dtype)


def kl_causal(groups: list[Group], params: PolicyParams, causal: list[CausalInputs]) -> torch.Tensor:
    logp_x, mask = causal_logprobs(params, groups, causal)
    return kl_causal_from(logp_x, mask, _ref_tensor(causal, logp_x.shape[1], logp_x.dtype), groups[0].n)


def gcpo_objective_from(logp, logp_old, logp_ref, mask, B, logp_x, mask_x, ref_probs, group_size: int,
                        cfg: SurrogateConfig, kappa: float):
    """Tensor-level objective: clipped surrogate weighted by B minus kappa times the causal KL."""
    surr, stats = surrogate(logp, logp_old, logp_ref, B, mask, group_size, cfg)
    klc = kl_causal_from(logp_x, mask_x, ref_probs, group_size)
    stats["mean_kl_causal"] = float(klc.detach())
    return surr - kappa * klc, stats


def gcpo_objective(groups: list[Group], params: PolicyParams, old: PolicySnapshot, ref: PolicySnapshot,
                   cfg: SurrogateConfig, kappa: float, causal: list[CausalInputs] | None):
    """Returns (objective tensor, diagnostics); maximise the objective."""
    if causal is None or len(causal) != len(groups):
        raise StateError("gcpo_objective needs one CausalInputs per group")
    n = groups[0].n
    if any(g.n != n for g in groups):
        raise ValueError("all groups in a batch must have the same size")
    logp, mask = response_logprobs(params, groups)
    old_lp = _gather_old(groups, logp.shape[1], logp.dtype)
    ref_lp = ref_logprobs(groups, old, ref, logp.shape[1], logp.dtype)
    B = torch.tensor([b for c in causal for b in c.weights.b], dtype=torch.float64)
    logp_x, mask_x = causal_logprobs(params, groups, causal)
    objective, stats = gcpo_objective_from(logp, old_lp, ref_lp, mask, B, logp_x, mask_x,
                                           _ref_tensor(causal, logp_x.shape[1], logp_x.dtype), n, cfg, kappa)
    stats["mean_abs_advantage"] = float(torch.tensor(
        [a for rec in batch_advantages(groups) for a in rec.advantages]).abs().mean())
    return objective, stats


def causal_diagnostics(causal: list[CausalInputs]) -> dict:
    ups = [u for c in causal for u in c.weights.upsilon]
    raws = [r for c in causal for row in c.ref.raw for r in row]
    return {
        "upsilon_mean": float(np.mean(ups)),
        "upsilon_min": float(np.min(ups)),
        "upsilon_max": float(np.max(ups)),
        "upsilon_neg_frac": float(np.mean(np.asarray(ups) < 0)),
        "upsilon_degenerate": int(sum(c.weights.degenerate for c in causal)),
        "clamp_count": int(sum(c.ref.clamp_count for c in causal)),
        "raw_ref_min": float(np.min(raws)),
        "raw_ref_max": float(np.max(raws)),
    }
