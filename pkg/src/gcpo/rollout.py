"""Group sampling, collider outputs and leave-one-out contexts.

Context layout: components are joined with SEP in index order, e.g.
``x_i = q SEP y_0 SEP .. (y_i skipped) .. SEP y_{n-1} SEP y_n``.  When the
policy has to continue a context (collider outputs, representation rollouts,
causal reference probabilities) the prompt is the context followed by one
extra SEP, so generated text always starts a new segment.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import torch

from . import rng
from .policy import PolicySnapshot, TokenSeq, batch_logprobs, sample_many


class StateError(RuntimeError):
    """Required rollout state is missing."""


@dataclass
class Group:
    q: TokenSeq
    responses: list[TokenSeq]
    old_logps: list[list[float]] | None
    version: int
    seeds: list[int] = field(default_factory=list)
    rewards: list[float] | None = None

    @property
    def n(self) -> int:
        return len(self.responses)


@dataclass(frozen=True)
class ColliderSet:
    y_n: TokenSeq
    extras: tuple[TokenSeq, ...]
    seeds: tuple[int, ...] = ()

    def variant(self, j: int) -> TokenSeq:
        """y_{n,j}, with y_{n,0} = y_n."""
        if j < 0 or j > len(self.extras):
            raise IndexError(f"collider variant {j} out of range 0..{len(self.extras)}")
        return self.y_n if j == 0 else self.extras[j - 1]


@dataclass(frozen=True)
class LooContext:
    i: int
    j: int | None
    tokens: TokenSeq


@dataclass
class GenerationCounter:
    collider: int = 0
    conditional: int = 0
    projected: int = 0

    @property
    def total(self) -> int:
        return self.collider + self.conditional + self.projected


def expected_generations(n: int, m: int) -> int:
    """Auxiliary generations per query per GCPO step: collider, conditional and projected rollouts."""
    return n + n * m + n * n * m


def join(parts, sep: int) -> TokenSeq:
    ids: list[int] = []
    for k, part in enumerate(parts):
        if k:
            ids.append(sep)
        ids.extend(part.ids)
    return TokenSeq(ids, "context")


def split_context(tokens: TokenSeq, sep: int) -> list[tuple[int, ...]]:
    out: list[list[int]] = [[]]
    for t in tokens.ids:
        if t == sep:
            out.append([])
        else:
            out[-1].append(t)
    return [tuple(p) for p in out]


def prompt(context: TokenSeq, sep: int) -> TokenSeq:
    return TokenSeq(context.ids + (sep,), "context")


def sample_groups(snapshot: PolicySnapshot, queries, n: int, seeds, max_len: int = 6,
                  temperature: float = 1.0) -> list[Group]:
    """Sample one group per query in a single batched pass; member i of query b uses (seeds[b], i)."""
    if n < 2:
        raise ValueError(f"group size must be >= 2, got {n}")
    queries, seeds = list(queries), list(seeds)
    member_seeds = [[rng.derive_seed(s, "member", i) for i in range(n)] for s in seeds]
    ctx = [q for q in queries for _ in range(n)]
    responses = sample_many(snapshot, ctx, [ms for row in member_seeds for ms in row], max_len, temperature)
    with torch.no_grad():
        lp, _ = batch_logprobs(snapshot.params, ctx, responses)
    groups = []
    for b, q in enumerate(queries):
        ys = responses[b * n: (b + 1) * n]
        old = [[float(v) for v in lp[b * n + i, : len(y)]] for i, y in enumerate(ys)]
        groups.append(Group(q, ys, old, snapshot.version, member_seeds[b]))
    return groups


def sample_group(snapshot: PolicySnapshot, q: TokenSeq, n: int, seed: int, max_len: int = 6,
                 temperature: float = 1.0) -> Group:
    return sample_groups(snapshot, [q], n, [seed], max_len, temperature)[0]


def collider_context(group: Group, sep: int) -> TokenSeq:
    return join([group.q] + list(group.responses), sep)


def sample_collider_outputs(snapshot: PolicySnapshot, group: Group, seed: int, max_len: int = 6,
                            temperature: float = 1.0, counter: GenerationCounter | None = None,
                            greedy: bool = False) -> ColliderSet:
    sep = snapshot.vocab.sep
    ctx = prompt(collider_context(group, sep), sep)
    seeds = [rng.derive_seed(seed, "collider", l) for l in range(group.n)]
    outs = sample_many(snapshot, [ctx] * group.n, seeds, max_len, temperature, greedy)
    if counter is not None:
        counter.collider += len(outs)
    return ColliderSet(outs[0], tuple(outs[1:]), tuple(seeds))


def build_x_ij(q: TokenSeq, group: Group, collider: ColliderSet, i: int, j: int, sep: int) -> LooContext:
    n = group.n
    if not 0 <= i < n:
        raise IndexError(f"response index {i} out of range 0..{n - 1}")
    if not 0 <= j <= n - 1:
        raise IndexError(f"collider index {j} out of range 0..{n - 1}")
    parts = [q] + [y for k, y in enumerate(group.responses) if k != i] + [collider.variant(j)]
    return LooContext(i, j, join(parts, sep))


def build_x_i(q: TokenSeq, group: Group, collider: ColliderSet, i: int, sep: int) -> LooContext:
    ctx = build_x_ij(q, group, collider, i, 0, sep)
    return LooContext(i, None, ctx.tokens)


def rollout_record(group: Group, collider: ColliderSet | None, query_seed: int) -> dict:
    rec = {
        "query_seed": query_seed,
        "version": group.version,
        "q": list(group.q.ids),
        "responses": [list(y.ids) for y in group.responses],
        "member_seeds": [str(s) for s in group.seeds],
        "rewards": group.rewards,
    }
    if collider is not None:
        rec["collider"] = [list(collider.y_n.ids)] + [list(y.ids) for y in collider.extras]
        rec["collider_seeds"] = [str(s) for s in collider.seeds]
    return rec


def append_rollouts(path, records) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
