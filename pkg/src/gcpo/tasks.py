"""Synthetic verifiable tasks and their rewards.

The default task ``modadd`` asks for ``(a + b) mod 10**k`` with k-digit
operands.  A query is ``BOS a_1..a_k + b_1..b_k =``; a well-formed response
contains exactly one ``#`` followed by a run of digits, and may carry any
other tokens before the delimiter.  Operands and answers are zero-padded to
k digits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng
from .policy import PolicySnapshot, TokenSeq, Vocab, sample_many

ACCURACY_REWARD = 1.0
FORMAT_REWARD = 0.1
DIGITS = tuple("0123456789")
TASK_STREAM = 7


def modadd_vocab() -> Vocab:
    tokens = ("<pad>", "<bos>", "<eos>", "<sep>") + DIGITS + ("+", "=", "#")
    return Vocab(tokens, bos=1, eos=2, sep=3, pad=0)


@dataclass(frozen=True)
class TaskSpec:
    name: str = "modadd"
    k: int = 1
    answer_delimiter: str = "#"
    vocab: Vocab = field(default_factory=modadd_vocab)

    def __post_init__(self):
        if self.name not in TASKS:
            raise ValueError(f"unknown task {self.name!r}; registered: {sorted(TASKS)}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.answer_delimiter not in self.vocab.tokens:
            raise ValueError(f"delimiter {self.answer_delimiter!r} not in vocab")

    @property
    def delimiter_id(self) -> int:
        return self.vocab.index(self.answer_delimiter)

    @property
    def response_budget(self) -> int:
        """Tokens needed for the shortest well-formed answer: delimiter, k digits, EOS."""
        return self.k + 2


@dataclass(frozen=True)
class QueryInstance:
    q: TokenSeq
    canonical_answer: str
    seed: int
    operands: tuple[int, ...] = ()


@dataclass(frozen=True)
class RewardBreakdown:
    accuracy: float
    format: float

    @property
    def total(self) -> float:
        return self.accuracy + self.format


def modadd_answer(a: int, b: int, k: int) -> str:
    return str((a + b) % 10**k).zfill(k)


def make_modadd_query(task: TaskSpec, a: int, b: int, seed: int = -1) -> QueryInstance:
    v = task.vocab
    symbols = list(str(a).zfill(task.k)) + ["+"] + list(str(b).zfill(task.k)) + ["="]
    ids = [v.bos] + v.encode(symbols)
    return QueryInstance(TokenSeq(ids, "query"), modadd_answer(a, b, task.k), seed, (a, b))


def _gen_modadd(task: TaskSpec, seed: int) -> QueryInstance:
    u = rng.uniform(seed, np.arange(2), TASK_STREAM)
    hi = 10**task.k
    a, b = (min(int(x * hi), hi - 1) for x in u)
    return make_modadd_query(task, a, b, seed)


def parse_modadd(task: TaskSpec, q: TokenSeq) -> tuple[int, int]:
    """Inverse of query construction; raises ValueError on malformed queries."""
    v = task.vocab
    syms = [v.tokens[i] for i in q.ids]
    k = task.k
    if len(syms) != 2 * k + 3 or syms[0] != "<bos>" or syms[k + 1] != "+" or syms[-1] != "=":
        raise ValueError(f"malformed modadd query: {syms}")
    return int("".join(syms[1: k + 1])), int("".join(syms[k + 2: 2 * k + 2]))


TASKS = {"modadd": _gen_modadd}


def gen_query(task: TaskSpec, seed: int) -> QueryInstance:
    return TASKS[task.name](task, int(seed))


def extract_answer(task: TaskSpec, response: TokenSeq) -> str | None:
    """Digit run after the sole delimiter, or None when the format is violated."""
    ids = list(response.ids)
    delim = task.delimiter_id
    if ids.count(delim) != 1:
        return None
    pos = ids.index(delim) + 1
    digits = []
    toks = task.vocab.tokens
    while pos < len(ids) and toks[ids[pos]] in DIGITS:
        digits.append(toks[ids[pos]])
        pos += 1
    return "".join(digits) if digits else None


def reward(task: TaskSpec, query: QueryInstance, response: TokenSeq) -> RewardBreakdown:
    answer = extract_answer(task, response)
    if answer is None:
        return RewardBreakdown(0.0, 0.0)
    return RewardBreakdown(ACCURACY_REWARD if answer == query.canonical_answer else 0.0, FORMAT_REWARD)


def greedy_responses(policy, contexts, max_len: int) -> list[TokenSeq]:
    """Greedy decode; objects exposing ``greedy_responses`` (test doubles) are used directly."""
    if hasattr(policy, "greedy_responses"):
        return policy.greedy_responses(contexts, max_len)
    return sample_many(policy, contexts, [0] * len(contexts), max_len, greedy=True)


def eval_queries(task: TaskSpec, n_eval: int, seed: int) -> list[QueryInstance]:
    """Queries for the contiguous seed range [seed, seed + n_eval)."""
    if n_eval < 1:
        raise ValueError("n_eval must be >= 1")
    return [gen_query(task, seed + i) for i in range(n_eval)]


def evaluate_policy(snapshot: PolicySnapshot, task: TaskSpec, n_eval: int, seed: int,
                    max_len: int | None = None) -> tuple[float, float]:
    """(pass@1, mean total reward) of greedy decoding on the eval seed range."""
    queries = eval_queries(task, n_eval, seed)
    max_len = task.response_budget + 3 if max_len is None else max_len
    outs = greedy_responses(snapshot, [qi.q for qi in queries], max_len)
    scores = [reward(task, qi, y) for qi, y in zip(queries, outs)]
    return (sum(s.accuracy for s in scores) / n_eval, sum(s.total for s in scores) / n_eval)


def pass_at_1(snapshot: PolicySnapshot, task: TaskSpec, n_eval: int, seed: int, max_len: int | None = None) -> float:
    return evaluate_policy(snapshot, task, n_eval, seed, max_len)[0]
