"""Small causal transformer policy over a token vocabulary.

The policy never emits BOS, SEP or PAD: their logits are masked to -inf, so
every next-token distribution lives on the emittable tokens.  The output
projection is zero at initialisation, giving the uniform distribution over
those tokens.

Parameter order (used by checkpoints and flat gradient vectors): token
embedding, position embedding, then per block ``ln1.weight, ln1.bias,
attn_qkv, attn_out, ln2.weight, ln2.bias, mlp_in, mlp_out``, then
``ln_f.weight, ln_f.bias`` and finally the output projection ``head`` of shape
``(d, vocab)``.  Matrices act on row vectors (``x @ W``).
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import rng

CKPT_MAGIC = b"GCPOCKPT1\n"


class LengthError(ValueError):
    """Sequence does not fit the policy's context window."""


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


class NumericError(FloatingPointError):
    """Non-finite loss or gradient."""


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    bos: int
    eos: int
    sep: int
    pad: int

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if len(self.tokens) < 4:
            raise ValueError("vocab needs at least 4 tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocab tokens must be distinct")
        specials = (self.bos, self.eos, self.sep, self.pad)
        if len(set(specials)) != 4 or not all(0 <= s < len(self.tokens) for s in specials):
            raise ValueError(f"special indices {specials} must be distinct and in range")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update("\x1f".join(self.tokens).encode("utf-8"))
        h.update(f"|{self.bos},{self.eos},{self.sep},{self.pad}".encode())
        return h.hexdigest()

    @property
    def banned(self) -> tuple[int, ...]:
        return (self.bos, self.sep, self.pad)

    @property
    def n_emittable(self) -> int:
        return len(self.tokens) - len(self.banned)

    def index(self, token: str) -> int:
        return self.tokens.index(token)

    def encode(self, symbols) -> list[int]:
        return [self.tokens.index(s) for s in symbols]

    def decode(self, ids) -> str:
        return " ".join(self.tokens[i] for i in ids)


@dataclass(frozen=True)
class TokenSeq:
    ids: tuple[int, ...]
    role: str = "response"

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        if self.role not in ("query", "response", "context"):
            raise ValueError(f"bad role {self.role!r}")

    def __len__(self) -> int:
        return len(self.ids)

    def __add__(self, other: "TokenSeq") -> "TokenSeq":
        return TokenSeq(self.ids + other.ids, "context")


class _Block(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.ln1 = nn.LayerNorm(d)
        self.attn_qkv = nn.Parameter(torch.empty(d, 3 * d))
        self.attn_out = nn.Parameter(torch.empty(d, d))
        self.ln2 = nn.LayerNorm(d)
        self.mlp_in = nn.Parameter(torch.empty(d, 4 * d))
        self.mlp_out = nn.Parameter(torch.empty(4 * d, d))

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        B, T, d = x.shape
        h = self.n_heads
        qkv = self.ln1(x) @ self.attn_qkv
        q, k, v = qkv.split(d, dim=-1)
        q = q.view(B, T, h, d // h).transpose(1, 2)
        k = k.view(B, T, h, d // h).transpose(1, 2)
        v = v.view(B, T, h, d // h).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(d // h)
        att = att.masked_fill(mask[:T, :T], float("-inf")).softmax(dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, T, d)
        x = x + y @ self.attn_out
        return x + F.gelu(self.ln2(x) @ self.mlp_in) @ self.mlp_out


class PolicyParams(nn.Module):
    """Trainable policy; ``forward`` returns (logits, hidden) for a [B, T] id batch."""

    def __init__(self, vocab: Vocab, d: int = 64, L: int = 2, max_context: int = 256, n_heads: int = 4):
        super().__init__()
        if d < 1 or L < 1 or max_context < 2:
            raise ValueError(f"need d >= 1, L >= 1, max_context >= 2 (got {d}, {L}, {max_context})")
        if d % n_heads:
            n_heads = 1
        self.vocab = vocab
        self.d, self.L, self.max_context, self.n_heads = d, L, max_context, n_heads
        V = len(vocab)
        self.tok_emb = nn.Parameter(torch.empty(V, d))
        self.pos_emb = nn.Parameter(torch.empty(max_context, d))
        self.blocks = nn.ModuleList(_Block(d, n_heads) for _ in range(L))
        self.ln_f = nn.LayerNorm(d)
        self.head = nn.Parameter(torch.zeros(d, V))
        self.register_buffer("_causal", torch.triu(torch.ones(max_context, max_context, dtype=torch.bool), 1),
                             persistent=False)
        banned = torch.zeros(V, dtype=torch.bool)
        banned[list(vocab.banned)] = True
        self.register_buffer("_banned", banned, persistent=False)

    def forward(self, ids: torch.Tensor):
        T = ids.shape[1]
        if T > self.max_context:
            raise LengthError(f"sequence length {T} exceeds max_context {self.max_context}")
        x = self.tok_emb[ids] + self.pos_emb[:T]
        for blk in self.blocks:
            x = blk(x, self._causal)
        hidden = self.ln_f(x)
        logits = (hidden @ self.head).masked_fill(self._banned, float("-inf"))
        return logits, hidden

    @property
    def dtype(self) -> torch.dtype:
        return self.tok_emb.dtype

    def num_params(self) -> int:
        return sum(p.numel() for p in self.parameters())


@dataclass(frozen=True, eq=False)
class PolicySnapshot:
    params: PolicyParams
    version: int

    @property
    def vocab(self) -> Vocab:
        return self.params.vocab


def init_policy(d: int, L: int, vocab: Vocab, seed: int, max_context: int = 256, n_heads: int = 4,
                dtype: torch.dtype = torch.float32) -> PolicyParams:
    model = PolicyParams(vocab, d=d, L=L, max_context=max_context, n_heads=n_heads)
    gen = torch.Generator().manual_seed(rng.derive_seed(seed, "init") & 0x7FFFFFFFFFFFFFFF)
    with torch.no_grad():
        model.tok_emb.normal_(0.0, 1.0, generator=gen)
        model.pos_emb.normal_(0.0, 0.1, generator=gen)
        for blk in model.blocks:
            for w in (blk.attn_qkv, blk.attn_out, blk.mlp_in, blk.mlp_out):
                w.normal_(0.0, 1.0 / math.sqrt(w.shape[0]), generator=gen)
    return model.to(dtype)


def snapshot(params: PolicyParams, version: int) -> PolicySnapshot:
    frozen = copy.deepcopy(params)
    for p in frozen.parameters():
        p.requires_grad_(False)
    return PolicySnapshot(frozen, version)


def _as_ids(seq) -> list[int]:
    return list(seq.ids) if isinstance(seq, TokenSeq) else [int(i) for i in seq]


def _pad_batch(seqs: list[list[int]], pad: int) -> torch.Tensor:
    T = max(len(s) for s in seqs)
    out = torch.full((len(seqs), T), pad, dtype=torch.long)
    for r, s in enumerate(seqs):
        out[r, : len(s)] = torch.tensor(s, dtype=torch.long)
    return out


def batch_logprobs(model: PolicyParams, contexts, continuations):
    """Per-token log-probs of each continuation given its context.

    Returns ``(logp, mask)`` of shape [B, Tmax]; padded positions hold 0 in
    ``logp`` and False in ``mask``.  Differentiable w.r.t. ``model``.
    """
    ctx = [_as_ids(c) for c in contexts]
    cont = [_as_ids(c) for c in continuations]
    if any(len(c) == 0 for c in ctx):
        raise ValueError("contexts must be non-empty")
    full = [a + b for a, b in zip(ctx, cont)]
    longest = max(len(s) for s in full)
    if longest > model.max_context:
        raise LengthError(f"context + continuation length {longest} exceeds max_context {model.max_context}")
    B = len(full)
    Tc = max((len(c) for c in cont), default=0)
    mask = torch.zeros(B, Tc, dtype=torch.bool)
    if Tc == 0:
        return torch.zeros(B, 0, dtype=model.dtype), mask
    logits, _ = model(_pad_batch(full, model.vocab.pad))
    logsm = logits.log_softmax(dim=-1)
    rows, pos, tok = [], [], []
    for r, (c, y) in enumerate(zip(ctx, cont)):
        for j, t in enumerate(y):
            rows.append(r)
            pos.append(len(c) - 1 + j)
            tok.append(t)
            mask[r, j] = True
    picked = logsm[torch.tensor(rows), torch.tensor(pos), torch.tensor(tok)]
    out = torch.zeros(B, Tc, dtype=logsm.dtype)
    out = out.masked_scatter(mask, picked)
    return out, mask


def log_prob(params: PolicyParams, context, continuation) -> list[float]:
    """Per-token log pi(y_j | context, y_<j) as floats."""
    cont = _as_ids(continuation)
    if not cont:
        return []
    with torch.no_grad():
        lp, _ = batch_logprobs(params, [context], [cont])
    return [float(v) for v in lp[0, : len(cont)]]


def next_token_distribution(params: PolicyParams, context) -> np.ndarray:
    with torch.no_grad():
        logits, _ = params(_pad_batch([_as_ids(context)], params.vocab.pad))
    return logits[0, -1].double().softmax(-1).numpy()


def sample_many(snap: PolicySnapshot | PolicyParams, contexts, seeds, max_len: int, temperature: float = 1.0,
                greedy: bool = False) -> list[TokenSeq]:
    """Ancestral sampling for a batch of contexts, one seed per row.

    Token ``t`` of row ``r`` uses the uniform at counter ``t`` of the stream
    keyed by ``seeds[r]``; sampling inverts the CDF of softmax(logits / T) in
    float64.  ``greedy`` takes the argmax (lowest index on ties).
    """
    model = snap.params if isinstance(snap, PolicySnapshot) else snap
    if temperature <= 0 and not greedy:
        raise ValueError("temperature must be > 0 (use greedy=True for argmax decoding)")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    ctx = [_as_ids(c) for c in contexts]
    if not ctx:
        return []
    need = max(len(c) for c in ctx) + max_len - 1
    if need > model.max_context:
        raise LengthError(
            f"context length {max(len(c) for c in ctx)} plus max_len {max_len} exceeds max_context "
            f"{model.max_context}; reduce group size n or max_len"
        )
    seeds = np.asarray([int(s) & ((1 << 64) - 1) for s in seeds], dtype=np.uint64)
    eos = model.vocab.eos
    outs: list[list[int]] = [[] for _ in ctx]
    live = list(range(len(ctx)))
    with torch.no_grad():
        for t in range(max_len):
            seqs = [ctx[r] + outs[r] for r in live]
            logits, _ = model(_pad_batch(seqs, model.vocab.pad))
            last = torch.tensor([len(s) - 1 for s in seqs])
            step_logits = logits[torch.arange(len(live)), last].double().numpy()
            if greedy:
                choice = np.argmax(step_logits, axis=-1)
            else:
                z = step_logits / temperature
                z = z - z.max(axis=-1, keepdims=True)
                p = np.exp(z)
                cdf = np.cumsum(p, axis=-1)
                u = rng.uniform(seeds[live], t) * cdf[:, -1]
                choice = np.array([np.searchsorted(cdf[k], u[k], side="right") for k in range(len(live))])
                choice = np.minimum(choice, cdf.shape[1] - 1)
            still = []
            for k, r in enumerate(live):
                tok = int(choice[k])
                outs[r].append(tok)
                if tok != eos:
                    still.append(r)
            live = still
            if not live:
                break
    return [TokenSeq(o, "response") for o in outs]


def sample(snap: PolicySnapshot, context, max_len: int, temperature: float, seed: int,
           greedy: bool = False) -> TokenSeq:
    return sample_many(snap, [context], [seed], max_len, temperature, greedy)[0]


def final_hiddens(model: PolicyParams, sequences) -> torch.Tensor:
    """Last-layer state (after the final layer norm) at each sequence's last position; [B, d]."""
    seqs = [_as_ids(s) for s in sequences]
    if any(len(s) == 0 for s in seqs):
        raise ValueError("final_hidden needs a non-empty sequence")
    _, hidden = model(_pad_batch(seqs, model.vocab.pad))
    last = torch.tensor([len(s) - 1 for s in seqs])
    return hidden[torch.arange(len(seqs)), last]


def final_hidden(params: PolicyParams, sequence) -> np.ndarray:
    with torch.no_grad():
        return final_hiddens(params, [sequence])[0].double().numpy()


# ---------------------------------------------------------------- gradients


def flat_params(model: PolicyParams) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in model.parameters()])


def set_flat_params(model: PolicyParams, flat: torch.Tensor) -> None:
    off = 0
    with torch.no_grad():
        for p in model.parameters():
            n = p.numel()
            p.copy_(flat[off: off + n].view_as(p))
            off += n


def grad(params: PolicyParams, loss_fn) -> torch.Tensor:
    """Reverse-mode gradient of ``loss_fn(params)`` as one flat vector."""
    ps = list(params.parameters())
    loss = loss_fn(params)
    if not torch.isfinite(loss).all():
        raise NumericError(f"non-finite loss {float(loss.detach())}")
    if not loss.requires_grad:
        return torch.zeros(sum(p.numel() for p in ps), dtype=ps[0].dtype)
    gs = torch.autograd.grad(loss, ps, allow_unused=True)
    return torch.cat([(torch.zeros_like(p) if g is None else g).reshape(-1) for p, g in zip(ps, gs)])


def mean_nll(model: PolicyParams, contexts, continuations) -> torch.Tensor:
    lp, mask = batch_logprobs(model, contexts, continuations)
    return -(lp * mask).sum() / mask.sum()


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(params: PolicyParams, path) -> None:
    flat = np.concatenate([p.detach().cpu().numpy().astype("<f4").reshape(-1) for p in params.parameters()])
    header = (
        f"d={params.d}\nL={params.L}\nvocab_size={len(params.vocab)}\nvocab_hash={params.vocab.content_hash}\n"
        f"param_count={flat.size}\nmax_context={params.max_context}\nn_heads={params.n_heads}\n"
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(header.encode("ascii"))
        fh.write(flat.astype("<f4").tobytes())


def load_checkpoint(path, vocab: Vocab) -> PolicyParams:
    """Load a checkpoint written by :func:`save_checkpoint`; ``vocab`` must match its hash."""
    data = Path(path).read_bytes()
    if not data.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: bad magic")
    pos = len(CKPT_MAGIC)
    fields = {}
    for key in ("d", "L", "vocab_size", "vocab_hash", "param_count", "max_context", "n_heads"):
        end = data.find(b"\n", pos)
        if end < 0:
            raise CheckpointError(f"{path}: truncated header")
        line = data[pos:end].decode("ascii", errors="replace")
        name, _, value = line.partition("=")
        if name != key:
            raise CheckpointError(f"{path}: expected header field {key!r}, got {line!r}")
        fields[key] = value
        pos = end + 1
    try:
        d, L, V = int(fields["d"]), int(fields["L"]), int(fields["vocab_size"])
        count, ctx, heads = int(fields["param_count"]), int(fields["max_context"]), int(fields["n_heads"])
    except ValueError as exc:
        raise CheckpointError(f"{path}: bad header value ({exc})") from None
    if V != len(vocab) or fields["vocab_hash"] != vocab.content_hash:
        raise CheckpointError(f"{path}: vocab mismatch (file hash {fields['vocab_hash'][:12]}...)")
    model = PolicyParams(vocab, d=d, L=L, max_context=ctx, n_heads=heads)
    if model.num_params() != count:
        raise CheckpointError(f"{path}: parameter count {count} does not match dims ({model.num_params()})")
    body = data[pos:]
    if len(body) != 4 * count:
        raise CheckpointError(f"{path}: expected {4 * count} parameter bytes, found {len(body)}")
    flat = torch.from_numpy(np.frombuffer(body, dtype="<f4").astype(np.float32))
    set_flat_params(model, flat)
    return model

