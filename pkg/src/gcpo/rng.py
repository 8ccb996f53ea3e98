"""Counter-based random numbers (Philox4x32-10) and seed derivation.

Every random draw in the package is a pure function of ``(key, counter)``,
so a sample can be replayed from its seed alone regardless of batching or
evaluation order.  The block function follows Salmon et al. (SC'11),
"Parallel random numbers: as easy as 1, 2, 3"; it is checked against the
Random123 known-answer vectors in the tests.

Conventions used throughout:

* a 64-bit ``seed`` is split into the two 32-bit key words (low word first);
* the four counter words are ``(index, stream, 0, 0)``;
* a uniform double in ``[0, 1)`` is built from the first two output words as
  ``((w0 >> 5) * 2**26 + (w1 >> 6)) / 2**53``.
"""

from __future__ import annotations

import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = 0x9E3779B9
_W1 = 0xBB67AE85
_MASK32 = np.uint64(0xFFFFFFFF)
_MASK64 = (1 << 64) - 1


def philox4x32(counter, key, rounds: int = 10) -> np.ndarray:
    """Philox4x32 block function, vectorised over leading axes.

    ``counter`` has shape ``(..., 4)`` and ``key`` shape ``(..., 2)`` (broadcastable);
    values are 32-bit words.  Returns uint32 words of shape ``(..., 4)``.
    """
    ctr = np.asarray(counter, dtype=np.uint64) & _MASK32
    k = np.asarray(key, dtype=np.uint64) & _MASK32
    c0, c1, c2, c3 = (ctr[..., i] for i in range(4))
    k0, k1 = k[..., 0], k[..., 1]
    c0, c1, c2, c3, k0, k1 = np.broadcast_arrays(c0, c1, c2, c3, k0, k1)
    for r in range(rounds):
        if r:
            k0 = (k0 + np.uint64(_W0)) & _MASK32
            k1 = (k1 + np.uint64(_W1)) & _MASK32
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0, lo0 = p0 >> np.uint64(32), p0 & _MASK32
        hi1, lo1 = p1 >> np.uint64(32), p1 & _MASK32
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return np.stack([c0, c1, c2, c3], axis=-1).astype(np.uint32)


def _key_words(seed) -> np.ndarray:
    s = np.asarray(seed, dtype=np.uint64)
    return np.stack([s & _MASK32, s >> np.uint64(32)], axis=-1)


def uniform(seed, index, stream: int = 0) -> np.ndarray:
    """Uniform doubles in [0, 1) at ``index`` of the stream keyed by ``seed``.

    ``seed`` and ``index`` broadcast against each other.
    """
    idx = np.asarray(index, dtype=np.uint64)
    seed_arr = np.asarray(seed, dtype=np.uint64)
    idx, seed_arr = np.broadcast_arrays(idx, seed_arr)
    ctr = np.stack(
        [
            idx & _MASK32,
            np.full_like(idx, stream & 0xFFFFFFFF),
            idx >> np.uint64(32),
            np.zeros_like(idx),
        ],
        axis=-1,
    )
    w = philox4x32(ctr, _key_words(seed_arr)).astype(np.uint64)
    hi = w[..., 0] >> np.uint64(5)
    lo = w[..., 1] >> np.uint64(6)
    return (hi.astype(np.float64) * 67108864.0 + lo.astype(np.float64)) / 9007199254740992.0


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, *tags: int | str) -> int:
    """Hash a base seed and a path of tags into an independent 64-bit seed."""
    h = _splitmix64(int(seed) & _MASK64)
    for tag in tags:
        if isinstance(tag, str):
            v = int.from_bytes(tag.encode("utf-8")[:8].ljust(8, b"\0"), "little")
            v ^= len(tag) << 56
        else:
            v = int(tag) & _MASK64
        h = _splitmix64(h ^ v)
    return h


class PhiloxStream:
    """Sequential view of one counter stream, for code that wants ``next()``."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = stream
        self.counter = 0

    def random(self, size: int | None = None):
        n = 1 if size is None else size
        out = uniform(self.seed, np.arange(self.counter, self.counter + n), self.stream)
        self.counter += n
        return float(out[0]) if size is None else out

    def randint(self, high: int) -> int:
        return min(int(self.random() * high), high - 1)
