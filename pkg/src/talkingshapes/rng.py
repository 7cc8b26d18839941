"""Deterministic derivation of named random substreams.

A single user-facing seed fans out into independent streams through a
hash-based split. Consumers ask for a stream by name ("noise", "dropout",
("scene", 7), ...) so adding a new consumer never shifts the draws seen by
existing ones. Stability rests on blake2s and numpy's SeedSequence, both of
which are fixed across platforms and versions.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _label_entropy(labels: tuple) -> tuple[int, int]:
    h = hashlib.blake2s(digest_size=16)
    for label in labels:
        h.update(str(label).encode("utf-8"))
        h.update(b"\x1f")
    digest = h.digest()
    return (
        int.from_bytes(digest[:8], "little"),
        int.from_bytes(digest[8:], "little"),
    )


def substream(seed: int, *labels) -> np.random.Generator:
    """Return the generator for the (seed, labels) stream.

    Streams with different labels are statistically independent; the same
    (seed, labels) pair always yields an identical draw sequence.
    """
    a, b = _label_entropy(labels)
    ss = np.random.SeedSequence(entropy=[int(seed) & _MASK64, a, b])
    return np.random.Generator(np.random.PCG64(ss))


def stream_seed(seed: int, *labels) -> int:
    """A 63-bit integer seed for libraries that take a single int (torch)."""
    a, b = _label_entropy(labels)
    ss = np.random.SeedSequence(entropy=[int(seed) & _MASK64, a, b])
    return int(ss.generate_state(1, np.uint64)[0] >> 1)
