"""Counter-based random streams.

Every draw in a run comes from a Philox generator whose key is a hash of
``(seed, *labels)`` and whose counter block is the iteration index, so the
numbers a stream produces at iteration ``k`` do not depend on what other
streams did or in which order they were consumed.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["RandomStreams", "StepStreams", "stream_key"]


def stream_key(seed: int, *labels) -> np.ndarray:
    """128-bit Philox key derived from a seed and a tuple of labels."""
    text = repr((int(seed),) + tuple(labels)).encode()
    digest = hashlib.blake2b(text, digest_size=16).digest()
    return np.frombuffer(digest, dtype=np.uint64).copy()


class RandomStreams:
    """Factory of keyed, counter-addressed generators for one run.

    Not shared between runs: each run builds its own instance, which also
    caches the underlying bit generators.
    """

    def __init__(self, seed: int, *scope):
        self.seed = int(seed)
        self.scope = tuple(scope)
        self._cache: dict[tuple, tuple] = {}

    def generator(self, k: int, *labels) -> np.random.Generator:
        """Generator for stream ``labels`` positioned at iteration ``k``.

        The returned object is reused for the same labels; a later call
        repositions it.
        """
        labels = self.scope + tuple(labels)
        entry = self._cache.get(labels)
        if entry is None:
            bitgen = np.random.Philox(key=stream_key(self.seed, *labels))
            # template state with an empty output buffer; only the counter changes
            state = bitgen.state
            state.update(buffer_pos=4, has_uint32=0, uinteger=0)
            state["state"]["counter"] = np.zeros(4, dtype=np.uint64)
            entry = (bitgen, np.random.Generator(bitgen), state)
            self._cache[labels] = entry
        bitgen, gen, state = entry
        state["state"]["counter"][2] = k
        bitgen.state = state
        return gen

    def at(self, k: int) -> "StepStreams":
        return StepStreams(self, k)


class StepStreams:
    """View of :class:`RandomStreams` pinned to one iteration."""

    __slots__ = ("streams", "k")

    def __init__(self, streams: RandomStreams, k: int):
        self.streams = streams
        self.k = k

    def get(self, *labels) -> np.random.Generator:
        return self.streams.generator(self.k, *labels)
