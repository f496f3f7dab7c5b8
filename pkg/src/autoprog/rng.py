"""Named, independently seeded random streams.

Every consumer of randomness (data sampling, model init, sub-network
sampling, diffusion draws, ...) gets its own named stream derived from the
root seed, so adding a new consumer never perturbs the draws of an existing
one. Streams are Philox (counter-based) generators keyed by
sha256(name) combined with the root seed; state is a plain dict and can be
serialized for bit-exact checkpoint resume.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(root_seed: int, name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return (int.from_bytes(digest[:16], "little") ^ root_seed) % (1 << 128)


class RngRegistry:
    """Lazily created named Philox streams, all derived from one root seed."""

    def __init__(self, root_seed: int):
        self.root_seed = int(root_seed)
        self._streams: dict[str, np.random.Generator] = {}

    def stream(self, name: str) -> np.random.Generator:
        gen = self._streams.get(name)
        if gen is None:
            gen = np.random.Generator(
                np.random.Philox(key=stream_key(self.root_seed, name))
            )
            self._streams[name] = gen
        return gen

    def derive_int(self, name: str) -> int:
        """Stable 63-bit integer seed for APIs that take a plain seed."""
        return stream_key(self.root_seed, name) % (1 << 63)

    # -- checkpointing ----------------------------------------------------

    def state_dict(self) -> dict:
        out = {}
        for name, gen in self._streams.items():
            st = gen.bit_generator.state
            out[name] = {
                "counter": [int(x) for x in st["state"]["counter"]],
                "key": [int(x) for x in st["state"]["key"]],
                "buffer": [int(x) for x in st["buffer"]],
                "buffer_pos": int(st["buffer_pos"]),
                "has_uint32": int(st["has_uint32"]),
                "uinteger": int(st["uinteger"]),
            }
        return out

    def load_state_dict(self, states: dict) -> None:
        self._streams.clear()
        for name, st in states.items():
            bg = np.random.Philox(key=stream_key(self.root_seed, name))
            full = bg.state
            full["state"]["counter"] = np.array(st["counter"], dtype=np.uint64)
            full["state"]["key"] = np.array(st["key"], dtype=np.uint64)
            full["buffer"] = np.array(st["buffer"], dtype=np.uint64)
            full["buffer_pos"] = st["buffer_pos"]
            full["has_uint32"] = st["has_uint32"]
            full["uinteger"] = st["uinteger"]
            bg.state = full
            self._streams[name] = np.random.Generator(bg)
