"""Counter-based random streams.

Draws are keyed by (stream key, block index) with the Philox generator, so a
given path index always receives the same numbers no matter how a batch is
split. Paths are grouped into fixed-size blocks to keep generator setup cheap.
"""

from __future__ import annotations

import hashlib

import numpy as np

BLOCK_SIZE = 512


def _derive_key(parent: int, name: str) -> int:
    digest = hashlib.sha256(f"{parent}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


class RandomStream:
    """Splittable, order-independent source of random numbers."""

    def __init__(self, seed: int, block_size: int = BLOCK_SIZE, _key: int | None = None):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)
        self.block_size = int(block_size)
        self.key = _derive_key(self.seed, "root") if _key is None else _key

    def child(self, name: str) -> "RandomStream":
        """Independent sub-stream identified by a name."""
        return RandomStream(self.seed, self.block_size, _derive_key(self.key, name))

    def generator(self, index: int) -> np.random.Generator:
        """Generator dedicated to one counter value (a block or a single task)."""
        return np.random.Generator(np.random.Philox(key=[self.key, int(index)]))

    def _draw(self, kind: str, n_paths: int, shape: tuple, start: int) -> np.ndarray:
        shape = tuple(int(s) for s in shape)
        width = int(np.prod(shape)) if shape else 1
        out = np.empty((n_paths, width))
        first, last = start, start + n_paths
        for block in range(first // self.block_size, (last - 1) // self.block_size + 1 if n_paths else 0):
            gen = self.generator(block)
            lo = block * self.block_size
            if kind == "normal":
                chunk = gen.standard_normal((self.block_size, width))
            else:
                chunk = gen.random((self.block_size, width))
            a, b = max(first, lo), min(last, lo + self.block_size)
            out[a - first:b - first] = chunk[a - lo:b - lo]
        return out.reshape((n_paths,) + shape)

    def normal(self, n_paths: int, shape: tuple = (), start: int = 0) -> np.ndarray:
        """Standard normals of shape (n_paths, *shape) for paths start..start+n_paths-1."""
        return self._draw("normal", n_paths, shape, start)

    def uniform(self, n_paths: int, shape: tuple = (), start: int = 0) -> np.ndarray:
        return self._draw("uniform", n_paths, shape, start)
