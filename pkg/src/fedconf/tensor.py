"""Dense float64 matrices and a splittable seeded RNG.

Matrices are plain 2-D ``numpy.ndarray`` objects with dtype float64. The
helpers here add the shape checks and error types the rest of the package
relies on; none of them mutate their inputs.
"""

from __future__ import annotations

import hashlib
from typing import Callable

import numpy as np

from fedconf.errors import ShapeError

Matrix = np.ndarray


def as_matrix(data) -> Matrix:
    """Copy ``data`` into a fresh 2-D float64 array with at least one row and column."""
    m = np.array(data, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got {m.ndim}-D data")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"matrix must have rows >= 1 and cols >= 1, got {m.shape}")
    return m


def zeros(rows: int, cols: int) -> Matrix:
    return np.zeros((rows, cols), dtype=np.float64)


def identity(n: int) -> Matrix:
    return np.eye(n, dtype=np.float64)


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def relu(x: Matrix) -> Matrix:
    return np.maximum(x, 0.0)


def relu_grad(x: Matrix) -> Matrix:
    # Subgradient at exactly 0 is taken as 0.
    return (x > 0.0).astype(np.float64)


_BINARY: dict[str, Callable[[Matrix, Matrix], Matrix]] = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}
_UNARY: dict[str, Callable[[Matrix], Matrix]] = {
    "relu": relu,
    "relu_grad": relu_grad,
}


def elementwise(op: str, a: Matrix, b: Matrix | float | None = None) -> Matrix:
    """Apply ``op`` elementwise.

    ``add``/``sub``/``mul`` take a second matrix of identical shape; ``scale``
    takes a scalar; ``relu``/``relu_grad`` ignore ``b``.
    """
    if op in _UNARY:
        return _UNARY[op](a)
    if op == "scale":
        if not np.isscalar(b):
            raise ShapeError("scale expects a scalar operand")
        return a * float(b)
    if op in _BINARY:
        b = np.asarray(b, dtype=np.float64)
        if a.shape != b.shape:
            raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
        return _BINARY[op](a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


def _label_key(label: str | int) -> int:
    digest = hashlib.blake2b(str(label).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class SeededRng:
    """Counter-based (Philox) random stream identified by a seed and a label path.

    ``split(label)`` derives a child stream that depends only on the parent's
    seed and path plus ``label``, never on how many numbers the parent has
    drawn. Per-client streams are therefore independent of execution order.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.path = tuple(path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def split(self, label: str | int) -> "SeededRng":
        return SeededRng(self.seed, self.path + (_label_key(label),))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, rows: int, cols: int, mean: float = 0.0, stddev: float = 1.0) -> Matrix:
        if stddev < 0:
            raise ValueError("stddev must be >= 0")
        return self._gen.normal(mean, stddev, size=(rows, cols))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=False)

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, path={self.path})"


def rng_normal(rng: SeededRng, rows: int, cols: int, mean: float = 0.0, stddev: float = 1.0) -> Matrix:
    return rng.normal(rows, cols, mean, stddev)
