"""Integer matrix product, serial and row-partitioned across threads.

Integer elements keep the parallel and serial results exactly equal, so the
tests need no tolerance.  The parallel version splits the output rows into
one contiguous block per thread; each worker writes only its own rows.
"""

from __future__ import annotations

import random
import threading
from dataclasses import dataclass


class DimensionMismatch(Exception):
    pass


@dataclass
class Matrix:
    """Row-major integer matrix."""

    rows: int
    cols: int
    elements: list[int]

    def __post_init__(self):
        if self.rows <= 0 or self.cols <= 0:
            raise ValueError("rows and cols must be positive")
        if len(self.elements) != self.rows * self.cols:
            raise ValueError(
                f"need {self.rows * self.cols} elements, got {len(self.elements)}"
            )

    @classmethod
    def from_rows(cls, rows: list[list[int]]) -> "Matrix":
        if not rows or any(len(r) != len(rows[0]) for r in rows):
            raise ValueError("rows must be non-empty and rectangular")
        return cls(len(rows), len(rows[0]), [x for row in rows for x in row])

    @classmethod
    def identity(cls, n: int) -> "Matrix":
        return cls(n, n, [1 if i == j else 0 for i in range(n) for j in range(n)])

    @classmethod
    def random(cls, rows: int, cols: int, rng: random.Random, lo: int = -100, hi: int = 100) -> "Matrix":
        return cls(rows, cols, [rng.randint(lo, hi) for _ in range(rows * cols)])

    def row(self, i: int) -> list[int]:
        return self.elements[i * self.cols : (i + 1) * self.cols]

    def to_rows(self) -> list[list[int]]:
        return [self.row(i) for i in range(self.rows)]


def _check_dims(a: Matrix, b: Matrix) -> None:
    if a.cols != b.rows:
        raise DimensionMismatch(f"{a.rows}x{a.cols} times {b.rows}x{b.cols}")


def _columns(b: Matrix) -> list[tuple[int, ...]]:
    return list(zip(*b.to_rows()))


def _product_rows(a: Matrix, b_cols, start: int, stop: int, out: list[int], cols: int) -> None:
    for i in range(start, stop):
        a_row = a.row(i)
        base = i * cols
        for j, b_col in enumerate(b_cols):
            acc = 0
            for x, y in zip(a_row, b_col):
                acc += x * y
            out[base + j] = acc


def matmul_serial(a: Matrix, b: Matrix) -> Matrix:
    """Row-by-row, column-by-column triple loop."""
    _check_dims(a, b)
    out = [0] * (a.rows * b.cols)
    _product_rows(a, _columns(b), 0, a.rows, out, b.cols)
    return Matrix(a.rows, b.cols, out)


def row_blocks(rows: int, parts: int) -> list[tuple[int, int]]:
    """Split ``rows`` into ``parts`` contiguous blocks with sizes differing by <= 1."""
    if parts < 1:
        raise ValueError("parts must be >= 1")
    base, extra = divmod(rows, parts)
    blocks = []
    start = 0
    for k in range(parts):
        size = base + (1 if k < extra else 0)
        blocks.append((start, start + size))
        start += size
    return blocks


def matmul_parallel(a: Matrix, b: Matrix, threads: int) -> Matrix:
    """Same product with output rows partitioned across worker threads.

    Each worker writes a disjoint row range, so the result is identical to
    ``matmul_serial`` element for element.
    """
    _check_dims(a, b)
    if threads < 1:
        raise ValueError("threads must be >= 1")
    b_cols = _columns(b)
    out = [0] * (a.rows * b.cols)
    workers = [
        threading.Thread(
            target=_product_rows, args=(a, b_cols, start, stop, out, b.cols)
        )
        for start, stop in row_blocks(a.rows, threads)
        if stop > start
    ]
    for w in workers:
        w.start()
    for w in workers:
        w.join()
    return Matrix(a.rows, b.cols, out)
