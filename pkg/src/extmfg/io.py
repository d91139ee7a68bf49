"""Plain-text field dumps and state checkpoints.

A field block is ``MFGFIELD v1 <dim> <n> <count>`` followed by ``count``
decimal floats in row-major node order.  A checkpoint is the u block, the
m block, one block per velocity component and a final ``HBAR <value>``
line.  Floats are written with 17 significant digits so reading back is
exact.
"""

from __future__ import annotations

import os

import numpy as np

from .solver import MFGState
from .torus import TorusGrid

__all__ = ["write_field", "read_field", "write_fields", "read_fields", "write_checkpoint", "read_checkpoint"]

MAGIC = "MFGFIELD"
VERSION = "v1"
PER_LINE = 4


def _fmt(v) -> str:
    return f"{float(v):.17g}"


def _block(grid: TorusGrid, values) -> str:
    values = np.asarray(values, dtype=float).ravel()
    if values.size != grid.size:
        raise ValueError(f"field has {values.size} values, grid has {grid.size} nodes")
    lines = [f"{MAGIC} {VERSION} {grid.dim} {grid.n} {values.size}"]
    for i in range(0, values.size, PER_LINE):
        lines.append(" ".join(_fmt(v) for v in values[i : i + PER_LINE]))
    return "\n".join(lines) + "\n"


def write_fields(path, grid: TorusGrid, fields, trailer: str = "") -> None:
    with open(path, "w") as fh:
        for f in fields:
            fh.write(_block(grid, f))
        fh.write(trailer)


def write_field(path, grid: TorusGrid, values) -> None:
    write_fields(path, grid, [values])


class _Tokens:
    def __init__(self, text, path):
        self.lines = text.splitlines()
        self.path = path
        self.i = 0

    def fail(self, msg):
        raise ValueError(f"{self.path}: line {self.i + 1}: {msg}")

    def peek(self):
        while self.i < len(self.lines) and not self.lines[self.i].strip():
            self.i += 1
        return self.lines[self.i] if self.i < len(self.lines) else None

    def read_block(self):
        head = self.peek().split()
        if len(head) != 5 or head[0] != MAGIC:
            self.fail(f"expected '{MAGIC} {VERSION} <dim> <n> <count>' header")
        if head[1] != VERSION:
            self.fail(f"unsupported version {head[1]!r}")
        try:
            dim, n, count = int(head[2]), int(head[3]), int(head[4])
            grid = TorusGrid(dim, n)
        except ValueError as exc:
            self.fail(str(exc))
        if count != grid.size:
            self.fail(f"count {count} does not match n^dim = {grid.size}")
        self.i += 1
        values = []
        while len(values) < count:
            if self.i >= len(self.lines):
                self.fail(f"expected {count} values, found {len(values)}")
            try:
                values.extend(float(t) for t in self.lines[self.i].split())
            except ValueError:
                self.fail("non-numeric value in field block")
            self.i += 1
        if len(values) != count:
            self.fail(f"expected {count} values, found {len(values)}")
        return grid, np.array(values)


def read_fields(path):
    """Return (grid, [arrays], remaining lines) of a multi-block file."""
    with open(path) as fh:
        tok = _Tokens(fh.read(), os.fspath(path))
    grid, blocks = None, []
    while (line := tok.peek()) is not None and line.startswith(MAGIC):
        g, values = tok.read_block()
        if grid is not None and g != grid:
            tok.fail(f"block grid {g} differs from first block grid {grid}")
        grid = g
        blocks.append(values)
    if grid is None:
        tok.fail("no field block found")
    rest = [ln for ln in tok.lines[tok.i :] if ln.strip()]
    return grid, blocks, rest


def read_field(path):
    grid, blocks, rest = read_fields(path)
    if len(blocks) != 1 or rest:
        raise ValueError(f"{path}: expected exactly one field block")
    return grid, blocks[0]


def write_checkpoint(path, state: MFGState) -> None:
    grid = state.grid
    fields = [state.u, state.m] + [state.V[:, j] for j in range(grid.dim)]
    write_fields(path, grid, fields, trailer=f"HBAR {_fmt(state.Hbar)}\n")


def read_checkpoint(path) -> MFGState:
    grid, blocks, rest = read_fields(path)
    if len(blocks) != 2 + grid.dim:
        raise ValueError(f"{path}: checkpoint needs {2 + grid.dim} field blocks, found {len(blocks)}")
    if len(rest) != 1 or rest[0].split()[0] != "HBAR" or len(rest[0].split()) != 2:
        raise ValueError(f"{path}: checkpoint must end with a single 'HBAR <value>' line")
    hbar = float(rest[0].split()[1])
    V = np.stack(blocks[2:], axis=1)
    return MFGState(grid, blocks[0], blocks[1], V, hbar)
