"""Collection and export of attention weights from a forward pass."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AttentionCapture:
    """Raw attention weights keyed by (block, branch, kind).

    ``kind`` is ``"in_ca"``, ``"sa"`` or ``"out_ca"``. Arrays have shape
    (B, groups, heads, queries, keys); the last axis is the softmax axis.
    """

    weights: dict = field(default_factory=dict)

    def add(self, block, branch, kind, w):
        self.weights[(block, branch, kind)] = np.asarray(w)

    def __iter__(self):
        return iter(self.weights.items())

    def saliency(self, block, branch):
        """In-CA maps per global token, shape (B, M, T, F), averaged over heads.

        For the time-global branch each (token, f) column sums to 1 over T;
        for the frequency-global branch each (token, t) row sums to 1 over F.
        """
        w = self.weights[(block, branch, "in_ca")].mean(axis=2)  # (B, G, M, N)
        if branch == "t":
            return w.transpose(0, 2, 3, 1)  # G=F, N=T -> (B, M, T, F)
        return w.transpose(0, 2, 1, 3)  # G=T, N=F -> (B, M, T, F)

    def blocks(self):
        return sorted({(b, br) for (b, br, kind) in self.weights if kind == "in_ca"})


def write_pgm(path, grid):
    """8-bit binary PGM, rows = first axis; values scaled by the grid maximum."""
    grid = np.asarray(grid, dtype=np.float64)
    peak = grid.max()
    img = np.zeros(grid.shape, dtype=np.uint8) if peak <= 0 else np.round(255 * grid / peak).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path):
    """Return ``(pixels (h, w) uint8, maxval)`` from a binary PGM."""
    with open(path, "rb") as fh:
        raw = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    data = np.frombuffer(raw[pos + 1 : pos + 1 + w * h], dtype=np.uint8)
    if data.size != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return data.reshape(h, w), maxval


def export_attention(capture: AttentionCapture, out_dir, item=0):
    """Write one CSV (T rows x F columns) and one PGM per (block, branch, token).

    Returns the list of written CSV paths.
    """
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for block, branch in capture.blocks():
        maps = capture.saliency(block, branch)[item]
        for token, grid in enumerate(maps):
            stem = os.path.join(out_dir, f"block{block}_{branch}_token{token:02d}")
            np.savetxt(stem + ".csv", grid, delimiter=",", fmt="%.8g")
            write_pgm(stem + ".pgm", grid)
            written.append(stem + ".csv")
    return written
