"""Positional encoding for spots on an irregular grid.

A slide only covers part of its bounding grid.  APEG scatters the spot tokens
into a dense grid with zeros in the gaps, runs a 3x3 depthwise convolution,
and gathers the occupied cells back.  Each spot then learns something about
its surroundings, including which neighbours are missing.
"""
import numpy as np

from triplex.encoders import GridCoordinates, apeg
from triplex.tensor import Tensor

rng = np.random.default_rng(1)

occupied = np.array([
    [1, 1, 0, 0],
    [1, 1, 1, 0],
    [0, 1, 1, 1],
], dtype=bool)
cells = np.argwhere(occupied)
coords = GridCoordinates(cells)
print(f"{len(cells)} spots on a {coords.h}x{coords.w} grid")

# same token everywhere: only position can make outputs differ
tokens = Tensor(np.ones((len(cells), 1)))
kernel = Tensor(np.ones((3, 3, 1)))
out = apeg(tokens, coords, kernel).data[:, 0]

grid = np.full(occupied.shape, np.nan)
grid[cells[:, 0], cells[:, 1]] = out
print("output = 1 + number of occupied cells in the 3x3 window:")
for row in grid:
    print("  " + " ".join("  ." if np.isnan(v) else f"{v:3.0f}" for v in row))

# random tokens and kernel: gradients flow back to both
t = Tensor(rng.normal(size=(len(cells), 4)), requires_grad=True)
k = Tensor(rng.normal(size=(3, 3, 4)), requires_grad=True)
apeg(t, coords, k).sum().backward()
print("grad shapes:", t.grad.shape, k.grad.shape)
