"""Neighbour search on a lattice, where many distances tie exactly.

Both the brute-force path and the tree-accelerated path break ties by the
lower point index, so they agree element for element.
"""

import numpy as np

from cpt.graph import accelerate_knn, knn_graph


def main():
    axis = np.arange(3.0)
    grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), -1).reshape(1, -1, 3)
    brute = knn_graph(grid, 6).neighbor_idx[0]
    fast = accelerate_knn(grid, 6).neighbor_idx[0]
    centre = 13  # the point (1, 1, 1)
    print("centre point", grid[0, centre])
    print("its six face neighbours, in index order:", brute[centre].tolist())
    print("coordinates:\n", grid[0, brute[centre]])
    print("paths agree on every row:", np.array_equal(brute, fast))


if __name__ == "__main__":
    main()
