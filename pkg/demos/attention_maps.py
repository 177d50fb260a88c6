"""Inspect the attention maps of an untrained toy model.

Each CpT layer records its feature-wise map and, where enabled, its InterPoint
map. Every row is a probability distribution over the points of one cloud.
"""

import numpy as np

from cpt import toy
from cpt.model import classify_forward, init_params


def main():
    params = init_params(toy.MODEL, np.random.default_rng(0))
    train_set, _ = toy.datasets(seed=0)
    record = []
    classify_forward(train_set.features[:2], toy.MODEL, params, record=record)
    names = ["layer 0 feature-wise", "layer 0 InterPoint", "layer 1 feature-wise", "layer 1 InterPoint",
             "layer 2 feature-wise"]
    for name, w in zip(names, record):
        entropy = -(w * np.log(w)).sum(-1).mean() / np.log(w.shape[-1])
        print(f"{name:22s} shape {w.shape}  max |row sum - 1| {np.abs(w.sum(-1) - 1).max():.1e}  "
              f"normalised entropy {entropy:.3f}")


if __name__ == "__main__":
    main()
