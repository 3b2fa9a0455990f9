#!/usr/bin/env python3
"""Reference composed attention map.

Builds a stack of synthetic per-head attention tensors (3 layers, 2
heads, 5 tokens, 1 sample) from a closed-form expression, row-softmaxes
each head, averages heads per layer, and composes the per-layer means by
matrix product with later layers on the left. The Rust test reproduces
the construction and must match the printed matrix.
"""

import numpy as np

LAYERS, HEADS, TOKENS = 3, 2, 5


def raw_logit(layer, head, i, j):
    return np.sin(0.3 * (layer + 1) * (i + 1) + 0.17 * (head + 1) * (j + 1)) + 0.1 * i - 0.05 * j


def main():
    means = []
    for layer in range(LAYERS):
        heads = np.zeros((HEADS, TOKENS, TOKENS))
        for h in range(HEADS):
            for i in range(TOKENS):
                row = np.array([raw_logit(layer, h, i, j) for j in range(TOKENS)])
                row = np.exp(row - row.max())
                heads[h, i] = row / row.sum()
        means.append(heads.mean(axis=0))
    composed = means[0]
    for layer in range(1, LAYERS):
        composed = means[layer] @ composed
    np.set_printoptions(precision=17, floatmode="fixed", suppress=True)
    print("row sums:", composed.sum(axis=1))
    print("composed attention map (layers 0..2, later layers left):")
    for row in composed:
        print(", ".join(f"{v:.17g}" for v in row) + ",")


if __name__ == "__main__":
    main()
