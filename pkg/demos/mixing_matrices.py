"""
Mixing matrices for a small agent network
==========================================

Agents talk only to graph neighbours. Averaging over the network is a
multiplication by a symmetric, doubly stochastic matrix whose sparsity
follows the graph. PG-EXTRA needs a second matrix, and the pair has to
satisfy a handful of spectral conditions.
"""

import numpy as np

from decunroll.topology import (
    check_assumption1,
    graph_to_text,
    make_pg_extra_pair,
    metropolis_weights,
    psd_sqrt,
    sample_connected_graph,
)

np.set_printoptions(precision=3, suppress=True)

# A connected 5-node graph with 6 edges, drawn uniformly and rejected until connected.
g = sample_connected_graph(5, 6, seed=7)
print("edge list document:")
print(graph_to_text(g))
print("degrees:", g.degrees)

# Metropolis weights: w_ij = 1 / (1 + max(deg_i, deg_j)) on every edge.
W = metropolis_weights(g)
print("\nW =\n", W)
print("row sums:", W.sum(axis=1))

# The second matrix is the lazy version (I + W) / 2.
pair = make_pg_extra_pair(W, g)
print("\nW_tilde eigenvalues:", np.linalg.eigvalsh(pair.W_tilde))

# Every condition is checked numerically and reported with its residual.
print()
for c in check_assumption1(pair):
    print(f"  {'ok  ' if c.passed else 'FAIL'} {c.name:32s} residual {c.residual:.1e}")

# The square root of W_tilde - W annihilates consensus vectors.
R = psd_sqrt(pair.W_tilde - pair.W)
print("\n||R 1|| =", np.linalg.norm(R @ np.ones(5)))
print("||R R - (W_tilde - W)|| =", np.linalg.norm(R @ R - (pair.W_tilde - pair.W)))
