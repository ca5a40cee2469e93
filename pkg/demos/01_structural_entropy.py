"""
Structural entropy on a channel-group graph
===========================================

Groups whose summary features point the same way end up in one cluster of
the 2D encoding tree, and the detachment cost says which member of a
cluster is hardest to replace.  Everything here is plain numpy.
"""

import math

import numpy as np

from ecmrnet.sep import (Partition, SimilarityGraph, analyze_groups, build_similarity_graph,
                         detachment_cost, minimize_2dse_exact, minimize_2dse_greedy,
                         one_dim_entropy_terms, two_dim_se)

# Two disjoint edges.  Pairing the endpoints costs exactly ln 2.
g = SimilarityGraph(np.array([[0, 1, 0, 0],
                              [1, 0, 0, 0],
                              [0, 0, 0, 1],
                              [0, 0, 1, 0]], float))
paired = minimize_2dse_exact(g)
print("paired partition", paired.assignment, "H =", two_dim_se(g, paired), "ln 2 =", math.log(2))
print("singletons      ", two_dim_se(g, Partition.singletons(4)), "= 1D-SE", one_dim_entropy_terms(g).sum())

# Five vectors in two directions plus one loner.  Edges are positive cosines.
rng = np.random.default_rng(0)
u, v = rng.normal(size=16), rng.normal(size=16)
vectors = [u, u + 0.1 * rng.normal(size=16), v, v + 0.2 * rng.normal(size=16), rng.normal(size=16)]
graph = build_similarity_graph(vectors)
greedy, exact = minimize_2dse_greedy(graph), minimize_2dse_exact(graph)
print("\ngreedy", greedy.assignment, two_dim_se(graph, greedy))
print("exact ", exact.assignment, two_dim_se(graph, exact))
for o in range(graph.n):
    print(f"  detach {o}: {detachment_cost(graph, exact, o):+.5f}")

# A stage with a copied group: only one of the twins survives the vote.
groups = [rng.normal(size=(4, 64)) for _ in range(3)]
res = analyze_groups(groups + [groups[1].copy()])
print("\nretained per group", res.retained, "(group 3 duplicates group 1)")
