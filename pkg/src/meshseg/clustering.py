"""Connectivity-constrained Ward agglomerative clustering of triangles.

Starting from singletons, the pair of clusters joined by at least one
dual-graph edge whose merge least increases total within-cluster variance
is merged, until the requested cluster count is reached. Deterministic:
ties are broken by the smallest (min-member-index) pair, and no RNG is
involved.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from meshseg.spectral import AdjacencyMatrix

__all__ = [
    "ClusterAssignment",
    "cluster_count",
    "ward_constrained",
    "co_membership",
]


@dataclass(frozen=True)
class ClusterAssignment:
    """Triangle-to-cluster assignment with canonical ids.

    Ids are 0..M-1 in ascending order of each cluster's smallest member
    index. ``merges``, when recorded, lists the merged member tuples in
    order.
    """

    assignment: np.ndarray  # (N,) int64
    num_clusters: int
    merges: tuple = ()

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=np.int64)
        object.__setattr__(self, "assignment", a)
        if a.size:
            present = np.unique(a)
            if present[0] < 0 or present[-1] >= self.num_clusters:
                raise ValueError("cluster id out of range")
            if len(present) != self.num_clusters:
                raise ValueError("empty cluster id")

    def one_hot(self) -> np.ndarray:
        j = np.zeros((len(self.assignment), self.num_clusters), dtype=np.float64)
        j[np.arange(len(self.assignment)), self.assignment] = 1.0
        return j


def cluster_count(num_vertices: int, lam: float) -> int:
    """Number of clusters for a mesh with the given vertex count: at least
    one, otherwise the floor of vertices / lambda."""
    if num_vertices < 1:
        raise ValueError("vertex count must be >= 1")
    if lam <= 0:
        raise ValueError("lambda must be positive")
    return max(1, int(num_vertices // lam))


def _ward_delta(size_a, centroid_a, size_b, centroid_b) -> float:
    diff = centroid_a - centroid_b
    return size_a * size_b / (size_a + size_b) * float(diff @ diff)


def ward_constrained(
    points: np.ndarray,
    adj: AdjacencyMatrix,
    num_clusters: int,
    return_merges: bool = False,
) -> ClusterAssignment:
    """Greedy Ward agglomeration restricted to dual-graph-connected pairs.

    Merge cost for clusters a, b is ``|a||b|/(|a|+|b|) * |mu_a - mu_b|^2``,
    evaluated directly from maintained sizes and centroids (algebraically
    equal to the Lance-Williams update). If the graph runs out of connected
    pairs before reaching the target count, the cheapest unconnected pair
    is merged instead.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError(f"points must be 2-D, got shape {points.shape}")
    n = len(points)
    if adj.n != n:
        raise ValueError(f"adjacency size {adj.n} != point count {n}")
    if not 1 <= num_clusters <= n:
        raise ValueError(f"cluster count {num_clusters} outside [1, {n}]")

    size = {i: 1 for i in range(n)}
    centroid = {i: points[i].copy() for i in range(n)}
    min_member = {i: i for i in range(n)}
    members = {i: [i] for i in range(n)}
    neighbors: dict[int, set[int]] = {i: set() for i in range(n)}
    for i, j in adj.pairs:
        neighbors[int(i)].add(int(j))
        neighbors[int(j)].add(int(i))

    def pair_key(a: int, b: int):
        ma, mb = min_member[a], min_member[b]
        return (ma, mb) if ma < mb else (mb, ma)

    # cached Ward increase per connected active pair; centroids never
    # change in place, so an entry stays valid until a member is retired
    delta: dict[tuple[int, int], float] = {}
    for i, j in adj.pairs:
        a, b = int(i), int(j)
        delta[(a, b)] = _ward_delta(size[a], centroid[a], size[b], centroid[b])

    merges = []
    next_id = n
    active = set(range(n))

    def pick_best(candidates):
        best = None
        best_rank = None
        for (a, b), d in candidates:
            rank = (d, pair_key(a, b))
            if best_rank is None or rank < best_rank:
                best, best_rank = (a, b), rank
        return best

    while len(active) > num_clusters:
        if delta:
            a, b = pick_best(delta.items())
        else:
            # disconnected remainder: fall back to the cheapest pair overall
            ids = sorted(active)
            fallback = (
                ((x, y), _ward_delta(size[x], centroid[x], size[y], centroid[y]))
                for xi, x in enumerate(ids)
                for y in ids[xi + 1 :]
            )
            a, b = pick_best(fallback)
        if return_merges:
            merges.append((tuple(sorted(members[a])), tuple(sorted(members[b]))))
        new = next_id
        next_id += 1
        total = size[a] + size[b]
        centroid[new] = (size[a] * centroid[a] + size[b] * centroid[b]) / total
        size[new] = total
        min_member[new] = min(min_member[a], min_member[b])
        members[new] = members[a] + members[b]
        new_neighbors = (neighbors[a] | neighbors[b]) - {a, b}
        neighbors[new] = new_neighbors
        for old in (a, b):
            for k in neighbors[old]:
                neighbors[k].discard(old)
                delta.pop((old, k) if old < k else (k, old), None)
            active.discard(old)
            del size[old], centroid[old], min_member[old], members[old], neighbors[old]
        for k in new_neighbors:
            neighbors[k].add(new)
            delta[(k, new)] = _ward_delta(size[k], centroid[k], size[new], centroid[new])
        active.add(new)

    order = sorted(active, key=lambda c: min_member[c])
    assignment = np.empty(n, dtype=np.int64)
    for cid, cluster in enumerate(order):
        assignment[members[cluster]] = cid
    return ClusterAssignment(
        assignment=assignment, num_clusters=len(order), merges=tuple(merges)
    )


def co_membership(assignment: ClusterAssignment) -> np.ndarray:
    """Binary matrix with 1 where two triangles share a cluster (J J^T)."""
    ids = assignment.assignment
    return (ids[:, np.newaxis] == ids[np.newaxis, :]).astype(np.float64)
