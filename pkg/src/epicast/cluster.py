"""Shape clustering of latent trajectories: DTW distances, Ward agglomeration
on squared distances (the Ward.D2 convention), dendrogram cuts and exports."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DistanceMatrix:
    labels: tuple[str, ...]
    d: np.ndarray  # N x N, symmetric, zero diagonal

    def __post_init__(self):
        d = np.asarray(self.d, dtype=float)
        object.__setattr__(self, "d", d)
        n = len(self.labels)
        if d.shape != (n, n):
            raise ValueError("distance matrix shape must match labels")
        if np.any(d < 0) or np.any(np.diag(d) != 0) or not np.allclose(d, d.T):
            raise ValueError("need a symmetric non-negative matrix with zero diagonal")
        d.setflags(write=False)


@dataclass(frozen=True)
class Dendrogram:
    """Binary merge tree: (node_a, node_b, height, new_node_id) in merge order.

    Leaves are 0..N-1; internal nodes are numbered N, N+1, ... as they form.
    """

    labels: tuple[str, ...]
    merges: tuple[tuple[int, int, float, int], ...]

    def __post_init__(self):
        n = len(self.labels)
        if len(self.merges) != n - 1:
            raise ValueError("a dendrogram over N leaves has exactly N-1 merges")
        heights = [m[2] for m in self.merges]
        if any(b < a - 1e-9 for a, b in zip(heights, heights[1:])):
            raise ValueError("merge heights must be non-decreasing")

    def to_json_obj(self) -> dict:
        nodes: dict[int, dict] = {
            i: {"label": lab, "height": 0.0} for i, lab in enumerate(self.labels)
        }
        for a, b, h, new in self.merges:
            nodes[new] = {"height": h, "children": [nodes.pop(a), nodes.pop(b)]}
        (root,) = nodes.values()
        return root

    def to_newick(self) -> str:
        nodes: dict[int, str] = {i: lab.replace(" ", "_") for i, lab in enumerate(self.labels)}
        heights: dict[int, float] = {i: 0.0 for i in range(len(self.labels))}
        for a, b, h, new in self.merges:
            la = h - heights.pop(a)
            lb = h - heights.pop(b)
            nodes[new] = f"({nodes.pop(a)}:{la:.6g},{nodes.pop(b)}:{lb:.6g})"
            heights[new] = h
        (root,) = nodes.values()
        return root + ";"


def dtw_distance(a, b) -> float:
    """Classic DTW with |a_s - b_t| local cost, symmetric steps, full boundaries."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise ValueError("sequences must be non-empty")
    n, m = len(a), len(b)
    cost = np.abs(a[:, None] - b[None, :])
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        row = acc[i]
        prev = acc[i - 1]
        for j in range(1, m + 1):
            row[j] = cost[i - 1, j - 1] + min(prev[j - 1], prev[j], row[j - 1])
    return float(acc[n, m])


def pairwise_distance_matrix(series, labels) -> DistanceMatrix:
    """Fill the upper triangle with DTW distances and mirror it."""
    if len(series) < 2:
        raise ValueError("need at least 2 series")
    n = len(series)
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d[i, j] = d[j, i] = dtw_distance(series[i], series[j])
    return DistanceMatrix(tuple(labels), d)


def ward_cluster(dm: DistanceMatrix) -> Dendrogram:
    """Agglomerate via the Lance-Williams recurrence on squared distances.

    The merge objective runs on squared input distances; reported heights are
    back on the original scale. Ties go to the lowest (i, j) pair.
    """
    n = len(dm.labels)
    if n < 2:
        raise ValueError("need at least 2 leaves")
    d2 = dm.d.astype(float) ** 2
    np.fill_diagonal(d2, np.inf)
    sizes = {i: 1 for i in range(n)}
    node_of = {i: i for i in range(n)}  # active row -> dendrogram node id
    active = list(range(n))
    merges = []
    next_id = n

    for _ in range(n - 1):
        # lowest-index tie-break: scan in pair order
        best = (np.inf, -1, -1)
        for ai in range(len(active)):
            i = active[ai]
            row = d2[i]
            for aj in range(ai + 1, len(active)):
                j = active[aj]
                if row[j] < best[0]:
                    best = (row[j], i, j)
        _, i, j = best
        height = float(np.sqrt(best[0]))
        merges.append((node_of[i], node_of[j], height, next_id))

        ni, nj = sizes[i], sizes[j]
        for k in active:
            if k in (i, j):
                continue
            nk = sizes[k]
            new = ((ni + nk) * d2[i, k] + (nj + nk) * d2[j, k] - nk * d2[i, j]) / (
                ni + nj + nk
            )
            d2[i, k] = d2[k, i] = new
        sizes[i] = ni + nj
        node_of[i] = next_id
        next_id += 1
        active.remove(j)
        d2[j, :] = np.inf
        d2[:, j] = np.inf

    return Dendrogram(dm.labels, tuple(merges))


def cut_dendrogram(tree: Dendrogram, k: int) -> list[int]:
    """Cluster labels per leaf after removing the k-1 highest merges.

    Labels are 1..k in order of each cluster's first-appearing leaf.
    """
    n = len(tree.labels)
    if not 1 <= k <= n:
        raise ValueError("k must lie in 1..N")
    parent = list(range(2 * n - 1))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    # heights are non-decreasing, so the highest k-1 merges are the last ones
    for a, b, _, new in tree.merges[: n - k]:
        parent[find(a)] = find(new)
        parent[find(b)] = find(new)

    label_of_root: dict[int, int] = {}
    out = []
    for leaf in range(n):
        root = find(leaf)
        if root not in label_of_root:
            label_of_root[root] = len(label_of_root) + 1
        out.append(label_of_root[root])
    return out


def cluster_latent_trajectories(
    gamma_mean: np.ndarray,
    labels,
    window: int = 60,
    k: int = 10,
) -> tuple[DistanceMatrix, Dendrogram, list[int]]:
    """Cluster countries on the last ``window`` posterior-mean latent values.

    Series shorter than the window are used whole.
    """
    series = [row[-window:] for row in np.asarray(gamma_mean, dtype=float)]
    dm = pairwise_distance_matrix(series, labels)
    tree = ward_cluster(dm)
    return dm, tree, cut_dendrogram(tree, min(k, len(series)))


def cluster_labels_csv(labels, assignments) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["country_id", "cluster"])
    for lab, c in zip(labels, assignments):
        w.writerow([lab, c])
    return buf.getvalue()
