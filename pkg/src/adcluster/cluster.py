"""Target-domain pseudo labels: distances, k-reciprocal re-ranking, DBSCAN."""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

NOISE = -1


@dataclass
class ClusterParams:
    k1: int = 20
    k2: int = 6
    lambda_rr: float = 0.3
    eps_quantile: float = 0.005
    min_pts: int = 4

    def validate(self) -> None:
        if self.k1 < 1 or self.k2 < 1:
            raise ValueError("k1 and k2 must be >= 1")
        if self.k2 > self.k1:
            raise ValueError("k2 must not exceed k1")
        if not 0 <= self.lambda_rr <= 1:
            raise ValueError("lambda_rr must lie in [0, 1]")
        if not 0 < self.eps_quantile < 1:
            raise ValueError("eps_quantile must lie in (0, 1)")
        if self.min_pts < 2:
            raise ValueError("min_pts must be >= 2")


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    centers: np.ndarray
    cluster_sizes: list[int]

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_sizes)

    @property
    def n_noise(self) -> int:
        return int((self.labels == NOISE).sum())

    def members(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_index", "pseudo_label"])
            for i, lab in enumerate(self.labels):
                w.writerow([i, int(lab)])


def pairwise_euclidean(features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    d = cdist(features, features)
    np.fill_diagonal(d, 0.0)
    # cdist is symmetric in exact arithmetic; enforce it bitwise
    return np.minimum(d, d.T)


def neighbour_rank(d: np.ndarray) -> np.ndarray:
    """Stable argsort of each row with the point itself forced to rank 0."""
    keyed = d.copy()
    np.fill_diagonal(keyed, -np.inf)
    return np.argsort(keyed, axis=1, kind="stable")


def _knn(rank: np.ndarray, i: int, k: int) -> np.ndarray:
    # the point itself plus its k nearest others
    return rank[i, : k + 1]


def _reciprocal(rank: np.ndarray, i: int, k: int) -> np.ndarray:
    fwd = _knn(rank, i, k)
    back = rank[fwd, : k + 1]
    return fwd[(back == i).any(axis=1)]


def k_reciprocal_rerank(d: np.ndarray, p: ClusterParams) -> np.ndarray:
    """Blend the Jaccard distance of k-reciprocal encodings with ``d``.

    Neighbour lists come from a stable argsort, so ties resolve by index.
    Encoding weights are ``exp(-d)``; rows are L1-normalised and then
    averaged over each point's ``k2`` nearest neighbours.
    """
    d = np.asarray(d, dtype=np.float64)
    n = d.shape[0]
    if n <= p.k1:
        raise ValueError(f"need more than k1={p.k1} samples, got {n}")
    if p.lambda_rr == 1.0:
        return d.copy()

    rank = neighbour_rank(d)
    half = math.ceil(p.k1 / 2)
    recip_half = [_reciprocal(rank, j, half) for j in range(n)]

    v = np.zeros((n, n))
    for i in range(n):
        r = _reciprocal(rank, i, p.k1)
        expanded = [r]
        for j in r:
            cand = recip_half[j]
            if len(np.intersect1d(cand, r)) >= 2.0 / 3.0 * len(cand):
                expanded.append(cand)
        support = np.unique(np.concatenate(expanded))
        w = np.exp(-d[i, support])
        v[i, support] = w / w.sum()

    if p.k2 > 1:
        v = np.stack([v[rank[i, : p.k2]].mean(axis=0) for i in range(n)])

    jac = np.empty((n, n))
    for i in range(n):
        nz = np.flatnonzero(v[i])
        inter = np.minimum(v[i, nz], v[:, nz]).sum(axis=1)
        union = np.maximum(v[i, nz], v[:, nz]).sum(axis=1) + (v.sum(axis=1) - v[:, nz].sum(axis=1))
        jac[i] = 1.0 - inter / union
    out = (1.0 - p.lambda_rr) * jac + p.lambda_rr * d
    out = 0.5 * (out + out.T)
    np.fill_diagonal(out, 0.0)
    return np.maximum(out, 0.0)


def select_eps(d: np.ndarray, quantile: float) -> float:
    """Lower-index quantile of the off-diagonal distances.

    With the upper triangle sorted ascending into ``u`` (length L), returns
    ``u[floor(quantile * (L - 1))]``.
    """
    n = d.shape[0]
    if n < 2:
        raise ValueError("need at least two samples to pick eps")
    if not 0 < quantile < 1:
        raise ValueError("quantile must lie in (0, 1)")
    upper = np.sort(d[np.triu_indices(n, k=1)])
    return float(upper[int(math.floor(quantile * (len(upper) - 1)))])


def dbscan(d: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """DBSCAN over a precomputed distance matrix.

    A point is core when at least ``min_pts`` points, itself included, lie
    within ``eps``.  Seeds are scanned in ascending index order and every
    cluster is expanded completely before the next one starts, so a border
    point shared by several clusters joins the one with the lowest id.
    """
    n = d.shape[0]
    neighbours = [np.flatnonzero(d[i] <= eps) for i in range(n)]
    core = np.array([len(nb) >= min_pts for nb in neighbours], dtype=bool)
    labels = np.full(n, NOISE, dtype=np.int64)
    cluster = 0
    for seed in range(n):
        if not core[seed] or labels[seed] != NOISE:
            continue
        labels[seed] = cluster
        queue = deque([seed])
        while queue:
            i = queue.popleft()
            for j in neighbours[i]:
                if labels[j] == NOISE:
                    labels[j] = cluster
                    if core[j]:
                        queue.append(j)
        cluster += 1
    return labels


def cluster_centers(features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-cluster mean; fsum makes the result independent of member order."""
    labels = np.asarray(labels)
    n_clusters = int(labels.max()) + 1 if (labels >= 0).any() else 0
    centers = np.empty((n_clusters, features.shape[1]))
    for c in range(n_clusters):
        members = features[labels == c]
        if len(members) == 0:
            raise ValueError(f"cluster {c} is empty")
        centers[c] = [math.fsum(col) / len(members) for col in members.T]
    return centers


def assign_pseudo_labels(features: np.ndarray, p: ClusterParams) -> ClusterAssignment:
    """Euclidean -> max-normalise -> re-rank -> eps by quantile -> DBSCAN -> centres.

    Distances are divided by their maximum before re-ranking so that the
    Jaccard term and the original distance live on the same [0, 1] scale.
    """
    p.validate()
    d = pairwise_euclidean(features)
    if d.shape[0] <= p.k1:
        raise ValueError(f"need more than k1={p.k1} samples, got {d.shape[0]}")
    scale = d.max()
    if scale == 0:
        # every feature coincides: one cluster, nothing to re-rank
        labels = np.zeros(d.shape[0], dtype=np.int64)
    else:
        d = k_reciprocal_rerank(d / scale, p)
        labels = dbscan(d, select_eps(d, p.eps_quantile), p.min_pts)
    centers = cluster_centers(features, labels)
    sizes = [int((labels == c).sum()) for c in range(len(centers))]
    return ClusterAssignment(labels, centers, sizes)
