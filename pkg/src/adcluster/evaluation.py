"""Retrieval metrics (mAP, CMC), pseudo-label pair f-score and the scatter ratio J."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .cluster import NOISE

CMC_RANKS = (1, 5, 10)


@dataclass
class Metrics:
    mAP: float
    cmc: dict[int, float]
    n_queries_evaluated: int
    n_queries_skipped: int = 0

    @property
    def rank1(self) -> float:
        return self.cmc[1]


def map_cmc(features, query_idx, gallery_idx, identities, cameras, ranks=CMC_RANKS) -> Metrics:
    """Cross-camera retrieval evaluation.

    Gallery entries sharing both identity and camera with the query are
    dropped.  The gallery is ranked by ascending Euclidean distance, ties by
    ascending sample index.  Queries left without any positive are skipped.
    """
    features = np.asarray(features, dtype=np.float64)
    query_idx = np.asarray(query_idx, dtype=np.int64)
    gallery_idx = np.asarray(gallery_idx, dtype=np.int64)
    identities = np.asarray(identities)
    cameras = np.asarray(cameras)
    dist = cdist(features[query_idx], features[gallery_idx])

    aps = []
    hits = np.zeros(len(ranks))
    for qi, q in enumerate(query_idx):
        keep = ~((identities[gallery_idx] == identities[q]) & (cameras[gallery_idx] == cameras[q]))
        g = gallery_idx[keep]
        order = np.lexsort((g, dist[qi, keep]))
        match = identities[g[order]] == identities[q]
        n_pos = int(match.sum())
        if n_pos == 0:
            continue
        hit_pos = np.flatnonzero(match)
        aps.append(np.mean(np.arange(1, n_pos + 1) / (hit_pos + 1)))
        first = hit_pos[0]
        hits += np.array([first < r for r in ranks], dtype=np.float64)

    if not aps:
        raise ValueError("no query has a valid cross-camera match in the gallery")
    n_eval = len(aps)
    cmc = {r: float(h / n_eval) for r, h in zip(ranks, hits)}
    return Metrics(float(np.mean(aps)), cmc, n_eval, len(query_idx) - n_eval)


def _pairs(counts: np.ndarray) -> int:
    counts = counts.astype(np.int64)
    return int((counts * (counts - 1) // 2).sum())


def pairwise_fscore(labels, true_identities) -> tuple[float, float, float]:
    """Pair-counting precision / recall / F1 over non-noise samples.

    Any undefined ratio (no predicted pairs, no true pairs) is reported as 0.
    """
    labels = np.asarray(labels)
    true_identities = np.asarray(true_identities)
    keep = labels != NOISE
    pred, true = labels[keep], true_identities[keep]
    if len(pred) < 2:
        return 0.0, 0.0, 0.0
    _, pred_codes = np.unique(pred, return_inverse=True)
    _, true_codes = np.unique(true, return_inverse=True)
    joint = np.zeros((pred_codes.max() + 1, true_codes.max() + 1), dtype=np.int64)
    np.add.at(joint, (pred_codes, true_codes), 1)
    tp = _pairs(joint)
    pred_pairs = _pairs(joint.sum(axis=1))
    true_pairs = _pairs(joint.sum(axis=0))
    if pred_pairs == 0 or true_pairs == 0:
        return 0.0, 0.0, 0.0
    precision = tp / pred_pairs
    recall = tp / true_pairs
    f = 0.0 if tp == 0 else 2 * precision * recall / (precision + recall)
    return precision, recall, f


def scatter_ratio(features, true_identities, eps: float = 1e-12) -> float:
    """``trace(S_between) / (trace(S_within) + eps)`` with size-weighted classes."""
    features = np.asarray(features, dtype=np.float64)
    true_identities = np.asarray(true_identities)
    classes = np.unique(true_identities)
    if len(classes) < 2:
        raise ValueError("scatter ratio needs at least two classes")
    mu = features.mean(axis=0)
    within = between = 0.0
    for c in classes:
        x = features[true_identities == c]
        mu_c = x.mean(axis=0)
        within += float(((x - mu_c) ** 2).sum())
        between += len(x) * float(((mu_c - mu) ** 2).sum())
    return between / (within + eps)
