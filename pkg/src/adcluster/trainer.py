"""Alternating cluster / max-step / min-step adaptation loop on the target domain."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, fields
from typing import Callable, Mapping, Sequence

import numpy as np

from . import augment
from .augment import AugmentedSample, GenHyper, StyleGenerator
from .cluster import NOISE, ClusterAssignment, ClusterParams, assign_pseudo_labels, cluster_centers
from .evaluation import Metrics, map_cmc, pairwise_fscore, scatter_ratio
from .nncore import Encoder, Optimizer, encoder_backward, encoder_forward, extract_features, loss_triplet_batch_hard

logger = logging.getLogger(__name__)


class Mode(enum.Enum):
    BASELINE = "baseline"
    BASELINE_ASA = "asa"
    FULL = "full"

    @classmethod
    def parse(cls, text: str) -> "Mode":
        key = text.strip().lower()
        for m in cls:
            if key in (m.value, m.name.lower()):
                return m
        raise ValueError(f"unknown mode {text!r}; expected baseline, asa or full")


@dataclass
class AdaptConfig:
    n_cluster_iterations: int = 10
    epochs_per_iteration: int = 10
    P: int = 8
    K_img: int = 4
    aug_ratio: float = 3.0
    mode: Mode = Mode.FULL
    seed: int = 0

    def validate(self) -> None:
        if self.n_cluster_iterations < 0 or self.epochs_per_iteration < 0:
            raise ValueError("iteration and epoch counts must be >= 0")
        if self.P < 2:
            raise ValueError("P must be >= 2")
        if self.K_img < 2:
            raise ValueError("K_img must be >= 2")
        if not self.aug_ratio > 0:
            raise ValueError("aug_ratio must be > 0")
        if not isinstance(self.mode, Mode):
            raise ValueError(f"invalid mode {self.mode!r}")


HISTORY_COLUMNS = (
    "iteration", "n_clusters", "n_noise", "pseudo_fscore", "mAP", "cmc1", "cmc5", "cmc10",
    "J", "mean_L_div", "mean_L_tri",
)


@dataclass
class IterationRecord:
    iteration: int
    n_clusters: int
    n_noise: int
    pseudo_fscore: float
    mAP: float
    cmc1: float
    cmc5: float
    cmc10: float
    J: float
    mean_L_div: float
    mean_L_tri: float

    def row(self) -> list:
        return [getattr(self, c) for c in HISTORY_COLUMNS]


History = list[IterationRecord]


@dataclass
class PKBatch:
    source_index: np.ndarray
    target_camera: np.ndarray  # -1 for original samples
    labels: np.ndarray
    is_augmented: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def group_by_label(pool: Sequence[AugmentedSample]) -> dict[int, list[AugmentedSample]]:
    grouped: dict[int, list[AugmentedSample]] = {}
    for s in pool:
        grouped.setdefault(s.pseudo_label, []).append(s)
    return grouped


def augmented_per_identity(K_img: int, aug_ratio: float) -> int:
    """Augmented slots per identity for an original:augmented ratio ``aug_ratio``:1."""
    return int(round(K_img / (aug_ratio + 1.0)))


def eligible_clusters(assignment: ClusterAssignment) -> np.ndarray:
    return np.array([c for c, size in enumerate(assignment.cluster_sizes) if size >= 2], dtype=np.int64)


def sample_pk_batch(assignment: ClusterAssignment, P: int, K_img: int,
                    aug_pool: Mapping[int, Sequence[AugmentedSample]] | None, aug_ratio: float,
                    rng: np.random.Generator) -> PKBatch:
    """P pseudo-identities x K_img samples, mixing originals and augmented copies.

    ``aug_pool`` maps pseudo label -> augmented samples (see
    :func:`group_by_label`); ``None`` gives an all-original batch.  Draws are
    with replacement only when a cluster is too small.
    """
    clusters = eligible_clusters(assignment)
    if len(clusters) < P:
        raise ValueError(f"only {len(clusters)} clusters with >= 2 members, need P={P}")
    n_aug = 0 if aug_pool is None else augmented_per_identity(K_img, aug_ratio)
    n_orig = K_img - n_aug

    src, tcam, labs, is_aug = [], [], [], []
    for c in rng.choice(clusters, size=P, replace=False):
        members = assignment.members(int(c))
        picked = rng.choice(members, size=n_orig, replace=len(members) < n_orig)
        src.extend(int(i) for i in picked)
        tcam.extend([-1] * n_orig)
        is_aug.extend([False] * n_orig)
        if n_aug:
            pool = aug_pool.get(int(c), ())
            if not pool:
                raise ValueError(f"no augmented samples for cluster {c}")
            for j in rng.choice(len(pool), size=n_aug, replace=len(pool) < n_aug):
                src.append(pool[j].source_index)
                tcam.append(pool[j].target_camera)
                is_aug.append(True)
        labs.extend([int(c)] * K_img)
    return PKBatch(np.array(src), np.array(tcam), np.array(labs), np.array(is_aug))


def materialize(batch: PKBatch, raw: np.ndarray, g: StyleGenerator | None) -> np.ndarray:
    """Raw vectors for a batch, translating augmented slots with the current ``g``."""
    out = raw[batch.source_index].copy()
    if batch.is_augmented.any():
        m = batch.is_augmented
        out[m] = augment.generate(g, out[m], batch.target_camera[m])
    return out


def min_step(enc: Encoder, raw_batch: np.ndarray, labels: np.ndarray, margin: float, opt: Optimizer) -> float:
    """One encoder SGD step on the batch-hard triplet loss; returns the loss."""
    feats, cache = encoder_forward(enc, raw_batch)
    loss, grad = loss_triplet_batch_hard(feats, labels, margin)
    grads, _ = encoder_backward(enc, cache, grad)
    opt.step(enc.params, grads)
    return loss


def evaluate(enc: Encoder, target, split) -> tuple[Metrics, float]:
    feats = extract_features(enc, target.raw)
    query, gallery = split
    metrics = map_cmc(feats, query, gallery, target.identities, target.cameras)
    return metrics, scatter_ratio(feats, target.identities)


def _max_step_cameras(batch: PKBatch, cameras: np.ndarray, n_cameras: int, rng) -> np.ndarray:
    # originals are translated to a random other camera, augmented slots keep theirs
    own = cameras[batch.source_index]
    offset = rng.integers(1, n_cameras, size=len(batch))
    return np.where(batch.is_augmented, batch.target_camera, (own + offset) % n_cameras)


def adapt(enc: Encoder, g: StyleGenerator, target, cfg: AdaptConfig, cluster_params: ClusterParams,
          gen_hyper: GenHyper, margin: float = 0.5, opt: Optimizer | None = None, split=None,
          on_iteration: Callable | None = None) -> tuple[Encoder, History]:
    """Train ``enc`` (and ``g``, in FULL mode) on the unlabelled target domain.

    Each clustering iteration extracts features once, clusters them, then runs
    ``epochs_per_iteration`` epochs of PK batches.  In FULL mode every batch
    does one generator step followed by one encoder step.  Target identities
    are only read for the logged metrics.  ``on_iteration(record, enc, g)`` is
    called after every iteration.
    """
    cfg.validate()
    cluster_params.validate()
    gen_hyper.validate()
    opt = opt or Optimizer()
    mode = cfg.mode
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(2)[0])
    gen_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(2)[1])
    raw, cameras = target.raw, target.cameras
    cam_means = augment.camera_means(raw, cameras, target.n_cameras)
    gen_opt = Optimizer(gen_hyper.gen_lr, gen_hyper.gen_momentum)

    if mode is not Mode.BASELINE and cfg.n_cluster_iterations > 0:
        augment.prefit_generator(g, raw, cameras, gen_hyper, cam_means, gen_rng)

    history: History = []
    previous: np.ndarray | None = None
    for it in range(cfg.n_cluster_iterations):
        feats = extract_features(enc, raw)
        assignment = assign_pseudo_labels(feats, cluster_params)
        clustered = assignment
        if len(eligible_clusters(assignment)) < 2 and previous is not None:
            logger.warning("iteration %d: clustering collapsed, reusing previous labels", it)
            centers = cluster_centers(feats, previous)
            clustered = ClusterAssignment(previous, centers, [int((previous == c).sum()) for c in range(len(centers))])
        _, _, fscore = pairwise_fscore(assignment.labels, target.identities)

        l_tri, l_div = [], []
        n_eligible = len(eligible_clusters(clustered))
        if n_eligible >= 2:
            previous = clustered.labels
            P = min(cfg.P, n_eligible)
            pool = None
            if mode is not Mode.BASELINE:
                pool = group_by_label(augment.augment_cluster_samples(g, raw, cameras, clustered))
            n_clustered = int((clustered.labels != NOISE).sum())
            n_batches = math.ceil(n_clustered / (P * cfg.K_img))
            for _ in range(cfg.epochs_per_iteration):
                for _ in range(n_batches):
                    batch = sample_pk_batch(clustered, P, cfg.K_img, pool, cfg.aug_ratio, rng)
                    if mode is Mode.FULL:
                        tcams = _max_step_cameras(batch, cameras, target.n_cameras, rng)
                        src = batch.source_index
                        parts = augment.max_step(g, enc, raw[src], cameras[src], tcams, batch.labels,
                                                 clustered.centers, gen_hyper, gen_opt, cam_means)
                        l_div.append(parts["div"])
                    l_tri.append(min_step(enc, materialize(batch, raw, g), batch.labels, margin, opt))
        else:
            logger.warning("iteration %d: fewer than 2 usable clusters, skipping training", it)

        nan = float("nan")
        if split is not None:
            metrics, J = evaluate(enc, target, split)
            m_vals = (metrics.mAP, metrics.cmc[1], metrics.cmc[5], metrics.cmc[10], J)
        else:
            m_vals = (nan,) * 5
        record = IterationRecord(
            it, assignment.n_clusters, assignment.n_noise, fscore, *m_vals,
            float(np.mean(l_div)) if l_div else nan,
            float(np.mean(l_tri)) if l_tri else nan,
        )
        history.append(record)
        logger.info("iter %d: clusters=%d noise=%d f=%.3f mAP=%.3f", it, record.n_clusters,
                    record.n_noise, fscore, record.mAP)
        if on_iteration is not None:
            on_iteration(record, enc, g)
    return enc, history
