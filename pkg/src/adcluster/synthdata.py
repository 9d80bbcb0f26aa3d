"""Synthetic multi-camera identity domains.

Each identity has a prototype vector; a sample seen by camera ``c`` is
``A_c @ (z + noise) + b_c``.  The target domain draws its own prototypes and
camera styles and is additionally pushed through one global affine map, which
is the domain gap the adaptation loop has to close.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Sample:
    identity: int
    camera: int
    raw: np.ndarray


@dataclass
class Dataset:
    """Samples stored column-wise; ``ds[i]`` gives a :class:`Sample` view."""

    raw: np.ndarray
    identities: np.ndarray
    cameras: np.ndarray
    n_identities: int
    n_cameras: int

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.float64)
        self.identities = np.asarray(self.identities, dtype=np.int64)
        self.cameras = np.asarray(self.cameras, dtype=np.int64)
        n = len(self.identities)
        if self.raw.ndim != 2 or self.raw.shape[0] != n or len(self.cameras) != n:
            raise ValueError("raw, identities and cameras must have matching lengths")
        if not np.all(np.isfinite(self.raw)):
            raise ValueError("raw samples must be finite")
        if n and (self.cameras.min() < 0 or self.cameras.max() >= self.n_cameras):
            raise ValueError("camera index out of range")
        if n and (self.identities.min() < 0 or self.identities.max() >= self.n_identities):
            raise ValueError("identity out of range")

    @property
    def raw_dim(self) -> int:
        return self.raw.shape[1]

    def __len__(self) -> int:
        return len(self.identities)

    def __getitem__(self, i: int) -> Sample:
        return Sample(int(self.identities[i]), int(self.cameras[i]), self.raw[i])

    @property
    def samples(self) -> list[Sample]:
        return [self[i] for i in range(len(self))]


@dataclass
class SynthConfig:
    n_identities_source: int = 100
    n_identities_target: int = 50
    samples_per_identity_per_camera: int = 5
    n_cameras_source: int = 4
    n_cameras_target: int = 4
    raw_dim: int = 16
    prototype_scale: float = 1.0
    within_identity_noise: float = 0.3
    camera_style_strength: float = 0.5
    domain_shift_strength: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        for name in (
            "n_identities_source",
            "n_identities_target",
            "samples_per_identity_per_camera",
            "n_cameras_source",
            "n_cameras_target",
            "raw_dim",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in (
            "prototype_scale",
            "within_identity_noise",
            "camera_style_strength",
            "domain_shift_strength",
        ):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0")
        if self.n_cameras_source < 2 or self.n_cameras_target < 2:
            raise ValueError("at least 2 cameras per domain are needed for cross-camera evaluation")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")


def _random_affine(rng: np.random.Generator, dim: int, strength: float, offset_scale: float):
    # 1/sqrt(dim) keeps the perturbation's spectral norm O(strength) for any dim
    a = np.eye(dim) + strength * rng.standard_normal((dim, dim)) / np.sqrt(dim)
    b = strength * offset_scale * rng.standard_normal(dim)
    return a, b


def _draw_domain(cfg: SynthConfig, rng: np.random.Generator, n_ids: int, n_cams: int):
    d = cfg.raw_dim
    s = cfg.samples_per_identity_per_camera
    protos = cfg.prototype_scale * rng.standard_normal((n_ids, d))
    styles = [_random_affine(rng, d, cfg.camera_style_strength, cfg.prototype_scale) for _ in range(n_cams)]
    noise = cfg.within_identity_noise * rng.standard_normal((n_ids, n_cams, s, d))

    raw = np.empty((n_ids, n_cams, s, d))
    for c, (a, b) in enumerate(styles):
        raw[:, c] = (protos[:, None, :] + noise[:, c]) @ a.T + b
    ids, cams, _ = np.meshgrid(np.arange(n_ids), np.arange(n_cams), np.arange(s), indexing="ij")
    return raw.reshape(-1, d), ids.ravel(), cams.ravel()


def generate_dataset(cfg: SynthConfig) -> tuple[Dataset, Dataset]:
    """Build the (source, target) pair; ordering is identity, camera, repeat."""
    cfg.validate()
    src_rng, tgt_rng, shift_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(3)
    )
    raw_s, ids_s, cams_s = _draw_domain(cfg, src_rng, cfg.n_identities_source, cfg.n_cameras_source)
    raw_t, ids_t, cams_t = _draw_domain(cfg, tgt_rng, cfg.n_identities_target, cfg.n_cameras_target)

    shift_a, shift_b = _random_affine(shift_rng, cfg.raw_dim, cfg.domain_shift_strength, cfg.prototype_scale)
    raw_t = raw_t @ shift_a.T + shift_b

    source = Dataset(raw_s, ids_s, cams_s, cfg.n_identities_source, cfg.n_cameras_source)
    target = Dataset(raw_t, ids_t, cams_t, cfg.n_identities_target, cfg.n_cameras_target)
    return source, target


def split_query_gallery(ds: Dataset, seed: int, queries_per_identity: int = 1) -> tuple[list[int], list[int]]:
    """Hold out up to ``queries_per_identity`` samples per identity as queries.

    Queries of one identity come from distinct cameras, and at least one
    other-camera sample of the identity always stays in the gallery.
    """
    if queries_per_identity < 1:
        raise ValueError("queries_per_identity must be >= 1")
    rng = np.random.default_rng(seed)
    query: list[int] = []
    for ident in range(ds.n_identities):
        members = np.flatnonzero(ds.identities == ident)
        cams = np.unique(ds.cameras[members])
        if len(cams) < 2:
            raise ValueError(f"identity {ident} is seen by fewer than 2 cameras")
        # keep one camera fully in the gallery so every query has a cross-camera match
        n_q = min(queries_per_identity, len(cams) - 1)
        for cam in rng.permutation(cams)[:n_q]:
            in_cam = members[ds.cameras[members] == cam]
            query.append(int(rng.choice(in_cam)))
    query.sort()
    qset = set(query)
    gallery = [i for i in range(len(ds)) if i not in qset]
    return query, gallery
