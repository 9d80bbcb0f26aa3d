"""End-to-end run: synthesise domains, pretrain on source, adapt, evaluate."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .augment import GenHyper, StyleGenerator
from .cluster import ClusterParams
from .evaluation import Metrics
from .nncore import ClassifierHead, Encoder, Optimizer, TrainHyper, pretrain_source
from .synthdata import Dataset, SynthConfig, generate_dataset, split_query_gallery
from .trainer import AdaptConfig, History, Mode, adapt, evaluate

logger = logging.getLogger(__name__)


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainHyper = field(default_factory=TrainHyper)
    cluster: ClusterParams = field(default_factory=ClusterParams)
    gen: GenHyper = field(default_factory=GenHyper)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    queries_per_identity: int = 2
    output_dir: str = "runs/default"
    seed: int = 0

    def validate(self) -> None:
        self.synth.validate()
        self.train.validate()
        self.cluster.validate()
        self.gen.validate()
        self.adapt.validate()
        if self.queries_per_identity < 1:
            raise ValueError("queries_per_identity must be >= 1")

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed)

    def with_mode(self, mode: Mode) -> "RunConfig":
        return replace(self, adapt=replace(self.adapt, mode=mode))


def _seeds(seed: int) -> dict[str, int]:
    # independent streams for every stochastic stage, all derived from one seed
    names = ("data", "split", "init", "pretrain", "adapt")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: int(c.generate_state(1, dtype=np.uint64)[0]) for n, c in zip(names, children)}


@dataclass
class Domains:
    source: Dataset
    target: Dataset
    split: tuple[list[int], list[int]]


def build_domains(cfg: RunConfig) -> Domains:
    seeds = _seeds(cfg.seed)
    source, target = generate_dataset(replace(cfg.synth, seed=seeds["data"]))
    split = split_query_gallery(target, seeds["split"], cfg.queries_per_identity)
    return Domains(source, target, split)


def pretrain(cfg: RunConfig, domains: Domains) -> tuple[Encoder, list[float]]:
    seeds = _seeds(cfg.seed)
    rng = np.random.default_rng(seeds["init"])
    enc = Encoder.init(domains.source.raw_dim, cfg.train.hidden_dim, cfg.train.feat_dim, rng)
    head = ClassifierHead.init(cfg.train.feat_dim, domains.source.n_identities, rng)
    opt = Optimizer(cfg.train.lr, cfg.train.momentum)
    return pretrain_source(enc, head, domains.source, cfg.train, opt, seeds["pretrain"])


@dataclass
class RunResult:
    direct: Metrics
    direct_J: float
    final: Metrics
    final_J: float
    history: History
    encoder: Encoder
    generator: StyleGenerator
    pretrain_losses: list[float]


def run(cfg: RunConfig, domains: Domains | None = None, pretrained: Encoder | None = None,
        pretrain_losses: list[float] | None = None, on_iteration: Callable | None = None) -> RunResult:
    """Direct transfer followed by adaptation in ``cfg.adapt.mode``.

    ``domains`` / ``pretrained`` may be passed in to share them between modes;
    the encoder is copied, never modified.
    """
    cfg.validate()
    domains = domains or build_domains(cfg)
    if pretrained is None:
        pretrained, pretrain_losses = pretrain(cfg, domains)
    enc = pretrained.copy()
    direct, direct_J = evaluate(enc, domains.target, domains.split)

    g = StyleGenerator.identity(domains.target.n_cameras, domains.target.raw_dim)
    adapt_cfg = replace(cfg.adapt, seed=_seeds(cfg.seed)["adapt"])
    opt = Optimizer(cfg.train.lr, cfg.train.momentum)
    enc, history = adapt(enc, g, domains.target, adapt_cfg, cfg.cluster, cfg.gen, cfg.train.margin,
                         opt, domains.split, on_iteration)
    final, final_J = evaluate(enc, domains.target, domains.split)
    return RunResult(direct, direct_J, final, final_J, history, enc, g, list(pretrain_losses or []))
