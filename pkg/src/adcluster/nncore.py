"""Dense encoder, source classifier, metric losses and SGD with hand-written backprop.

Parameters live in plain ``dict[str, ndarray]`` so that optimizers, gradient
checks and checkpoints can treat every model the same way.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

logger = logging.getLogger(__name__)

Params = dict[str, np.ndarray]


@dataclass
class Encoder:
    """``raw -> tanh(raw @ w1 + b1) @ w2 + b2``."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    activation = "tanh"

    @classmethod
    def init(cls, raw_dim: int, hidden_dim: int = 32, feat_dim: int = 16, rng=None) -> "Encoder":
        rng = np.random.default_rng(rng)
        return cls(
            w1=rng.standard_normal((raw_dim, hidden_dim)) / np.sqrt(raw_dim),
            b1=np.zeros(hidden_dim),
            w2=rng.standard_normal((hidden_dim, feat_dim)) / np.sqrt(hidden_dim),
            b2=np.zeros(feat_dim),
        )

    @property
    def params(self) -> Params:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    @property
    def raw_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def feat_dim(self) -> int:
        return self.w2.shape[1]

    def copy(self) -> "Encoder":
        return Encoder(*(p.copy() for p in self.params.values()))


@dataclass
class ClassifierHead:
    w: np.ndarray
    b: np.ndarray

    @classmethod
    def init(cls, feat_dim: int, n_classes: int, rng=None) -> "ClassifierHead":
        rng = np.random.default_rng(rng)
        return cls(rng.standard_normal((feat_dim, n_classes)) / np.sqrt(feat_dim), np.zeros(n_classes))

    @property
    def params(self) -> Params:
        return {"w": self.w, "b": self.b}

    @property
    def n_classes(self) -> int:
        return self.w.shape[1]


def encoder_forward(enc: Encoder, batch: np.ndarray):
    """Return ``(features, cache)``; the cache feeds :func:`encoder_backward`."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != enc.raw_dim:
        raise ValueError(f"expected a (n, {enc.raw_dim}) batch, got {batch.shape}")
    hidden = np.tanh(batch @ enc.w1 + enc.b1)
    feats = hidden @ enc.w2 + enc.b2
    return feats, (batch, hidden)


def encoder_backward(enc: Encoder, cache, grad_feats: np.ndarray) -> tuple[Params, np.ndarray]:
    """Backprop ``dL/dfeatures``; returns parameter grads and ``dL/dinput``."""
    batch, hidden = cache
    grads = {"w2": hidden.T @ grad_feats, "b2": grad_feats.sum(axis=0)}
    grad_pre = (grad_feats @ enc.w2.T) * (1.0 - hidden**2)
    grads["w1"] = batch.T @ grad_pre
    grads["b1"] = grad_pre.sum(axis=0)
    return grads, grad_pre @ enc.w1.T


def extract_features(enc: Encoder, raw: np.ndarray) -> np.ndarray:
    return encoder_forward(enc, raw)[0]


def loss_cls(head: ClassifierHead, features: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy.

    Returns ``(loss, grad_features, head_grads)``.
    """
    labels = np.asarray(labels)
    n = len(labels)
    if labels.min() < 0 or labels.max() >= head.n_classes:
        raise ValueError("label out of range for the classifier head")
    logits = features @ head.w + head.b
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted[np.arange(n), labels] - log_z
    loss = -log_p.mean()

    grad_logits = np.exp(shifted - log_z[:, None])
    grad_logits[np.arange(n), labels] -= 1.0
    grad_logits /= n
    head_grads = {"w": features.T @ grad_logits, "b": grad_logits.sum(axis=0)}
    return float(loss), grad_logits @ head.w.T, head_grads


def _pairwise_dist(feats: np.ndarray):
    diff = feats[:, None, :] - feats[None, :, :]
    return np.sqrt((diff**2).sum(axis=-1)), diff


def loss_triplet_batch_hard(features: np.ndarray, labels: np.ndarray, margin: float):
    """Triplet hinge with every positive and the hardest negative per anchor.

    Anchors lacking a positive or a negative do not contribute; the result is
    the mean over contributing anchors.  Ties for the hardest negative go to
    the lowest index, the hinge kink and zero distances get subgradient 0.
    Returns ``(loss, grad_features)``.
    """
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise ValueError("triplet loss needs at least two distinct labels in the batch")
    n = len(labels)
    dist, diff = _pairwise_dist(features)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same

    valid = pos_mask.any(axis=1) & neg_mask.any(axis=1)
    neg_dist = np.where(neg_mask, dist, np.inf)
    hardest = np.argmin(neg_dist, axis=1)
    d_an = dist[np.arange(n), hardest]

    hinge = margin + dist - d_an[:, None]
    active = pos_mask & valid[:, None] & (hinge > 0)
    n_valid = int(valid.sum())
    loss = float(np.where(active, hinge, 0.0).sum() / n_valid) if n_valid else 0.0

    # unit direction a->b, zero where the distance vanishes
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(dist[..., None] > 0, diff / dist[..., None], 0.0)
    grad = np.zeros_like(features)
    if n_valid:
        w = active.astype(np.float64) / n_valid
        # + d(a, p) terms
        grad += np.einsum("ap,apk->ak", w, unit)
        grad -= np.einsum("ap,apk->pk", w, unit)
        # - d(a, n*) terms, once per active positive
        count = w.sum(axis=1)
        u_an = unit[np.arange(n), hardest]
        grad -= count[:, None] * u_an
        np.add.at(grad, hardest, count[:, None] * u_an)
    return loss, grad


@dataclass
class Optimizer:
    """SGD with heavy-ball momentum: ``v = mu*v - lr*g; p += v``."""

    lr: float = 1e-2
    momentum: float = 0.9
    velocity: Params = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")

    def step(self, params: Params, grads: Params) -> Params:
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
            v = self.velocity.get(name)
            if v is None:
                v = self.velocity[name] = np.zeros_like(p)
            v *= self.momentum
            v -= self.lr * g
            p += v
        return params


def sgd_step(params: Params, grads: Params, opt: Optimizer) -> Params:
    return opt.step(params, grads)


@dataclass
class TrainHyper:
    margin: float = 0.5
    n_s: int = 32
    n_t: int = 32
    epochs: int = 30
    lr: float = 1e-2
    momentum: float = 0.9
    hidden_dim: int = 32
    feat_dim: int = 16

    def validate(self) -> None:
        if not self.margin > 0:
            raise ValueError("margin must be > 0")
        if self.n_s < 2 or self.n_t < 2:
            raise ValueError("batch sizes must be >= 2")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.hidden_dim < 1 or self.feat_dim < 1:
            raise ValueError("layer sizes must be >= 1")


def grad_check(loss_closure: Callable[[], tuple[float, Params]], params: Params, step: float = 1e-5,
               tolerance: float | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_closure()`` must return ``(loss, grads)`` evaluated at the current
    contents of ``params``; entries are perturbed in place and restored.
    If ``tolerance`` is given, an AssertionError is raised when it is exceeded.
    """
    _, analytic = loss_closure()
    analytic = {k: np.array(v, copy=True) for k, v in analytic.items()}
    worst = 0.0
    for name, p in params.items():
        flat = p.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            up = loss_closure()[0]
            flat[idx] = orig - step
            down = loss_closure()[0]
            flat[idx] = orig
            num = (up - down) / (2 * step)
            ana = analytic[name].reshape(-1)[idx]
            rel = abs(ana - num) / max(abs(ana), abs(num), 1e-12)
            worst = max(worst, rel)
    if tolerance is not None and worst >= tolerance:
        raise AssertionError(f"gradient check failed: max relative error {worst:.3e} >= {tolerance}")
    return worst


def pk_sample(labels: np.ndarray, n_ids: int, per_id: int, rng: np.random.Generator) -> np.ndarray:
    """Indices for ``n_ids`` random labels x ``per_id`` members each.

    Members are drawn without replacement when the label has enough of them.
    """
    uniq = np.unique(labels)
    chosen = rng.choice(uniq, size=min(n_ids, len(uniq)), replace=False)
    out = []
    for lab in chosen:
        members = np.flatnonzero(labels == lab)
        out.append(rng.choice(members, size=per_id, replace=len(members) < per_id))
    return np.concatenate(out)


def pretrain_source(enc: Encoder, head: ClassifierHead, source, hyper: TrainHyper, opt: Optimizer,
                    seed=0, images_per_id: int = 4) -> tuple[Encoder, list[float]]:
    """Minimise cross-entropy + batch-hard triplet on the labelled source domain.

    Returns the (in-place trained) encoder and the mean loss of every epoch.
    """
    hyper.validate()
    rng = np.random.default_rng(seed)
    per_id = min(images_per_id, hyper.n_s)
    n_ids = max(2, hyper.n_s // per_id)
    n_batches = int(np.ceil(len(source) / (n_ids * per_id)))
    labels = source.identities
    head_opt = Optimizer(opt.lr, opt.momentum)

    history = []
    for epoch in range(hyper.epochs):
        total = 0.0
        for _ in range(n_batches):
            idx = pk_sample(labels, n_ids, per_id, rng)
            feats, cache = encoder_forward(enc, source.raw[idx])
            l_cls, g_cls, head_grads = loss_cls(head, feats, labels[idx])
            l_tri, g_tri = loss_triplet_batch_hard(feats, labels[idx], hyper.margin)
            enc_grads, _ = encoder_backward(enc, cache, g_cls + g_tri)
            opt.step(enc.params, enc_grads)
            head_opt.step(head.params, head_grads)
            total += l_cls + l_tri
        history.append(total / n_batches)
        logger.debug("source epoch %d: loss %.4f", epoch, history[-1])
    return enc, history
