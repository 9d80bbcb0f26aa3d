"""Affine camera-style generator, its losses and the generator (max) update.

``g(x, c) = U_c @ x + v_c``: one affine map per target camera.  The maps
start at the identity, are pulled back towards it by a cycle/identity
reconstruction loss, towards each camera's first moment by a style loss, and
away from cluster centres (in encoder space) by the diversity loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cluster import NOISE, ClusterAssignment
from .nncore import Encoder, Optimizer, Params, encoder_backward, encoder_forward


@dataclass
class StyleGenerator:
    u: np.ndarray  # (K, d, d)
    v: np.ndarray  # (K, d)

    @classmethod
    def identity(cls, n_cameras: int, raw_dim: int) -> "StyleGenerator":
        return cls(np.tile(np.eye(raw_dim), (n_cameras, 1, 1)), np.zeros((n_cameras, raw_dim)))

    @property
    def params(self) -> Params:
        return {"u": self.u, "v": self.v}

    @property
    def n_cameras(self) -> int:
        return self.u.shape[0]

    def copy(self) -> "StyleGenerator":
        return StyleGenerator(self.u.copy(), self.v.copy())


@dataclass
class GenHyper:
    lam: float = 0.03
    beta_recon: float = 1.0
    gamma_style: float = 1.0
    gen_lr: float = 1e-3
    gen_momentum: float = 0.9
    prefit_steps: int = 300

    def validate(self) -> None:
        if not self.lam > 0:
            raise ValueError("lambda must be > 0")
        if not self.beta_recon >= 0:
            raise ValueError("beta_recon must be >= 0")
        if not self.gamma_style >= 0:
            raise ValueError("gamma_style must be >= 0")
        if not self.gen_lr > 0:
            raise ValueError("gen_lr must be > 0")
        if not 0 <= self.gen_momentum < 1:
            raise ValueError("gen_momentum must lie in [0, 1)")
        if self.prefit_steps < 0:
            raise ValueError("prefit_steps must be >= 0")


@dataclass(frozen=True)
class AugmentedSample:
    raw: np.ndarray
    pseudo_label: int
    source_index: int
    target_camera: int


def generate(g: StyleGenerator, raw, target_camera):
    """Translate ``raw`` (one vector or a batch) into ``target_camera``'s style."""
    raw = np.asarray(raw, dtype=np.float64)
    cams = np.asarray(target_camera)
    if np.any(cams < 0) or np.any(cams >= g.n_cameras):
        raise ValueError(f"camera index out of range [0, {g.n_cameras})")
    if raw.ndim == 1:
        return g.u[int(cams)] @ raw + g.v[int(cams)]
    cams = np.broadcast_to(cams, raw.shape[:1])
    return np.einsum("nij,nj->ni", g.u[cams], raw) + g.v[cams]


def augment_cluster_samples(g: StyleGenerator, raw: np.ndarray, cameras: np.ndarray,
                            assignment: ClusterAssignment) -> list[AugmentedSample]:
    """One translated copy per other camera for every clustered sample."""
    out = []
    for i in np.flatnonzero(assignment.labels != NOISE):
        for c in range(g.n_cameras):
            if c == cameras[i]:
                continue
            out.append(AugmentedSample(generate(g, raw[i], c), int(assignment.labels[i]), int(i), c))
    return out


def _scatter_affine_grads(g: StyleGenerator, grad_out: np.ndarray, inputs: np.ndarray, cams: np.ndarray) -> Params:
    gu = np.zeros_like(g.u)
    gv = np.zeros_like(g.v)
    np.add.at(gu, cams, grad_out[:, :, None] * inputs[:, None, :])
    np.add.at(gv, cams, grad_out)
    return {"u": gu, "v": gv}


def _check_clustered(labels: np.ndarray) -> None:
    if np.any(np.asarray(labels) == NOISE):
        raise ValueError("diversity is undefined for noise samples")


def diversity(enc: Encoder, g: StyleGenerator, raw, target_cams, labels, centers) -> np.ndarray:
    """Distance between each generated sample's feature and its cluster centre."""
    _check_clustered(labels)
    feats, _ = encoder_forward(enc, generate(g, raw, target_cams))
    return np.linalg.norm(feats - centers[labels], axis=1)


def loss_div(d_div, lam: float) -> tuple[float, np.ndarray]:
    """``mean(exp(-lam * D))`` and its derivative w.r.t. each ``D``."""
    if not lam > 0:
        raise ValueError("lambda must be > 0")
    d_div = np.asarray(d_div, dtype=np.float64)
    e = np.exp(-lam * d_div)
    return float(e.mean()), -lam * e / len(d_div)


def diversity_loss_and_grad(enc: Encoder, g: StyleGenerator, raw, target_cams, labels, centers,
                            lam: float) -> tuple[float, Params, np.ndarray]:
    """Diversity loss through ``f(g(x))``; gradient w.r.t. the generator only.

    Returns ``(loss, generator_grads, D_div)``.
    """
    _check_clustered(labels)
    raw = np.asarray(raw, dtype=np.float64)
    cams = np.asarray(target_cams, dtype=np.int64)
    gen = generate(g, raw, cams)
    feats, cache = encoder_forward(enc, gen)
    delta = feats - centers[labels]
    d_div = np.linalg.norm(delta, axis=1)
    loss, grad_d = loss_div(d_div, lam)
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(d_div[:, None] > 0, delta / d_div[:, None], 0.0)
    _, grad_gen = encoder_backward(enc, cache, grad_d[:, None] * unit)
    return loss, _scatter_affine_grads(g, grad_gen, raw, cams), d_div


def loss_recon(g: StyleGenerator, raw, cameras) -> tuple[float, Params]:
    """Cycle + same-camera reconstruction.

    Per sample: mean over other cameras c' of ``|g(g(x, c'), c_x) - x|^2``
    plus ``|g(x, c_x) - x|^2``; averaged over the batch.
    """
    raw = np.asarray(raw, dtype=np.float64)
    cams = np.asarray(cameras, dtype=np.int64)
    n, k = len(raw), g.n_cameras
    grads = {"u": np.zeros_like(g.u), "v": np.zeros_like(g.v)}

    same = generate(g, raw, cams) - raw
    loss = float((same**2).sum()) / n
    _accumulate(grads, _scatter_affine_grads(g, 2.0 * same / n, raw, cams))

    if k > 1:
        w = 1.0 / (n * (k - 1))
        for shift in range(1, k):
            other = (cams + shift) % k
            mid = generate(g, raw, other)
            cyc = generate(g, mid, cams) - raw
            loss += w * float((cyc**2).sum())
            grad_cyc = 2.0 * w * cyc
            _accumulate(grads, _scatter_affine_grads(g, grad_cyc, mid, cams))
            grad_mid = np.einsum("nji,nj->ni", g.u[cams], grad_cyc)
            _accumulate(grads, _scatter_affine_grads(g, grad_mid, raw, other))
    return loss, grads


def camera_means(raw: np.ndarray, cameras: np.ndarray, n_cameras: int) -> np.ndarray:
    return np.stack([raw[cameras == c].mean(axis=0) for c in range(n_cameras)])


def loss_style(g: StyleGenerator, raw, cameras, cam_means: np.ndarray) -> tuple[float, Params]:
    """First-moment camera style matching.

    For each camera c, samples from the other cameras translated into c should
    have the mean of the real camera-c samples.  Averaged over cameras.
    """
    raw = np.asarray(raw, dtype=np.float64)
    cams = np.asarray(cameras, dtype=np.int64)
    k = g.n_cameras
    grads = {"u": np.zeros_like(g.u), "v": np.zeros_like(g.v)}
    loss = 0.0
    for c in range(k):
        src = raw[cams != c]
        if len(src) == 0:
            continue
        x_bar = src.mean(axis=0)
        resid = g.u[c] @ x_bar + g.v[c] - cam_means[c]
        loss += float(resid @ resid) / k
        grads["u"][c] += 2.0 * np.outer(resid, x_bar) / k
        grads["v"][c] += 2.0 * resid / k
    return loss, grads


def _accumulate(total: Params, part: Params, scale: float = 1.0) -> None:
    for k, v in part.items():
        total[k] += scale * v


def generator_objective(g: StyleGenerator, raw, cameras, hyper: GenHyper, cam_means,
                        enc: Encoder | None = None, target_cams=None, labels=None, centers=None):
    """Weighted generator loss; the diversity term is used only when ``enc`` is given.

    Returns ``(total, grads, parts)`` with ``parts`` holding each term's value.
    """
    grads = {"u": np.zeros_like(g.u), "v": np.zeros_like(g.v)}
    parts = {}
    total = 0.0
    if enc is not None:
        l_div, g_div, d_div = diversity_loss_and_grad(enc, g, raw, target_cams, labels, centers, hyper.lam)
        parts["div"] = l_div
        parts["mean_d_div"] = float(d_div.mean())
        total += l_div
        _accumulate(grads, g_div)
    if hyper.beta_recon > 0:
        l_rec, g_rec = loss_recon(g, raw, cameras)
        parts["recon"] = l_rec
        total += hyper.beta_recon * l_rec
        _accumulate(grads, g_rec, hyper.beta_recon)
    if hyper.gamma_style > 0:
        l_sty, g_sty = loss_style(g, raw, cameras, cam_means)
        parts["style"] = l_sty
        total += hyper.gamma_style * l_sty
        _accumulate(grads, g_sty, hyper.gamma_style)
    return total, grads, parts


def max_step(g: StyleGenerator, enc: Encoder, raw, cameras, target_cams, labels, centers,
             hyper: GenHyper, opt: Optimizer, cam_means) -> dict[str, float]:
    """One SGD step on the generator with the encoder frozen.

    Minimises ``L_div + beta_recon * L_rec + gamma_style * L_style``; since
    ``L_div`` decreases monotonically in every ``D_div``, this pushes the
    translated samples away from their cluster centres.
    """
    _check_clustered(labels)
    total, grads, parts = generator_objective(
        g, raw, cameras, hyper, cam_means, enc=enc, target_cams=target_cams, labels=labels, centers=centers
    )
    opt.step(g.params, grads)
    parts["total"] = total
    return parts


def prefit_generator(g: StyleGenerator, raw, cameras, hyper: GenHyper, cam_means, rng,
                     batch_size: int = 64) -> StyleGenerator:
    """Fit camera styles before clustering: reconstruction + style terms only."""
    opt = Optimizer(hyper.gen_lr, hyper.gen_momentum)
    raw = np.asarray(raw, dtype=np.float64)
    for _ in range(hyper.prefit_steps):
        idx = rng.choice(len(raw), size=min(batch_size, len(raw)), replace=False)
        _, grads, _ = generator_objective(g, raw[idx], cameras[idx], hyper, cam_means)
        opt.step(g.params, grads)
    return g
