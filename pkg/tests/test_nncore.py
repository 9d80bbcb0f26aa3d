import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adcluster.nncore import (
    ClassifierHead,
    Encoder,
    Optimizer,
    TrainHyper,
    encoder_backward,
    encoder_forward,
    grad_check,
    loss_cls,
    loss_triplet_batch_hard,
    pretrain_source,
    sgd_step,
)
from adcluster.synthdata import SynthConfig, generate_dataset, split_query_gallery
from adcluster.evaluation import map_cmc
from helpers import max_rel_err, numeric_grad


def triplet_reference(feats, labels, m):
    """Loop-by-loop batch-hard triplet loss, for cross-checking."""
    n = len(labels)
    total, anchors = 0.0, 0
    for a in range(n):
        pos = [p for p in range(n) if p != a and labels[p] == labels[a]]
        neg = [q for q in range(n) if labels[q] != labels[a]]
        if not pos or not neg:
            continue
        anchors += 1
        dn = min(np.linalg.norm(feats[a] - feats[q]) for q in neg)
        total += sum(max(0.0, m + np.linalg.norm(feats[a] - feats[p]) - dn) for p in pos)
    return total / anchors


def test_zero_encoder_gives_zero_features(rng):
    enc = Encoder.init(5, 7, 3, rng)
    for p in enc.params.values():
        p[...] = 0
    feats, _ = encoder_forward(enc, rng.standard_normal((4, 5)))
    assert np.all(feats == 0)


def test_duplicate_rows_identical(rng):
    enc = Encoder.init(5, 7, 3, rng)
    x = rng.standard_normal((1, 5))
    feats, _ = encoder_forward(enc, np.vstack([x, x]))
    assert feats[0].tobytes() == feats[1].tobytes()


def test_encoder_shape_mismatch(rng):
    with pytest.raises(ValueError):
        encoder_forward(Encoder.init(5, 7, 3, rng), np.zeros((2, 4)))


def test_encoder_backward_matches_finite_differences(rng):
    enc = Encoder.init(6, 8, 4, rng)
    x = rng.standard_normal((5, 6))
    w = rng.standard_normal((5, 4))

    def objective():
        return float((encoder_forward(enc, x)[0] * w).sum())

    feats, cache = encoder_forward(enc, x)
    grads, gx = encoder_backward(enc, cache, w)
    for name, p in enc.params.items():
        assert max_rel_err(grads[name], numeric_grad(objective, p)) < 1e-4
    assert max_rel_err(gx, numeric_grad(objective, x)) < 1e-4


def test_cls_uniform_logits_is_log_m():
    head = ClassifierHead(np.zeros((3, 5)), np.zeros(5))
    loss, _, _ = loss_cls(head, np.ones((4, 3)), np.array([0, 1, 2, 4]))
    assert loss == pytest.approx(math.log(5), abs=1e-12)


def test_cls_confident_logits_tend_to_zero():
    head = ClassifierHead(np.zeros((1, 3)), np.array([1e3, 0.0, 0.0]))
    loss, _, _ = loss_cls(head, np.zeros((2, 1)), np.array([0, 0]))
    assert 0 <= loss < 1e-12


def test_cls_rejects_bad_label():
    head = ClassifierHead(np.zeros((2, 3)), np.zeros(3))
    with pytest.raises(ValueError):
        loss_cls(head, np.zeros((1, 2)), np.array([3]))


def test_cls_gradients(rng):
    head = ClassifierHead.init(4, 6, rng)
    feats = rng.standard_normal((7, 4))
    labels = rng.integers(0, 6, 7)
    _, gf, gh = loss_cls(head, feats, labels)
    fn = lambda: loss_cls(head, feats, labels)[0]
    assert max_rel_err(gf, numeric_grad(fn, feats)) < 1e-4
    assert max_rel_err(gh["w"], numeric_grad(fn, head.w)) < 1e-4
    assert max_rel_err(gh["b"], numeric_grad(fn, head.b)) < 1e-4


def test_triplet_closed_form_inactive():
    # d(a,p) = 0.2, d(a,n) = 1.0 for anchor 0 (and 1.2 for anchor 1): both hinges are 0
    feats = np.array([[0.0], [0.2], [-1.0]])
    loss, grad = loss_triplet_batch_hard(feats, np.array([0, 0, 1]), 0.5)
    assert loss == 0.0
    assert np.all(grad == 0)


def test_triplet_closed_form_active():
    # anchors 0 and 1 are both valid; isolate anchor 0 by putting the negative far from anchor 1
    feats = np.array([[0.0, 0.0], [0.6, 0.0], [0.0, 0.8]])
    labels = np.array([0, 0, 1])
    loss, _ = loss_triplet_batch_hard(feats, labels, 0.5)
    term0 = 0.5 + 0.6 - 0.8
    term1 = max(0.0, 0.5 + 0.6 - 1.0)
    assert term0 == pytest.approx(0.3)
    assert loss == pytest.approx((term0 + term1) / 2)


def test_triplet_requires_two_labels():
    with pytest.raises(ValueError):
        loss_triplet_batch_hard(np.zeros((3, 2)), np.array([1, 1, 1]), 0.5)


def test_triplet_matches_reference(rng):
    for _ in range(10):
        feats = rng.standard_normal((8, 3))
        labels = rng.integers(0, 3, 8)
        if len(np.unique(labels)) < 2:
            continue
        assert loss_triplet_batch_hard(feats, labels, 0.5)[0] == pytest.approx(
            triplet_reference(feats, labels, 0.5), rel=1e-12)


def test_triplet_gradient(rng):
    feats = rng.standard_normal((8, 4))
    labels = np.array([0, 0, 0, 1, 1, 2, 2, 2])
    _, grad = loss_triplet_batch_hard(feats, labels, 0.5)
    fn = lambda: loss_triplet_batch_hard(feats, labels, 0.5)[0]
    assert max_rel_err(grad, numeric_grad(fn, feats)) < 1e-4


def test_triplet_zero_case():
    feats = np.array([[0.0], [0.1], [5.0], [5.1]])
    labels = np.array([0, 0, 1, 1])
    loss, grad = loss_triplet_batch_hard(feats, labels, 0.5)
    assert loss == 0.0 and np.all(grad == 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_triplet_translation_and_permutation(seed):
    rng = np.random.default_rng(seed)
    feats = rng.standard_normal((9, 3))
    labels = np.array([0, 0, 0, 1, 1, 1, 2, 2, 2])
    loss, _ = loss_triplet_batch_hard(feats, labels, 0.5)
    shifted, _ = loss_triplet_batch_hard(feats + rng.standard_normal(3), labels, 0.5)
    perm = rng.permutation(9)
    permuted, _ = loss_triplet_batch_hard(feats[perm], labels[perm], 0.5)
    assert shifted == pytest.approx(loss, rel=1e-9, abs=1e-12)
    assert permuted == pytest.approx(loss, rel=1e-12, abs=1e-15)


def test_encoder_permutation_equivariance(rng):
    enc = Encoder.init(5, 6, 3, rng)
    x = rng.standard_normal((6, 5))
    perm = rng.permutation(6)
    assert np.allclose(encoder_forward(enc, x[perm])[0], encoder_forward(enc, x)[0][perm], rtol=0, atol=1e-14)


def test_sgd_plain_step():
    p = {"w": np.array([1.0, -2.0])}
    sgd_step(p, {"w": np.array([0.5, 0.25])}, Optimizer(lr=1.0, momentum=0.0))
    assert np.array_equal(p["w"], [0.5, -2.25])


def test_sgd_momentum_unrolled():
    p = {"x": np.array(0.0)}
    opt = Optimizer(lr=0.1, momentum=0.9)
    for _ in range(2):
        opt.step(p, {"x": np.array(1.0)})
    assert p["x"] == pytest.approx(-0.29, abs=1e-15)


def test_sgd_velocity_decays():
    p = {"x": np.array([0.0])}
    opt = Optimizer(lr=1.0, momentum=0.5)
    opt.step(p, {"x": np.array([1.0])})
    for k in range(1, 4):
        opt.step(p, {"x": np.array([0.0])})
        assert opt.velocity["x"][0] == pytest.approx(-(0.5**k))


def test_sgd_shape_mismatch():
    with pytest.raises(ValueError):
        Optimizer().step({"x": np.zeros(2)}, {"x": np.zeros(3)})


def test_grad_check_quadratic():
    p = {"p": np.array([1.0, 2.0])}
    err = grad_check(lambda: (float((p["p"] ** 2).sum()), {"p": 2 * p["p"]}), p, step=1e-5)
    assert err < 1e-8


def test_grad_check_flags_wrong_gradient():
    p = {"p": np.array([1.0, 2.0])}
    with pytest.raises(AssertionError):
        grad_check(lambda: (float((p["p"] ** 2).sum()), {"p": 3 * p["p"]}), p, tolerance=1e-4)


def test_grad_check_encoder_cls_composite(rng):
    enc = Encoder.init(5, 6, 4, rng)
    head = ClassifierHead.init(4, 3, rng)
    x = rng.standard_normal((6, 5))
    y = rng.integers(0, 3, 6)

    def closure():
        feats, cache = encoder_forward(enc, x)
        loss, gf, gh = loss_cls(head, feats, y)
        grads, _ = encoder_backward(enc, cache, gf)
        return loss, {**grads, **gh}

    assert grad_check(closure, {**enc.params, **head.params}) < 1e-4


def test_grad_check_encoder_triplet_composite(rng):
    enc = Encoder.init(5, 6, 4, rng)
    x = rng.standard_normal((8, 5))
    y = np.array([0, 0, 0, 1, 1, 1, 2, 2])

    def closure():
        feats, cache = encoder_forward(enc, x)
        loss, gf = loss_triplet_batch_hard(feats, y, 2.0)
        grads, _ = encoder_backward(enc, cache, gf)
        return loss, grads

    assert closure()[0] > 0
    assert grad_check(closure, enc.params) < 1e-4


@pytest.fixture(scope="module")
def separable_source():
    cfg = SynthConfig(n_identities_source=12, n_identities_target=4, samples_per_identity_per_camera=2,
                      n_cameras_source=3, raw_dim=8, within_identity_noise=0.0, camera_style_strength=0.0,
                      seed=5)
    source, _ = generate_dataset(cfg)
    rng = np.random.default_rng(0)
    enc = Encoder.init(8, 16, 8, rng)
    head = ClassifierHead.init(8, 12, rng)
    hyper = TrainHyper(epochs=15, n_s=16)
    init_feats = encoder_forward(enc, source.raw)[0]
    init_loss = loss_triplet_batch_hard(init_feats, source.identities, hyper.margin)[0]
    enc, history = pretrain_source(enc, head, source, hyper, Optimizer(1e-2, 0.9), seed=1)
    return source, enc, history, init_loss, hyper


def test_pretrain_reduces_triplet_loss(separable_source):
    source, enc, history, init_loss, hyper = separable_source
    feats = encoder_forward(enc, source.raw)[0]
    assert loss_triplet_batch_hard(feats, source.identities, hyper.margin)[0] <= init_loss
    assert all(np.isfinite(history))
    assert len(history) == hyper.epochs


def test_pretrain_separable_rank1(separable_source):
    source, enc, *_ = separable_source
    q, g = split_query_gallery(source, seed=0)
    m = map_cmc(encoder_forward(enc, source.raw)[0], q, g, source.identities, source.cameras)
    assert m.cmc[1] == 1.0
