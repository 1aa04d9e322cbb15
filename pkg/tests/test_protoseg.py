import math
from collections import Counter

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from forestfss.losses import par_loss, query_prototypes, total_loss
from forestfss.protoseg import (
    apply_texture_attention,
    background_prototype,
    cosine_distance,
    foreground_prototype,
    masked_average,
    predict_mask,
    segmentation_loss,
)

from oracles import cross_entropy_loop, prototypes_loop

F22 = torch.tensor([[[1.0, 2.0], [3.0, 4.0]]])
DIAG = torch.tensor([[1, 0], [0, 1]], dtype=torch.bool)


# ---------------------------------------------------------------- prototypes


def test_foreground_prototype_hand_example():
    t = torch.tensor([[0.5, 0.9], [0.2, 1.0]])
    t_hat = apply_texture_attention(t, DIAG)
    p = foreground_prototype([(F22, t_hat, DIAG)])
    assert p.item() == pytest.approx(2.25)


def test_background_prototype_hand_example():
    assert background_prototype([(F22, DIAG)]).item() == pytest.approx(2.5)


def test_attention_normalised_variant():
    t_hat = apply_texture_attention(torch.tensor([[0.5, 0.0], [0.0, 1.0]]), DIAG)
    p = foreground_prototype([(F22, t_hat, DIAG)], normalize_by_attention=True)
    assert p.item() == pytest.approx((0.5 + 4.0) / 1.5)


def test_unit_attention_reduces_to_masked_average():
    rng = torch.Generator().manual_seed(0)
    f = torch.randn(4, 6, 6, generator=rng)
    m = torch.rand(6, 6, generator=rng) > 0.5
    p = foreground_prototype([(f, apply_texture_attention(torch.ones(6, 6), m), m)])
    torch.testing.assert_close(p, masked_average(f, m, m))


@settings(max_examples=30, deadline=None)
@given(
    k=st.integers(1, 5), d=st.integers(1, 8), side=st.integers(2, 8), seed=st.integers(0, 10_000)
)
def test_prototypes_match_loop_oracle(k, d, side, seed):
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(k, d, side, side))
    att = rng.uniform(size=(k, side, side))
    masks = (rng.uniform(size=(k, side, side)) < 0.5).astype(np.int64)
    masks[:, 0, 0] = 1
    masks[:, -1, -1] = 0
    fg_ref, bg_ref = prototypes_loop(feats, att, masks)
    ft = torch.from_numpy(feats)
    mt = torch.from_numpy(masks).bool()
    tt = torch.from_numpy(att)
    fg = foreground_prototype([(ft[i], apply_texture_attention(tt[i], mt[i]), mt[i]) for i in range(k)])
    bg = background_prototype([(ft[i], mt[i]) for i in range(k)])
    np.testing.assert_allclose(fg.numpy(), fg_ref, atol=1e-6)
    np.testing.assert_allclose(bg.numpy(), bg_ref, atol=1e-6)


def test_prototype_errors():
    empty = torch.zeros(2, 2, dtype=torch.bool)
    with pytest.raises(ValueError, match="empty foreground"):
        foreground_prototype([(F22, torch.zeros(2, 2), empty)])
    with pytest.raises(ValueError, match="no background"):
        background_prototype([(F22, torch.ones(2, 2, dtype=torch.bool))])
    with pytest.raises(ValueError, match="differ"):
        apply_texture_attention(torch.ones(3, 3), DIAG)


# ---------------------------------------------------------------- distances and prediction


def test_cosine_distance_values():
    f = torch.tensor([[[1.0, 0.0, -1.0]], [[0.0, 1.0, 0.0]]])  # D=2, 1x3
    p = torch.tensor([[1.0, 0.0]])
    np.testing.assert_allclose(cosine_distance(f, p)[0, 0].numpy(), [0.0, 1.0, 2.0], atol=1e-7)


def test_zero_norm_counted():
    diag = Counter()
    d = cosine_distance(torch.zeros(2, 1, 1), torch.tensor([[1.0, 0.0], [0.0, 1.0]]), diag)
    assert (d == 2.0).all() and diag["zero_norm"] == 2


def test_equidistant_tie_goes_to_lowest_index():
    f = torch.tensor([[[1.0]], [[1.0]]])
    protos = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    pred = predict_mask(f, protos)
    assert pred.labels.item() == 0
    torch.testing.assert_close(pred.probabilities[:, 0, 0], torch.tensor([0.5, 0.5]))


def test_probabilities_sum_to_one_and_labels_are_argmax():
    torch.manual_seed(0)
    pred = predict_mask(torch.randn(5, 7, 7), torch.randn(3, 5))
    torch.testing.assert_close(pred.probabilities.sum(0), torch.ones(7, 7))
    torch.testing.assert_close(pred.labels, pred.probabilities.argmax(0))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_labels_do_not_depend_on_alpha(seed):
    g = torch.Generator().manual_seed(seed)
    f = torch.randn(4, 6, 6, generator=g)
    protos = torch.randn(3, 4, generator=g)
    ref = predict_mask(f, protos, alpha=1.0).labels
    for alpha in (20.0, 100.0):
        torch.testing.assert_close(predict_mask(f, protos, alpha=alpha).labels, ref)


def test_predict_requires_two_prototypes_and_positive_alpha():
    with pytest.raises(ValueError):
        predict_mask(torch.randn(2, 3, 3), torch.randn(1, 2))
    with pytest.raises(ValueError):
        predict_mask(torch.randn(2, 3, 3), torch.randn(2, 2), alpha=0)


# ---------------------------------------------------------------- losses


def test_uniform_prediction_loss_is_ln2():
    probs = torch.full((2, 3, 3), 0.5)
    gt = torch.randint(0, 2, (3, 3))
    assert segmentation_loss(probs, gt).item() == pytest.approx(math.log(2))


def test_two_pixel_loss_hand_example():
    probs = torch.tensor([[[0.9, 0.4]], [[0.1, 0.6]]], dtype=torch.float64)
    gt = torch.tensor([[0, 1]])
    expected = -(math.log(0.9) + math.log(0.6)) / 2
    assert segmentation_loss(probs, gt).item() == pytest.approx(expected)
    assert cross_entropy_loop(probs.numpy(), gt.numpy()) == pytest.approx(expected)


def test_segmentation_loss_matches_loop_oracle():
    torch.manual_seed(1)
    pred = predict_mask(torch.randn(3, 5, 5, dtype=torch.float64), torch.randn(3, 3, dtype=torch.float64))
    gt = torch.randint(0, 3, (5, 5))
    assert segmentation_loss(pred, gt).item() == pytest.approx(cross_entropy_loop(pred.probabilities.numpy(), gt.numpy()))


def test_segmentation_loss_rejects_missing_class():
    with pytest.raises(ValueError, match="no prototype"):
        segmentation_loss(torch.full((2, 1, 1), 0.5), torch.tensor([[2]]))


@pytest.mark.parametrize("l_seg, l_par, lam, expected", [(0.5, 0.3, 1.0, 0.8), (1.0, 0.25, 2.0, 1.5)])
def test_total_loss_values(l_seg, l_par, lam, expected):
    assert total_loss(l_seg, l_par, lam).total.item() == pytest.approx(expected)


def test_total_loss_rejects_negative_lambda():
    with pytest.raises(ValueError):
        total_loss(1.0, 1.0, -0.1)


def test_par_hand_computation():
    # D=2: query pixel 0 points along x and is labelled 0, pixel 1 along y labelled 1
    qf = torch.tensor([[[1.0, 0.0]], [[0.0, 1.0]]], dtype=torch.float64)
    ql = torch.tensor([[0, 1]])
    sf = torch.tensor([[[1.0, 1.0]], [[0.0, 1.0]]], dtype=torch.float64)
    sg = torch.tensor([[0, 1]])
    alpha = 20.0
    # support pixel 0 = (1,0): dist 0 to bg, 1 to fg; pixel 1 = (1,1): 1 - 1/sqrt2 to both
    l0 = math.log(1 + math.exp(-alpha))
    l1 = math.log(2)
    loss = par_loss(qf, ql, [(sf, sg)], 2, alpha)
    assert loss.item() == pytest.approx((l0 + l1) / 2)


def test_par_skips_missing_class_and_counts_it():
    diag = Counter()
    qf = torch.randn(3, 4, 4)
    out = par_loss(qf, torch.zeros(4, 4, dtype=torch.long), [(torch.randn(3, 4, 4), torch.ones(4, 4))], 2, diagnostics=diag)
    assert out.item() == 0.0 and diag["par_skipped_class"] == 1


def test_par_gradient_does_not_flow_through_labels():
    qf = torch.randn(3, 4, 4, requires_grad=True)
    labels = torch.zeros(4, 4, dtype=torch.long)
    labels[:2] = 1
    sf = torch.randn(3, 4, 4, requires_grad=True)
    gt = torch.zeros(4, 4, dtype=torch.long)
    gt[:, :2] = 1
    par_loss(qf, labels, [(sf, gt)], 2).backward()
    assert qf.grad is not None and sf.grad is not None


def test_query_prototypes_with_attention():
    f = torch.tensor([[[2.0, 4.0]]])
    labels = torch.tensor([[1, 1]])
    att = torch.tensor([[1.0, 0.5]])
    protos = query_prototypes(f, labels, 2, attention=att)
    assert list(protos) == [1]
    assert protos[1].item() == pytest.approx((2.0 + 2.0) / 2)
