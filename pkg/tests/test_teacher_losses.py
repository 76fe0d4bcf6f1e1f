import math

import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from vlkd.teacher_losses import contrastive_hinge_loss, mlm_loss, teacher_loss


def unit(*vals):
    v = torch.tensor(vals, dtype=torch.float64)
    return v / v.norm()


def test_hinge_degenerate_all_equal():
    # identical positive/negative texts and videos: every cosine matches, so
    # each position contributes margin twice
    h = torch.randn(5, 8, dtype=torch.float64)
    v = torch.randn(8, dtype=torch.float64)
    loss = contrastive_hinge_loss(h, h, v, v, margin=1.0)
    assert math.isclose(float(loss), 2 * 5 * 1.0, rel_tol=1e-12)


def test_hinge_zero_when_separated():
    # positives aligned with the video, negatives orthogonal: both hinge
    # arguments are margin - 1 + 0 <= 0
    v = unit(1.0, 0.0, 0.0)
    v_neg = unit(0.0, 1.0, 0.0)
    h = torch.stack([unit(1.0, 0.0, 0.0)] * 3)
    h_neg = torch.stack([unit(0.0, 0.0, 1.0)] * 3)
    loss = contrastive_hinge_loss(h, h_neg, v, v_neg, margin=1.0)
    assert float(loss) == 0.0


def test_hinge_matches_loop_oracle():
    g = torch.Generator().manual_seed(0)
    h = torch.randn(6, 10, generator=g, dtype=torch.float64)
    h_neg = torch.randn(6, 10, generator=g, dtype=torch.float64)
    v = torch.randn(10, generator=g, dtype=torch.float64)
    v_neg = torch.randn(10, generator=g, dtype=torch.float64)
    expected = 0.0
    for i in range(6):
        pos = F.cosine_similarity(h[i], v, dim=0)
        a = 1.0 - pos + F.cosine_similarity(h_neg[i], v, dim=0)
        b = 1.0 - pos + F.cosine_similarity(h[i], v_neg, dim=0)
        expected += max(0.0, float(a)) + max(0.0, float(b))
    loss = contrastive_hinge_loss(h, h_neg, v, v_neg, margin=1.0)
    assert math.isclose(float(loss), expected, rel_tol=1e-9)


def test_hinge_short_negative_clamps_to_last_token():
    g = torch.Generator().manual_seed(1)
    h = torch.randn(4, 8, generator=g, dtype=torch.float64)
    h_neg = torch.randn(2, 8, generator=g, dtype=torch.float64)
    v = torch.randn(8, generator=g, dtype=torch.float64)
    v_neg = torch.randn(8, generator=g, dtype=torch.float64)
    loss = contrastive_hinge_loss(h, h_neg, v, v_neg)
    padded = torch.cat([h_neg, h_neg[1:].expand(2, -1)])
    expected = contrastive_hinge_loss(h, padded, v, v_neg)
    assert torch.allclose(loss, expected)


def test_hinge_empty_raises():
    h = torch.randn(3, 4)
    with pytest.raises(ValueError, match="content token"):
        contrastive_hinge_loss(h, torch.zeros(0, 4), torch.randn(4), torch.randn(4))


def test_hinge_zero_norm_raises():
    h = torch.randn(3, 4)
    with pytest.raises(ValueError, match="degenerate"):
        contrastive_hinge_loss(h, h, torch.zeros(4), torch.randn(4))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), lx=st.integers(1, 8),
       margin=st.floats(0.1, 2.0))
def test_hinge_nonnegative_and_bounded(seed, lx, margin):
    g = torch.Generator().manual_seed(seed)
    h = torch.randn(lx, 6, generator=g, dtype=torch.float64)
    h_neg = torch.randn(lx, 6, generator=g, dtype=torch.float64)
    v = torch.randn(6, generator=g, dtype=torch.float64)
    v_neg = torch.randn(6, generator=g, dtype=torch.float64)
    loss = float(contrastive_hinge_loss(h, h_neg, v, v_neg, margin))
    # each term lies in [0, margin + 2]
    assert 0.0 <= loss <= 2 * lx * (margin + 2) + 1e-9


def test_mlm_matches_cross_entropy_oracle():
    g = torch.Generator().manual_seed(2)
    logits = torch.randn(7, 11, generator=g, dtype=torch.float64)
    positions = (1, 4, 6)
    originals = (3, 0, 10)
    loss = mlm_loss(logits, positions, originals)
    expected = F.cross_entropy(logits[list(positions)],
                               torch.tensor(originals))
    assert torch.allclose(loss, expected)


def test_mlm_uniform_logits_log_vocab():
    logits = torch.zeros(4, 9, dtype=torch.float64)
    loss = mlm_loss(logits, (0, 2), (5, 1))
    assert math.isclose(float(loss), math.log(9), rel_tol=1e-12)


def test_mlm_sum_reduction():
    g = torch.Generator().manual_seed(3)
    logits = torch.randn(5, 6, generator=g, dtype=torch.float64)
    mean = mlm_loss(logits, (1, 2, 3), (0, 0, 0), reduction="mean")
    total = mlm_loss(logits, (1, 2, 3), (0, 0, 0), reduction="sum")
    assert torch.allclose(total, 3 * mean)


def test_mlm_empty_raises():
    with pytest.raises(ValueError, match="nothing to score"):
        mlm_loss(torch.randn(3, 5), (), ())


def test_teacher_loss_weighting():
    ct = torch.tensor(3.0)
    mlm = torch.tensor(2.0)
    assert float(teacher_loss(ct, mlm)) == 5.0
    assert float(teacher_loss(ct, mlm, w_contrastive=0.0)) == 2.0
    assert float(teacher_loss(ct, mlm, w_mlm=0.5)) == 4.0
