"""Teacher pretraining losses: token-level contrastive hinge and MLM."""

from __future__ import annotations

import torch
import torch.nn.functional as F

_NORM_EPS = 1e-12


def _cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    na = a.norm(dim=-1)
    nb = b.norm(dim=-1)
    if (na < _NORM_EPS).any() or (nb < _NORM_EPS).any():
        raise ValueError("degenerate embedding: zero-norm vector in cosine")
    return (a * b).sum(dim=-1) / (na * nb)


def contrastive_hinge_loss(h_x: torch.Tensor, h_x_neg: torch.Tensor,
                           v_bar: torch.Tensor, v_bar_neg: torch.Tensor,
                           margin: float = 1.0) -> torch.Tensor:
    """Token-level triplet hinge over cosine similarities.

    h_x: (Lx, d) content-token states of the positive text; h_x_neg: (Ln, d)
    states of a negative text from the same batch; v_bar / v_bar_neg: pooled
    positive / negative video vectors (d,). Summed over the positive text's
    tokens; the negative text is indexed at the same token position, clamped
    to its last token when shorter.
    """
    if h_x.shape[0] < 1 or h_x_neg.shape[0] < 1:
        raise ValueError("contrastive loss needs at least one content token per text")
    Lx = h_x.shape[0]
    idx = torch.arange(Lx).clamp(max=h_x_neg.shape[0] - 1)
    pos = _cosine(h_x, v_bar)                       # (Lx,)
    neg_text = _cosine(h_x_neg[idx], v_bar)         # (Lx,)
    neg_video = _cosine(h_x, v_bar_neg)             # (Lx,)
    term1 = torch.clamp(margin - pos + neg_text, min=0.0)
    term2 = torch.clamp(margin - pos + neg_video, min=0.0)
    return (term1 + term2).sum()


def mlm_loss(logits: torch.Tensor, mask_positions, original_ids,
             reduction: str = "mean") -> torch.Tensor:
    """Negative log-likelihood of the original tokens at masked positions.

    logits: (L, |Z|) covering every position of the masked input.
    """
    if len(mask_positions) == 0:
        raise ValueError("empty mask: nothing to score")
    pos = torch.as_tensor(mask_positions, dtype=torch.long, device=logits.device)
    tgt = torch.as_tensor(original_ids, dtype=torch.long, device=logits.device)
    logp = F.log_softmax(logits[pos], dim=-1)
    nll = -logp.gather(1, tgt[:, None]).squeeze(1)
    return nll.mean() if reduction == "mean" else nll.sum()


def teacher_loss(contrastive: torch.Tensor, mlm: torch.Tensor,
                 w_contrastive: float = 1.0, w_mlm: float = 1.0) -> torch.Tensor:
    """Combined teacher objective; unweighted sum by default."""
    return w_contrastive * contrastive + w_mlm * mlm
