"""Knowledge-distillation objectives: soft-label, L2 regression, NST (MMD),
CRD with memory buffer, and voken classification, plus their configuration
and the voken bank."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .formats import load_matrix, save_matrix

KD_OBJECTIVES = ("soft_label", "l2_regression", "nst", "crd", "voken")


@dataclass
class KDConfig:
    """Objective selection and loss hyperparameters for student distillation."""

    objectives: tuple = ("nst", "crd")
    weights: dict = field(default_factory=dict)      # per-objective, default 1.0
    tau: float = 2.0                                 # soft-label temperature
    sigma: float = 1.0                               # Gaussian kernel bandwidth
    nst_normalize: bool = True
    n_negatives: int | None = None                   # CRD negatives; None -> batch size
    dataset_size: int = 0                            # M, CRD buffer rows
    d_proj: int | None = None                        # CRD projection dim; None -> max(16, d//4)
    crd_momentum: float = 0.0
    voken_bank_size: int = 64
    use_distill_head: bool = True
    reduction: str = "mean"

    def __post_init__(self):
        unknown = set(self.objectives) - set(KD_OBJECTIVES)
        if unknown:
            raise ValueError(f"unknown KD objectives: {sorted(unknown)}")
        if self.tau <= 0 or self.sigma <= 0:
            raise ValueError("tau and sigma must be positive")

    def weight(self, name: str) -> float:
        return float(self.weights.get(name, 1.0))


def soft_label_loss(teacher_logits: torch.Tensor, student_logits: torch.Tensor,
                    tau: float = 2.0, reduction: str = "mean") -> torch.Tensor:
    """Cross-entropy between temperature-scaled teacher and student distributions.

    Both inputs are (positions, |Z|) LM-head logits over content positions.
    """
    if teacher_logits.shape != student_logits.shape:
        raise ValueError(
            f"logit shape mismatch: {tuple(teacher_logits.shape)} vs {tuple(student_logits.shape)}"
        )
    p_t = F.softmax(teacher_logits / tau, dim=-1)
    log_p_s = F.log_softmax(student_logits / tau, dim=-1)
    ce = -(p_t * log_p_s).sum(dim=-1)
    return ce.mean() if reduction == "mean" else ce.sum()


def l2_regression_loss(s: torch.Tensor, t: torch.Tensor,
                       reduction: str = "mean") -> torch.Tensor:
    """Squared L2 distance between student and teacher states per position."""
    if s.shape != t.shape:
        raise ValueError(f"shape mismatch: {tuple(s.shape)} vs {tuple(t.shape)}")
    per_pos = (s - t).pow(2).sum(dim=-1)
    return per_pos.mean() if reduction == "mean" else per_pos.sum()


def gaussian_kernel(a: torch.Tensor, b: torch.Tensor, sigma: float = 1.0) -> torch.Tensor:
    return torch.exp(-(a - b).pow(2).sum(dim=-1) / (2.0 * sigma * sigma))


def nst_mmd2(s: torch.Tensor, t: torch.Tensor, sigma: float = 1.0,
             normalize: bool = True) -> torch.Tensor:
    """Squared MMD between per-neuron activation patterns of s and t.

    s, t: (positions, d) over content positions. Columns (activation of one
    neuron across positions) are the kernel arguments; if `normalize`, each
    column is L2-normalized first.
    """
    if s.shape[0] == 0 or t.shape[0] == 0:
        raise ValueError("zero-length sequence")
    sc = s.t()  # (d, positions): one row per neuron
    tc = t.t()
    if normalize:
        sc = F.normalize(sc, dim=-1, eps=1e-12)
        tc = F.normalize(tc, dim=-1, eps=1e-12)
    d_s, d_t = sc.shape[0], tc.shape[0]

    def kernel_sum(a, b):
        # squared distances via the expansion; cdist's sqrt is not
        # differentiable at zero distance
        d2 = (a * a).sum(-1)[:, None] + (b * b).sum(-1)[None, :] - 2.0 * a @ b.t()
        return torch.exp(-d2.clamp(min=0.0) / (2.0 * sigma * sigma)).sum()

    return (kernel_sum(sc, sc) / (d_s * d_s)
            + kernel_sum(tc, tc) / (d_t * d_t)
            - 2.0 * kernel_sum(sc, tc) / (d_s * d_t))


class CRDState(nn.Module):
    """Learned projections f1 (student) / f2 (teacher) and the memory buffer.

    Buffer rows store unit-normalized teacher-side projections keyed by
    sample index; rows start as random unit vectors.
    """

    def __init__(self, d: int, dataset_size: int, d_proj: int | None = None,
                 seed: int = 0):
        super().__init__()
        if dataset_size < 2:
            raise ValueError("CRD buffer needs at least 2 samples")
        d_proj = d_proj or max(16, d // 4)
        self.d_proj = d_proj
        self.dataset_size = dataset_size
        self.f1 = nn.Linear(d, d_proj, bias=False)
        self.f2 = nn.Linear(d, d_proj, bias=False)
        g = torch.Generator().manual_seed(seed)
        for lin in (self.f1, self.f2):
            with torch.no_grad():
                lin.weight.normal_(0.0, 0.02, generator=g).clamp_(-0.04, 0.04)
        buf = torch.randn(dataset_size, d_proj, generator=g)
        self.register_buffer("buffer", F.normalize(buf, dim=-1))

    def project_student(self, s: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.f1(s), dim=-1, eps=1e-12)

    def project_teacher(self, t: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.f2(t), dim=-1, eps=1e-12)


def _critic(dot: torch.Tensor, n: int, m: int) -> torch.Tensor:
    """h(s,t) = exp(f1(s)^T f2(t)) / (exp(.) + N/M)."""
    e = torch.exp(dot)
    return e / (e + n / m)


def sample_crd_negatives(state: CRDState, sample_index: int, n: int,
                         generator: torch.Generator | None = None) -> torch.Tensor:
    """Uniform without replacement over buffer rows, excluding the sample itself."""
    m = state.dataset_size
    if n >= m:
        raise ValueError(f"insufficient negatives: N={n} >= M={m}")
    perm = torch.randperm(m - 1, generator=generator)[:n]
    idx = perm + (perm >= sample_index).long()  # skip own row
    return idx


def crd_loss(s_pos: torch.Tensor, t_pos: torch.Tensor, sample_index: int,
             state: CRDState, n_negatives: int,
             generator: torch.Generator | None = None,
             neg_indices: torch.Tensor | None = None,
             reduction: str = "mean") -> torch.Tensor:
    """Contrastive mutual-information bound per token position.

    s_pos, t_pos: (positions, d) student / teacher states for one sample.
    Negatives come from the buffer (previous-step values, no gradient).
    """
    n, m = n_negatives, state.dataset_size
    if n >= m:
        raise ValueError(f"insufficient negatives: N={n} >= M={m}")
    if neg_indices is None:
        neg_indices = sample_crd_negatives(state, sample_index, n, generator)
    fs = state.project_student(s_pos)                 # (L, d_proj)
    ft = state.project_teacher(t_pos)                 # (L, d_proj)
    negs = state.buffer[neg_indices].detach()         # (N, d_proj)
    h_pos = _critic((fs * ft).sum(dim=-1), n, m)      # (L,)
    h_neg = _critic(fs @ negs.t(), n, m)              # (L, N)
    per_pos = -torch.log(h_pos) - torch.log1p(-h_neg).sum(dim=-1)
    return per_pos.mean() if reduction == "mean" else per_pos.sum()


def crd_buffer_update(state: CRDState, sample_index: int, t_vector: torch.Tensor,
                      momentum: float = 0.0) -> None:
    """Store normalize(f2(t)) at the sample's row, optionally momentum-blended."""
    if not 0 <= sample_index < state.dataset_size:
        raise ValueError(f"sample index {sample_index} out of range [0, {state.dataset_size})")
    with torch.no_grad():
        new = F.normalize(state.f2(t_vector), dim=-1, eps=1e-12)
        if momentum > 0:
            new = F.normalize(momentum * state.buffer[sample_index] + (1 - momentum) * new,
                              dim=-1, eps=1e-12)
        state.buffer[sample_index] = new


@dataclass
class VokenBank:
    """Fixed bank of pooled video representations used as token-level labels."""

    vectors: torch.Tensor  # (K, d)
    ids: list

    def __post_init__(self):
        if len(self.ids) != self.vectors.shape[0]:
            raise ValueError("id count does not match bank rows")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("voken ids must be unique")
        if not torch.isfinite(self.vectors).all():
            raise ValueError("voken bank contains non-finite rows")
        if (self.vectors.norm(dim=-1) < 1e-12).any():
            raise ValueError("voken bank contains zero rows")

    def __len__(self):
        return len(self.ids)

    def save(self, path) -> None:
        save_matrix(path, self.vectors.numpy())
        Path(str(path) + ".ids").write_text("".join(f"{i}\n" for i in self.ids))

    @classmethod
    def load(cls, path) -> "VokenBank":
        mat = load_matrix(path)
        ids = Path(str(path) + ".ids").read_text().splitlines()
        return cls(torch.from_numpy(mat), ids)


def assign_vokens(t: torch.Tensor, bank: VokenBank) -> torch.Tensor:
    """Per token, the bank row maximizing cosine with the teacher hidden state.

    t: (positions, d). Ties break toward the lowest id; returns int64 ids.
    """
    if len(bank) == 0:
        raise ValueError("empty voken bank")
    if (t.norm(dim=-1) < 1e-12).any():
        raise ValueError("degenerate embedding: zero-norm hidden state")
    sims = F.normalize(t, dim=-1) @ F.normalize(bank.vectors.to(t.dtype), dim=-1).t()
    return sims.argmax(dim=-1)  # argmax returns the first (lowest) index on ties


def voken_loss(student_voken_logits: torch.Tensor, assignment: torch.Tensor,
               reduction: str = "mean") -> torch.Tensor:
    """Cross-entropy of assigned voken ids over content positions."""
    K = student_voken_logits.shape[-1]
    if (assignment >= K).any() or (assignment < 0).any():
        raise ValueError(f"voken id out of range for bank size {K}")
    nll = F.cross_entropy(student_voken_logits, assignment, reduction="none")
    return nll.mean() if reduction == "mean" else nll.sum()


def combined_student_loss(mlm: torch.Tensor, kd_values: dict, cfg: KDConfig) -> torch.Tensor:
    """MLM plus the weighted sum of enabled KD objectives."""
    total = mlm
    for name in cfg.objectives:
        total = total + cfg.weight(name) * kd_values[name]
    return total
