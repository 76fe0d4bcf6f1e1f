"""Transformer encoders for text tokens and video frame features.

Post-LN BERT-style blocks with exact GELU, learned position embeddings,
and optional LM / distillation / voken heads on the language side. Written
from scratch so that forward passes are deterministic and easy to
finite-difference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

PRESETS = {
    "toy-2L-64H": dict(n_layers=2, d_hidden=64, n_heads=4, d_ff=256),
    "bert-6L-512H": dict(n_layers=6, d_hidden=512, n_heads=8, d_ff=2048),
    "bert-12L-768H": dict(n_layers=12, d_hidden=768, n_heads=12, d_ff=3072),
}


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int = 2
    d_hidden: int = 64
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = 0          # 0 for the video encoder
    max_positions: int = 129
    d_v: int = 0                 # visual input dim; 0 for the text encoder
    tie_lm_head: bool = True

    def __post_init__(self):
        if self.d_hidden % self.n_heads != 0:
            raise ValueError("d_hidden must be divisible by n_heads")

    @classmethod
    def from_preset(cls, name: str, **kwargs) -> "EncoderConfig":
        return cls(**{**PRESETS[name], **kwargs})

    def to_dict(self):
        return asdict(self)


class SelfAttention(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d // n_heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)

    def forward(self, x, content_mask):
        # x: (B, L, d); content_mask: (B, L) bool, True where attendable
        B, L, d = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        shape = (B, L, self.n_heads, self.d_head)
        q = q.view(shape).transpose(1, 2)
        k = k.view(shape).transpose(1, 2)
        v = v.view(shape).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.d_head)
        att = att.masked_fill(~content_mask[:, None, None, :], float("-inf"))
        att = att.softmax(dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, L, d)
        return self.out(y)


class Block(nn.Module):
    """Post-LN transformer block: LN(x + attn), LN(x + ffn)."""

    def __init__(self, d: int, n_heads: int, d_ff: int):
        super().__init__()
        self.attn = SelfAttention(d, n_heads)
        self.ln1 = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, d_ff)
        self.fc2 = nn.Linear(d_ff, d)
        self.ln2 = nn.LayerNorm(d)

    def forward(self, x, content_mask):
        x = self.ln1(x + self.attn(x, content_mask))
        x = self.ln2(x + self.fc2(F.gelu(self.fc1(x))))
        return x


def init_parameters(module: nn.Module, generator: torch.Generator) -> None:
    """Deterministic init: truncated normal(0, 0.02) weights, zero biases."""
    for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
        with torch.no_grad():
            if p.ndim >= 2 or "emb" in name:
                p.normal_(0.0, 0.02, generator=generator).clamp_(-0.04, 0.04)
            elif "weight" in name and p.ndim == 1:  # LayerNorm scales
                p.fill_(1.0)
            else:
                p.zero_()


class LanguageEncoder(nn.Module):
    """Token encoder with LM head and optional distillation / voken heads."""

    def __init__(self, config: EncoderConfig, distill_head: bool = False,
                 voken_bank_size: int = 0):
        super().__init__()
        if config.vocab_size < 5:
            raise ValueError("language encoder needs a vocabulary")
        self.config = config
        self.token_emb = nn.Embedding(config.vocab_size, config.d_hidden)
        self.pos_emb = nn.Embedding(config.max_positions, config.d_hidden)
        self.blocks = nn.ModuleList(
            Block(config.d_hidden, config.n_heads, config.d_ff)
            for _ in range(config.n_layers)
        )
        self.lm_bias = nn.Parameter(torch.zeros(config.vocab_size))
        if not config.tie_lm_head:
            self.lm_proj = nn.Linear(config.d_hidden, config.vocab_size, bias=False)
        if distill_head:
            self.distill_fc1 = nn.Linear(config.d_hidden, config.d_hidden)
            self.distill_fc2 = nn.Linear(config.d_hidden, config.d_hidden)
        if voken_bank_size:
            self.voken_proj = nn.Linear(config.d_hidden, voken_bank_size)

    @property
    def has_distill_head(self) -> bool:
        return hasattr(self, "distill_fc1")

    def forward(self, ids: torch.Tensor, content_mask: torch.Tensor) -> torch.Tensor:
        # ids: (B, L) int64; content_mask: (B, L) bool, True for [CLS]+content
        if ids.max().item() >= self.config.vocab_size:
            raise ValueError(
                f"token id {ids.max().item()} out of range for vocab size {self.config.vocab_size}"
            )
        B, L = ids.shape
        pos = torch.arange(L, device=ids.device)
        x = self.token_emb(ids) + self.pos_emb(pos)[None]
        for block in self.blocks:
            x = block(x, content_mask)
        return x

    def lm_logits(self, h: torch.Tensor) -> torch.Tensor:
        if self.config.tie_lm_head:
            return h @ self.token_emb.weight.t() + self.lm_bias
        return self.lm_proj(h) + self.lm_bias

    def distill(self, h: torch.Tensor) -> torch.Tensor:
        """Two-layer ReLU MLP over each position."""
        if not self.has_distill_head:
            raise ValueError("distillation head not enabled on this model")
        return self.distill_fc2(F.relu(self.distill_fc1(h)))

    def voken_logits(self, h: torch.Tensor) -> torch.Tensor:
        if not hasattr(self, "voken_proj"):
            raise ValueError("voken head not enabled on this model")
        return self.voken_proj(h)


class VideoEncoder(nn.Module):
    """Frame-feature encoder: learned linear map d_v -> d, then transformer blocks."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        if config.d_v <= 0:
            raise ValueError("video encoder needs d_v > 0")
        self.config = config
        self.input_proj = nn.Linear(config.d_v, config.d_hidden)
        self.pos_emb = nn.Embedding(config.max_positions, config.d_hidden)
        self.blocks = nn.ModuleList(
            Block(config.d_hidden, config.n_heads, config.d_ff)
            for _ in range(config.n_layers)
        )

    def forward(self, frames: torch.Tensor, content_mask: torch.Tensor) -> torch.Tensor:
        # frames: (B, L, d_v); content_mask: (B, L) bool
        if frames.shape[-1] != self.config.d_v:
            raise ValueError(
                f"frame feature dim {frames.shape[-1]} != configured d_v {self.config.d_v}"
            )
        B, L, _ = frames.shape
        pos = torch.arange(L, device=frames.device)
        x = self.input_proj(frames) + self.pos_emb(pos)[None]
        for block in self.blocks:
            x = block(x, content_mask)
        return x


def pool_video(h_v: torch.Tensor, content_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Temporal mean of contextualized frame states: (L, d) -> (d,) or batched."""
    if h_v.shape[-2] == 0:
        raise ValueError("cannot pool an empty video")
    if content_mask is None:
        return h_v.mean(dim=-2)
    m = content_mask.unsqueeze(-1).to(h_v.dtype)
    return (h_v * m).sum(dim=-2) / m.sum(dim=-2)


class TeacherModel(nn.Module):
    def __init__(self, lang_cfg: EncoderConfig, vis_cfg: EncoderConfig):
        super().__init__()
        self.lang = LanguageEncoder(lang_cfg)
        self.vis = VideoEncoder(vis_cfg)


def build_teacher(lang_cfg: EncoderConfig, vis_cfg: EncoderConfig, seed: int) -> TeacherModel:
    model = TeacherModel(lang_cfg, vis_cfg)
    g = torch.Generator().manual_seed(seed)
    init_parameters(model, g)
    return model


def build_student(cfg: EncoderConfig, seed: int, distill_head: bool = True,
                  voken_bank_size: int = 0) -> LanguageEncoder:
    model = LanguageEncoder(cfg, distill_head=distill_head, voken_bank_size=voken_bank_size)
    g = torch.Generator().manual_seed(seed)
    init_parameters(model, g)
    return model
