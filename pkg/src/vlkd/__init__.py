"""Desk-scale cross-modal knowledge distillation.

Two-stage pipeline: pretrain a video-grounded teacher language encoder with a
token-level contrastive loss plus masked language modeling, then distill it
into a text-only student via a selectable family of KD objectives.
"""

__version__ = "0.1.0"
