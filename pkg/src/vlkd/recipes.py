"""Reference desk-scale run configurations.

These are the calibrated settings used by the acceptance suite and the
experiment scripts: a zero-noise synthetic set of 256 pairs, a 2000-step
teacher run, and a 1000-step distillation run on the toy preset.
"""

from __future__ import annotations

from dataclasses import replace

from .data import SyntheticConfig
from .kd_losses import KDConfig
from .trainer import TrainRunConfig

GROUNDING_SET = SyntheticConfig()  # M=256, zero noise

TEACHER_SMOKE = TrainRunConfig(
    stage="teacher",
    steps=2000,
    batch_size=64,
    lr=5e-4,
    warmup_steps=200,
    grad_clip=0.0,
)

DISTILL_SMOKE = TrainRunConfig(
    stage="student",
    steps=1000,
    batch_size=32,
    lr=5e-4,
    warmup_steps=100,
    grad_clip=0.0,
    kd=KDConfig(objectives=("nst", "crd")),
)


def teacher_config(seed: int, **overrides) -> TrainRunConfig:
    return replace(TEACHER_SMOKE, seed=seed, **overrides)


def distill_config(seed: int, objectives=("nst", "crd"), **overrides) -> TrainRunConfig:
    kd = replace(DISTILL_SMOKE.kd, objectives=tuple(objectives),
                 **overrides.pop("kd_overrides", {}))
    return replace(DISTILL_SMOKE, seed=seed, kd=kd, **overrides)
