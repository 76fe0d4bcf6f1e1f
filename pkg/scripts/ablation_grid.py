#!/usr/bin/env python3
"""Ablation grid over KD objectives, teacher objectives, and the distillation
head, mirroring the experiment matrix behind the acceptance checks.

For each seed this trains (or reuses from --cache) two teachers (contrastive
+ MLM, and MLM-only) and five students, then reports probe accuracy and
teacher-student agreement for each cell.

Usage: python scripts/ablation_grid.py --cache runs/grid [--seeds 0 1 2]
"""

import argparse
import json
from pathlib import Path

from vlkd.data import gen_synthetic_pairs
from vlkd.encoder import build_student
from vlkd.evals import agreement_metrics, mean_probe_accuracy
from vlkd.recipes import GROUNDING_SET, distill_config, teacher_config
from vlkd.trainer import (distill_student, load_student, load_teacher,
                          train_teacher)

STUDENT_CELLS = [
    # (tag suffix, teacher kind, objectives, use distillation head)
    ("nst+crd", "ct", ("nst", "crd"), True),
    ("nst+crd-mlmonly", "mlmonly", ("nst", "crd"), True),
    ("nst", "ct", ("nst",), True),
    ("crd", "ct", ("crd",), True),
    ("nst-nohead", "ct", ("nst",), False),
]


def get_teacher(cache, dataset, kind, seed):
    out = cache / f"teacher_{kind}_{seed}"
    if (out / "teacher.vlkc").exists():
        return load_teacher(out / "teacher.vlkc")
    overrides = {"w_contrastive": 0.0} if kind == "mlmonly" else {}
    cfg = teacher_config(seed, **overrides)
    teacher, _ = train_teacher(dataset, cfg, out_dir=out)
    return teacher


def get_student(cache, teacher, texts, tag, seed, objectives, use_head):
    out = cache / f"student_{tag}_{seed}"
    if (out / "student.vlkc").exists():
        return load_student(out / "student.vlkc")
    cfg = distill_config(seed, objectives=objectives,
                         kd_overrides={"use_distill_head": use_head})
    bundle, _ = distill_student(teacher, texts, cfg, out_dir=out)
    return bundle


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--cache", required=True,
                    help="directory for cached teacher/student checkpoints")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = ap.parse_args()
    cache = Path(args.cache)
    cache.mkdir(parents=True, exist_ok=True)

    rows = []
    for seed in args.seeds:
        dataset = gen_synthetic_pairs(GROUNDING_SET, seed=seed)
        held = gen_synthetic_pairs(GROUNDING_SET, seed=seed + 100)
        held_seqs = [s.text for s in held.samples[:64]]
        texts = [(s.sample_index, s.text) for s in dataset.samples]
        teachers = {kind: get_teacher(cache, dataset, kind, seed)
                    for kind in ("ct", "mlmonly")}
        for tag, kind, objectives, use_head in STUDENT_CELLS:
            teacher = teachers[kind]
            bundle = get_student(cache, teacher, texts, tag, seed,
                                 objectives, use_head)
            init = build_student(teacher.lang.config, seed + 1,
                                 distill_head=use_head)
            before = agreement_metrics(init, teacher, held_seqs,
                                       use_distill_head=use_head)
            after = agreement_metrics(bundle.student, teacher, held_seqs,
                                      use_distill_head=use_head)
            row = {"seed": seed, "cell": tag,
                   "probe": mean_probe_accuracy(bundle.student, dataset),
                   "cos_init": before["mean_token_cos"],
                   "cos_final": after["mean_token_cos"]}
            rows.append(row)
            print(json.dumps(row), flush=True)
    (cache / "grid.json").write_text(json.dumps(rows, indent=2))
    print(f"wrote {len(rows)} cells to {cache / 'grid.json'}")


if __name__ == "__main__":
    main()
