#!/usr/bin/env python3
"""End-to-end smoke run: synthesize data, pretrain the teacher, distill a
student with NST+CRD, and print retrieval / probe / agreement numbers.

Usage: python scripts/run_pipeline.py --out runs/smoke [--seed 0]
                                      [--teacher-steps 2000] [--distill-steps 1000]
"""

import argparse
import json
from pathlib import Path

from vlkd.data import gen_synthetic_pairs, save_dataset
from vlkd.encoder import build_student
from vlkd.evals import (agreement_metrics, make_probe_task, probe_eval,
                        recall_at_k)
from vlkd.recipes import GROUNDING_SET, distill_config, teacher_config
from vlkd.trainer import distill_student, train_teacher


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", required=True)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--teacher-steps", type=int, default=2000)
    ap.add_argument("--distill-steps", type=int, default=1000)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    dataset = gen_synthetic_pairs(GROUNDING_SET, seed=args.seed)
    save_dataset(dataset, out / "data")
    print(f"[1/3] dataset: {len(dataset)} pairs -> {out / 'data'}")

    t_cfg = teacher_config(args.seed, steps=args.teacher_steps)
    teacher, _ = train_teacher(dataset, t_cfg, out_dir=out / "teacher",
                               log_path=out / "teacher" / "log.jsonl")
    recall, _ = recall_at_k(teacher.lang, dataset, teacher, k=1)
    print(f"[2/3] teacher: {args.teacher_steps} steps, recall@1 = {recall:.3f}")

    s_cfg = distill_config(args.seed, steps=args.distill_steps)
    texts = [(s.sample_index, s.text) for s in dataset.samples]
    bundle, _ = distill_student(teacher, texts, s_cfg, out_dir=out / "student",
                                log_path=out / "student" / "log.jsonl")
    held = gen_synthetic_pairs(GROUNDING_SET, seed=args.seed + 100)
    held_seqs = [s.text for s in held.samples[:64]]
    init = build_student(teacher.lang.config, args.seed + 1)
    before = agreement_metrics(init, teacher, held_seqs)
    after = agreement_metrics(bundle.student, teacher, held_seqs)
    task = make_probe_task(dataset, seed=args.seed)
    acc = probe_eval(bundle.student, task)
    summary = {
        "recall_at_1": recall,
        "agreement_init": before,
        "agreement_final": after,
        "probe_accuracy": acc,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(f"[3/3] student: probe {acc:.3f}, "
          f"token cos {before['mean_token_cos']:.3f} -> "
          f"{after['mean_token_cos']:.3f}; summary in {out / 'summary.json'}")


if __name__ == "__main__":
    main()
