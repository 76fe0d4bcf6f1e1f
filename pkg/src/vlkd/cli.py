"""Command-line entry points: gen-synth, train-teacher, distill, eval.

Config files are JSON with closed-world keys; CLI flags override file
values, which override defaults. Every run directory gets a manifest with
content hashes of its outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import subprocess
import sys
from datetime import datetime, timezone
from pathlib import Path

from .data import SyntheticConfig, gen_synthetic_pairs, load_dataset, save_dataset
from .kd_losses import KDConfig, VokenBank
from .trainer import (DivergenceError, TrainRunConfig, distill_student,
                      load_student, load_teacher, train_teacher)


def _check_keys(d: dict, cls, context: str) -> None:
    allowed = {f.name for f in dataclasses.fields(cls)}
    for key in d:
        if key not in allowed:
            raise SystemExit(f"unknown config key '{context}{key}'")


def _listify(d: dict, cls) -> dict:
    out = dict(d)
    for f in dataclasses.fields(cls):
        if f.name in out and isinstance(out[f.name], list):
            out[f.name] = tuple(out[f.name])
    return out


def load_config(path) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text())


def make_synth_config(cfg: dict) -> SyntheticConfig:
    _check_keys(cfg, SyntheticConfig, "")
    return SyntheticConfig(**_listify(cfg, SyntheticConfig))


def make_train_config(cfg: dict, args) -> TrainRunConfig:
    cfg = dict(cfg)
    kd_cfg = cfg.pop("kd", {})
    _check_keys(cfg, TrainRunConfig, "")
    _check_keys(kd_cfg, KDConfig, "kd.")
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.steps is not None:
        cfg["steps"] = args.steps
    kd = KDConfig(**_listify(kd_cfg, KDConfig))
    return TrainRunConfig(**_listify(cfg, TrainRunConfig), kd=kd)


def _git_describe() -> str:
    try:
        return subprocess.run(["git", "describe", "--always", "--dirty"],
                              capture_output=True, text=True, check=True,
                              cwd=Path(__file__).parent).stdout.strip()
    except Exception:
        return "unknown"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Manifest:
    def __init__(self, out_dir: Path, config: dict, seed: int):
        self.out_dir = out_dir
        self.data = {"config": config, "seed": seed,
                     "git_describe": _git_describe(),
                     "started_at": datetime.now(timezone.utc).isoformat(),
                     "outputs": {}}

    def finish(self, outputs) -> None:
        self.data["finished_at"] = datetime.now(timezone.utc).isoformat()
        self.data["outputs"] = {str(rel): _sha256(self.out_dir / rel)
                                for rel in outputs}
        tmp = self.out_dir / "manifest.json.tmp"
        tmp.write_text(json.dumps(self.data, indent=2))
        tmp.replace(self.out_dir / "manifest.json")


def _prepare_out(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise SystemExit(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_synth(args) -> int:
    cfg = make_synth_config(load_config(args.config))
    seed = args.seed if args.seed is not None else 0
    out = _prepare_out(args.out, args.force)
    manifest = Manifest(out, dataclasses.asdict(cfg), seed)
    dataset = gen_synthetic_pairs(cfg, seed)
    written = save_dataset(dataset, out)
    manifest.finish(written)
    print(f"wrote {len(dataset)} paired samples to {out}")
    return 0


def cmd_train_teacher(args) -> int:
    raw = load_config(args.config)
    cfg = make_train_config(raw, args)
    dataset = load_dataset(args.data)
    out = _prepare_out(args.out, args.force)
    manifest = Manifest(out, raw, cfg.seed)
    try:
        train_teacher(dataset, cfg, out_dir=out, resume=args.resume,
                      log_path=out / "log.jsonl")
    except DivergenceError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return 2
    manifest.finish(["teacher.vlkc", "log.jsonl"])
    print(f"teacher checkpoint at {out / 'teacher.vlkc'}")
    return 0


def cmd_distill(args) -> int:
    raw = load_config(args.config)
    cfg = make_train_config(raw, args)
    if args.kd is not None:
        objectives = () if args.kd == "none" else tuple(args.kd.split("+"))
        cfg = dataclasses.replace(cfg, kd=dataclasses.replace(cfg.kd, objectives=objectives))
    teacher = load_teacher(args.teacher)
    dataset = load_dataset(args.data)
    texts = [(s.sample_index, s.text) for s in dataset.samples]
    out = _prepare_out(args.out, args.force)

    bank = None
    if "voken" in cfg.kd.objectives:
        if args.voken_bank:
            bank = VokenBank.load(args.voken_bank)
        elif args.build_voken_bank:
            from .evals import build_voken_bank
            bank = build_voken_bank(teacher, dataset, cfg.kd.voken_bank_size, cfg.seed)
            bank.save(out / "voken_bank.vlkd")
        else:
            raise SystemExit("voken objective enabled but no voken bank "
                             "(pass --voken-bank or --build-voken-bank)")

    manifest = Manifest(out, raw, cfg.seed)
    try:
        distill_student(teacher, texts, cfg, out_dir=out, resume=args.resume,
                        log_path=out / "log.jsonl", voken_bank=bank)
    except DivergenceError as e:
        print(f"distillation diverged: {e}", file=sys.stderr)
        return 2
    manifest.finish(["student.vlkc", "log.jsonl"])
    print(f"student checkpoint at {out / 'student.vlkc'}")
    return 0


def cmd_eval(args) -> int:
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)

    if args.mode == "gradcheck":
        from .gradcheck import run_all
        results = run_all(seed=args.seed or 0, n_instances=20)
        ok = True
        for name, err in results.items():
            status = "ok" if err < 1e-4 else "FAIL"
            print(f"{name}: max rel err {err:.3e} [{status}]")
            ok &= err < 1e-4
        if out:
            (out / "gradcheck.json").write_text(json.dumps(results, indent=2))
        return 0 if ok else 1

    dataset = load_dataset(args.data)
    teacher = load_teacher(args.teacher) if args.teacher else None
    student = load_student(args.student).student if args.student else None
    model = student if student is not None else (teacher.lang if teacher else None)
    if model is None:
        raise SystemExit("eval needs --student and/or --teacher")

    if args.mode == "retrieval":
        if teacher is None:
            raise SystemExit("retrieval eval needs --teacher for video embeddings")
        from .evals import recall_at_k
        recall, results = recall_at_k(model, dataset, teacher, k=args.k)
        lines = [json.dumps(r.to_dict()) for r in results]
        if out:
            (out / "retrieval.jsonl").write_text("".join(l + "\n" for l in lines))
        print(f"recall@{args.k}: {recall:.4f} over {len(results)} queries")
    elif args.mode == "probe":
        from .evals import make_probe_task, probe_eval
        task = make_probe_task(dataset, seed=args.seed or 0)
        acc = probe_eval(model, task)
        report = {"task": "synthetic-cluster-probe", "accuracy": acc,
                  "seed": args.seed or 0}
        if out:
            (out / "probe.json").write_text(json.dumps(report, indent=2))
        print(f"probe accuracy: {acc:.4f}")
    elif args.mode == "agreement":
        if teacher is None or student is None:
            raise SystemExit("agreement eval needs both --student and --teacher")
        from .evals import agreement_metrics
        seqs = [s.text for s in dataset.samples]
        metrics = agreement_metrics(student, teacher, seqs)
        if out:
            (out / "agreement.json").write_text(json.dumps(metrics, indent=2))
        print(f"mean token L2 {metrics['mean_token_l2']:.4f}, "
              f"mean token cos {metrics['mean_token_cos']:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vlkd",
                                     description="Desk-scale cross-modal KD pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=True)
        p.add_argument("--force", action="store_true")
        p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("gen-synth", help="generate a synthetic paired dataset")
    common(p)
    p.set_defaults(fn=cmd_gen_synth)

    p = sub.add_parser("train-teacher", help="stage-1 teacher pretraining")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--resume", default=None)
    p.set_defaults(fn=cmd_train_teacher)

    p = sub.add_parser("distill", help="stage-2 student distillation")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--resume", default=None)
    p.add_argument("--kd", default=None,
                   help="override objectives, e.g. 'nst+crd' or 'none'")
    p.add_argument("--voken-bank", default=None)
    p.add_argument("--build-voken-bank", action="store_true")
    p.set_defaults(fn=cmd_distill)

    p = sub.add_parser("eval", help="evaluate checkpoints")
    p.add_argument("--mode", required=True,
                   choices=["retrieval", "probe", "agreement", "gradcheck"])
    p.add_argument("--student", default=None)
    p.add_argument("--teacher", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--k", type=int, default=3)
    p.set_defaults(fn=cmd_eval)
    return parser


def main(argv=None) -> int:
    threads = os.environ.get("VLKD_THREADS")
    if threads:
        import torch
        torch.set_num_threads(max(1, int(threads)))
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
