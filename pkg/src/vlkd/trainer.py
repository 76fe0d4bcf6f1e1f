"""Training loops: stage-1 teacher pretraining and stage-2 student distillation.

All randomness is derived from (seed, step) or (seed, epoch), so a resumed
run continues bitwise-identically to an unbroken one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from .data import MaskedSequence, apply_mlm_mask
from .encoder import (EncoderConfig, LanguageEncoder, TeacherModel, VideoEncoder,
                      build_student, build_teacher, pool_video)
from .formats import load_tensors, save_tensors
from .kd_losses import (CRDState, KDConfig, VokenBank, assign_vokens,
                        combined_student_loss, crd_buffer_update, crd_loss,
                        l2_regression_loss, nst_mmd2, sample_crd_negatives,
                        soft_label_loss, voken_loss)
from .optim import AdamW, NanGradientError, clip_grad_norm, name_parameters
from .teacher_losses import contrastive_hinge_loss, mlm_loss, teacher_loss


class DivergenceError(RuntimeError):
    """Training loss went non-finite; the last good checkpoint was kept."""


@dataclass
class TrainRunConfig:
    seed: int = 0
    batch_size: int = 16
    steps: int = 200
    stage: str = "teacher"                 # "teacher" | "student"
    lr: float = 2e-4
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip: float = 1.0
    warmup_steps: int = 0
    mask_rate: float = 0.15
    margin: float = 1.0                    # contrastive hinge margin
    w_contrastive: float = 1.0
    w_mlm: float = 1.0
    eval_every: int = 100
    preset: str = "toy-2L-64H"
    kd: KDConfig = field(default_factory=KDConfig)

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2 (in-batch contrastive negatives)")

    def lr_at(self, step: int) -> float:
        if self.warmup_steps > 0 and step < self.warmup_steps:
            return self.lr * (step + 1) / self.warmup_steps
        return self.lr


def _step_seed(seed: int, step: int) -> int:
    return (seed * 1_000_003 + step * 2_654_435_761 + 12345) % (2**63)


def _epoch_batches(n: int, batch_size: int, seed: int, epoch: int):
    """Deterministic batch index lists for one epoch; batches of < 2 are dropped."""
    g = torch.Generator().manual_seed(_step_seed(seed, -epoch - 1) % (2**63))
    perm = torch.randperm(n, generator=g).tolist()
    batches = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    return [b for b in batches if len(b) >= 2]


def batch_for_step(n: int, batch_size: int, seed: int, step: int):
    per_epoch = max(1, len(_epoch_batches(n, batch_size, seed, 0)))
    epoch, k = divmod(step, per_epoch)
    return _epoch_batches(n, batch_size, seed, epoch)[k]


def collate_ids(sequences, pad_id: int = 0):
    """Pad masked/plain sequences to a (B, L) id tensor plus a content mask."""
    L = max(len(s.ids) for s in sequences)
    ids = torch.full((len(sequences), L), pad_id, dtype=torch.long)
    mask = torch.zeros((len(sequences), L), dtype=torch.bool)
    for i, s in enumerate(sequences):
        n = len(s.ids)
        ids[i, :n] = torch.tensor(s.ids, dtype=torch.long)
        mask[i, :n] = True
    return ids, mask


def collate_frames(videos):
    L = max(v.num_frames for v in videos)
    d_v = videos[0].frames.shape[1]
    frames = torch.zeros((len(videos), L, d_v))
    mask = torch.zeros((len(videos), L), dtype=torch.bool)
    for i, v in enumerate(videos):
        n = v.num_frames
        frames[i, :n] = torch.from_numpy(np.ascontiguousarray(v.frames))
        mask[i, :n] = True
    return frames, mask


def mask_batch(sequences, rate: float, seed: int, step: int, vocab):
    rng = np.random.default_rng((seed, step, 0xA5))
    return [apply_mlm_mask(s, rate, rng, vocab) for s in sequences]


def _negative_indices(n: int, generator: torch.Generator) -> torch.Tensor:
    """One uniform in-batch negative per sample, never itself."""
    r = torch.randint(0, n - 1, (n,), generator=generator)
    arange = torch.arange(n)
    return r + (r >= arange).long()


# ---------------------------------------------------------------------------
# checkpointing

def save_checkpoint(module: torch.nn.Module, optim: AdamW | None, path,
                    config: dict) -> None:
    """VLKC dump of module tensors, optimizer moments, and a config snapshot."""
    tensors = {name: t.detach().cpu().numpy()
               for name, t in module.state_dict().items()}
    step = 0
    if optim is not None:
        params = {id(p): name for name, p in module.named_parameters()}
        for group in optim.param_groups:
            for p in group["params"]:
                state = optim.state.get(p)
                if not state:
                    continue
                name = params[id(p)]
                tensors[f"optim.{name}.exp_avg"] = state["exp_avg"].cpu().numpy()
                tensors[f"optim.{name}.exp_avg_sq"] = state["exp_avg_sq"].cpu().numpy()
                step = state["step"]
    save_tensors(path, tensors, {**config, "optim_step": step})


def load_checkpoint(path):
    """Returns (module tensors, optimizer-moment tensors, config dict)."""
    tensors, config = load_tensors(path)
    module_t, optim_t = {}, {}
    for name, arr in tensors.items():
        if name.startswith("optim."):
            optim_t[name[len("optim."):]] = arr
        else:
            module_t[name] = arr
    return module_t, optim_t, config


def _restore(module: torch.nn.Module, optim: AdamW | None, module_t: dict,
             optim_t: dict, optim_step: int) -> None:
    module.load_state_dict({k: torch.from_numpy(v) for k, v in module_t.items()})
    if optim is None:
        return
    names = dict(module.named_parameters())
    for name, p in names.items():
        ea = optim_t.get(f"{name}.exp_avg")
        if ea is None:
            continue
        optim.state[p] = {
            "step": optim_step,
            "exp_avg": torch.from_numpy(optim_t[f"{name}.exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(optim_t[f"{name}.exp_avg_sq"].copy()),
        }


def parameter_hash(module: torch.nn.Module) -> str:
    import hashlib
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().astype("<f4").tobytes())
    return h.hexdigest()


class StepLogger:
    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "w")

    def log(self, record: dict) -> None:
        self.records.append(record)
        if self.path:
            self._fh.write(json.dumps(record) + "\n")
            self._fh.flush()

    def close(self):
        if self.path:
            self._fh.close()


# ---------------------------------------------------------------------------
# stage 1: teacher

def teacher_step_losses(teacher: TeacherModel, batch_samples, masked, cfg,
                        step: int):
    """Contrastive + MLM losses for one batch (batch-mean reductions)."""
    ids, tmask = collate_ids(masked)
    frames, vmask = collate_frames([s.video for s in batch_samples])
    h_text = teacher.lang(ids, tmask)
    h_vid = teacher.vis(frames, vmask)
    v_bar = pool_video(h_vid, vmask)                           # (B, d)
    logits = teacher.lang.lm_logits(h_text)

    g = torch.Generator().manual_seed(_step_seed(cfg.seed, step))
    B = len(batch_samples)
    neg_text = _negative_indices(B, g)
    neg_vid = _negative_indices(B, g)

    ct_terms, mlm_terms = [], []
    for i in range(B):
        n_i = masked[i].length
        j = int(neg_text[i])
        ct_terms.append(contrastive_hinge_loss(
            h_text[i, 1:1 + n_i], h_text[j, 1:1 + masked[j].length],
            v_bar[i], v_bar[int(neg_vid[i])], margin=cfg.margin))
        mlm_terms.append(mlm_loss(logits[i], masked[i].mask_positions,
                                  masked[i].original_ids))
    ct = torch.stack(ct_terms).mean()
    mlm = torch.stack(mlm_terms).mean()
    return ct, mlm


def train_teacher(dataset, cfg: TrainRunConfig, out_dir=None, resume=None,
                  log_path=None):
    """Stage-1 pretraining on paired data; returns (teacher, step records)."""
    vocab = dataset.vocab
    lang_cfg = EncoderConfig.from_preset(cfg.preset, vocab_size=len(vocab),
                                         max_positions=129)
    d_v = dataset.samples[0].video.frames.shape[1]
    vis_cfg = EncoderConfig.from_preset(cfg.preset, d_v=d_v, max_positions=512)
    teacher = build_teacher(lang_cfg, vis_cfg, cfg.seed)
    name_parameters(teacher)
    optim = AdamW(teacher.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps,
                  weight_decay=cfg.weight_decay)
    start = 0
    ckpt_config = {"stage": "teacher", "lang": lang_cfg.to_dict(),
                   "vis": vis_cfg.to_dict(), "seed": cfg.seed}
    if resume is not None:
        module_t, optim_t, rc = load_checkpoint(resume)
        _restore(teacher, optim, module_t, optim_t, rc["optim_step"])
        start = rc["step"]

    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    logger = StepLogger(log_path)
    last_good = out_dir / "teacher.vlkc" if out_dir else None
    if last_good and start == 0:
        save_checkpoint(teacher, optim, last_good, {**ckpt_config, "step": 0})

    n = len(dataset.samples)
    for step in range(start, cfg.steps):
        idx = batch_for_step(n, cfg.batch_size, cfg.seed, step)
        batch = [dataset.samples[i] for i in idx]
        masked = mask_batch([s.text for s in batch], cfg.mask_rate, cfg.seed,
                            step, vocab)
        ct, mlm = teacher_step_losses(teacher, batch, masked, cfg, step)
        loss = teacher_loss(ct, mlm, cfg.w_contrastive, cfg.w_mlm)
        if not torch.isfinite(loss):
            logger.close()
            raise DivergenceError(
                f"non-finite teacher loss at step {step}"
                + (f"; last good checkpoint at {last_good}" if last_good else ""))
        for group in optim.param_groups:
            group["lr"] = cfg.lr_at(step)
        optim.zero_grad()
        loss.backward()
        if cfg.grad_clip > 0:
            clip_grad_norm(teacher.parameters(), cfg.grad_clip)
        optim.step()
        logger.log({"step": step, "stage": "teacher",
                    "losses": {"contrastive": ct.item(), "mlm": mlm.item(),
                               "total": loss.item()},
                    "lr": cfg.lr_at(step), "seed": cfg.seed})
        if last_good and (step + 1) % cfg.eval_every == 0:
            save_checkpoint(teacher, optim, last_good,
                            {**ckpt_config, "step": step + 1})
    if last_good:
        save_checkpoint(teacher, optim, last_good,
                        {**ckpt_config, "step": cfg.steps})
    logger.close()
    return teacher, logger.records


def load_teacher(path) -> TeacherModel:
    module_t, _, rc = load_checkpoint(path)
    teacher = TeacherModel(EncoderConfig(**rc["lang"]), EncoderConfig(**rc["vis"]))
    teacher.load_state_dict({k: torch.from_numpy(v) for k, v in module_t.items()})
    return teacher


# ---------------------------------------------------------------------------
# stage 2: student distillation

class StudentBundle(torch.nn.Module):
    """Everything trainable in stage 2: the student plus CRD projections."""

    def __init__(self, student: LanguageEncoder, crd: CRDState | None):
        super().__init__()
        self.student = student
        if crd is not None:
            self.crd = crd

    @property
    def crd_state(self):
        return getattr(self, "crd", None)


def student_features(student, h_s, use_head: bool):
    return student.distill(h_s) if use_head and student.has_distill_head else h_s


def distill_step_losses(teacher, bundle: StudentBundle, texts, masked,
                        cfg: TrainRunConfig, step: int,
                        voken_bank: VokenBank | None):
    kd = cfg.kd
    student = bundle.student
    ids, tmask = collate_ids(masked)
    with torch.no_grad():
        h_t = teacher.lang(ids, tmask)
        t_logits = teacher.lang.lm_logits(h_t)
    h_s = student(ids, tmask)
    s_logits = student.lm_logits(h_s)

    g = torch.Generator().manual_seed(_step_seed(cfg.seed, step))
    B = len(masked)
    n_neg = kd.n_negatives or B
    mlm_terms = []
    kd_terms = {name: [] for name in kd.objectives}
    for i in range(B):
        n_i = masked[i].length
        sample_index = texts[i][0]
        mlm_terms.append(mlm_loss(s_logits[i], masked[i].mask_positions,
                                  masked[i].original_ids))
        t_c = h_t[i, 1:1 + n_i]
        s_c = h_s[i, 1:1 + n_i]
        s_feat = student_features(student, s_c, kd.use_distill_head)
        for name in kd.objectives:
            if name == "soft_label":
                v = soft_label_loss(t_logits[i, 1:1 + n_i], s_logits[i, 1:1 + n_i],
                                    kd.tau, kd.reduction)
            elif name == "l2_regression":
                v = l2_regression_loss(s_feat, t_c, kd.reduction)
            elif name == "nst":
                v = nst_mmd2(s_feat, t_c, kd.sigma, kd.nst_normalize)
            elif name == "crd":
                neg = sample_crd_negatives(bundle.crd_state, sample_index, n_neg, g)
                v = crd_loss(s_feat, t_c, sample_index, bundle.crd_state,
                             n_neg, neg_indices=neg, reduction=kd.reduction)
            elif name == "voken":
                assignment = assign_vokens(t_c, voken_bank)
                v = voken_loss(student.voken_logits(s_c), assignment, kd.reduction)
            kd_terms[name].append(v)
    mlm = torch.stack(mlm_terms).mean()
    kd_values = {name: torch.stack(terms).mean() for name, terms in kd_terms.items()}
    total = combined_student_loss(mlm, kd_values, kd)
    t_means = h_t.detach()  # per-sample teacher means for the buffer update
    return total, mlm, kd_values, t_means, tmask


def distill_student(teacher: TeacherModel, texts, cfg: TrainRunConfig,
                    out_dir=None, resume=None, log_path=None,
                    voken_bank: VokenBank | None = None):
    """Stage-2 distillation on text; `texts` is a list of (sample_index, TokenSequence).

    The teacher is frozen. Returns (bundle, step records).
    """
    kd = cfg.kd
    if "voken" in kd.objectives and voken_bank is None:
        raise ValueError("voken objective enabled but no voken bank provided")
    teacher = teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)

    lang_cfg = teacher.lang.config
    student = build_student(lang_cfg, cfg.seed + 1,
                            distill_head=kd.use_distill_head,
                            voken_bank_size=len(voken_bank) if voken_bank else 0)
    m = kd.dataset_size or len(texts)
    crd = CRDState(lang_cfg.d_hidden, m, kd.d_proj, seed=cfg.seed + 2) \
        if "crd" in kd.objectives else None
    bundle = StudentBundle(student, crd)
    name_parameters(bundle)
    optim = AdamW(bundle.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps,
                  weight_decay=cfg.weight_decay)
    start = 0
    ckpt_config = {"stage": "student", "lang": lang_cfg.to_dict(),
                   "seed": cfg.seed, "use_distill_head": kd.use_distill_head,
                   "crd_m": m if crd is not None else 0,
                   "d_proj": crd.d_proj if crd is not None else 0,
                   "voken_bank_size": len(voken_bank) if voken_bank else 0}
    if resume is not None:
        module_t, optim_t, rc = load_checkpoint(resume)
        _restore(bundle, optim, module_t, optim_t, rc["optim_step"])
        start = rc["step"]

    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    logger = StepLogger(log_path)
    last_good = out_dir / "student.vlkc" if out_dir else None
    if last_good and start == 0:
        save_checkpoint(bundle, optim, last_good, {**ckpt_config, "step": 0})

    n = len(texts)
    vocab_holder = _VocabShim(lang_cfg.vocab_size)
    for step in range(start, cfg.steps):
        idx = batch_for_step(n, cfg.batch_size, cfg.seed, step)
        batch = [texts[i] for i in idx]
        masked = mask_batch([t[1] for t in batch], cfg.mask_rate, cfg.seed,
                            step, vocab_holder)
        total, mlm, kd_values, h_t, tmask = distill_step_losses(
            teacher, bundle, batch, masked, cfg, step, voken_bank)
        if not torch.isfinite(total):
            logger.close()
            raise DivergenceError(
                f"non-finite student loss at step {step}"
                + (f"; last good checkpoint at {last_good}" if last_good else ""))
        for group in optim.param_groups:
            group["lr"] = cfg.lr_at(step)
        optim.zero_grad()
        total.backward()
        if cfg.grad_clip > 0:
            clip_grad_norm(bundle.parameters(), cfg.grad_clip)
        optim.step()
        if crd is not None:
            for i, (sample_index, _) in enumerate(batch):
                n_i = masked[i].length
                t_mean = h_t[i, 1:1 + n_i].mean(dim=0)
                crd_buffer_update(crd, sample_index, t_mean, kd.crd_momentum)
        logger.log({"step": step, "stage": "student",
                    "losses": {"mlm": mlm.item(), "total": total.item(),
                               **{k: v.item() for k, v in kd_values.items()}},
                    "lr": cfg.lr_at(step), "seed": cfg.seed})
        if last_good and (step + 1) % cfg.eval_every == 0:
            save_checkpoint(bundle, optim, last_good,
                            {**ckpt_config, "step": step + 1})
    if last_good:
        save_checkpoint(bundle, optim, last_good,
                        {**ckpt_config, "step": cfg.steps})
    logger.close()
    return bundle, logger.records


class _VocabShim:
    """Just enough vocabulary for masking: the [MASK] id."""

    def __init__(self, vocab_size: int, mask_id: int = 2):
        self.mask_id = mask_id
        self.size = vocab_size


def load_student(path) -> StudentBundle:
    module_t, _, rc = load_checkpoint(path)
    student = LanguageEncoder(EncoderConfig(**rc["lang"]),
                              distill_head=rc.get("use_distill_head", True),
                              voken_bank_size=rc.get("voken_bank_size", 0))
    crd = CRDState(student.config.d_hidden, rc["crd_m"], rc["d_proj"]) \
        if rc.get("crd_m") else None
    bundle = StudentBundle(student, crd)
    bundle.load_state_dict({k: torch.from_numpy(v) for k, v in module_t.items()})
    return bundle
