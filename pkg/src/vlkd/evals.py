"""Evaluation: text-to-video retrieval, synthetic probe tasks, and
teacher-student agreement metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .data import SyntheticDataset, TokenSequence, tokenize, _word
from .encoder import pool_video
from .trainer import collate_frames, collate_ids


@dataclass
class RetrievalResult:
    query_id: str
    ranked: list          # [(video_id, score)] non-increasing
    gt_rank: int | None   # 1-based rank of the ground-truth video, if known

    def to_dict(self):
        return {"query_id": self.query_id,
                "topk": [{"video_id": v, "score": s} for v, s in self.ranked],
                "gt_rank": self.gt_rank}


def sentence_embedding(model, seq: TokenSequence, include_cls: bool = False) -> torch.Tensor:
    """Mean of last hidden states over content positions ([CLS] excluded by default)."""
    if seq.length == 0 and not include_cls:
        raise ValueError("no content tokens to embed")
    ids, mask = collate_ids([seq])
    with torch.no_grad():
        h = model(ids, mask)[0]
    lo = 0 if include_cls else 1
    return h[lo:1 + seq.length].mean(dim=0)


def embed_dataset_videos(teacher, dataset: SyntheticDataset):
    """Pooled visual-encoder embeddings for every video; returns (vectors, ids)."""
    videos = [s.video for s in dataset.samples]
    frames, mask = collate_frames(videos)
    with torch.no_grad():
        h = teacher.vis(frames, mask)
    vecs = pool_video(h, mask)
    return vecs, [v.source_id for v in videos]


def retrieve_videos(model, seq: TokenSequence, bank_vectors: torch.Tensor,
                    bank_ids, k: int, query_id: str = "",
                    gt_id: str | None = None) -> RetrievalResult:
    """Top-k by cosine over the whole bank; ties break toward the lowest index."""
    if bank_vectors.shape[0] == 0:
        raise ValueError("empty video bank")
    if k > bank_vectors.shape[0]:
        raise ValueError(f"k={k} exceeds bank size {bank_vectors.shape[0]}")
    q = sentence_embedding(model, seq)
    sims = F.normalize(bank_vectors, dim=-1) @ F.normalize(q, dim=0)
    # stable ordering: sort by (-score, index)
    order = sorted(range(len(bank_ids)), key=lambda i: (-float(sims[i]), i))
    ranked = [(bank_ids[i], float(sims[i])) for i in order[:k]]
    gt_rank = None
    if gt_id is not None:
        gt_rank = next(r + 1 for r, i in enumerate(order) if bank_ids[i] == gt_id)
    return RetrievalResult(query_id, ranked, gt_rank)


def recall_at_k(model, dataset: SyntheticDataset, teacher, k: int = 1):
    """Fraction of samples whose own video ranks within the top k."""
    vecs, ids = embed_dataset_videos(teacher, dataset)
    hits = 0
    results = []
    for s in dataset.samples:
        res = retrieve_videos(model, s.text, vecs, ids, k=k,
                              query_id=f"q{s.sample_index:05d}",
                              gt_id=s.video.source_id)
        results.append(res)
        hits += res.gt_rank <= k
    return hits / len(dataset.samples), results


def build_voken_bank(teacher, dataset: SyntheticDataset, k: int, seed: int):
    """Bank of k pooled video embeddings: one per prototype cluster first
    (diversity), remainder drawn uniformly from the rest."""
    from .kd_losses import VokenBank

    vecs, ids = embed_dataset_videos(teacher, dataset)
    if k < 2 or k > len(ids):
        raise ValueError(f"bank size {k} out of range [2, {len(ids)}]")
    dominant = []
    for s in dataset.samples:
        token_ids = [int(dataset.vocab.id_to_token[i][1:]) for i in s.text.ids[1:]]
        counts = np.bincount(dataset.token_cluster[token_ids],
                             minlength=dataset.config.num_clusters)
        dominant.append(int(counts.argmax()))
    chosen = []
    for c in range(dataset.config.num_clusters):
        if len(chosen) >= k:
            break
        match = next((i for i, d in enumerate(dominant) if d == c and i not in chosen), None)
        if match is not None:
            chosen.append(match)
    rng = np.random.default_rng((seed, 0xB0))
    rest = [i for i in range(len(ids)) if i not in chosen]
    chosen += list(rng.choice(rest, size=k - len(chosen), replace=False))
    chosen = sorted(chosen)
    return VokenBank(vecs[chosen], [ids[i] for i in chosen])


@dataclass
class ProbeTask:
    """Sentences labeled by their dominant prototype cluster."""

    train_seqs: list
    train_labels: np.ndarray
    test_seqs: list
    test_labels: np.ndarray
    num_classes: int


def make_probe_task(dataset: SyntheticDataset, seed: int, n_train: int = 120,
                    n_test: int = 60, dominant_frac: float = 0.7) -> ProbeTask:
    """Generate balanced labeled sentences from the synthetic grounding map.

    Each sentence draws `dominant_frac` of its tokens from one cluster's
    vocabulary and the rest uniformly, so the label is recoverable from any
    representation that encodes the grounding.
    """
    cfg = dataset.config
    c = cfg.num_clusters
    if c < 2:
        raise ValueError("probe task needs at least 2 classes")
    rng = np.random.default_rng((seed, 0x9E))
    by_cluster = [np.flatnonzero(dataset.token_cluster == i) for i in range(c)]

    def gen(n):
        seqs, labels = [], []
        for i in range(n):
            label = i % c
            lo, hi = 6, 10  # longer than dataset sentences so labels are clear
            length = int(rng.integers(lo, hi + 1))
            n_dom = max(1, round(dominant_frac * length))
            words = list(rng.choice(by_cluster[label], size=n_dom))
            words += list(rng.integers(0, cfg.vocab_size, size=length - n_dom))
            rng.shuffle(words)
            seqs.append(tokenize(" ".join(_word(int(w)) for w in words), dataset.vocab))
            labels.append(label)
        return seqs, np.array(labels)

    train_seqs, train_labels = gen(n_train)
    test_seqs, test_labels = gen(n_test)
    return ProbeTask(train_seqs, train_labels, test_seqs, test_labels, c)


def fit_linear_probe(x_train: torch.Tensor, y_train: torch.Tensor,
                     x_test: torch.Tensor, y_test: torch.Tensor,
                     num_classes: int, steps: int = 500, lr: float = 0.1) -> float:
    """Zero-init softmax regression by full-batch gradient descent; returns
    test accuracy. Deterministic, and equivariant to orthogonal rotations of
    the features."""
    d = x_train.shape[1]
    w = torch.zeros(d, num_classes, dtype=x_train.dtype)
    b = torch.zeros(num_classes, dtype=x_train.dtype)
    for _ in range(steps):
        logits = x_train @ w + b
        p = logits.softmax(dim=-1)
        p[torch.arange(len(y_train)), y_train] -= 1.0
        p /= len(y_train)
        w -= lr * (x_train.t() @ p)
        b -= lr * p.sum(dim=0)
    pred = (x_test @ w + b).argmax(dim=-1)
    return float((pred == y_test).float().mean())


def probe_eval(model, task: ProbeTask, steps: int = 500, lr: float = 0.1) -> float:
    """Linear probe over frozen sentence embeddings."""
    if len(set(task.train_labels.tolist())) < 2:
        raise ValueError("probe task must contain at least 2 classes")
    x_train = torch.stack([sentence_embedding(model, s) for s in task.train_seqs])
    x_test = torch.stack([sentence_embedding(model, s) for s in task.test_seqs])
    return fit_linear_probe(x_train, torch.from_numpy(task.train_labels).long(),
                            x_test, torch.from_numpy(task.test_labels).long(),
                            task.num_classes, steps, lr)


def mean_probe_accuracy(model, dataset: SyntheticDataset, base_seed: int = 1000,
                        n_tasks: int = 5, n_train: int = 200,
                        n_test: int = 200) -> float:
    """Probe accuracy averaged over several independent task draws.

    A single probe task draw carries a few points of sampling noise in its
    train/test split; averaging over draws measures the encoder rather than
    the draw.
    """
    accs = [probe_eval(model, make_probe_task(dataset, seed=base_seed + t,
                                              n_train=n_train, n_test=n_test))
            for t in range(n_tasks)]
    return float(np.mean(accs))


def agreement_metrics(student, teacher, seqs, use_distill_head: bool = True) -> dict:
    """Mean per-token L2 distance and cosine between student and teacher states.

    Student states are taken after the distillation head when present.
    """
    ids, mask = collate_ids(seqs)
    with torch.no_grad():
        h_t = teacher.lang(ids, mask)
        h_s = student(ids, mask)
        if use_distill_head and student.has_distill_head:
            h_s = student.distill(h_s)
    l2s, coss = [], []
    for i, s in enumerate(seqs):
        t_c = h_t[i, 1:1 + s.length]
        s_c = h_s[i, 1:1 + s.length]
        l2s.append((s_c - t_c).norm(dim=-1))
        coss.append(F.cosine_similarity(s_c, t_c, dim=-1))
    return {"mean_token_l2": float(torch.cat(l2s).mean()),
            "mean_token_cos": float(torch.cat(coss).mean())}
