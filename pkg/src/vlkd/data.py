"""Corpus ingestion, tokenization, MLM masking, and synthetic paired data.

The tokenizer is deliberately simple (lowercase + whitespace split): the
losses downstream only need token ids, not subword fidelity.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .formats import load_matrix, save_matrix

CLS_TOKEN = "[CLS]"
MASK_TOKEN = "[MASK]"
PAD_TOKEN = "[PAD]"
UNK_TOKEN = "[UNK]"
SPECIAL_TOKENS = (PAD_TOKEN, CLS_TOKEN, MASK_TOKEN, UNK_TOKEN)

MAX_CONTENT_TOKENS = 128
MAX_FRAMES = 512


@dataclass(frozen=True)
class Vocabulary:
    token_to_id: dict
    pad_id: int
    cls_id: int
    mask_id: int
    unk_id: int

    def __len__(self):
        return len(self.token_to_id)

    @property
    def id_to_token(self):
        return {i: t for t, i in self.token_to_id.items()}


@dataclass(frozen=True)
class TokenSequence:
    """Token ids with [CLS] at position 0; `length` counts content tokens only."""

    ids: tuple

    @property
    def length(self) -> int:
        return len(self.ids) - 1

    def __post_init__(self):
        if len(self.ids) > 1 + MAX_CONTENT_TOKENS:
            raise ValueError(f"sequence exceeds {1 + MAX_CONTENT_TOKENS} positions")


@dataclass(frozen=True)
class MaskedSequence:
    ids: tuple
    mask_positions: tuple
    original_ids: tuple  # pre-mask ids at mask_positions, same order

    @property
    def length(self) -> int:
        return len(self.ids) - 1


@dataclass(frozen=True)
class VideoFeatures:
    frames: np.ndarray  # |v| x d_v, f32, finite
    source_id: str

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class PairedSample:
    text: TokenSequence
    video: VideoFeatures
    sample_index: int


def build_vocab(corpus: str, min_freq: int = 1) -> Vocabulary:
    """Build a vocabulary from line-delimited text.

    Tokens are lowercased whitespace splits kept when their corpus frequency
    reaches `min_freq`; the four special tokens occupy ids 0..3.
    """
    counts = Counter()
    for line in corpus.splitlines():
        counts.update(line.lower().split())
    if not counts:
        raise ValueError("empty corpus")
    kept = sorted(t for t, c in counts.items() if c >= min_freq)
    token_to_id = {t: i for i, t in enumerate(SPECIAL_TOKENS)}
    for t in kept:
        token_to_id[t] = len(token_to_id)
    return Vocabulary(token_to_id, pad_id=0, cls_id=1, mask_id=2, unk_id=3)


def tokenize(text: str, vocab: Vocabulary) -> TokenSequence:
    """Lowercase, whitespace-split, map OOV to [UNK], truncate to 128 content tokens."""
    words = text.lower().split()[:MAX_CONTENT_TOKENS]
    ids = [vocab.cls_id] + [vocab.token_to_id.get(w, vocab.unk_id) for w in words]
    return TokenSequence(tuple(ids))


def detokenize(seq: TokenSequence, vocab: Vocabulary) -> str:
    id_to_token = vocab.id_to_token
    return " ".join(id_to_token[i] for i in seq.ids[1:])


def apply_mlm_mask(seq: TokenSequence, rate: float, rng: np.random.Generator,
                   vocab: Vocabulary) -> MaskedSequence:
    """Replace round(rate*|x|) content tokens (min 1) with [MASK].

    Positions are drawn uniformly without replacement; [CLS] is never masked.
    """
    if not 0.0 < rate < 1.0:
        raise ValueError(f"mask rate must be in (0, 1), got {rate}")
    n = seq.length
    if n == 0:
        raise ValueError("nothing to mask")
    k = max(1, round(rate * n))
    positions = tuple(sorted(rng.choice(np.arange(1, n + 1), size=k, replace=False).tolist()))
    ids = list(seq.ids)
    original = tuple(ids[p] for p in positions)
    for p in positions:
        ids[p] = vocab.mask_id
    return MaskedSequence(tuple(ids), positions, original)


def load_video_features(path, source_id: str | None = None) -> VideoFeatures:
    """Load a VLKD feature file, truncating to 512 frames."""
    mat = load_matrix(path)
    return VideoFeatures(mat[:MAX_FRAMES], source_id or str(path))


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs for the synthetic grounded video-text generator.

    Each vocabulary token owns a latent visual prototype; every frame of a
    sample is a convex mixture of its sentence's token prototypes plus
    Gaussian noise, so text-video alignment has a known answer key.
    """

    num_samples: int = 256
    vocab_size: int = 80
    sentence_len: tuple = (2, 5)
    d_v: int = 64
    frames: tuple = (8, 24)
    noise: float = 0.0
    num_clusters: int = 4
    cluster_strength: float = 0.55  # within-cluster prototype cosine ~ strength^2


@dataclass
class SyntheticDataset:
    samples: list
    vocab: Vocabulary
    prototypes: np.ndarray       # vocab_size x d_v unit rows, indexed by word number
    token_cluster: np.ndarray    # vocab_size ints in [0, num_clusters)
    config: SyntheticConfig
    sentences: list = field(default_factory=list)

    def __len__(self):
        return len(self.samples)


def _word(i: int) -> str:
    return f"w{i:03d}"


def make_prototypes(cfg: SyntheticConfig, rng: np.random.Generator):
    """Unit prototype per token, correlated within its cluster."""
    centers = rng.standard_normal((cfg.num_clusters, cfg.d_v))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    clusters = np.arange(cfg.vocab_size) % cfg.num_clusters
    rho = cfg.cluster_strength
    own = rng.standard_normal((cfg.vocab_size, cfg.d_v))
    own /= np.linalg.norm(own, axis=1, keepdims=True)
    protos = rho * centers[clusters] + np.sqrt(1.0 - rho * rho) * own
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    return protos.astype(np.float32), clusters


def sentence_words(cfg: SyntheticConfig, rng: np.random.Generator) -> list:
    lo, hi = cfg.sentence_len
    n = int(rng.integers(lo, hi + 1))
    return [_word(int(i)) for i in rng.integers(0, cfg.vocab_size, size=n)]


def render_frames(word_ids, cfg: SyntheticConfig, prototypes, rng: np.random.Generator):
    """Frames as Dirichlet-weighted prototype mixtures plus isotropic noise."""
    lo, hi = cfg.frames
    n_frames = int(rng.integers(lo, hi + 1))
    w = rng.dirichlet(np.ones(len(word_ids)), size=n_frames).astype(np.float32)
    frames = w @ prototypes[word_ids]
    if cfg.noise > 0:
        frames = frames + cfg.noise * rng.standard_normal(frames.shape).astype(np.float32)
    return frames.astype(np.float32)


def gen_synthetic_pairs(cfg: SyntheticConfig, seed: int) -> SyntheticDataset:
    """Generate M aligned (text, video) pairs; deterministic given seed."""
    if cfg.num_samples < 2:
        raise ValueError("need at least 2 samples for in-batch contrastive negatives")
    rng = np.random.default_rng(seed)
    prototypes, clusters = make_prototypes(cfg, rng)
    corpus_lines = [" ".join(sentence_words(cfg, rng)) for _ in range(cfg.num_samples)]
    vocab = build_vocab("\n".join([" ".join(_word(i) for i in range(cfg.vocab_size))] + corpus_lines))
    samples = []
    for idx, line in enumerate(corpus_lines):
        word_ids = np.array([int(w[1:]) for w in line.split()])
        frames = render_frames(word_ids, cfg, prototypes, rng)
        video = VideoFeatures(frames, source_id=f"synth-{idx:05d}")
        samples.append(PairedSample(tokenize(line, vocab), video, idx))
    return SyntheticDataset(samples, vocab, prototypes, clusters, cfg, corpus_lines)


def save_dataset(dataset: SyntheticDataset, out_dir) -> list:
    """Write corpus, VLKD feature files, pairing index, and the grounding map.

    Returns the list of written paths (relative to out_dir).
    """
    import json
    from pathlib import Path

    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    written = []

    def _write_text(rel, text):
        (out / rel).write_text(text)
        written.append(rel)

    _write_text("corpus.txt", "".join(line + "\n" for line in dataset.sentences))
    cfg = dataset.config
    _write_text("config.json", json.dumps({
        "num_samples": cfg.num_samples, "vocab_size": cfg.vocab_size,
        "sentence_len": list(cfg.sentence_len), "d_v": cfg.d_v,
        "frames": list(cfg.frames), "noise": cfg.noise,
        "num_clusters": cfg.num_clusters}, indent=2))
    save_matrix(out / "grounding.vlkd", dataset.prototypes)
    written.append("grounding.vlkd")
    _write_text("grounding_tokens.txt",
                "".join(_word(i) + "\n" for i in range(cfg.vocab_size)))
    _write_text("clusters.json", json.dumps(dataset.token_cluster.tolist()))
    pairs = []
    for s in dataset.samples:
        rel = f"features/{s.sample_index:05d}.vlkd"
        save_matrix(out / rel, s.video.frames)
        written.append(rel)
        pairs.append({"sample_index": s.sample_index,
                      "text_line": s.sample_index,
                      "feature_file": rel,
                      "source_id": s.video.source_id})
    _write_text("pairs.json", json.dumps(pairs, indent=2))
    return written


def load_dataset(data_dir) -> SyntheticDataset:
    """Load a generated dataset directory back into memory."""
    import json
    from pathlib import Path

    d = Path(data_dir)
    if not (d / "pairs.json").exists():
        raise FileNotFoundError(f"missing pairing index {d / 'pairs.json'}")
    cfg = SyntheticConfig(**{k: tuple(v) if isinstance(v, list) else v
                             for k, v in json.loads((d / "config.json").read_text()).items()})
    lines = (d / "corpus.txt").read_text().splitlines()
    tokens = (d / "grounding_tokens.txt").read_text().split()
    vocab = build_vocab("\n".join([" ".join(tokens)] + lines))
    prototypes = load_matrix(d / "grounding.vlkd")
    clusters = np.array(json.loads((d / "clusters.json").read_text()))
    samples = []
    for p in json.loads((d / "pairs.json").read_text()):
        video = load_video_features(d / p["feature_file"], source_id=p["source_id"])
        samples.append(PairedSample(tokenize(lines[p["text_line"]], vocab),
                                    video, p["sample_index"]))
    return SyntheticDataset(samples, vocab, prototypes, clusters, cfg, lines)
