from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vlkd.data import (MAX_CONTENT_TOKENS, SyntheticConfig, apply_mlm_mask,
                       build_vocab, detokenize, gen_synthetic_pairs,
                       load_dataset, load_video_features, save_dataset,
                       tokenize)
from vlkd.formats import save_matrix


def test_build_vocab_basic():
    v = build_vocab("a b a")
    assert len(v) == 6
    assert {"a", "b"} <= set(v.token_to_id)


def test_build_vocab_min_freq():
    v = build_vocab("a b a", min_freq=2)
    assert "a" in v.token_to_id and "b" not in v.token_to_id
    assert len(v) == 5


def test_build_vocab_empty():
    with pytest.raises(ValueError, match="empty corpus"):
        build_vocab("   \n  ")


def test_build_vocab_matches_counting_oracle():
    rng = np.random.default_rng(42)
    lines = [" ".join(f"tok{i}" for i in rng.integers(0, 200, size=8))
             for _ in range(1000)]
    corpus = "\n".join(lines)
    counts = Counter(w for line in lines for w in line.split())
    expected = sum(1 for c in counts.values() if c >= 3)
    v = build_vocab(corpus, min_freq=3)
    assert len(v) == expected + 4


def test_tokenize_empty():
    v = build_vocab("a b")
    seq = tokenize("", v)
    assert seq.ids == (v.cls_id,)
    assert seq.length == 0


def test_tokenize_lookup_and_unk():
    v = build_vocab("a b")
    seq = tokenize("a zzz B", v)
    assert seq.ids == (v.cls_id, v.token_to_id["a"], v.unk_id, v.token_to_id["b"])


def test_tokenize_truncates_to_128():
    v = build_vocab("a")
    seq = tokenize(" ".join(["a"] * 200), v)
    assert len(seq.ids) == 1 + MAX_CONTENT_TOKENS


def test_detokenize_round_trip():
    v = build_vocab("alpha beta gamma")
    text = "alpha gamma beta beta"
    assert detokenize(tokenize(text, v), v) == text


def test_mask_counts():
    v = build_vocab(" ".join(f"t{i}" for i in range(30)))
    seq = tokenize(" ".join(f"t{i}" for i in range(20)), v)
    masked = apply_mlm_mask(seq, 0.15, np.random.default_rng(0), v)
    assert len(masked.mask_positions) == 3


def test_mask_minimum_one():
    v = build_vocab("a b")
    seq = tokenize("a", v)
    masked = apply_mlm_mask(seq, 0.15, np.random.default_rng(0), v)
    assert len(masked.mask_positions) == 1


def test_mask_deterministic():
    v = build_vocab(" ".join(f"t{i}" for i in range(30)))
    seq = tokenize(" ".join(f"t{i}" for i in range(20)), v)
    m1 = apply_mlm_mask(seq, 0.15, np.random.default_rng(7), v)
    m2 = apply_mlm_mask(seq, 0.15, np.random.default_rng(7), v)
    assert m1.mask_positions == m2.mask_positions


def test_mask_empty_errors():
    v = build_vocab("a")
    with pytest.raises(ValueError, match="nothing to mask"):
        apply_mlm_mask(tokenize("", v), 0.15, np.random.default_rng(0), v)


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 40), rate=st.floats(0.05, 0.9), seed=st.integers(0, 1000))
def test_mask_properties(n, rate, seed):
    v = build_vocab(" ".join(f"t{i}" for i in range(40)))
    seq = tokenize(" ".join(f"t{i}" for i in range(n)), v)
    masked = apply_mlm_mask(seq, rate, np.random.default_rng(seed), v)
    assert len(masked.mask_positions) == max(1, round(rate * n))
    assert 0 not in masked.mask_positions  # [CLS] never masked
    assert all(1 <= p <= n for p in masked.mask_positions)
    # ids differ from the source exactly at mask positions
    for i, (a, b) in enumerate(zip(seq.ids, masked.ids)):
        if i in masked.mask_positions:
            assert b == v.mask_id
        else:
            assert a == b
    assert masked.original_ids == tuple(seq.ids[p] for p in masked.mask_positions)


def test_video_truncation(tmp_path):
    p = tmp_path / "v.vlkd"
    save_matrix(p, np.random.default_rng(0).standard_normal((600, 4)).astype(np.float32))
    vf = load_video_features(p)
    assert vf.num_frames == 512


def test_synth_requires_two_samples():
    with pytest.raises(ValueError):
        gen_synthetic_pairs(SyntheticConfig(num_samples=1), seed=0)


def test_synth_deterministic():
    cfg = SyntheticConfig(num_samples=64)
    a = gen_synthetic_pairs(cfg, seed=3)
    b = gen_synthetic_pairs(cfg, seed=3)
    assert a.sentences == b.sentences
    for sa, sb in zip(a.samples, b.samples):
        assert np.array_equal(sa.video.frames, sb.video.frames)
        assert sa.text.ids == sb.text.ids


def test_synth_single_token_zero_noise_frame_is_prototype():
    cfg = SyntheticConfig(num_samples=8, sentence_len=(1, 1), noise=0.0)
    ds = gen_synthetic_pairs(cfg, seed=5)
    for s in ds.samples:
        word_id = int(ds.vocab.id_to_token[s.text.ids[1]][1:])
        proto = ds.prototypes[word_id]
        assert np.allclose(s.video.frames, proto[None, :], atol=1e-6)


def _mixture(ds, sample):
    word_ids = [int(ds.vocab.id_to_token[i][1:]) for i in sample.text.ids[1:]]
    return ds.prototypes[word_ids].mean(axis=0)


def test_synth_aligned_beats_mismatched():
    ds = gen_synthetic_pairs(SyntheticConfig(num_samples=64), seed=9)
    mix = np.stack([_mixture(ds, s) for s in ds.samples])
    vid = np.stack([s.video.frames.mean(axis=0) for s in ds.samples])
    mix /= np.linalg.norm(mix, axis=1, keepdims=True)
    vid /= np.linalg.norm(vid, axis=1, keepdims=True)
    sims = mix @ vid.T
    aligned = np.diag(sims).mean()
    mismatched = (sims.sum() - np.trace(sims)) / (sims.size - len(sims))
    assert aligned - mismatched > 0


def test_synth_zero_noise_self_is_argmax():
    ds = gen_synthetic_pairs(SyntheticConfig(num_samples=64), seed=2)
    mix = np.stack([_mixture(ds, s) for s in ds.samples])
    vid = np.stack([s.video.frames.mean(axis=0) for s in ds.samples])
    mix /= np.linalg.norm(mix, axis=1, keepdims=True)
    vid /= np.linalg.norm(vid, axis=1, keepdims=True)
    sims = mix @ vid.T
    assert (sims.argmax(axis=1) == np.arange(len(ds))).all()


def test_dataset_round_trip(tmp_path):
    ds = gen_synthetic_pairs(SyntheticConfig(num_samples=16), seed=4)
    save_dataset(ds, tmp_path)
    loaded = load_dataset(tmp_path)
    assert loaded.sentences == ds.sentences
    assert np.array_equal(loaded.prototypes, ds.prototypes)
    assert np.array_equal(loaded.token_cluster, ds.token_cluster)
    for a, b in zip(ds.samples, loaded.samples):
        assert a.text.ids == b.text.ids
        assert np.array_equal(a.video.frames, b.video.frames)
    assert loaded.vocab.token_to_id == ds.vocab.token_to_id
