import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskctc.corpus import (
    CorpusConfig,
    DatasetFormatError,
    Utterance,
    dataset_bytes,
    gen_corpus,
    gen_utterance,
    parse_dataset,
    prototypes,
    read_dataset,
    render,
    write_dataset,
    write_splits,
)
from maskctc.numerics import Rng


def test_render_is_exact_without_noise():
    protos = prototypes(CorpusConfig(vocab_size=4, feat_dim=5, lexicon_size=0, confusable_pairs=0))
    feats = render([0, 1], [2, 2], [0], protos)
    np.testing.assert_array_equal(feats, protos[[0, 0, 1, 1]])


def test_deterministic_utterance_noise_free_fixed_rate():
    cfg = CorpusConfig(vocab_size=4, feat_dim=5, frames_per_token_range=(2, 2), silence_prob=0.0, noise_sigma=0.0,
                       lexicon_size=0, confusable_pairs=0)
    u = gen_utterance(cfg, Rng(0))
    assert u.features.shape == (2 * len(u.transcript), 5)
    np.testing.assert_array_equal(u.features, np.repeat(prototypes(cfg)[u.transcript], 2, axis=0))


def test_same_seed_same_bytes():
    cfg = CorpusConfig()
    assert dataset_bytes(gen_corpus(cfg, 5, "dev")) == dataset_bytes(gen_corpus(cfg, 5, "dev"))


def test_splits_differ():
    cfg = CorpusConfig()
    assert gen_corpus(cfg, 3, "train")[0] != gen_corpus(cfg, 3, "dev")[0]


def test_rate_variability():
    # same transcript (a single repeated token), rates drawn from [2, 6]
    cfg = CorpusConfig(vocab_size=2, frames_per_token_range=(2, 6), silence_prob=0.0, utt_len_range=(6, 6),
                       allow_repeats=True, lexicon_size=0, confusable_pairs=0)
    words = [[0]]
    lengths = {gen_utterance(cfg, Rng(7).child(i), words=words).features.shape[0] for i in range(100)}
    assert len(lengths) > 1


def test_prototypes_unit_norm_and_confusable_cosine():
    cfg = CorpusConfig(confusable_pairs=2, confusable_cos=0.9)
    p = prototypes(cfg).astype(np.float64)
    np.testing.assert_allclose(np.linalg.norm(p, axis=1), 1.0, atol=1e-6)
    assert p[0] @ p[1] == pytest.approx(0.9, abs=1e-6)
    assert p[2] @ p[3] == pytest.approx(0.9, abs=1e-6)


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_frame_count_bounds(seed):
    cfg = CorpusConfig(seed=seed % 7)
    u = gen_utterance(cfg, Rng(seed))
    L, T = len(u.transcript), u.features.shape[0]
    r_min, r_max = cfg.frames_per_token_range
    assert cfg.utt_len_range[0] <= L <= cfg.utt_len_range[1]
    assert L * r_min <= T <= L * r_max + (L - 1) * cfg.silence_len_range[1]
    assert all(0 <= t < cfg.vocab_size for t in u.transcript)
    assert u.features.dtype == np.float32


def test_lexicon_transcripts_are_word_concatenations():
    cfg = CorpusConfig(lexicon_size=5, word_len_range=(3, 3), utt_len_range=(9, 9))
    from maskctc.corpus import lexicon

    words = {tuple(w) for w in lexicon(cfg)}
    for u in gen_corpus(cfg, 10, "train"):
        chunks = {tuple(u.transcript[i : i + 3]) for i in range(0, 9, 3)}
        assert chunks <= words


def test_round_trip_100_utterances(tmp_path):
    utts = gen_corpus(CorpusConfig(), 100, "train")
    write_dataset(utts, tmp_path / "x.mcds")
    assert read_dataset(tmp_path / "x.mcds") == utts


def test_empty_file_is_empty_dataset(tmp_path):
    (tmp_path / "e.mcds").write_bytes(b"")
    assert read_dataset(tmp_path / "e.mcds") == []


def test_truncated_payload_reports_offset():
    buf = dataset_bytes(gen_corpus(CorpusConfig(), 2, "dev"))
    with pytest.raises(DatasetFormatError, match="offset"):
        parse_dataset(buf[:-7])


def test_bad_magic():
    with pytest.raises(DatasetFormatError, match="offset 0"):
        parse_dataset(b"XXXX" + b"\0" * 8)


def test_byte_layout():
    u = Utterance("u1", np.array([[1.5, -2.0]], dtype=np.float32), [3])
    buf = dataset_bytes([u])
    expected = (
        b"MCDS" + (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
        + (2).to_bytes(4, "little") + b"u1"
        + (1).to_bytes(4, "little") + (3).to_bytes(4, "little")
        + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
        + np.array([1.5, -2.0], dtype="<f4").tobytes()
    )
    assert buf == expected


def test_write_splits_manifest(tmp_path):
    import json

    cfg = CorpusConfig(seed=5)
    write_splits(cfg, tmp_path, {"train": 3, "dev": 2})
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert CorpusConfig.from_json(manifest["corpus"]) == cfg
    assert len(read_dataset(tmp_path / "dev.mcds")) == 2


@pytest.mark.parametrize(
    "kw",
    [dict(frames_per_token_range=(0, 3)), dict(utt_len_range=(0, 3)), dict(noise_sigma=-1.0), dict(confusable_pairs=11),
     dict(vocab_size=2, confusable_pairs=0)],
)
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        CorpusConfig(**kw)


@given(st.integers(0, 10_000), st.sampled_from([0, 6]))
@settings(max_examples=30, deadline=None)
def test_no_adjacent_repeats_by_default(seed, lexicon_size):
    cfg = CorpusConfig(vocab_size=4, lexicon_size=lexicon_size, confusable_pairs=0, utt_len_range=(10, 20))
    y = gen_utterance(cfg, Rng(seed)).transcript
    assert all(a != b for a, b in zip(y, y[1:]))


def test_repeats_allowed_when_enabled():
    cfg = CorpusConfig(vocab_size=2, utt_len_range=(20, 20), allow_repeats=True, lexicon_size=0, confusable_pairs=0)
    y = gen_utterance(cfg, Rng(0)).transcript
    assert any(a == b for a, b in zip(y, y[1:]))
