import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_model
from maskctc.ctc import MaskedSequence, ctc_greedy, mask_by_confidence
from maskctc.decoding import (
    NUM_MASK,
    DecodeConfig,
    DecodeTrace,
    ModelTypeError,
    ar_greedy_decode,
    count_calls,
    decode,
    easy_first_fill,
    fill_chunk,
    greedy_reference,
    maskctc_decode,
    replay_fills,
)
from maskctc.model import MaskCTCModel


def feats(T, seed=0, D=6):
    return np.random.default_rng(seed).normal(size=(T, D)).astype(np.float32)


@pytest.fixture(scope="module")
def nar():
    return tiny_model("maskctc", vocab_size=4, seed=3, dtype=np.float32)


@pytest.fixture(scope="module")
def ar():
    return tiny_model("ar_joint", vocab_size=4, seed=4, dtype=np.float32)


def force_blank_ctc(model: MaskCTCModel) -> MaskCTCModel:
    params = model.params.copy()
    params["ctc.w"].data[...] = 0.0
    params["ctc.b"].data[...] = 0.0
    params["ctc.b"].data[model.vocab.blank] = 10.0
    return MaskCTCModel(model.config, model.vocab, params)


def test_fill_chunk():
    assert fill_chunk(7, 10) == 1
    assert fill_chunk(20, 10) == 2
    assert fill_chunk(21, 10) == 3
    assert fill_chunk(5, NUM_MASK) == 1
    assert fill_chunk(0, 4) == 1


def test_decode_config_validation():
    assert DecodeConfig(k_iters="#mask").k_iters == NUM_MASK
    assert DecodeConfig(k_iters="5").k_iters == 5
    with pytest.raises(ValueError):
        DecodeConfig(k_iters=0)
    with pytest.raises(ValueError):
        DecodeConfig(p_thres=1.5)


@given(st.integers(8, 60), st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_zero_threshold_is_greedy_ctc(nar, T, seed):
    X = feats(T, seed)
    tokens, trace = maskctc_decode(nar, X, DecodeConfig(p_thres=0.0))
    assert tokens == greedy_reference(nar, X)
    assert trace.decoder_calls == 0 and trace.encoder_calls == 1
    assert trace.final == trace.initial_ctc


def test_all_blank_ctc_gives_empty_output(nar):
    tokens, trace = maskctc_decode(force_blank_ctc(nar), feats(20), DecodeConfig(p_thres=1.0))
    assert tokens == [] and trace.decoder_calls == 0


@given(st.integers(8, 80), st.integers(0, 10_000), st.sampled_from([1, 5, 10, NUM_MASK]), st.floats(0.0, 1.0))
@settings(max_examples=60, deadline=None)
def test_iteration_bounds_and_pass_through(nar, T, seed, k, p):
    X = feats(T, seed)
    tc = ctc_greedy(nar.ctc_head(nar.encode(X)).data, nar.vocab.blank)
    masked = mask_by_confidence(tc, p)
    tokens, trace = maskctc_decode(nar, X, DecodeConfig(p_thres=p, k_iters=k))
    n = len(masked.masked_positions)
    assert len(tokens) == len(tc.tokens)
    if k == NUM_MASK:
        assert trace.decoder_calls == n
    else:
        assert trace.decoder_calls <= min(k, n)
    for i, t in enumerate(tc.tokens):
        if i not in masked.masked_positions:
            assert tokens[i] == t
    assert all(0 <= t < nar.vocab.size for t in tokens)
    assert replay_fills(trace) == trace.final == nar.vocab.render(tokens)
    assert trace.masked_string.count("_") == n


def _masked(model, L, positions):
    toks = [i % model.vocab.size for i in range(L)]
    return MaskedSequence(toks, list(positions), L, model.vocab.mask, list(toks))


def test_single_mask_one_iteration(nar):
    enc = nar.encode(feats(30))
    for k in (1, 5, 10, NUM_MASK):
        _, fills = easy_first_fill(nar, _masked(nar, 6, [3]), enc, k)
        assert len(fills) == 1 and fills[0][0][0] == 3


def test_five_masks_k5_commits_one_per_iteration(nar):
    enc = nar.encode(feats(30))
    _, fills = easy_first_fill(nar, _masked(nar, 5, range(5)), enc, 5)
    assert [len(f) for f in fills] == [1] * 5
    assert sorted(p for f in fills for p, _ in f) == list(range(5))


def test_seven_masks_k10_takes_seven_iterations(nar):
    enc = nar.encode(feats(30))
    _, fills = easy_first_fill(nar, _masked(nar, 7, range(7)), enc, 10)
    assert len(fills) == 7


def test_masks_shrink_by_chunk(nar):
    enc = nar.encode(feats(40))
    _, fills = easy_first_fill(nar, _masked(nar, 12, range(12)), enc, 5)
    assert [len(f) for f in fills] == [3, 3, 3, 3]


def test_each_iteration_commits_most_confident_masks(nar):
    enc = nar.encode(feats(30))
    m = _masked(nar, 6, [0, 2, 4, 5])
    tokens, fills = easy_first_fill(nar, m, enc, 2)  # C = 3
    current = list(m.tokens)
    for p in m.masked_positions:
        current[p] = nar.vocab.mask
    remaining = list(m.masked_positions)
    for step in fills:
        out = nar.decode_step(current, enc, causal=False).data
        conf = {p: out[p].max() for p in remaining}
        chosen = sorted(remaining, key=lambda p: (-conf[p], p))[: len(step)]
        assert sorted(p for p, _ in step) == sorted(chosen)
        for p, t in step:
            assert t == int(out[p].argmax())
            current[p] = t
        remaining = [p for p in remaining if p not in chosen]
    assert current == tokens


def test_count_calls_examples(nar):
    enc = nar.encode(feats(30))
    _, fills = easy_first_fill(nar, _masked(nar, 8, [1, 4, 6]), enc, 10)
    assert len(fills) == 3
    assert count_calls(DecodeTrace(decoder_calls=3, encoder_calls=1)) == (1, 3)


def test_maskctc_decode_requires_maskctc_model(ar):
    with pytest.raises(ModelTypeError):
        maskctc_decode(ar, feats(20), DecodeConfig())
    with pytest.raises(ModelTypeError):
        maskctc_decode(tiny_model("ctc_only"), feats(20), DecodeConfig())


def test_ar_requires_ar_model(nar):
    with pytest.raises(ModelTypeError):
        ar_greedy_decode(nar, feats(20), 10)


def test_ar_immediate_eos(ar):
    params = ar.params.copy()
    params["dec.out.w"].data[...] = 0.0
    params["dec.out.b"].data[...] = 0.0
    params["dec.out.b"].data[ar.vocab.eos_column] = 10.0
    model = MaskCTCModel(ar.config, ar.vocab, params)
    tokens, trace = ar_greedy_decode(model, feats(20), 10)
    assert tokens == [] and trace.decoder_calls == 1 and not trace.truncated


def test_ar_truncation_and_call_count(ar):
    params = ar.params.copy()
    params["dec.out.b"].data[ar.vocab.eos_column] = -50.0
    model = MaskCTCModel(ar.config, ar.vocab, params)
    tokens, trace = ar_greedy_decode(model, feats(20), 4)
    assert len(tokens) == 4 and trace.truncated and trace.decoder_calls == 4


@given(st.integers(8, 60), st.integers(0, 1000))
@settings(max_examples=20, deadline=None)
def test_ar_calls_are_length_plus_eos(ar, T, seed):
    tokens, trace = ar_greedy_decode(ar, feats(T, seed), 64)
    assert trace.decoder_calls == len(tokens) + (0 if trace.truncated else 1)
    assert replay_fills(DecodeTrace(masked_string="_" * len(tokens), fills=trace.fills)) == trace.final


def test_dispatch(nar, ar):
    X = feats(24)
    assert decode(nar, X, DecodeConfig(algorithm="ctc_greedy"))[0] == greedy_reference(nar, X)
    assert decode(ar, X, DecodeConfig(algorithm="ar_greedy"))[1].encoder_calls == 1


def test_trace_json_round_trip(nar):
    _, trace = maskctc_decode(nar, feats(40), DecodeConfig(p_thres=1.0, k_iters=3), utt_id="u7")
    assert DecodeTrace.from_json(trace.to_json()) == trace
    assert set(trace.to_json()) == {
        "utt_id", "initial_ctc", "masked_string", "fills", "final",
        "decoder_calls", "encoder_calls", "wall_time", "truncated",
    }
