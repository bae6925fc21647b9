import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_config, tiny_model
from maskctc.model import (
    CheckpointError,
    InputTooShortError,
    MaskCTCModel,
    ModelConfig,
    Vocab,
    checkpoint_bytes,
    load_model,
    param_count,
    params_from_bytes,
    save_model,
)


def feats(T, D=6, seed=0):
    return np.random.default_rng(seed).normal(size=(T, D)).astype(np.float32)


def lse(x):
    m = x.max(-1, keepdims=True)
    return (np.log(np.exp(x - m).sum(-1, keepdims=True)) + m)[..., 0]


# vocab ---------------------------------------------------------------------------


def test_vocab_reserved_layout():
    v = Vocab.default(3)
    assert (v.blank, v.eos, v.sos, v.mask, v.pad) == (3, 4, 5, 6, 7)
    assert v.eos_column == 3
    assert len({v.blank, v.eos, v.sos, v.mask, v.pad, *range(v.size)}) == v.num_embeddings
    assert v.render([0, 2, v.mask, 1]) == "ac_b"


def test_vocab_rejects_reserved_and_duplicates():
    with pytest.raises(ValueError):
        Vocab(("a", "<MASK>"))
    with pytest.raises(ValueError):
        Vocab(("a", "a"))


def test_vocab_json_round_trip():
    v = Vocab(("x", "y", "z"))
    assert Vocab.from_json(v.to_json()) == v


# config & parameter count --------------------------------------------------------


def test_config_rejects_indivisible_heads():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, heads=4)


@pytest.mark.parametrize("model_type", ["ctc_only", "ar_joint", "maskctc"])
@pytest.mark.parametrize("size", [(1, 1, 8, 2, 16, 3), (4, 2, 64, 4, 256, 20), (2, 3, 12, 3, 7, 5)])
def test_param_count_closed_form(model_type, size):
    enc, dec, d, h, ff, V = size
    cfg = ModelConfig(model_type=model_type, enc_layers=enc, dec_layers=dec, d_model=d, heads=h, d_ff=ff)
    model = MaskCTCModel.initialize(cfg, Vocab.default(V), 0)
    assert model.params.num_scalars() == param_count(cfg, V)


def test_default_param_count_is_frozen():
    # value documented in the README
    assert param_count(ModelConfig(), 20) == 344234
    assert param_count(ModelConfig(model_type="ctc_only"), 20) == 207637


def test_ctc_only_has_no_decoder_parameters():
    model = MaskCTCModel.initialize(ModelConfig(model_type="ctc_only"), Vocab.default(5), 0)
    assert not any(name.startswith("dec.") for name in model.params)


def test_parameter_names_depend_only_on_config():
    a = MaskCTCModel.initialize(tiny_config(), Vocab.default(4), 0)
    b = MaskCTCModel.initialize(tiny_config(), Vocab.default(4), 9)
    assert list(a.params) == list(b.params)


# encoder & CTC head ----------------------------------------------------------------


def test_encode_downsamples_by_stacking():
    model = tiny_model(downsample_factor=4)
    assert model.encode(feats(8)).shape == (2, 8)
    assert model.encode(feats(11)).shape == (2, 8)


def test_encode_too_short():
    with pytest.raises(InputTooShortError):
        tiny_model(downsample_factor=4).encode(feats(3))


def test_batch_permutation_permutes_outputs():
    model = tiny_model()
    xs = [feats(10, seed=1), feats(7, seed=2), feats(12, seed=3)]
    enc, lens = model.encode_batch(xs)
    enc_p, lens_p = model.encode_batch([xs[2], xs[0], xs[1]])
    for src, dst in ((0, 1), (1, 2), (2, 0)):
        n = lens[src]
        assert lens_p[dst] == n
        np.testing.assert_allclose(enc_p.data[dst, :n], enc.data[src, :n], atol=1e-12)


def test_padding_does_not_leak_into_encoding():
    model = tiny_model()
    x = feats(9, seed=4)
    alone = model.encode(x).data
    enc, lens = model.encode_batch([x, feats(30, seed=5)])
    np.testing.assert_allclose(enc.data[0, : lens[0]], alone, atol=1e-12)


def test_ctc_head_rows_normalize_and_shape():
    model = tiny_model(vocab_size=5)
    lp = model.ctc_head(model.encode(feats(14))).data
    assert lp.shape == (7, 6)
    np.testing.assert_allclose(np.exp(lp).sum(-1), 1.0, atol=1e-6)


def test_untrained_ctc_head_is_uniform():
    model = MaskCTCModel.initialize(tiny_config(), Vocab.default(4), 0)
    lp = model.ctc_head(model.encode(feats(10))).data
    np.testing.assert_allclose(lp, np.log(1 / 5), atol=1e-6)


def test_encode_deterministic_and_dropout_seeded():
    from maskctc.numerics import Rng

    model = tiny_model(dropout_rate=0.3)
    x = feats(10)
    np.testing.assert_array_equal(model.encode(x).data, model.encode(x).data)
    a, b = model.encode(x, Rng(1)).data, model.encode(x, Rng(1)).data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, model.encode(x).data)


# decoder -------------------------------------------------------------------------


@given(st.integers(1, 16), st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_causal_outputs_ignore_future_tokens(L, seed):
    model = tiny_model("ar_joint", vocab_size=4)
    rng = np.random.default_rng(seed)
    enc = model.encode(feats(10, seed=seed))
    y = [model.vocab.sos] + [int(t) for t in rng.integers(0, 4, size=L - 1)]
    base = model.decode_step(y, enc, causal=True).data
    pos = int(rng.integers(0, L))
    y2 = list(y)
    y2[pos] = (y[pos] + 1) % 4
    out = model.decode_step(y2, enc, causal=True).data
    np.testing.assert_allclose(out[:pos], base[:pos], atol=1e-12)


def test_non_causal_sees_the_whole_sequence():
    model = tiny_model("maskctc", vocab_size=4)
    enc = model.encode(feats(10))
    m = model.vocab.mask
    base = model.decode_step([0, 1, m, 2], enc, causal=False).data
    changed = model.decode_step([0, 1, m, 3], enc, causal=False).data
    assert not np.allclose(base[0], changed[0])


def test_decoder_output_shapes_and_normalization():
    model = tiny_model("maskctc", vocab_size=4)
    enc = model.encode(feats(10))
    cmlm = model.decode_step([0, model.vocab.mask, 1], enc, causal=False).data
    ar = model.decode_step([model.vocab.sos, 0, 1], enc, causal=True).data
    assert cmlm.shape == (3, 4)  # content tokens only
    assert ar.shape == (3, 5)  # content tokens + <eos>
    np.testing.assert_allclose(lse(cmlm), 0.0, atol=1e-5)
    np.testing.assert_allclose(lse(ar), 0.0, atol=1e-5)


def test_mask_in_causal_mode_is_rejected():
    model = tiny_model("ar_joint")
    enc = model.encode(feats(10))
    with pytest.raises(ValueError):
        model.decode_step([model.vocab.sos, model.vocab.mask], enc, causal=True)


def test_decoder_batch_padding_invariance():
    model = tiny_model("maskctc", vocab_size=4)
    xs = [feats(10, seed=1), feats(16, seed=2)]
    enc, lens = model.encode_batch(xs)
    ys = [[0, model.vocab.mask], [1, 2, 3, model.vocab.mask]]
    out = model.decode_batch(ys, enc, lens, causal=False).data
    single = model.decode_step(ys[0], model.encode(xs[0]), causal=False).data
    np.testing.assert_allclose(out[0, :2], single, atol=1e-10)


def test_ctc_only_model_has_no_decoder():
    model = tiny_model("ctc_only")
    with pytest.raises(ValueError):
        model.decode_step([0], model.encode(feats(8)), causal=False)


# checkpoints -----------------------------------------------------------------------


def test_checkpoint_byte_layout_prefix():
    model = MaskCTCModel.initialize(tiny_config(), Vocab.default(4), 0)
    buf = checkpoint_bytes(model.params)
    assert buf[:4] == b"MCTC"
    assert int.from_bytes(buf[4:8], "little") == 1
    assert int.from_bytes(buf[8:12], "little") == len(model.params)


def test_save_load_save_is_byte_identical(tmp_path):
    model = tiny_model(dtype=np.float32)
    save_model(model, tmp_path / "a.mctc")
    again = load_model(tmp_path / "a.mctc")
    save_model(again, tmp_path / "b.mctc")
    assert (tmp_path / "a.mctc").read_bytes() == (tmp_path / "b.mctc").read_bytes()
    assert (tmp_path / "a.mctc.json").read_text() == (tmp_path / "b.mctc.json").read_text()
    assert again.config == model.config and again.vocab == model.vocab


def test_truncated_checkpoint_is_rejected():
    buf = checkpoint_bytes(tiny_model(dtype=np.float32).params)
    with pytest.raises(CheckpointError):
        params_from_bytes(buf[:-3])
    with pytest.raises(CheckpointError):
        params_from_bytes(b"NOPE" + buf[4:])


def test_checkpoint_config_mismatch_is_rejected(tmp_path):
    save_model(tiny_model(dtype=np.float32), tmp_path / "m.mctc")
    meta = (tmp_path / "m.mctc.json").read_text().replace('"d_ff": 16', '"d_ff": 32')
    (tmp_path / "m.mctc.json").write_text(meta)
    with pytest.raises(CheckpointError):
        load_model(tmp_path / "m.mctc")
