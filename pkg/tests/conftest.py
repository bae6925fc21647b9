import numpy as np
import pytest

from maskctc.corpus import CorpusConfig, gen_corpus
from maskctc.model import MaskCTCModel, ModelConfig, Vocab
from maskctc.numerics import Tensor, backward

# criterion number -> (passed, title, detail), filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title} ({detail})")


def tiny_config(model_type="maskctc", **kw) -> ModelConfig:
    base = dict(model_type=model_type, feat_dim=6, enc_layers=2, dec_layers=2, heads=2, d_model=8, d_ff=16,
                downsample_factor=2, dropout_rate=0.0)
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(model_type="maskctc", vocab_size=4, seed=0, dtype=np.float64, randomize_heads=True, **kw):
    model = MaskCTCModel.initialize(tiny_config(model_type, **kw), Vocab.default(vocab_size), seed)
    if randomize_heads:
        # zero-initialised output heads would give trivially uniform outputs
        rng = np.random.default_rng(seed + 100)
        for name, t in model.params.items():
            if name.startswith(("ctc.", "dec.out")):
                t.data[...] = rng.normal(scale=0.3, size=t.shape).astype(t.data.dtype)
    return model.astype(dtype)


def tiny_corpus(n=4, split="train", **kw):
    base = dict(vocab_size=4, feat_dim=6, frames_per_token_range=(3, 5), utt_len_range=(2, 5), seed=3,
                lexicon_size=0, confusable_pairs=0)
    base.update(kw)
    return gen_corpus(CorpusConfig(**base), n, split)


def finite_difference_check(loss_fn, tensors, n_probe=6, eps=1e-6, seed=0):
    """Max relative error between backprop and central differences.

    ``loss_fn()`` must rebuild the graph from ``tensors`` (float64 leaves).
    """
    for t in tensors:
        t.grad = None
        t.requires_grad = True
    loss = loss_fn()
    backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        for idx in rng.choice(flat.size, size=min(n_probe, flat.size), replace=False):
            old = flat[idx]
            flat[idx] = old + eps
            up = float(loss_fn().data)
            flat[idx] = old - eps
            down = float(loss_fn().data)
            flat[idx] = old
            numeric = (up - down) / (2 * eps)
            a = analytic.reshape(-1)[idx]
            worst = max(worst, abs(a - numeric) / max(1e-6, abs(a) + abs(numeric)))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_log_probs(rng, T, C, dtype=np.float64):
    x = rng.normal(size=(T, C))
    return (x - np.log(np.exp(x).sum(axis=1, keepdims=True))).astype(dtype)


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
