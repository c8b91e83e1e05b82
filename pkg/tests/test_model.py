"""Model-level tests: shapes, masking, attention structure, gradients,
checkpoints.

The single-key attention oracle is computed by hand from the layer's weight
matrices; parameter counts come from the closed-form formula; everything
else is either a structural contract or goes through the finite-difference
harness.  Gradient and determinism tests run in eval mode so dropout cannot
inject noise.
"""

from types import SimpleNamespace

import numpy as np
import pytest

from melformer import autograd as ag
from melformer import nn
from melformer.autograd import Tensor, gradcheck_sampled
from melformer.config import ModelConfig
from melformer.errors import ShapeError
from melformer.model import (
    MelPrenet,
    MultiHeadAttention,
    MultilevelTransformer,
    expected_parameter_count,
    load_checkpoint,
    restore_model,
    save_checkpoint,
)
from melformer.text import hash_word_vectors

from helpers import WORDS, make_enc, make_model, nudge_off_kinks

# ---------------------------------------------------------------------------
# attention structure

def test_single_token_self_attention_weight_is_one():
    rng = np.random.default_rng(0)
    mha = MultiHeadAttention(16, 2, rng)
    x = Tensor(np.random.default_rng(1).standard_normal((1, 16)))
    mha(x, x)
    assert mha.last_weights.shape == (2, 1, 1)
    assert np.allclose(mha.last_weights, 1.0)


def test_attention_rows_are_distributions():
    rng = np.random.default_rng(2)
    mha = MultiHeadAttention(16, 2, rng)
    q = Tensor(np.random.default_rng(3).standard_normal((4, 16)))
    kv = Tensor(np.random.default_rng(4).standard_normal((6, 16)))
    mha(q, kv, key_valid=4)
    assert np.all(mha.last_weights >= 0.0)
    assert np.allclose(mha.last_weights.sum(axis=2), 1.0, atol=1e-6)
    # masked key columns get exactly zero weight
    assert np.all(mha.last_weights[:, :, 4:] == 0.0)


def test_single_key_attention_is_affine_in_the_key():
    """With one key, softmax weights are 1, so every output row equals
    wo(wv(text_vec)） independent of the query. Oracle: dense affine math on
    the layer's own matrices."""
    rng = np.random.default_rng(5)
    mha = MultiHeadAttention(16, 2, rng)
    q = Tensor(np.random.default_rng(6).standard_normal((5, 16)))
    kv = Tensor(np.random.default_rng(7).standard_normal((1, 16)))
    out = mha(q, kv)
    v = kv.data @ mha.wv.weight.data + mha.wv.bias.data
    expected = v @ mha.wo.weight.data + mha.wo.bias.data
    assert np.allclose(out.data, np.repeat(expected, 5, axis=0), atol=1e-12)


def test_key_valid_longer_than_sequence_rejected():
    rng = np.random.default_rng(8)
    mha = MultiHeadAttention(16, 2, rng)
    x = Tensor(np.zeros((3, 16)))
    with pytest.raises(ShapeError):
        mha(x, x, key_valid=4)


# ---------------------------------------------------------------------------
# mel prenet

def test_mel_prenet_shape_and_zero_map():
    rng = np.random.default_rng(9)
    prenet = MelPrenet(128, 16, rng)
    out = prenet(Tensor(np.zeros((7, 128))))
    assert out.shape == (7, 16)
    assert np.all(out.data == 0.0)  # biases start at zero


def test_mel_prenet_gradcheck():
    rng = np.random.default_rng(10)
    prenet = MelPrenet(6, 5, rng)
    x = Tensor(rng.standard_normal((3, 6)), requires_grad=True)

    def f(*_):
        return ag.tsum(prenet(x))

    err = gradcheck_sampled(f, [x] + prenet.parameters(), per_tensor=6,
                            rng=np.random.default_rng(11))
    assert err < 1e-4


# ---------------------------------------------------------------------------
# whole-model forward

def test_forward_shapes_and_trace_contract():
    model, cfg, wv = make_model()
    model.eval()
    enc = make_enc(wv, n_words=3, n_frames=5)
    trace = model.forward_utterance(enc)
    assert trace.text_enc_out.shape == (3, 16)
    assert trace.cross_out.shape == (5, 16)
    assert trace.fusion_out.shape == (5, 16)
    assert trace.cls.shape == (16,)
    assert trace.logits.shape == (4,)
    assert np.array_equal(trace.cls.data, trace.fusion_out.data[0])


def test_probabilities_sum_to_one():
    model, _, wv = make_model(seed=1)
    model.eval()
    probs = model.predict_probs(make_enc(wv, seed=2))
    assert probs.shape == (4,)
    assert probs.sum() == pytest.approx(1.0, abs=1e-9)
    assert np.all(probs >= 0.0)


def test_eval_forward_is_deterministic():
    model, _, wv = make_model(seed=3)
    model.eval()
    enc = make_enc(wv, seed=4)
    a = model.forward_utterance(enc).logits.data
    b = model.forward_utterance(enc).logits.data
    assert np.array_equal(a, b)


def test_train_mode_dropout_changes_outputs():
    model, _, wv = make_model(seed=5)
    model.train()
    enc = make_enc(wv, seed=6)
    a = model.forward_utterance(enc).logits.data
    b = model.forward_utterance(enc).logits.data
    assert not np.array_equal(a, b)


def test_padding_invariance_of_logits():
    model, _, wv = make_model(seed=7)
    model.eval()
    enc = make_enc(wv, seed=8, n_words=3, n_frames=5)
    plain = model.forward_utterance(enc).logits.data
    padded = model.forward_utterance(enc, pad_words=2, pad_frames=3).logits.data
    assert np.max(np.abs(plain - padded)) < 1e-5


def test_attention_rows_sum_to_one_at_every_layer():
    model, _, wv = make_model(seed=9)
    model.eval()
    model.forward_utterance(make_enc(wv, seed=10), pad_words=1, pad_frames=2)
    mhas = model.attention_modules()
    assert len(mhas) == 1 + 2 + 2  # text, cross (self+cross), two fusion blocks
    for mha in mhas:
        assert mha.last_weights is not None
        assert np.allclose(mha.last_weights.sum(axis=2), 1.0, atol=1e-6)


def test_head_reads_only_position_zero():
    model, _, wv = make_model(seed=11)
    model.eval()
    trace = model.forward_utterance(make_enc(wv, seed=12))
    tampered = trace.fusion_out.data.copy()
    tampered[1:] = 999.0
    relogits = tampered[0] @ model.head.weight.data + model.head.bias.data
    assert np.allclose(relogits, trace.logits.data, atol=1e-12)


def test_untrained_models_predict_near_uniform():
    """Monte-Carlo over init seeds: fresh symmetric init has no class bias."""
    totals = np.zeros(4)
    n = 100
    for seed in range(n):
        model, _, wv = make_model(seed=1000 + seed)
        model.eval()
        totals += model.predict_probs(make_enc(wv, seed=2000 + seed))
    mean = totals / n
    assert np.all(np.abs(mean - 0.25) < 0.05)


# ---------------------------------------------------------------------------
# gradients

def test_end_to_end_gradcheck_two_sample_batch():
    model, _, wv = make_model(seed=13)
    model.eval()
    nudge_off_kinks(model, seed=99)
    encs = [make_enc(wv, seed=14, n_words=2, n_frames=4),
            make_enc(wv, seed=15, n_words=3, n_frames=3)]
    labels = [1, 2]

    def f(*_):
        return ag.cross_entropy(model.forward_batch(encs), labels)

    params = model.parameters()
    err = gradcheck_sampled(f, params, per_tensor=2, rng=np.random.default_rng(16))
    assert err < 1e-4


def test_every_parameter_receives_gradient():
    model, _, wv = make_model(seed=17)
    model.eval()
    encs = [make_enc(wv, seed=18), make_enc(wv, seed=19)]
    loss = ag.cross_entropy(model.forward_batch(encs), [0, 3])
    ag.backward(loss)
    dead = [name for name, p in model.named_parameters()
            if p.grad is None or not np.any(p.grad)]
    assert dead == []


# ---------------------------------------------------------------------------
# parameter count and checkpoints

def test_parameter_count_matches_formula():
    model, cfg, _ = make_model()
    assert model.parameter_count() == expected_parameter_count(cfg)


def test_parameter_count_formula_default_config():
    cfg = ModelConfig()
    wv = hash_word_vectors(WORDS, dim=cfg.word_dim)
    model = MultilevelTransformer(cfg, wv)
    assert model.parameter_count() == expected_parameter_count(cfg)


def test_parameter_count_with_finetuned_word_vectors():
    model, cfg, wv = make_model(finetune_word_vectors=True)
    expected = expected_parameter_count(cfg, vocab_rows=wv.matrix.shape[0])
    assert model.parameter_count() == expected


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    model, cfg, wv = make_model(seed=20)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, model, cfg, extra={"seed": 20})
    restored, rcfg, extra = restore_model(p1, wv)
    assert extra == {"seed": 20}
    assert rcfg.d_model == cfg.d_model
    save_checkpoint(p2, restored, rcfg, extra={"seed": 20})
    assert p1.read_bytes() == p2.read_bytes()


def test_restored_model_reproduces_logits(tmp_path):
    model, cfg, wv = make_model(seed=21)
    model.eval()
    enc = make_enc(wv, seed=22)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, cfg)
    restored, _, _ = restore_model(path, wv)
    restored.eval()
    a = model.forward_utterance(enc).logits.data.astype("<f4")
    b = restored.forward_utterance(enc).logits.data.astype("<f4")
    # restored weights went through f32; compare at f32 resolution
    assert np.allclose(a, b, atol=1e-5)


def test_checkpoint_header_restores_config(tmp_path):
    model, cfg, _ = make_model(layers_fusion=3, combine_mode="concat")
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, model, cfg)
    loaded_cfg, _, params = load_checkpoint(path)
    assert loaded_cfg.layers_fusion == 3
    assert loaded_cfg.combine_mode == "concat"
    assert set(params) == {name for name, _ in model.named_parameters()}
