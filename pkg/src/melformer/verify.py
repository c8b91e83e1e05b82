"""Gradient verification suite.

Every differentiable op gets an exhaustive central-difference check on a
small tensor; both model variants get a sampled whole-model check through a
real cross-entropy loss.  The suite is what `gradcheck` runs from the
command line, and it doubles as the acceptance check for the engine.

Finite differences disagree with subgradients exactly at ReLU kinks, so
whole-model checks first nudge parameters off their zero-init meeting
points (see nudge_off_kinks); that changes nothing about what is verified.
"""

from types import SimpleNamespace

import numpy as np

from . import autograd as ag
from .autograd import Tensor, gradcheck, gradcheck_sampled
from .config import ModelConfig
from .fusion import build_fusion_model
from .model import MultilevelTransformer
from .text import PHONEME_TO_ID, hash_word_vectors

GRAD_TOL = 1e-4


def nudge_off_kinks(model, seed):
    """Shift parameters to a generic point before finite differences.

    At init, zero biases meet the all-zero dummy mel row exactly at ReLU
    kinks, where central differences legitimately disagree with the
    subgradient convention.  A small offset makes pre-activations generic.
    """
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.data = p.data + rng.uniform(-0.05, 0.05, p.shape)


def _t(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _away_from_zero(rng, *shape, gap=0.1):
    data = rng.uniform(gap, 1.0, shape) * np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return Tensor(data, requires_grad=True)


def _distinct_columns(rng, rows, cols):
    # max-pool inputs need per-column gaps far wider than the FD step
    data = np.stack([rng.permutation(np.linspace(-1.0, 1.0, rows))
                     for _ in range(cols)], axis=1)
    return Tensor(data, requires_grad=True)


def _weighted(rng, shape):
    w = Tensor(rng.standard_normal(shape))

    def reduce(x):
        return ag.tsum(ag.mul(x, w))

    return reduce


def op_checks(rng):
    """(name, zero-arg callable -> max rel err) for every differentiable op."""
    checks = []

    def check(name, f, xs):
        checks.append((name, lambda f=f, xs=xs: gradcheck(f, xs)))

    r = _weighted(rng, (3, 4))
    check("add", lambda a, b: r(ag.add(a, b)), [_t(rng, 3, 4), _t(rng, 3, 4)])
    check("add bias row", lambda a, b: r(ag.add(a, b)), [_t(rng, 3, 4), _t(rng, 4)])
    check("add scalar", lambda a, b: r(ag.add(a, b)),
          [_t(rng, 3, 4), Tensor(np.asarray(0.7), requires_grad=True)])
    check("neg", lambda a: r(ag.neg(a)), [_t(rng, 3, 4)])
    check("mul", lambda a, b: r(ag.mul(a, b)), [_t(rng, 3, 4), _t(rng, 3, 4)])
    rv = _weighted(rng, (3, 2))
    check("matmul", lambda a, b: rv(ag.matmul(a, b)), [_t(rng, 3, 4), _t(rng, 4, 2)])
    rt = _weighted(rng, (4, 3))
    check("transpose", lambda a: rt(ag.transpose(a)), [_t(rng, 3, 4)])
    check("reshape", lambda a: r(ag.reshape(a, (3, 4))), [_t(rng, 2, 6)])
    r5 = _weighted(rng, (5,))
    check("getitem row", lambda a: r5(ag.getitem(a, 2)), [_t(rng, 4, 5)])
    r7 = _weighted(rng, (7,))
    check("concat", lambda a, b: r7(ag.concat([a, b], axis=0)),
          [_t(rng, 3), _t(rng, 4)])
    check("stack_rows", lambda a, b, c: r(ag.stack_rows([a, b, c])[0:3]),
          [_t(rng, 4), _t(rng, 4), _t(rng, 4)])
    check("sum", lambda a: ag.tsum(a), [_t(rng, 3, 4)])
    check("mean", lambda a: ag.tmean(a), [_t(rng, 3, 4)])
    check("relu", lambda a: r(ag.relu(a)), [_away_from_zero(rng, 3, 4)])
    check("sigmoid", lambda a: r(ag.sigmoid(a)), [_t(rng, 3, 4)])
    check("tanh", lambda a: r(ag.tanh(a)), [_t(rng, 3, 4)])
    check("exp", lambda a: r(ag.exp(a)), [_t(rng, 3, 4)])
    check("log", lambda a: r(ag.log(a)),
          [Tensor(rng.uniform(0.5, 1.5, (3, 4)), requires_grad=True)])
    check("softmax", lambda a: r(ag.softmax(a)), [_t(rng, 3, 4)])
    gain, bias = _t(rng, 4), _t(rng, 4)
    check("layer_norm", lambda x, g, b: r(ag.layer_norm(x, g, b)),
          [_t(rng, 3, 4), gain, bias])
    rc = _weighted(rng, (5, 4))
    check("conv1d", lambda x, k: rc(ag.conv1d(x, k)), [_t(rng, 5, 3), _t(rng, 3, 3, 4)])
    rp = _weighted(rng, (4,))
    check("max_pool_time", lambda x: rp(ag.max_pool_time(x)), [_distinct_columns(rng, 6, 4)])
    check("max_pool_time masked", lambda x: rp(ag.max_pool_time(x, valid=4)),
          [_distinct_columns(rng, 6, 4)])
    check("cross_entropy", lambda z: ag.cross_entropy(z, [0, 2, 1]), [_t(rng, 3, 4)])
    re = _weighted(rng, (4, 5))
    check("embedding_rows", lambda table: re(ag.embedding_rows(table, [1, 3, 3, 2], frozen_row=0)),
          [_t(rng, 6, 5)])
    rz = _weighted(rng, (5, 4))
    check("zero_rows", lambda x: rz(ag.zero_rows(x, valid=3)), [_t(rng, 5, 4)])
    return checks


def _demo_inputs(rng, word_dim):
    words = ["alpha", "beta", "gamma", "delta", "echo"]
    wv = hash_word_vectors(words, dim=word_dim)
    pool = [PHONEME_TO_ID[p] for p in ("K", "AE", "T", "S", "OW")]
    mel = rng.standard_normal((6, 128))
    mel[0] = 0.0
    enc = SimpleNamespace(
        word_ids=[wv.lookup(w) for w in words[:3]],
        phonemes=[[pool[(i + j) % len(pool)] for j in range(2 + i)] for i in range(3)],
        mel=mel,
        utt_embedding=None)
    return wv, enc


def _demo_config():
    return ModelConfig(d_model=16, heads=2, layers_text=1, layers_cross=1,
                       layers_fusion=1, num_classes=4, dropout=0.0, d_ff=32,
                       phoneme_dim=8, phoneme_channels=12, phoneme_widths=(2, 3),
                       word_dim=24, prenet_width=3)


def model_checks(rng):
    """Sampled whole-model checks through a cross-entropy loss."""
    checks = []

    def sampled(model, enc, label, name):
        nudge_off_kinks(model, seed=5)
        model.eval()
        params = [p for _, p in model.named_parameters()]

        def f(*_):
            logits = model.forward_utterance(enc).logits
            return ag.cross_entropy(ag.stack_rows([logits]), [label])

        checks.append((name, lambda: gradcheck_sampled(
            f, params, per_tensor=2, rng=np.random.default_rng(11))))

    cfg = _demo_config()
    wv, enc = _demo_inputs(np.random.default_rng(3), cfg.word_dim)
    sampled(MultilevelTransformer(cfg, wv, seed=1), enc, 2, "transformer end to end")

    wv2, enc2 = _demo_inputs(np.random.default_rng(4), cfg.word_dim)
    enc2.utt_embedding = np.random.default_rng(6).standard_normal(6)
    sampled(build_fusion_model(cfg, wv2, utt_dim=6, seed=2), enc2, 1,
            "fusion model end to end")
    return checks


def run_all(report=print):
    """Run every check; returns [(name, max_err, ok)]."""
    rng = np.random.default_rng(0)
    results = []
    for name, fn in op_checks(rng) + model_checks(rng):
        err = fn()
        ok = err < GRAD_TOL
        results.append((name, err, ok))
        if report is not None:
            report(f"{'ok  ' if ok else 'FAIL'}  {name:<26} max rel err {err:.2e}")
    return results
