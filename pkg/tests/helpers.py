"""Shared builders for model-level tests: small configs, synthetic encoded
utterances, and the off-kink parameter nudge used before finite differences."""

from types import SimpleNamespace

import numpy as np

from melformer.config import ModelConfig
from melformer.model import MultilevelTransformer
from melformer.text import PHONEME_TO_ID, hash_word_vectors

WORDS = ["one", "two", "three", "four", "five"]


def small_config(**overrides):
    base = dict(d_model=16, heads=2, layers_text=1, layers_cross=1, layers_fusion=2,
                combine_mode="highway", num_classes=4, dropout=0.1, d_ff=32,
                phoneme_dim=8, phoneme_channels=12, phoneme_widths=(2, 3),
                word_dim=24, prenet_width=3)
    base.update(overrides)
    return ModelConfig(**base)


def make_model(seed=0, **overrides):
    cfg = small_config(**overrides)
    wv = hash_word_vectors(WORDS, dim=cfg.word_dim)
    return MultilevelTransformer(cfg, wv, seed=seed), cfg, wv


def make_enc(wv, seed=0, n_words=3, n_frames=5, utt_embedding=None):
    rng = np.random.default_rng(seed)
    words = [WORDS[i % len(WORDS)] for i in range(n_words)]
    phon_pool = [PHONEME_TO_ID[p] for p in ("K", "AE", "T", "S", "OW")]
    mel = rng.standard_normal((n_frames, 128))
    mel[0] = 0.0  # dummy row
    return SimpleNamespace(
        word_ids=[wv.lookup(w) for w in words],
        phonemes=[[phon_pool[(i + j) % len(phon_pool)] for j in range(2 + i % 3)]
                  for i in range(n_words)],
        mel=mel,
        utt_embedding=utt_embedding,
    )


from melformer.verify import nudge_off_kinks  # noqa: F401  (shared with the CLI suite)
