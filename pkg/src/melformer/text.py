"""Text frontend: transcript -> per-word phoneme+word embeddings -> prenet.

A transcript is lowercased, stripped of punctuation, and mapped to phonemes
through a CMU-style lexicon with a total letter-spelling fallback, so G2P
never fails.  Each word then gets a fixed-size vector from a small CNN over
its phoneme embeddings, concatenated with a 300-dim word vector, optionally
passed through a two-layer highway network, and finally run through a
convolutional prenet that projects to the model dimension.
"""

import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autograd as ag
from . import nn
from .autograd import Tensor
from .errors import FormatError, ValidationError

WORD_DIM = 300

# ARPAbet phoneme inventory with stress digits stripped, plus pad/unknown ids.
ARPABET = (
    "AA AE AH AO AW AY B CH D DH EH ER EY F G HH IH IY JH K L M N NG "
    "OW OY P R S SH T TH UH UW V W Y Z ZH"
).split()
PHONEMES = ("<pad>", "<unk>") + tuple(ARPABET)
PAD_PHONEME = 0
UNK_PHONEME = 1
PHONEME_TO_ID = {p: i for i, p in enumerate(PHONEMES)}

# Fallback spelling table for out-of-lexicon words: one phoneme per letter.
# Deliberately crude; it only has to be total and deterministic.
LETTER_FALLBACK = {
    "a": "AH", "b": "B", "c": "K", "d": "D", "e": "EH", "f": "F",
    "g": "G", "h": "HH", "i": "IH", "j": "JH", "k": "K", "l": "L",
    "m": "M", "n": "N", "o": "OW", "p": "P", "q": "K", "r": "R",
    "s": "S", "t": "T", "u": "AH", "v": "V", "w": "W", "x": "S",
    "y": "Y", "z": "Z",
}

_TOKEN_CHARS = set("abcdefghijklmnopqrstuvwxyz0123456789'")


@dataclass
class Lexicon:
    entries: dict = field(default_factory=dict)  # word -> tuple of phoneme ids

    @classmethod
    def load(cls, path):
        """Read `WORD  PH1 PH2 ...` lines; stress digits are stripped."""
        entries = {}
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith(";;;"):
                    continue
                parts = line.split()
                if len(parts) < 2:
                    raise FormatError(f"{path}:{lineno}: entry has no phonemes")
                word = parts[0].lower()
                ids = []
                for sym in parts[1:]:
                    sym = sym.rstrip("0123456789").upper()
                    if sym not in PHONEME_TO_ID:
                        raise FormatError(f"{path}:{lineno}: unknown phoneme {sym!r}")
                    ids.append(PHONEME_TO_ID[sym])
                entries[word] = tuple(ids)
        return cls(entries=entries)

    def get(self, word):
        return self.entries.get(word)


@dataclass
class TokenSeq:
    words: list
    phonemes: list   # one list of phoneme ids per word
    word_ids: list


@dataclass
class WordVectors:
    """Word embedding matrix with reserved pad (zero) and unk (mean) rows."""
    vocab: dict          # word -> row index
    matrix: np.ndarray   # [2 + V, dim]
    pad_id: int = 0
    unk_id: int = 1

    @property
    def dim(self):
        return self.matrix.shape[1]

    def lookup(self, word):
        return self.vocab.get(word, self.unk_id)


def _normalize_token(token: str) -> str:
    cleaned = "".join(c for c in token.lower() if c in _TOKEN_CHARS)
    return cleaned.strip("'")


def spell_out(word: str):
    """Letter-to-phoneme fallback; returns at least one phoneme id."""
    ids = [PHONEME_TO_ID[LETTER_FALLBACK[c]] for c in word if c in LETTER_FALLBACK]
    return ids or [UNK_PHONEME]


def tokenize_and_g2p(transcript: str, lexicon: Lexicon,
                     word_vectors: Optional[WordVectors] = None) -> TokenSeq:
    """Whitespace-tokenize, lowercase, strip punctuation, map to phonemes.

    Words missing from the lexicon are spelled out letter by letter via
    LETTER_FALLBACK, so the phoneme list is never empty.  word_ids come from
    `word_vectors` when given, otherwise every word maps to the unk id.
    """
    words = [t for t in (_normalize_token(tok) for tok in transcript.split()) if t]
    if not words:
        raise ValidationError(f"transcript {transcript!r} has no words after normalization")
    phonemes = [list(lexicon.get(w) or spell_out(w)) for w in words]
    if word_vectors is not None:
        word_ids = [word_vectors.lookup(w) for w in words]
    else:
        word_ids = [1] * len(words)
    return TokenSeq(words=words, phonemes=phonemes, word_ids=word_ids)


def load_word_vectors(path) -> WordVectors:
    """Parse `word v1 ... v300` lines into a WordVectors table.

    Row 0 is a zero pad row and row 1 the unknown-word row (columnwise mean
    of all loaded vectors).
    """
    words = []
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != WORD_DIM + 1:
                raise FormatError(
                    f"{path}: line {lineno}: expected a word and {WORD_DIM} values, got {len(parts) - 1}")
            words.append(parts[0].lower())
            try:
                rows.append([float(v) for v in parts[1:]])
            except ValueError as exc:
                raise FormatError(f"{path}: line {lineno}: {exc}") from None
    if not rows:
        raise FormatError(f"{path}: no word vectors found")
    loaded = np.asarray(rows, dtype=np.float64)
    matrix = np.vstack([np.zeros((1, WORD_DIM)), loaded.mean(axis=0, keepdims=True), loaded])
    vocab = {w: i + 2 for i, w in enumerate(words)}
    return WordVectors(vocab=vocab, matrix=matrix)


def hash_word_vectors(words, dim=WORD_DIM, scale=0.1) -> WordVectors:
    """Deterministic stand-in vectors for runs without a pretrained file.

    Each word's vector is drawn from an rng seeded by a stable digest of the
    word, so the table is identical across processes and runs.
    """
    uniq = sorted(set(words))
    rows = []
    for w in uniq:
        seed = int.from_bytes(hashlib.sha1(w.encode("utf-8")).digest()[:8], "little")
        rows.append(np.random.default_rng(seed).standard_normal(dim) * scale)
    loaded = np.asarray(rows) if rows else np.zeros((0, dim))
    unk = loaded.mean(axis=0, keepdims=True) if len(rows) else np.zeros((1, dim))
    matrix = np.vstack([np.zeros((1, dim)), unk, loaded])
    vocab = {w: i + 2 for i, w in enumerate(uniq)}
    return WordVectors(vocab=vocab, matrix=matrix)


class PhonemeCNN(nn.Module):
    """Fixed-size word vector from a CNN over the word's phoneme embeddings.

    Phonemes are embedded (pad row frozen at zero), run through bias-free
    same-padding convolutions of several widths, ReLU'd, and max-pooled over
    time; the per-width pools are concatenated.  Trailing pad phonemes do
    not change the output: their embeddings are zero (matching the conv's
    own zero padding) and pooling is restricted to valid positions.
    """

    def __init__(self, rng, d_p=64, widths=(2, 3, 4), channels_per_width=50):
        super().__init__()
        self.widths = tuple(widths)
        self.out_dim = channels_per_width * len(widths)
        self.embedding = nn.Embedding(len(PHONEMES), d_p, rng, pad_id=PAD_PHONEME)
        self.convs = nn.ModuleList(
            [nn.Conv1d(w, d_p, channels_per_width, rng, padding="same", bias=False) for w in widths])

    def embed_word(self, phoneme_ids) -> Tensor:
        ids = np.asarray(phoneme_ids, dtype=np.int64)
        n_valid = int((ids != PAD_PHONEME).sum())  # pads are trailing by construction
        # all-pad words pool over their zero embeddings to an exact zero vector
        valid = n_valid if 0 < n_valid < len(ids) else None
        x = self.embedding(ids)
        pools = [ag.max_pool_time(ag.relu(conv(x)), valid=valid) for conv in self.convs]
        return ag.concat(pools, axis=0)


class HighwayLayer(nn.Module):
    """One highway layer: ReLU transform gated against the identity path.

    The gate bias starts at -1 so a fresh layer mostly copies its input.
    """

    def __init__(self, dim, rng, gate_bias=-1.0):
        super().__init__()
        self.transform = nn.Linear(dim, dim, rng)
        self.gate = nn.Linear(dim, dim, rng)
        self.gate.bias.data[:] = gate_bias

    def __call__(self, u: Tensor) -> Tensor:
        h = ag.relu(self.transform(u))
        t = ag.sigmoid(self.gate(u))
        keep = ag.neg(t) + 1.0
        return ag.add(ag.mul(h, t), ag.mul(u, keep))


class WordCombiner(nn.Module):
    """Concatenate word and phoneme vectors; optionally mix with highways."""

    def __init__(self, mode, rng, word_dim=WORD_DIM, phon_dim=150, n_layers=2):
        super().__init__()
        if mode not in ("concat", "highway"):
            raise ValidationError(f"combine mode must be concat or highway, got {mode!r}")
        self.mode = mode
        self.out_dim = word_dim + phon_dim
        if mode == "highway":
            self.layers = nn.ModuleList([HighwayLayer(self.out_dim, rng) for _ in range(n_layers)])

    def __call__(self, word_vec: Tensor, phon_vec: Tensor) -> Tensor:
        u = ag.concat([word_vec, phon_vec], axis=0)
        if self.mode == "highway":
            for layer in self.layers:
                u = layer(u)
        return u


class EncoderPrenet(nn.Module):
    """Three same-padding conv layers (ReLU + layer norm) and a projection.

    ``valid`` is the count of real rows; everything after them is zeroed
    before every convolution so pad values never bleed into real rows
    through the conv windows.
    """

    def __init__(self, rng, d_in=450, d_model=128, width=5, n_layers=3):
        super().__init__()
        convs, norms = [], []
        for i in range(n_layers):
            convs.append(nn.Conv1d(width, d_in if i == 0 else d_model, d_model, rng, padding="same"))
            norms.append(nn.LayerNorm(d_model))
        self.convs = nn.ModuleList(convs)
        self.norms = nn.ModuleList(norms)
        self.proj = nn.Linear(d_model, d_model, rng)

    def __call__(self, x: Tensor, valid=None) -> Tensor:
        for conv, norm in zip(self.convs, self.norms):
            if valid is not None:
                x = ag.zero_rows(x, valid)
            x = norm(ag.relu(conv(x)))
        return self.proj(x)
