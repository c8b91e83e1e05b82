"""The fine-grained multimodal transformer.

Text path: per-word phoneme CNN + word vector -> combiner -> conv prenet ->
transformer encoder.  Audio path: normalized log-mel frames (zero dummy row
at position 0) -> two-layer affine prenet -> cross-modality blocks whose
queries are the mel stream and whose keys/values are the text encoding ->
self-attention fusion blocks.  The fused vector at position 0 feeds an
affine head that emits class logits.

No position is ever masked as a query and no causal structure exists:
classification sees the whole utterance in both modalities.  Padded
positions are handled by key masks at every attention layer plus row
zeroing inside the text prenet, which keeps logits exactly invariant to
trailing padding.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import nn
from .autograd import Tensor
from .config import ModelConfig, model_config_from_dict
from .errors import FormatError, ShapeError, ValidationError
from .text import PAD_PHONEME, PHONEMES, EncoderPrenet, PhonemeCNN, WordCombiner, WordVectors

NEG_MASK = -1e9
CHECKPOINT_MAGIC = b"MLT1"


@dataclass
class ForwardTrace:
    text_enc_out: Tensor   # [T, d]
    cross_out: Tensor      # [T'+1, d]
    fusion_out: Tensor     # [T'+1, d]
    cls: Tensor            # [d]
    logits: Tensor         # [K]


def key_mask(n_queries, n_keys, n_valid):
    """Additive attention mask: large negative on key columns >= n_valid."""
    m = np.zeros((n_queries, n_keys))
    if n_valid is not None and n_valid < n_keys:
        m[:, n_valid:] = NEG_MASK
    return Tensor(m)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with heads as column slices.

    After each call, ``last_weights`` holds a [heads, Tq, Tk] copy of the
    attention distributions (post-softmax, pre-dropout) for inspection.
    """

    def __init__(self, d_model, heads, rng):
        super().__init__()
        if d_model % heads != 0:
            raise ShapeError(f"d_model {d_model} not divisible by {heads} heads")
        self.heads = heads
        self.d_head = d_model // heads
        self.wq = nn.Linear(d_model, d_model, rng)
        # softmax ignores per-row constant score shifts, so a key bias would
        # be a dead parameter; leave it out
        self.wk = nn.Linear(d_model, d_model, rng, bias=False)
        self.wv = nn.Linear(d_model, d_model, rng)
        self.wo = nn.Linear(d_model, d_model, rng)
        self.last_weights = None

    def __call__(self, queries: Tensor, keys_values: Tensor, key_valid=None,
                 drop: nn.Dropout = None) -> Tensor:
        if key_valid is not None and key_valid > keys_values.shape[0]:
            raise ShapeError(
                f"key_valid {key_valid} exceeds key sequence length {keys_values.shape[0]}")
        q = self.wq(queries)
        k = self.wk(keys_values)
        v = self.wv(keys_values)
        mask = key_mask(queries.shape[0], keys_values.shape[0], key_valid)
        scale = 1.0 / np.sqrt(self.d_head)
        outs = []
        weights = []
        for h in range(self.heads):
            cols = (slice(None), slice(h * self.d_head, (h + 1) * self.d_head))
            qh, kh, vh = ag.getitem(q, cols), ag.getitem(k, cols), ag.getitem(v, cols)
            scores = ag.add(ag.matmul(qh, ag.transpose(kh)) * scale, mask)
            att = ag.softmax(scores)
            weights.append(att.data.copy())
            if drop is not None:
                att = drop(att)
            outs.append(ag.matmul(att, vh))
        self.last_weights = np.stack(weights)
        return self.wo(ag.concat(outs, axis=1))


class FeedForward(nn.Module):
    def __init__(self, d_model, d_ff, rng):
        super().__init__()
        self.lin1 = nn.Linear(d_model, d_ff, rng)
        self.lin2 = nn.Linear(d_ff, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(ag.relu(self.lin1(x)))


class EncoderBlock(nn.Module):
    """Self-attention + feed-forward, each with residual then layer norm."""

    def __init__(self, d_model, heads, d_ff, rng, drop_rng, dropout):
        super().__init__()
        self.attn = MultiHeadAttention(d_model, heads, rng)
        self.ffn = FeedForward(d_model, d_ff, rng)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.drop = nn.Dropout(dropout, drop_rng)

    def __call__(self, x: Tensor, key_valid=None) -> Tensor:
        x = self.norm1(ag.add(x, self.drop(self.attn(x, x, key_valid, drop=self.drop))))
        return self.norm2(ag.add(x, self.drop(self.ffn(x))))


class CrossModalBlock(nn.Module):
    """Mel self-attention, then attention into the text encoding, then FFN."""

    def __init__(self, d_model, heads, d_ff, rng, drop_rng, dropout):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, heads, rng)
        self.cross_attn = MultiHeadAttention(d_model, heads, rng)
        self.ffn = FeedForward(d_model, d_ff, rng)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.norm3 = nn.LayerNorm(d_model)
        self.drop = nn.Dropout(dropout, drop_rng)

    def __call__(self, mel: Tensor, text: Tensor, mel_valid=None, text_valid=None) -> Tensor:
        mel = self.norm1(ag.add(mel, self.drop(self.self_attn(mel, mel, mel_valid, drop=self.drop))))
        mel = self.norm2(ag.add(mel, self.drop(self.cross_attn(mel, text, text_valid, drop=self.drop))))
        return self.norm3(ag.add(mel, self.drop(self.ffn(mel))))


class MelPrenet(nn.Module):
    """Two affine layers with a ReLU between; operates row-wise on frames."""

    def __init__(self, d_in, d_model, rng):
        super().__init__()
        self.lin1 = nn.Linear(d_in, d_model, rng)
        self.lin2 = nn.Linear(d_model, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(ag.relu(self.lin1(x)))


class MultilevelTransformer(nn.Module):
    """Fine-grained audio+text classifier; see the module docstring."""

    def __init__(self, cfg: ModelConfig, word_vectors: WordVectors, seed=0):
        super().__init__()
        cfg.validate()
        if word_vectors.dim != cfg.word_dim:
            raise ShapeError(
                f"word vectors are {word_vectors.dim}-dim, config says {cfg.word_dim}")
        self.cfg = cfg
        self.word_vectors = word_vectors
        rng = np.random.default_rng(seed)
        self.drop_rng = np.random.default_rng(seed + 1)

        self.word_table = Tensor(word_vectors.matrix.copy(),
                                 requires_grad=cfg.finetune_word_vectors)
        cpw = cfg.phoneme_channels // len(cfg.phoneme_widths)
        self.phoneme_cnn = PhonemeCNN(rng, d_p=cfg.phoneme_dim,
                                      widths=cfg.phoneme_widths, channels_per_width=cpw)
        self.combiner = WordCombiner(cfg.combine_mode, rng,
                                     word_dim=cfg.word_dim, phon_dim=cfg.phoneme_channels)
        self.prenet = EncoderPrenet(rng, d_in=cfg.word_dim + cfg.phoneme_channels,
                                    d_model=cfg.d_model, width=cfg.prenet_width)
        self.text_blocks = nn.ModuleList(
            [EncoderBlock(cfg.d_model, cfg.heads, cfg.d_ff, rng, self.drop_rng, cfg.dropout)
             for _ in range(cfg.layers_text)])
        self.mel_prenet = MelPrenet(128, cfg.d_model, rng)
        self.cross_blocks = nn.ModuleList(
            [CrossModalBlock(cfg.d_model, cfg.heads, cfg.d_ff, rng, self.drop_rng, cfg.dropout)
             for _ in range(cfg.layers_cross)])
        self.fusion_blocks = nn.ModuleList(
            [EncoderBlock(cfg.d_model, cfg.heads, cfg.d_ff, rng, self.drop_rng, cfg.dropout)
             for _ in range(cfg.layers_fusion)])
        self.head = nn.Linear(cfg.d_model, cfg.num_classes, rng)

    # -- pieces ------------------------------------------------------------

    def encode_text(self, word_ids, phonemes, n_valid=None) -> Tensor:
        """word ids + per-word phoneme ids -> [T, d_model] text encoding."""
        if len(word_ids) != len(phonemes):
            raise ShapeError(f"{len(word_ids)} word ids vs {len(phonemes)} phoneme lists")
        n_valid = len(word_ids) if n_valid is None else n_valid
        word_emb = ag.embedding_rows(self.word_table, np.asarray(word_ids, dtype=np.int64),
                                     frozen_row=self.word_vectors.pad_id)
        rows = []
        for i, phons in enumerate(phonemes):
            wv = ag.getitem(word_emb, i)
            pv = self.phoneme_cnn.embed_word(phons)
            rows.append(self.combiner(wv, pv))
        x = ag.stack_rows(rows)
        x = self.prenet(x, valid=n_valid)
        x = nn.add_positions(x)
        for block in self.text_blocks:
            x = block(x, key_valid=n_valid)
        return x

    def encode_mel(self, mel_frames, text_enc: Tensor, mel_valid=None, text_valid=None) -> Tensor:
        """Normalized mel matrix (dummy row first) -> [T'+1, d_model] fused stream."""
        x = self.mel_prenet(Tensor(np.asarray(mel_frames, dtype=np.float64)))
        x = nn.add_positions(x)
        for block in self.cross_blocks:
            x = block(x, text_enc, mel_valid=mel_valid, text_valid=text_valid)
        return x

    # -- whole model -------------------------------------------------------

    def forward_utterance(self, enc, pad_words=0, pad_frames=0) -> ForwardTrace:
        """Run one utterance; optional extra padding must not change logits.

        ``enc`` carries word_ids, phonemes (list per word), and mel (the
        normalized feature matrix whose row 0 is the dummy vector).
        """
        word_ids = list(enc.word_ids) + [self.word_vectors.pad_id] * pad_words
        phonemes = list(enc.phonemes) + [[PAD_PHONEME]] * pad_words
        mel = np.asarray(enc.mel, dtype=np.float64)
        if pad_frames:
            mel = np.vstack([mel, np.zeros((pad_frames, mel.shape[1]))])
        n_words = len(enc.word_ids)
        n_frames = enc.mel.shape[0]

        text_enc = self.encode_text(word_ids, phonemes, n_valid=n_words)
        cross = self.encode_mel(mel, text_enc, mel_valid=n_frames, text_valid=n_words)
        fused = cross
        for block in self.fusion_blocks:
            fused = block(fused, key_valid=n_frames)
        cls = ag.getitem(fused, 0)
        logits = self.head(cls)
        return ForwardTrace(text_enc_out=text_enc, cross_out=cross,
                            fusion_out=fused, cls=cls, logits=logits)

    def forward_batch(self, encs) -> Tensor:
        """Stack per-utterance logits into [N, K]."""
        return ag.stack_rows([self.forward_utterance(e).logits for e in encs])

    def predict_probs(self, enc) -> np.ndarray:
        with ag.no_grad():
            trace = self.forward_utterance(enc)
            probs = ag.softmax(ag.reshape(trace.logits, (1, -1)))
        return probs.data[0]

    def attention_modules(self):
        return [m for m in self.modules() if isinstance(m, MultiHeadAttention)]


def expected_parameter_count(cfg: ModelConfig, vocab_rows=0) -> int:
    """Closed-form trainable-parameter count for a config.

    ``vocab_rows`` counts word-table rows and only contributes when word
    vectors are fine-tuned (otherwise the table is frozen, not a parameter).
    """
    d, ff = cfg.d_model, cfg.d_ff
    affine = lambda n_in, n_out: n_in * n_out + n_out
    u = cfg.word_dim + cfg.phoneme_channels
    cpw = cfg.phoneme_channels // len(cfg.phoneme_widths)

    total = len(PHONEMES) * cfg.phoneme_dim                       # phoneme table
    total += sum(w * cfg.phoneme_dim * cpw for w in cfg.phoneme_widths)  # bias-free convs
    if cfg.combine_mode == "highway":
        total += 2 * 2 * affine(u, u)                              # transform + gate, 2 layers
    total += cfg.prenet_width * u * d + d                          # prenet conv 1
    total += 2 * (cfg.prenet_width * d * d + d)                    # prenet convs 2-3
    total += 3 * 2 * d                                             # prenet layer norms
    total += affine(d, d)                                          # prenet projection
    total += affine(128, d) + affine(d, d)                         # mel prenet

    mha = 3 * affine(d, d) + d * d  # q, v, o carry biases; k does not
    ffn = affine(d, ff) + affine(ff, d)
    ln = 2 * d
    total += cfg.layers_text * (mha + ffn + 2 * ln)
    total += cfg.layers_cross * (2 * mha + ffn + 3 * ln)
    total += cfg.layers_fusion * (mha + ffn + 2 * ln)
    total += affine(d, cfg.num_classes)                            # head
    if cfg.finetune_word_vectors:
        total += vocab_rows * cfg.word_dim
    return total


# ---------------------------------------------------------------------------
# Checkpoints

def save_checkpoint(path, model: nn.Module, cfg: ModelConfig, extra=None):
    """Write config header + named f32 parameter records, little-endian."""
    import dataclasses as dc
    header = {"model": dc.asdict(cfg), "extra": extra or {}}
    header["model"]["phoneme_widths"] = list(cfg.phoneme_widths)
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    records = sorted(model.named_parameters())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(struct.pack("<I", len(records)))
        for name, p in records:
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<I", p.ndim))
            fh.write(struct.pack(f"<{p.ndim}I", *p.shape))
            fh.write(p.data.astype("<f4").tobytes())


def load_checkpoint(path):
    """Read a checkpoint -> (ModelConfig, extra dict, {name: float64 array})."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    pos = 4
    (hlen,) = struct.unpack_from("<I", raw, pos); pos += 4
    header = json.loads(raw[pos:pos + hlen].decode("utf-8")); pos += hlen
    cfg = model_config_from_dict(header["model"])
    (n_records,) = struct.unpack_from("<I", raw, pos); pos += 4
    params = {}
    for _ in range(n_records):
        (nlen,) = struct.unpack_from("<I", raw, pos); pos += 4
        name = raw[pos:pos + nlen].decode("utf-8"); pos += nlen
        (rank,) = struct.unpack_from("<I", raw, pos); pos += 4
        dims = struct.unpack_from(f"<{rank}I", raw, pos); pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(raw[pos:pos + 4 * count], dtype="<f4").reshape(dims)
        pos += 4 * count
        if name in params:
            raise ValidationError(f"{path}: duplicate parameter record {name!r}")
        params[name] = arr.astype(np.float64)
    return cfg, header.get("extra", {}), params


def restore_model(path, word_vectors: WordVectors):
    cfg, extra, params = load_checkpoint(path)
    model = MultilevelTransformer(cfg, word_vectors, seed=int(extra.get("seed", 0)))
    model.load_state_dict(params)
    return model, cfg, extra
