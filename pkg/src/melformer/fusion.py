"""Multi-granularity late fusion.

The fine-grained transformer's class vector is combined with a pre-trained
utterance-level embedding: each side is projected to a common width, the
projections are concatenated, and an affine head emits logits.  Utterance
embeddings normally come from a file (provider-agnostic); a small built-in
mean-pool encoder exists so end-to-end runs need no external artifacts.
"""

import numpy as np

from . import autograd as ag
from . import nn
from .autograd import Tensor
from .config import ModelConfig
from .errors import FormatError, ValidationError
from .model import ForwardTrace, MultilevelTransformer
from .text import WordVectors

UEMB_MAGIC = "UEMB"


def load_utterance_embeddings(path):
    """Parse a `UEMB <dim>` header plus `<id> <floats>` lines -> (dim, {id: vector})."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2 or header[0] != UEMB_MAGIC:
            raise FormatError(f"{path}: first line must be '{UEMB_MAGIC} <dim>'")
        try:
            dim = int(header[1])
        except ValueError:
            raise FormatError(f"{path}: bad dimension {header[1]!r} in header") from None
        if dim < 1:
            raise FormatError(f"{path}: dimension must be positive, got {dim}")
        table = {}
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.split()
            utt_id = parts[0]
            if len(parts) - 1 != dim:
                raise FormatError(
                    f"{path}: line {lineno}: expected {dim} values for {utt_id!r}, got {len(parts) - 1}")
            if utt_id in table:
                raise ValidationError(f"{path}: line {lineno}: duplicate utterance id {utt_id!r}")
            vec = np.asarray([float(v) for v in parts[1:]], dtype=np.float64)
            if not np.all(np.isfinite(vec)):
                raise ValidationError(f"{path}: line {lineno}: non-finite value for {utt_id!r}")
            table[utt_id] = vec
    return dim, table


def check_coverage(table, required_ids):
    """Every id must resolve; report the complete missing list at once."""
    missing = sorted(set(required_ids) - set(table))
    if missing:
        raise ValidationError(
            f"{len(missing)} utterance ids have no embedding: {missing}")


class MeanPoolUtteranceEncoder(nn.Module):
    """Trainable stand-in for a pre-trained sentence encoder.

    Mean of the utterance's word vectors through one affine layer.  Used
    when no embedding file is supplied, so multi-granularity runs stay
    self-contained.
    """

    def __init__(self, word_vectors: WordVectors, d_out, rng):
        super().__init__()
        self.word_vectors = word_vectors
        self.proj = nn.Linear(word_vectors.dim, d_out, rng)
        self.d_out = d_out

    def __call__(self, enc) -> Tensor:
        rows = self.word_vectors.matrix[np.asarray(enc.word_ids, dtype=np.int64)]
        return self.proj(Tensor(rows.mean(axis=0)))


class MultiGranularityModel(nn.Module):
    """Fine-grained transformer + utterance embedding, fused before the head.

    ``utt_dim`` is the embedding width D_u.  ``utt_encoder`` (optional)
    computes embeddings on the fly; otherwise callers pass vectors fetched
    from a file.  With ``freeze_fine`` the transformer's parameters are
    excluded from training while the projections and head still learn.
    """

    def __init__(self, fine: MultilevelTransformer, utt_dim, seed=0,
                 utt_encoder: MeanPoolUtteranceEncoder = None, freeze_fine=False):
        super().__init__()
        cfg: ModelConfig = fine.cfg
        rng = np.random.default_rng(seed + 17)
        self.fine = fine
        self.utt_dim = utt_dim
        self.freeze_fine = freeze_fine
        self.utt_encoder = utt_encoder
        self.proj_fine = nn.Linear(cfg.d_model, cfg.d_fuse, rng)
        self.proj_utt = nn.Linear(utt_dim, cfg.d_fuse, rng)
        self.head = nn.Linear(2 * cfg.d_fuse, cfg.num_classes, rng)

    def trainable_named_parameters(self):
        """Checkpoints keep everything; freezing only hides params from the
        optimizer."""
        for name, p in self.named_parameters():
            if self.freeze_fine and name.startswith("fine."):
                continue
            yield name, p

    def utt_vector(self, enc) -> Tensor:
        if getattr(enc, "utt_embedding", None) is not None:
            vec = np.asarray(enc.utt_embedding, dtype=np.float64)
            if vec.shape != (self.utt_dim,):
                raise ValidationError(
                    f"utterance embedding has shape {vec.shape}, expected ({self.utt_dim},)")
            return Tensor(vec)
        if self.utt_encoder is not None:
            return self.utt_encoder(enc)
        raise ValidationError("no utterance embedding available: supply a file or an encoder")

    def fuse_and_classify(self, cls_fine: Tensor, utt_emb: Tensor) -> Tensor:
        both = ag.concat([self.proj_fine(cls_fine), self.proj_utt(utt_emb)], axis=0)
        return self.head(both)

    def forward_utterance(self, enc, pad_words=0, pad_frames=0) -> ForwardTrace:
        trace = self.fine.forward_utterance(enc, pad_words=pad_words, pad_frames=pad_frames)
        logits = self.fuse_and_classify(trace.cls, self.utt_vector(enc))
        return ForwardTrace(text_enc_out=trace.text_enc_out, cross_out=trace.cross_out,
                            fusion_out=trace.fusion_out, cls=trace.cls, logits=logits)

    def forward_batch(self, encs) -> Tensor:
        return ag.stack_rows([self.forward_utterance(e).logits for e in encs])

    def predict_probs(self, enc) -> np.ndarray:
        with ag.no_grad():
            trace = self.forward_utterance(enc)
            probs = ag.softmax(ag.reshape(trace.logits, (1, -1)))
        return probs.data[0]


def build_fusion_model(cfg, word_vectors, utt_dim=None, seed=0, freeze_fine=False):
    """Fine model + fusion wrapper; a mean-pool encoder fills in when no
    embedding file provides vectors (utt_dim defaults to the word width)."""
    fine = MultilevelTransformer(cfg, word_vectors, seed=seed)
    encoder = None
    if utt_dim is None:
        utt_dim = word_vectors.dim
        encoder = MeanPoolUtteranceEncoder(word_vectors, utt_dim, np.random.default_rng(seed + 23))
    return MultiGranularityModel(fine, utt_dim, seed=seed, utt_encoder=encoder,
                                 freeze_fine=freeze_fine)


def restore_fusion_model(path, word_vectors):
    """Rebuild a fusion model from a checkpoint written by the harness."""
    from .model import load_checkpoint
    cfg, extra, params = load_checkpoint(path)
    if extra.get("granularity") != "multi":
        raise ValidationError(f"{path}: checkpoint is not a multi-granularity model")
    utt_dim = int(extra["utt_dim"])
    model = build_fusion_model(cfg, word_vectors,
                               utt_dim=None if extra.get("builtin_encoder") else utt_dim,
                               seed=int(extra.get("seed", 0)),
                               freeze_fine=bool(extra.get("freeze_fine", False)))
    model.load_state_dict(params)
    return model, cfg, extra
