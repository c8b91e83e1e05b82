"""Run configuration: model shape, training protocol, and data paths.

A run is fully described by one JSON document.  Values resolve in order
defaults < config file < command-line flags, and the resolved document is
echoed into the output directory so a run can be reproduced bit for bit.
The run id is a digest of that document, so identical configs share an id.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .errors import ValidationError

LABELS = ("angry", "sad", "neutral", "happy")
LABEL_ALIASES = {"excited": "happy"}


@dataclass
class ModelConfig:
    d_model: int = 128
    heads: int = 4
    layers_text: int = 1
    layers_cross: int = 1
    layers_fusion: int = 2
    combine_mode: str = "highway"
    num_classes: int = 4
    dropout: float = 0.1
    d_ff: int = 512
    phoneme_dim: int = 64
    phoneme_channels: int = 150
    phoneme_widths: tuple = (2, 3, 4)
    word_dim: int = 300
    prenet_width: int = 5
    finetune_word_vectors: bool = False
    d_fuse: int = 128

    def validate(self):
        if self.d_model % self.heads != 0:
            raise ValidationError(
                f"d_model {self.d_model} not divisible by {self.heads} heads")
        for name in ("layers_text", "layers_cross", "layers_fusion"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.combine_mode not in ("concat", "highway"):
            raise ValidationError(f"combine_mode must be concat or highway, got {self.combine_mode!r}")
        if self.num_classes < 2:
            raise ValidationError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.phoneme_channels % len(self.phoneme_widths) != 0:
            raise ValidationError(
                f"phoneme_channels {self.phoneme_channels} not divisible by "
                f"{len(self.phoneme_widths)} conv widths")
        return self


@dataclass
class HarnessConfig:
    lr: float = 1e-5
    batch_size: int = 4
    max_epochs: int = 100
    patience: int = 10
    clip_norm: float = 5.0
    seeds: tuple = (0, 1, 2)
    workers: int = 1
    group_mode: str = "auto"  # auto: sessions when present, else random
    granularity: str = "fine"  # fine | multi
    freeze_fine: bool = False

    def validate(self):
        if self.lr <= 0:
            raise ValidationError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ValidationError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.patience < 0:
            raise ValidationError(f"patience must be >= 0, got {self.patience}")
        if not self.seeds:
            raise ValidationError("at least one seed is required")
        if self.group_mode not in ("auto", "session", "random"):
            raise ValidationError(f"group_mode must be auto, session, or random, got {self.group_mode!r}")
        if self.granularity not in ("fine", "multi"):
            raise ValidationError(f"granularity must be fine or multi, got {self.granularity!r}")
        return self


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    harness: HarnessConfig = field(default_factory=HarnessConfig)
    manifest: str = ""
    lexicon: str = ""
    word_vectors: str = ""
    utt_embeddings: str = ""
    out_dir: str = "runs/default"

    def validate(self):
        self.model.validate()
        self.harness.validate()
        return self

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["model"]["phoneme_widths"] = list(self.model.phoneme_widths)
        d["harness"]["seeds"] = list(self.harness.seeds)
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def run_id(self):
        """Stable digest of the resolved config; no timestamps involved."""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha1(canonical.encode("utf-8")).hexdigest()[:12]


def _apply(section, values, origin):
    known = {f.name for f in dataclasses.fields(type(section))}
    for key, value in values.items():
        if key not in known:
            raise ValidationError(f"{origin}: unknown config key {key!r}")
        current = getattr(section, key)
        if isinstance(current, tuple):
            value = tuple(value)
        setattr(section, key, value)


def resolve_config(file_dict=None, flag_dict=None) -> RunConfig:
    """Merge defaults, a config-file document, and flag overrides, in that order.

    Both dicts use the same shape: {"model": {...}, "harness": {...}, <paths>}.
    """
    cfg = RunConfig()
    for origin, values in (("config file", file_dict), ("flags", flag_dict)):
        if not values:
            continue
        values = dict(values)
        _apply(cfg.model, values.pop("model", {}) or {}, origin)
        _apply(cfg.harness, values.pop("harness", {}) or {}, origin)
        _apply(cfg, values, origin)
    return cfg.validate()


def model_config_from_dict(d) -> ModelConfig:
    cfg = ModelConfig()
    _apply(cfg, d, "checkpoint header")
    return cfg.validate()
