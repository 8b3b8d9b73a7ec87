"""Architecture hyperparameters and fused-sequence layout bookkeeping."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ..numerics import NEG_LOGIT

VARIANT_INTERBERT = "interbert"
VARIANT_SINGLE_STREAM = "single_stream"

IMAGE_SEGMENT = 0
TEXT_SEGMENT = 1


@dataclass
class ModelConfig:
    """Network dimensions. Defaults are the full-scale configuration; the
    CLI substitutes desk-scale values unless --paper-scale is passed."""

    hidden_size: int = 768
    num_heads: int = 12
    ffn_size: int = 3072
    num_interaction_layers: int = 12
    num_extraction_layers: int = 6
    vocab_size: int = 30522
    object_feature_dim: int = 2048
    max_text_len: int = 40
    max_objects: int = 16
    num_object_classes: int = 33
    ln_eps: float = 1e-12
    init_std: float = 0.02
    architecture_variant: str = VARIANT_INTERBERT
    tie_msm_weights: bool = False

    def validate(self) -> None:
        if self.architecture_variant not in (VARIANT_INTERBERT, VARIANT_SINGLE_STREAM):
            raise ValueError(f"unknown architecture_variant: {self.architecture_variant!r}")
        if self.hidden_size <= 0 or self.hidden_size % self.num_heads != 0:
            raise ValueError(f"hidden_size {self.hidden_size} must be a positive multiple of num_heads {self.num_heads}")
        if self.num_interaction_layers < 1:
            raise ValueError("need at least one interaction layer")
        if self.architecture_variant == VARIANT_INTERBERT and self.num_extraction_layers < 1:
            raise ValueError("the two-stream variant needs at least one extraction layer per stream")
        if self.num_extraction_layers < 0:
            raise ValueError("num_extraction_layers must be non-negative")
        for name in ("ffn_size", "vocab_size", "object_feature_dim", "max_text_len",
                     "max_objects", "num_object_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.ln_eps <= 0 or self.init_std <= 0:
            raise ValueError("ln_eps and init_std must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(eq=False)
class SequenceLayout:
    """Index bookkeeping for one fused image+text sequence.

    Position 0 is the image summary slot, positions 1..image_length-1 the
    (possibly padded) objects, and the remaining text_length positions the
    token row block. ``valid`` flags the real positions.
    """

    image_length: int
    text_length: int
    valid: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != (self.total_length,):
            raise ValueError(f"valid mask shape {self.valid.shape} does not cover {self.total_length} positions")
        if not self.valid[0]:
            raise ValueError("the image summary position is always valid")

    @property
    def total_length(self) -> int:
        return self.image_length + self.text_length

    @property
    def image_span(self) -> range:
        return range(0, self.image_length)

    @property
    def text_span(self) -> range:
        return range(self.image_length, self.total_length)

    def key_bias(self) -> np.ndarray:
        """Additive attention bias per key: 0 at real positions, a huge
        negative number at padding."""
        return np.where(self.valid, 0.0, NEG_LOGIT)


def build_layout(num_objects: int, num_tokens: int,
                 object_valid=None, text_valid=None) -> SequenceLayout:
    ov = np.ones(num_objects, dtype=bool) if object_valid is None else np.asarray(object_valid, dtype=bool)
    tv = np.ones(num_tokens, dtype=bool) if text_valid is None else np.asarray(text_valid, dtype=bool)
    if ov.shape != (num_objects,) or tv.shape != (num_tokens,):
        raise ValueError("validity masks do not match the declared lengths")
    valid = np.concatenate([[True], ov, tv])
    return SequenceLayout(image_length=num_objects + 1, text_length=num_tokens, valid=valid)
