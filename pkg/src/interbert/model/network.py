"""The multimodal encoder: embeddings, a fused interaction stack over the
concatenated image+text sequence, per-modality extraction stacks on top,
and the three pretraining heads.

Forward passes are per sample (rank-2 tensors throughout); batching is a
loop at the training level, which keeps the tape simple and the gradients
easy to verify coordinate by coordinate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .. import numerics as nt
from ..numerics import ParameterSet, Tensor, load_checkpoint
from .config import (
    IMAGE_SEGMENT,
    TEXT_SEGMENT,
    VARIANT_INTERBERT,
    VARIANT_SINGLE_STREAM,
    ModelConfig,
    SequenceLayout,
    build_layout,
)

GEOMETRY_DIM = 5  # x1/W, y1/H, x2/W, y2/H, box area / image area


def _layer_spec(prefix: str, hidden: int, ffn: int) -> Iterator[tuple[str, tuple[int, ...], str]]:
    for name in ("wq", "wk", "wv", "wo"):
        yield prefix + "attn." + name, (hidden, hidden), "weight"
    # no key bias: a constant added to every key shifts each query's scores
    # uniformly, which softmax cancels, so the parameter would be inert
    for name in ("bq", "bv", "bo"):
        yield prefix + "attn." + name, (hidden,), "bias"
    yield prefix + "ln1.gain", (hidden,), "ln_gain"
    yield prefix + "ln1.bias", (hidden,), "ln_bias"
    yield prefix + "ffn.w1", (hidden, ffn), "weight"
    yield prefix + "ffn.b1", (ffn,), "bias"
    yield prefix + "ffn.w2", (ffn, hidden), "weight"
    yield prefix + "ffn.b2", (hidden,), "bias"
    yield prefix + "ln2.gain", (hidden,), "ln_gain"
    yield prefix + "ln2.bias", (hidden,), "ln_bias"


def parameter_spec(config: ModelConfig) -> Iterator[tuple[str, tuple[int, ...], str]]:
    """Every parameter of the network: (name, shape, init kind), in the
    fixed construction order used by init_parameters and checkpoints."""
    h, f = config.hidden_size, config.ffn_size
    yield "embed.token_table", (config.vocab_size, h), "weight"
    yield "embed.position_table", (config.max_text_len, h), "weight"
    yield "embed.segment_table", (2, h), "weight"
    yield "embed.text_ln.gain", (h,), "ln_gain"
    yield "embed.text_ln.bias", (h,), "ln_bias"
    yield "embed.feature_proj.w", (config.object_feature_dim, h), "weight"
    yield "embed.feature_proj.b", (h,), "bias"
    yield "embed.box_proj.w", (GEOMETRY_DIM, h), "weight"
    yield "embed.box_proj.b", (h,), "bias"
    yield "embed.image_ln.gain", (h,), "ln_gain"
    yield "embed.image_ln.bias", (h,), "ln_bias"
    for i in range(config.num_interaction_layers):
        yield from _layer_spec(f"interaction.layer{i}.", h, f)
    if config.architecture_variant == VARIANT_INTERBERT:
        for stream in ("extract_image", "extract_text"):
            for i in range(config.num_extraction_layers):
                yield from _layer_spec(f"{stream}.layer{i}.", h, f)
    yield "heads.itm.w1", (h, h), "weight"
    yield "heads.itm.b1", (h,), "bias"
    yield "heads.itm.w2", (h, 1), "weight"
    yield "heads.itm.b2", (1,), "bias"
    if not config.tie_msm_weights:
        yield "heads.msm.w", (h, config.vocab_size), "weight"
    yield "heads.msm.b", (config.vocab_size,), "bias"
    yield "heads.mrm.w", (h, config.num_object_classes), "weight"
    yield "heads.mrm.b", (config.num_object_classes,), "bias"


def count_parameters(config: ModelConfig) -> int:
    """Total parameter count, computed from shapes without allocating."""
    return sum(int(np.prod(shape)) for _, shape, _ in parameter_spec(config))


def init_parameters(config: ModelConfig, seed: int, dtype=np.float64) -> ParameterSet:
    """Gaussian(0, init_std) weights from a seeded generator; biases at 0,
    normalization gains at 1. Bit-identical across runs for a fixed seed."""
    config.validate()
    rng = np.random.default_rng(seed)
    params = ParameterSet()
    for name, shape, kind in parameter_spec(config):
        if kind == "weight":
            values = rng.normal(0.0, config.init_std, size=shape)
        elif kind == "ln_gain":
            values = np.ones(shape)
        else:
            values = np.zeros(shape)
        params.add(name, Tensor(np.asarray(values, dtype=dtype), requires_grad=True))
    return params


@dataclass
class ModelOutputs:
    h_image: Tensor       # (m+1, hidden), summary row first
    h_text: Tensor        # (n_tokens, hidden)
    pooled_image: Tensor  # (1, hidden)
    pooled_text: Tensor   # (1, hidden)


def image_geometry(bboxes: np.ndarray, width: float, height: float) -> np.ndarray:
    """Per-row geometry vectors with the whole-image row for the summary
    slot prepended."""
    boxes = np.asarray(bboxes, dtype=np.float64)
    x1, y1, x2, y2 = boxes.T
    area = (x2 - x1) * (y2 - y1) / (width * height)
    rows = np.stack([x1 / width, y1 / height, x2 / width, y2 / height, area], axis=1)
    summary = np.array([[0.0, 0.0, 1.0, 1.0, 1.0]])
    return np.concatenate([summary, rows], axis=0)


class InterBert:
    """A configured network bound to its parameter set."""

    def __init__(self, config: ModelConfig, params: ParameterSet):
        config.validate()
        self.config = config
        self.params = params

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0, dtype=np.float64) -> "InterBert":
        return cls(config, init_parameters(config, seed, dtype))

    @classmethod
    def from_checkpoint(cls, config: ModelConfig, path) -> "InterBert":
        model = cls.create(config, seed=0)
        model.params.load_values(load_checkpoint(path))
        return model

    # -- embeddings ----------------------------------------------------

    def embed_text(self, token_ids, positions=None, segment: int = TEXT_SEGMENT) -> Tensor:
        """Token + learned positional + segment embedding, normalized."""
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.size > self.config.max_text_len:
            raise ValueError(f"text length {ids.size} exceeds max_text_len {self.config.max_text_len}")
        if positions is None:
            positions = np.arange(ids.size)
        p = self.params
        x = nt.add(
            nt.add(
                nt.embedding_lookup(p["embed.token_table"], ids),
                nt.embedding_lookup(p["embed.position_table"], positions),
            ),
            nt.embedding_lookup(p["embed.segment_table"], np.full(ids.size, segment)),
        )
        return nt.layer_norm(x, p["embed.text_ln.gain"], p["embed.text_ln.bias"], self.config.ln_eps)

    def embed_image(self, features, bboxes, width: float, height: float,
                    segment: int = IMAGE_SEGMENT, object_valid=None) -> Tensor:
        """Project region features to the hidden size and add box-geometry
        and segment embeddings. The summary row is the mean of the real
        object features, pooled in feature space before projection."""
        feats = np.asarray(features, dtype=np.float64)
        boxes = np.asarray(bboxes, dtype=np.float64)
        m = feats.shape[0]
        if m < 1:
            raise ValueError("image must contribute at least one object")
        if feats.ndim != 2 or feats.shape[1] != self.config.object_feature_dim:
            raise ValueError(f"expected features of width {self.config.object_feature_dim}, got {feats.shape}")
        valid = np.ones(m, dtype=bool) if object_valid is None else np.asarray(object_valid, dtype=bool)
        if not valid.any():
            raise ValueError("image must have at least one valid object")
        real = boxes[valid]
        if np.any(real[:, 2] <= real[:, 0]) or np.any(real[:, 3] <= real[:, 1]):
            raise ValueError("degenerate bounding box")
        if real.min() < 0 or real[:, 2].max() > width or real[:, 3].max() > height:
            raise ValueError("bounding box outside image bounds")

        summary = feats[valid].mean(axis=0, keepdims=True)
        stacked = np.concatenate([summary, feats], axis=0)
        p = self.params
        dtype = p["embed.feature_proj.w"].values.dtype  # keep float32 runs in float32
        projected = nt.add(nt.matmul(Tensor(stacked.astype(dtype)), p["embed.feature_proj.w"]),
                           p["embed.feature_proj.b"])
        geometry = nt.add(
            nt.matmul(Tensor(image_geometry(boxes, width, height).astype(dtype)), p["embed.box_proj.w"]),
            p["embed.box_proj.b"],
        )
        seg = nt.embedding_lookup(p["embed.segment_table"], np.full(m + 1, segment))
        x = nt.add(nt.add(projected, geometry), seg)
        return nt.layer_norm(x, p["embed.image_ln.gain"], p["embed.image_ln.bias"], self.config.ln_eps)

    # -- transformer blocks ---------------------------------------------

    def _attention(self, x: Tensor, prefix: str, key_bias: np.ndarray) -> Tensor:
        p, cfg = self.params, self.config
        q = nt.add(nt.matmul(x, p[prefix + "attn.wq"]), p[prefix + "attn.bq"])
        k = nt.matmul(x, p[prefix + "attn.wk"])
        v = nt.add(nt.matmul(x, p[prefix + "attn.wv"]), p[prefix + "attn.bv"])
        head_dim = cfg.hidden_size // cfg.num_heads
        scale = 1.0 / math.sqrt(head_dim)
        heads = []
        for h in range(cfg.num_heads):
            start = h * head_dim
            qh = nt.narrow(q, 1, start, head_dim)
            kh = nt.narrow(k, 1, start, head_dim)
            vh = nt.narrow(v, 1, start, head_dim)
            scores = nt.add(nt.mul(nt.matmul(qh, nt.transpose(kh)), scale), key_bias)
            heads.append(nt.matmul(nt.softmax(scores, axis=-1), vh))
        merged = heads[0] if len(heads) == 1 else nt.concat(heads, axis=1)
        return nt.add(nt.matmul(merged, p[prefix + "attn.wo"]), p[prefix + "attn.bo"])

    def _encoder_layer(self, x: Tensor, prefix: str, key_bias: np.ndarray) -> Tensor:
        p, eps = self.params, self.config.ln_eps
        attended = self._attention(x, prefix, key_bias)
        mid = nt.layer_norm(nt.add(x, attended), p[prefix + "ln1.gain"], p[prefix + "ln1.bias"], eps)
        inner = nt.gelu(nt.add(nt.matmul(mid, p[prefix + "ffn.w1"]), p[prefix + "ffn.b1"]))
        ff = nt.add(nt.matmul(inner, p[prefix + "ffn.w2"]), p[prefix + "ffn.b2"])
        return nt.layer_norm(nt.add(mid, ff), p[prefix + "ln2.gain"], p[prefix + "ln2.bias"], eps)

    def interaction_forward(self, fused: Tensor, layout: SequenceLayout) -> Tensor:
        """Full-context encoder over the concatenated image+text sequence;
        padded positions contribute nothing to attention."""
        if fused.shape[0] != layout.total_length:
            raise ValueError(f"fused length {fused.shape[0]} does not match layout {layout.total_length}")
        bias = layout.key_bias()
        x = fused
        for i in range(self.config.num_interaction_layers):
            x = self._encoder_layer(x, f"interaction.layer{i}.", bias)
        return x

    def extraction_forward(self, fused: Tensor, layout: SequenceLayout) -> ModelOutputs:
        """Split the fused sequence back into streams and encode each with
        its own stack; attention never crosses the stream boundary."""
        if self.config.architecture_variant != VARIANT_INTERBERT:
            raise ValueError("extraction module is absent under the single_stream variant")
        bias = layout.key_bias()
        image = nt.narrow(fused, 0, 0, layout.image_length)
        text = nt.narrow(fused, 0, layout.image_length, layout.text_length)
        image_bias = bias[: layout.image_length]
        text_bias = bias[layout.image_length:]
        for i in range(self.config.num_extraction_layers):
            image = self._encoder_layer(image, f"extract_image.layer{i}.", image_bias)
        for i in range(self.config.num_extraction_layers):
            text = self._encoder_layer(text, f"extract_text.layer{i}.", text_bias)
        return ModelOutputs(
            h_image=image,
            h_text=text,
            pooled_image=nt.narrow(image, 0, 0, 1),
            pooled_text=nt.narrow(text, 0, 0, 1),
        )

    # -- composition -----------------------------------------------------

    def forward(self, tokens, features, bboxes, width, height,
                text_valid=None, object_valid=None) -> ModelOutputs:
        ids = np.asarray(tokens, dtype=np.int64)
        feats = np.asarray(features, dtype=np.float64)
        image = self.embed_image(feats, bboxes, width, height, object_valid=object_valid)
        text = self.embed_text(ids)
        layout = build_layout(feats.shape[0], ids.size, object_valid, text_valid)
        fused = nt.concat([image, text], axis=0)
        encoded = self.interaction_forward(fused, layout)
        if self.config.architecture_variant == VARIANT_SINGLE_STREAM:
            h_image = nt.narrow(encoded, 0, 0, layout.image_length)
            h_text = nt.narrow(encoded, 0, layout.image_length, layout.text_length)
            return ModelOutputs(
                h_image=h_image,
                h_text=h_text,
                pooled_image=nt.narrow(h_image, 0, 0, 1),
                pooled_text=nt.narrow(h_text, 0, 0, 1),
            )
        return self.extraction_forward(encoded, layout)

    # -- heads ------------------------------------------------------------

    def itm_score(self, pooled_image: Tensor, pooled_text: Tensor) -> Tensor:
        """Matching logit from the elementwise product of the two pooled
        representations; shape (1, 1)."""
        p = self.params
        gated = nt.mul(pooled_image, pooled_text)
        hidden = nt.gelu(nt.add(nt.matmul(gated, p["heads.itm.w1"]), p["heads.itm.b1"]))
        return nt.add(nt.matmul(hidden, p["heads.itm.w2"]), p["heads.itm.b2"])

    def msm_logits(self, h_text: Tensor) -> Tensor:
        """Vocabulary logits at every text position."""
        if self.config.tie_msm_weights:
            weight = nt.transpose(self.params["embed.token_table"])
        else:
            weight = self.params["heads.msm.w"]
        return nt.add(nt.matmul(h_text, weight), self.params["heads.msm.b"])

    def mrm_logits(self, h_image: Tensor) -> Tensor:
        """Object-class logits for the m object rows (summary excluded)."""
        objects = nt.narrow(h_image, 0, 1, h_image.shape[0] - 1)
        return nt.add(nt.matmul(objects, self.params["heads.mrm.w"]), self.params["heads.mrm.b"])
