"""Desk-scale multimodal pretraining.

A fused-stream/two-stream transformer encoder over region features and
token ids, pretrained with grouped masking and image-text matching against
mined hard negatives, built on a from-scratch reverse-mode tensor engine
so every gradient can be checked against finite differences.
"""

__version__ = "0.1.0"
