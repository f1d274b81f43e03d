"""Open-world object counting with visual exemplar and text prompts.

A small, self-contained stack: a float64 autodiff tensor core, stand-in
image/text encoders with exemplar pooling, a bidirectional fusion stack,
query selection plus a cross-modality decoder, set-prediction training
with Hungarian matching, and counting inference with tiled merging and
mask-based count normalization.
"""

__version__ = "0.1.0"
