"""Query selection and the decoder that scores queries against prompt tokens.

The k image tokens most similar to the fused prompt tokens become
queries.  Each decoder block refines them with self-attention, image
cross-attention, and prompt cross-attention; the refined queries are
dot-producted with the prompt features and squashed through a sigmoid
to give the (k x (p+q)) similarity matrix, and a small MLP head regresses
each query's object center in normalized image coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import PromptError, ShapeError
from .nn import FeedForward, LayerNorm, Linear, MultiHeadAttention, sine_positions
from .tensor import Tensor


def inverse_sigmoid(x: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    x = np.clip(x, eps, 1.0 - eps)
    return np.log(x / (1.0 - x))


@dataclass
class QuerySelection:
    """Indices of the selected image tokens and their raw embeddings."""
    k: int
    indices: np.ndarray
    init_queries: Tensor


def select_queries(img_feats: Tensor, tok_feats: Tensor, k: int) -> QuerySelection:
    """Pick the k image tokens with the highest prompt similarity.

    Similarity of an image token is the max over all prompt tokens of
    the dot product; ties are broken toward the lower token index.  The
    selection itself is not differentiated (gradients flow through the
    gathered embeddings).
    """
    n = img_feats.shape[0]
    if tok_feats.shape[0] < 1:
        raise PromptError("empty prompt")
    if k > n:
        raise ShapeError(f"query budget k={k} exceeds {n} image tokens")
    with T.no_grad():
        sims = img_feats.data @ tok_feats.data.T
    row_max = sims.max(axis=1)
    order = np.lexsort((np.arange(n), -row_max))
    indices = order[:k].copy()
    return QuerySelection(k, indices, T.gather_rows(img_feats, indices))


@dataclass
class DecoderOutput:
    """Similarity scores and center predictions for the selected queries.

    ``aux`` holds the same heads applied after every intermediate
    decoder block (deep supervision); inference uses only the final
    scores.
    """
    similarity: Tensor        # (k, p+q), strictly in (0, 1)
    logits: Tensor            # pre-sigmoid scores, for stable losses
    centers: Tensor           # (k, 2) normalized (x, y)
    selection: QuerySelection
    aux: list = field(default_factory=list)   # [(logits, centers), ...]


class QueryDecoder:
    """Decoder stack over the selected cross-modality queries.

    Queries start from the selected image-token embeddings plus a
    learned content offset and sine encodings of their grid locations.
    Per block: query self-attention, image cross-attention, prompt
    cross-attention, feed-forward (pre-norm residuals throughout).
    The center head regresses a bounded logit-space offset from each
    query's own grid location: an untrained head predicts the query's
    position, and a trained one cannot drift away from it, which pins
    down the translation ambiguity of L1-matched point supervision.
    """

    def __init__(self, rng, width: int, n_heads: int = 4, n_blocks: int = 6,
                 ffn_ratio: int = 4, center_offset_scale: float = 0.35):
        if n_blocks < 1:
            raise ShapeError("decoder needs at least one block")
        self.width = width
        self.n_blocks = n_blocks
        hidden = ffn_ratio * width
        self.content_offset = Tensor(np.zeros(width), requires_grad=True)
        self.blocks = []
        for _ in range(n_blocks):
            self.blocks.append({
                "ln1": LayerNorm(width),
                "self": MultiHeadAttention(rng, width, n_heads),
                "ln2": LayerNorm(width),
                "img_ln": LayerNorm(width),
                "img_cross": MultiHeadAttention(rng, width, n_heads),
                "ln3": LayerNorm(width),
                "tok_ln": LayerNorm(width),
                "tok_cross": MultiHeadAttention(rng, width, n_heads),
                "ln4": LayerNorm(width),
                "ffn": FeedForward(rng, width, hidden),
            })
        self.final_ln = LayerNorm(width)
        self.out_proj = Linear(rng, width, width)
        self.center_hidden = Linear(rng, width, width)
        self.center_out = Linear(rng, width, 2)
        self.center_out.w.data *= 0.1   # start close to the reference points
        self.center_offset_scale = center_offset_scale

    def _heads(self, q: Tensor, tok_feats: Tensor,
               ref_logit: np.ndarray) -> tuple[Tensor, Tensor]:
        decoded = self.final_ln(q)
        logits = T.matmul(self.out_proj(decoded), T.transpose(tok_feats)) \
            * (1.0 / math.sqrt(self.width))
        offset = self.center_offset_scale * T.tanh(
            self.center_out(T.relu(self.center_hidden(decoded))))
        centers = T.sigmoid(offset + Tensor(ref_logit))
        return logits, centers

    def __call__(self, img_feats: Tensor, tok_feats: Tensor,
                 selection: QuerySelection,
                 token_centers: np.ndarray) -> DecoderOutput:
        reference = token_centers[selection.indices]
        ref_logit = inverse_sigmoid(reference)
        pos = sine_positions(reference, self.width)
        q = selection.init_queries + self.content_offset + Tensor(pos)
        aux = []
        for i, blk in enumerate(self.blocks):
            h = blk["ln1"](q)
            q = q + blk["self"](h, h)
            q = q + blk["img_cross"](blk["ln2"](q), blk["img_ln"](img_feats))
            q = q + blk["tok_cross"](blk["ln3"](q), blk["tok_ln"](tok_feats))
            q = q + blk["ffn"](blk["ln4"](q))
            if i < self.n_blocks - 1:
                aux.append(self._heads(q, tok_feats, ref_logit))
        logits, centers = self._heads(q, tok_feats, ref_logit)
        return DecoderOutput(T.sigmoid(logits), logits, centers, selection, aux)

    def params(self, prefix: str = "decoder") -> dict:
        out = {f"{prefix}.content_offset": self.content_offset}
        for i, blk in enumerate(self.blocks):
            for name, layer in blk.items():
                out.update(layer.params(f"{prefix}.b{i}.{name}"))
        out.update(self.final_ln.params(f"{prefix}.final_ln"))
        out.update(self.out_proj.params(f"{prefix}.out_proj"))
        out.update(self.center_hidden.params(f"{prefix}.center_hidden"))
        out.update(self.center_out.params(f"{prefix}.center_out"))
        return out
