"""Prompt-token assembly and the image/prompt fusion stack.

Exemplar and text tokens are concatenated into one prompt stream whose
self-attention is restricted to class groups: the words of a class talk
to each other and to that class's exemplars, separators talk only to
themselves, and unrelated classes never mix.  Each fusion block then
runs image self-attention and bidirectional cross-attention between the
two streams.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import PromptError, ShapeError
from .nn import FeedForward, LayerNorm, MultiHeadAttention, merge_params
from .tensor import Tensor

ANONYMOUS_CLASS = -1

TEXT = "text"
EXEMPLAR = "exemplar"


def build_attention_mask(token_kinds: list[str], class_ids) -> np.ndarray:
    """Boolean (m, m) self-attention mask over the prompt tokens.

    Tokens attend to each other exactly when they carry the same class
    id.  Separators are given unique ids upstream, so they form
    singleton groups.  Every exemplar must use a class id that some text
    token carries, or the anonymous id when there is no text at all.
    """
    ids = np.asarray(class_ids, dtype=np.int64)
    if len(token_kinds) != ids.size:
        raise ShapeError("token kinds and class ids disagree in length")
    kinds = np.asarray(token_kinds)
    text_ids = set(ids[kinds == TEXT].tolist())
    for cid in ids[kinds == EXEMPLAR]:
        if cid == ANONYMOUS_CLASS:
            if text_ids:
                raise PromptError(
                    "anonymous exemplars are only allowed without text")
        elif int(cid) not in text_ids:
            raise PromptError(f"exemplar with unknown class id {int(cid)}")
    return ids[:, None] == ids[None, :]


@dataclass
class TokenSet:
    """Fused prompt-token sequence with attention-mask metadata.

    Layout per class: word tokens, then that class's exemplar tokens,
    then the separator.  ``class_ids`` uses unique negative ids (< -1)
    for separators; ``text_positions[i]`` maps caption token i to its
    row in ``embeddings``.
    """
    embeddings: Tensor
    kinds: list[str]
    class_ids: np.ndarray
    attn_mask: np.ndarray
    labels: list[str]
    text_positions: np.ndarray
    class_token_indices: list[list[int]]
    n_text: int
    n_exemplars: int

    def __len__(self) -> int:
        return len(self.kinds)

    def full_mask(self) -> np.ndarray:
        return np.ones(len(self), dtype=bool)

    def class_mask(self, class_index: int) -> np.ndarray:
        out = np.zeros(len(self), dtype=bool)
        out[self.class_token_indices[class_index]] = True
        return out

    def keyword_mask(self, keyword_span: tuple[int, int]) -> np.ndarray:
        """Restrict scoring to the text tokens of a caption sub-phrase."""
        start, stop = keyword_span
        out = np.zeros(len(self), dtype=bool)
        out[self.text_positions[start:stop]] = True
        return out

    def additive_mask(self) -> np.ndarray:
        return np.where(self.attn_mask, 0.0, -np.inf)


def assemble_token_set(text_prompt, text_emb: Tensor, exemplar_emb: Tensor,
                       exemplar_classes) -> TokenSet:
    """Interleave text and exemplar embeddings into the prompt stream.

    ``exemplar_classes[i]`` gives the class-span index of exemplar i, or
    ANONYMOUS_CLASS when prompting without text.
    """
    p = exemplar_emb.shape[0]
    q = 0 if text_prompt is None else len(text_prompt)
    ex_classes = np.asarray(exemplar_classes, dtype=np.int64).reshape(-1)
    if ex_classes.size != p:
        raise ShapeError(f"{p} exemplars but {ex_classes.size} class labels")
    if p + q == 0:
        raise PromptError("empty prompt")

    pieces, kinds, class_ids, labels = [], [], [], []
    text_positions = np.full(q, -1, dtype=np.int64)
    class_token_indices: list[list[int]] = []
    next_sep_id = -2

    if q == 0:
        order = np.arange(p)
        pieces.append(exemplar_emb)
        kinds = [EXEMPLAR] * p
        class_ids = [ANONYMOUS_CLASS] * p
        labels = [f"[exemplar {i}]" for i in range(p)]
        class_token_indices.append(list(range(p)))
    else:
        order = []
        spans = text_prompt.class_spans
        caption_words = text_prompt.raw.split()
        cursor = 0
        row = 0
        for c, (start, stop) in enumerate(spans):
            mine: list[int] = []
            # any separators between the previous span and this one
            for t in range(cursor, start):
                pieces.append(T.slice_rows(text_emb, t, t + 1))
                kinds.append(TEXT)
                class_ids.append(next_sep_id)
                next_sep_id -= 1
                labels.append(caption_words[t])
                text_positions[t] = row
                row += 1
            for t in range(start, stop):
                pieces.append(T.slice_rows(text_emb, t, t + 1))
                kinds.append(TEXT)
                class_ids.append(c)
                labels.append(caption_words[t])
                text_positions[t] = row
                mine.append(row)
                row += 1
            for i in np.flatnonzero(ex_classes == c):
                pieces.append(T.slice_rows(exemplar_emb, int(i), int(i) + 1))
                kinds.append(EXEMPLAR)
                class_ids.append(c)
                labels.append(f"[exemplar {int(i)}]")
                order.append(int(i))
                mine.append(row)
                row += 1
            cursor = stop
            class_token_indices.append(mine)
        for t in range(cursor, q):
            pieces.append(T.slice_rows(text_emb, t, t + 1))
            kinds.append(TEXT)
            class_ids.append(next_sep_id)
            next_sep_id -= 1
            labels.append(caption_words[t])
            text_positions[t] = row
            row += 1
        if len(order) != p:
            missing = sorted(set(range(p)) - set(order))
            raise PromptError(
                f"exemplar with unknown class id "
                f"{sorted(set(ex_classes[missing].tolist()))}")

    embeddings = T.concat_rows(pieces) if len(pieces) > 1 else pieces[0]
    ids = np.asarray(class_ids, dtype=np.int64)
    mask = build_attention_mask(kinds, ids)
    return TokenSet(embeddings, kinds, ids, mask, labels, text_positions,
                    class_token_indices, n_text=q, n_exemplars=p)


class FeatureEnhancer:
    """Stack of fusion blocks over the prompt and image token streams.

    Per block, in order: masked self-attention over prompt tokens,
    self-attention over image tokens, prompt-from-image cross-attention,
    then image-from-prompt cross-attention, then a feed-forward on each
    stream.  All sublayers are pre-norm residuals.
    """

    def __init__(self, rng, width: int, n_heads: int = 4, n_blocks: int = 6,
                 ffn_ratio: int = 4):
        if n_blocks < 1:
            raise ShapeError("enhancer needs at least one block")
        self.width = width
        self.n_blocks = n_blocks
        hidden = ffn_ratio * width
        self.final_tok_ln = LayerNorm(width)
        self.final_img_ln = LayerNorm(width)
        self.blocks = []
        for _ in range(n_blocks):
            self.blocks.append({
                "tok_ln1": LayerNorm(width),
                "tok_self": MultiHeadAttention(rng, width, n_heads),
                "img_ln1": LayerNorm(width),
                "img_self": MultiHeadAttention(rng, width, n_heads),
                "tok_ln2": LayerNorm(width),
                "img_src_ln": LayerNorm(width),
                "tok_cross": MultiHeadAttention(rng, width, n_heads),
                "img_ln2": LayerNorm(width),
                "tok_src_ln": LayerNorm(width),
                "img_cross": MultiHeadAttention(rng, width, n_heads),
                "tok_ln3": LayerNorm(width),
                "tok_ffn": FeedForward(rng, width, hidden),
                "img_ln3": LayerNorm(width),
                "img_ffn": FeedForward(rng, width, hidden),
            })

    def __call__(self, img_tokens: Tensor, token_set: TokenSet,
                 probe: dict | None = None) -> tuple[Tensor, Tensor]:
        """Fuse the streams; returns (prompt_features, image_features)."""
        if len(token_set) == 0:
            raise PromptError("empty prompt")
        if token_set.embeddings.shape[1] != self.width \
                or img_tokens.shape[1] != self.width:
            raise ShapeError("token width does not match the enhancer width")
        tok = token_set.embeddings
        img = img_tokens
        mask = token_set.additive_mask()
        if probe is not None:
            probe["token_attn"] = []
        for blk in self.blocks:
            t_in = blk["tok_ln1"](tok)
            if probe is not None:
                probe["token_attn"].append(
                    blk["tok_self"].attention_weights(t_in, t_in, mask))
            tok = tok + blk["tok_self"](t_in, t_in, mask)
            i_in = blk["img_ln1"](img)
            img = img + blk["img_self"](i_in, i_in)
            tok = tok + blk["tok_cross"](blk["tok_ln2"](tok),
                                         blk["img_src_ln"](img))
            img = img + blk["img_cross"](blk["img_ln2"](img),
                                         blk["tok_src_ln"](tok))
            tok = tok + blk["tok_ffn"](blk["tok_ln3"](tok))
            img = img + blk["img_ffn"](blk["img_ln3"](img))
        return self.final_tok_ln(tok), self.final_img_ln(img)

    def params(self, prefix: str = "enhancer") -> dict:
        out: dict = {}
        for i, blk in enumerate(self.blocks):
            for name, layer in blk.items():
                out.update(layer.params(f"{prefix}.b{i}.{name}"))
        out.update(self.final_tok_ln.params(f"{prefix}.final_tok_ln"))
        out.update(self.final_img_ln.params(f"{prefix}.final_img_ln"))
        return out
