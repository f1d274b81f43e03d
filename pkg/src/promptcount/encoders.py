"""Token producers: image patch pyramid, text embedding stack, exemplar pooling.

These are small trained stand-ins for the large pretrained backbones the
full-scale system would use.  They only have to produce the three token
streams with a shared width so the downstream fusion machinery is
exercised faithfully: n image tokens at three strides, q text tokens,
and p exemplar tokens pooled out of the image features with RoIAlign.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DataError, PromptError, ShapeError
from .nn import Embedding, FeedForward, LayerNorm, Linear, MultiHeadAttention, \
    merge_params, sine_positions
from .tensor import Tensor

SEPARATOR = "."


# ---------------------------------------------------------------------------
# images

@dataclass
class ImageInput:
    """An H x W x 3 float image with values in [0, 1].

    ``normalized`` records that preprocessing (shortest-side resize) has
    been applied; the encoder refuses raw images.
    """
    pixels: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise DataError(f"image must be HxWx3, got shape {px.shape}")
        if px.shape[0] < 32 or px.shape[1] < 32:
            raise DataError(f"image sides must be >= 32, got {px.shape[:2]}")
        self.pixels = px

    @property
    def size(self) -> tuple[int, int]:
        """(width, height) in pixels."""
        return self.pixels.shape[1], self.pixels.shape[0]


def resize_bilinear(pixels: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Half-pixel-centered bilinear resize of an HxWxC array."""
    h, w = pixels.shape[:2]
    ys = np.clip((np.arange(new_h) + 0.5) * h / new_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(new_w) + 0.5) * w / new_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    ty = (ys - y0)[:, None, None]
    tx = (xs - x0)[None, :, None]
    top = pixels[y0][:, x0] * (1 - tx) + pixels[y0][:, x1] * tx
    bot = pixels[y1][:, x0] * (1 - tx) + pixels[y1][:, x1] * tx
    return top * (1 - ty) + bot * ty


def preprocess(img: ImageInput, side: int) -> ImageInput:
    """Resize so the shortest side equals ``side``, preserving aspect ratio."""
    w, h = img.size
    scale = side / min(h, w)
    if h <= w:
        new_h, new_w = side, max(side, round(w * scale))
    else:
        new_h, new_w = max(side, round(h * scale)), side
    return ImageInput(resize_bilinear(img.pixels, new_h, new_w), normalized=True)


@dataclass
class ExemplarBoxes:
    """Axis-aligned (x0, y0, x1, y1) rectangles in pixel coordinates."""
    boxes: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.boxes = arr

    def __len__(self) -> int:
        return self.boxes.shape[0]

    def validate_for(self, width: int, height: int) -> None:
        b = self.boxes
        ok = (0 <= b[:, 0]) & (b[:, 0] < b[:, 2]) & (b[:, 2] <= width) \
            & (0 <= b[:, 1]) & (b[:, 1] < b[:, 3]) & (b[:, 3] <= height)
        if not np.all(ok):
            bad = b[~ok][0].tolist()
            raise DataError(f"exemplar box {bad} invalid for {width}x{height} image")

    def scaled(self, factor_x: float, factor_y: float) -> "ExemplarBoxes":
        out = self.boxes.copy()
        out[:, 0::2] *= factor_x
        out[:, 1::2] *= factor_y
        return ExemplarBoxes(out)

    def mean_extent(self) -> tuple[float, float]:
        if len(self) == 0:
            raise DataError("no exemplar boxes to average")
        w = float(np.mean(self.boxes[:, 2] - self.boxes[:, 0]))
        h = float(np.mean(self.boxes[:, 3] - self.boxes[:, 1]))
        return w, h


@dataclass
class MultiScaleFeatures:
    """Per-stride feature grids sharing one channel width.

    ``levels[i]`` is a (H_i * W_i, width) tensor laid out row-major over
    the grid ``grids[i]``; the token list downstream is the
    concatenation of all levels in order.
    """
    levels: list[Tensor]
    grids: list[tuple[int, int]]
    strides: tuple[int, ...]
    image_size: tuple[int, int]   # (width, height) before padding
    width: int

    @property
    def n_tokens(self) -> int:
        return sum(h * w for h, w in self.grids)

    def token_centers(self) -> np.ndarray:
        """Normalized (x, y) centers for the concatenated token list."""
        img_w, img_h = self.image_size
        out = []
        for (gh, gw), stride in zip(self.grids, self.strides):
            rr, cc = np.mgrid[0:gh, 0:gw]
            xs = (cc.reshape(-1) + 0.5) * stride / img_w
            ys = (rr.reshape(-1) + 0.5) * stride / img_h
            out.append(np.stack([xs, ys], axis=1))
        return np.concatenate(out, axis=0)

    def token_levels(self) -> np.ndarray:
        return np.concatenate([
            np.full(h * w, i, dtype=np.int64)
            for i, (h, w) in enumerate(self.grids)])


def _patchify(pixels: np.ndarray, stride: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Cut the image into non-overlapping stride x stride patches.

    The image is zero-padded up to a stride multiple, so the grid is
    ceil(H/stride) x ceil(W/stride).
    """
    h, w, c = pixels.shape
    gh, gw = -(-h // stride), -(-w // stride)
    padded = np.zeros((gh * stride, gw * stride, c))
    padded[:h, :w] = pixels
    patches = padded.reshape(gh, stride, gw, stride, c) \
        .transpose(0, 2, 1, 3, 4).reshape(gh * gw, stride * stride * c)
    return patches, (gh, gw)


def _neighbor_index_maps(gh: int, gw: int) -> list[np.ndarray]:
    """Row-index maps for the 3x3 neighborhood of each grid cell (-1 = outside)."""
    rr, cc = np.mgrid[0:gh, 0:gw]
    maps = []
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            r, c = rr + dy, cc + dx
            inside = (0 <= r) & (r < gh) & (0 <= c) & (c < gw)
            idx = np.where(inside, r * gw + c, -1)
            maps.append(idx.reshape(-1))
    return maps


class PatchPyramidEncoder:
    """Three-scale image encoder: patch embedding plus one 3x3 mixing layer.

    Each level embeds its stride-sized patches, mixes the 3x3 grid
    neighborhood with learned per-offset matrices, and projects to the
    shared model width.  Features are translation-equivariant for
    stride-multiple shifts; positional information is added only in
    :meth:`tokens`.
    """

    def __init__(self, rng, width: int, strides=(4, 8, 16), level_dims=None):
        self.width = width
        self.strides = tuple(strides)
        self.level_dims = tuple(level_dims or (width,) * len(self.strides))
        if len(self.level_dims) != len(self.strides):
            raise ShapeError("need one level dim per stride")
        self.embed = [Linear(rng, s * s * 3, d)
                      for s, d in zip(self.strides, self.level_dims)]
        self.mix = [[Tensor(np.zeros((d, d)) if k != 4 else np.eye(d),
                            requires_grad=True) for k in range(9)]
                    for d in self.level_dims]
        self.mix_bias = [Tensor(np.zeros(d), requires_grad=True)
                         for d in self.level_dims]
        self.proj = [Linear(rng, d, width) for d in self.level_dims]
        self.level_embed = Embedding(rng, len(self.strides), width)
        self.fuse = Linear(rng, width * len(self.strides), width)
        self.exemplar_proj = Linear(rng, width, width)

    def encode_image(self, img: ImageInput) -> MultiScaleFeatures:
        """Produce the three feature grids for a preprocessed image."""
        if not img.normalized:
            raise DataError("image must be preprocessed (normalized) first")
        h, w = img.pixels.shape[:2]
        if min(h, w) < max(self.strides):
            raise DataError(
                f"image {w}x{h} smaller than the largest stride {max(self.strides)}")
        levels, grids = [], []
        for lvl, stride in enumerate(self.strides):
            patches, (gh, gw) = _patchify(img.pixels, stride)
            feat = T.relu(self.embed[lvl](Tensor(patches)))
            mixed = None
            for k, idx in enumerate(_neighbor_index_maps(gh, gw)):
                term = T.matmul(T.gather_rows(feat, idx), self.mix[lvl][k])
                mixed = term if mixed is None else mixed + term
            feat = T.relu(mixed + self.mix_bias[lvl])
            levels.append(self.proj[lvl](feat))
            grids.append((gh, gw))
        return MultiScaleFeatures(levels, grids, self.strides, (w, h), self.width)

    def tokens(self, feats: MultiScaleFeatures) -> Tensor:
        """Concatenated token matrix with sine positions and level embeddings."""
        pieces = []
        for i, level in enumerate(feats.levels):
            lvl_emb = T.gather_rows(self.level_embed.table, [i])
            pieces.append(level + T.concat_rows([lvl_emb] * level.shape[0]))
        tok = T.concat_rows(pieces)
        return tok + Tensor(sine_positions(feats.token_centers(), self.width))

    def fused_exemplar_map(self, feats: MultiScaleFeatures) -> Tensor:
        """Upsample all levels to the finest grid, concat, project to width."""
        gh, gw = feats.grids[0]
        maps = [feats.levels[0]]
        for lvl in range(1, len(feats.levels)):
            lh, lw = feats.grids[lvl]
            rr = np.minimum((np.arange(gh) * lh) // gh, lh - 1)
            cc = np.minimum((np.arange(gw) * lw) // gw, lw - 1)
            idx = (rr[:, None] * lw + cc[None, :]).reshape(-1)
            maps.append(T.gather_rows(feats.levels[lvl], idx))
        return self.fuse(T.concat_cols(maps))

    def exemplar_tokens(self, feats: MultiScaleFeatures, boxes: ExemplarBoxes,
                        pool: int = 2) -> Tensor:
        """One token per exemplar box: RoIAlign cells averaged, then projected."""
        img_w, img_h = feats.image_size
        boxes.validate_for(img_w, img_h)
        if len(boxes) == 0:
            return Tensor(np.zeros((0, self.width)))
        fmap = self.fused_exemplar_map(feats)
        gh, gw = feats.grids[0]
        stride = self.strides[0]
        rows = []
        for box in boxes.boxes:
            fbox = box / stride
            weights = roi_align_weights(fbox, (gh, gw), pool)
            cells = T.matmul(Tensor(weights), fmap)
            pooled = T.matmul(Tensor(np.full((1, pool * pool), 1.0 / (pool * pool))),
                              cells)
            rows.append(pooled)
        return self.exemplar_proj(T.concat_rows(rows))

    def params(self, prefix: str = "image_encoder") -> dict:
        out = {}
        for lvl in range(len(self.strides)):
            out.update(self.embed[lvl].params(f"{prefix}.l{lvl}.embed"))
            for k in range(9):
                out[f"{prefix}.l{lvl}.mix{k}"] = self.mix[lvl][k]
            out[f"{prefix}.l{lvl}.mix_bias"] = self.mix_bias[lvl]
            out.update(self.proj[lvl].params(f"{prefix}.l{lvl}.proj"))
        out.update(self.level_embed.params(f"{prefix}.level_embed"))
        out.update(self.fuse.params(f"{prefix}.fuse"))
        out.update(self.exemplar_proj.params(f"{prefix}.exemplar_proj"))
        return out


def roi_align_weights(fbox: np.ndarray, grid: tuple[int, int], pool: int) -> np.ndarray:
    """Bilinear sampling weights for RoIAlign over a row-major feature grid.

    The box (x0, y0, x1, y1) is given in feature-cell units.  Pooled cell
    (i, j) of the pool x pool grid takes one sample at its center:

        y = y0 + (i + 0.5) * (y1 - y0) / pool
        x = x0 + (j + 0.5) * (x1 - x0) / pool

    Feature cell (r, c) is treated as a point sample at (r + 0.5, c + 0.5),
    so a continuous coordinate u interpolates cells floor(u - 0.5) and
    floor(u - 0.5) + 1 with fraction u - 0.5 - floor(u - 0.5), clamped at
    the border.  Boxes smaller than one cell sample at sub-cell resolution.
    Returns a (pool*pool, H*W) weight matrix.
    """
    gh, gw = grid
    x0, y0, x1, y1 = fbox
    out = np.zeros((pool * pool, gh * gw))

    def axis_parts(u, extent):
        a = u - 0.5
        lo = int(np.floor(a))
        t = a - lo
        if lo < 0:
            lo, t = 0, 0.0
        if lo >= extent - 1:
            lo, t = extent - 1, 0.0
        hi = min(lo + 1, extent - 1)
        return lo, hi, t

    for i in range(pool):
        y = y0 + (i + 0.5) * (y1 - y0) / pool
        r_lo, r_hi, ty = axis_parts(y, gh)
        for j in range(pool):
            x = x0 + (j + 0.5) * (x1 - x0) / pool
            c_lo, c_hi, tx = axis_parts(x, gw)
            k = i * pool + j
            out[k, r_lo * gw + c_lo] += (1 - ty) * (1 - tx)
            out[k, r_lo * gw + c_hi] += (1 - ty) * tx
            out[k, r_hi * gw + c_lo] += ty * (1 - tx)
            out[k, r_hi * gw + c_hi] += ty * tx
    return out


# ---------------------------------------------------------------------------
# text

class Vocabulary:
    """Fixed word list; id = position.  Tokenization is whitespace split."""

    def __init__(self, words: list[str]):
        if SEPARATOR not in words:
            words = list(words) + [SEPARATOR]
        self.words = list(words)
        self.ids = {w: i for i, w in enumerate(self.words)}
        if len(self.ids) != len(self.words):
            raise DataError("vocabulary contains duplicate words")

    def __len__(self):
        return len(self.words)

    @property
    def sep_id(self) -> int:
        return self.ids[SEPARATOR]

    def encode(self, text: str) -> list[int]:
        out = []
        for word in text.lower().split():
            if word not in self.ids:
                raise PromptError(f"unknown word {word!r} (not in vocabulary)")
            out.append(self.ids[word])
        return out

    def decode(self, ids) -> list[str]:
        for i in ids:
            if not 0 <= i < len(self.words):
                raise PromptError(f"unknown token id {i}")
        return [self.words[i] for i in ids]

    @classmethod
    def from_file(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            words = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
        return cls(words)

    def to_file(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.words) + "\n")


@dataclass
class TextPrompt:
    """Tokenized caption with one token span per class name.

    ``class_spans[c]`` is the (start, stop) range of class c's word
    tokens; separator tokens sit outside every span.  ``keyword_span``
    optionally restricts scoring to a sub-phrase (the caption's subject).
    """
    raw: str
    tokens: list[int]
    class_spans: list[tuple[int, int]]
    keyword_span: tuple[int, int] | None = None

    def __post_init__(self):
        q = len(self.tokens)
        spans = list(self.class_spans) + (
            [self.keyword_span] if self.keyword_span else [])
        for start, stop in spans:
            if not 0 <= start < stop <= q:
                raise PromptError(f"span ({start}, {stop}) out of bounds for {q} tokens")
        for (a, b), (c, d) in zip(self.class_spans, self.class_spans[1:]):
            if b > c:
                raise PromptError("class spans overlap")

    def __len__(self):
        return len(self.tokens)


def make_caption(class_names: list[str], vocab: Vocabulary,
                 keyword: str | None = None,
                 max_text_len: int = 256) -> TextPrompt:
    """Concatenate class names into one caption, separator-terminated.

    ["red circle", "square"] becomes "red circle . square ." with class
    spans (0,2) and (3,4).  ``keyword`` selects a word inside some class
    span for restricted scoring.
    """
    tokens: list[int] = []
    spans: list[tuple[int, int]] = []
    words: list[str] = []
    for name in class_names:
        ids = vocab.encode(name)
        if not ids:
            raise PromptError("empty class name in caption")
        spans.append((len(tokens), len(tokens) + len(ids)))
        tokens.extend(ids)
        words.extend(name.lower().split())
        tokens.append(vocab.sep_id)
        words.append(SEPARATOR)
    if len(tokens) > max_text_len:
        raise PromptError(f"caption has {len(tokens)} tokens, limit {max_text_len}")
    keyword_span = None
    if keyword is not None:
        kw = keyword.lower().split()
        for start, stop in spans:
            for i in range(start, stop - len(kw) + 1):
                if words[i:i + len(kw)] == kw:
                    keyword_span = (i, i + len(kw))
                    break
            if keyword_span:
                break
        if keyword_span is None:
            raise PromptError(f"keyword {keyword!r} not found in caption")
    return TextPrompt(" ".join(words), tokens, spans, keyword_span)


class TextEncoder:
    """Embedding table plus a shallow self-attention stack."""

    def __init__(self, rng, vocab_size: int, width: int, n_heads: int = 4,
                 n_blocks: int = 2, max_text_len: int = 256):
        self.vocab_size = vocab_size
        self.width = width
        self.max_text_len = max_text_len
        self.embed = Embedding(rng, vocab_size, width)
        self.pos = Embedding(rng, max_text_len, width)
        self.blocks = []
        for _ in range(n_blocks):
            self.blocks.append({
                "ln1": LayerNorm(width),
                "attn": MultiHeadAttention(rng, width, n_heads),
                "ln2": LayerNorm(width),
                "ffn": FeedForward(rng, width, 4 * width),
            })
        self.final_ln = LayerNorm(width)

    def encode_text(self, prompt: TextPrompt) -> Tensor:
        """One width-d vector per caption token; (0, width) when empty."""
        q = len(prompt)
        if q == 0:
            return Tensor(np.zeros((0, self.width)))
        if q > self.max_text_len:
            raise PromptError(f"caption has {q} tokens, limit {self.max_text_len}")
        for tid in prompt.tokens:
            if not 0 <= tid < self.vocab_size:
                raise PromptError(f"unknown token id {tid}")
        x = self.embed(prompt.tokens) + self.pos(range(q))
        for blk in self.blocks:
            h = blk["ln1"](x)
            x = x + blk["attn"](h, h)
            x = x + blk["ffn"](blk["ln2"](x))
        return self.final_ln(x)

    def params(self, prefix: str = "text_encoder") -> dict:
        out = merge_params(self.embed.params(f"{prefix}.embed"),
                           self.pos.params(f"{prefix}.pos"))
        for i, blk in enumerate(self.blocks):
            out.update(blk["ln1"].params(f"{prefix}.b{i}.ln1"))
            out.update(blk["attn"].params(f"{prefix}.b{i}.attn"))
            out.update(blk["ln2"].params(f"{prefix}.b{i}.ln2"))
            out.update(blk["ffn"].params(f"{prefix}.b{i}.ffn"))
        out.update(self.final_ln.params(f"{prefix}.final_ln"))
        return out
