"""Counting inference: thresholding, tiled merging, mask-based
count normalization, and the MAE/RMSE metrics.

The raw model output is a (k x tokens) similarity matrix; each query's
score is its row max over a permitted token subset, and queries above
the confidence threshold become detections.  When the detection budget
saturates, the image is re-run over overlapping tiles whose size comes
from the mean exemplar extent, and detections are fractionally weighted
by how many tiles cover them.  Self-similar objects that were double
counted are corrected by comparing detections against per-exemplar
instance masks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .decoder import DecoderOutput
from .encoders import ExemplarBoxes
from .errors import ConfigError, DataError, PromptError

DEFAULT_SIGMA = 0.23


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class Detection:
    x: float
    y: float
    confidence: float
    token_index: int
    tile: int = 0


@dataclass
class CountResult:
    """Detections above the confidence threshold and their total."""
    count: int
    detections: list[Detection]
    sigma: float
    tiles: int = 1

    def points(self) -> np.ndarray:
        return np.array([(d.x, d.y) for d in self.detections]).reshape(-1, 2)


@dataclass
class PromptSpec:
    """Full input signature of one counting request.

    At least one of ``boxes`` / ``text`` must be non-empty.  Pixel
    coordinates refer to the original (unresized) image.
    """
    pixels: np.ndarray
    text: str | None = None
    boxes: ExemplarBoxes | None = None
    keyword: str | None = None
    sigma: float | None = None
    tt_norm: bool = False
    adaptive_crop: bool = False
    masks: list[np.ndarray] | None = None
    image_ref: str = ""

    def __post_init__(self):
        has_boxes = self.boxes is not None and len(self.boxes) > 0
        has_text = bool(self.text and self.text.strip())
        if not has_boxes and not has_text:
            raise PromptError("empty prompt: provide exemplar boxes or text")


def count(out: DecoderOutput, sigma: float = DEFAULT_SIGMA,
          token_mask: np.ndarray | None = None,
          image_size: tuple[int, int] | None = None,
          tile: int = 0) -> CountResult:
    """Enumerate queries whose masked row-max score exceeds ``sigma``.

    ``token_mask`` restricts scoring to a subset of prompt tokens (all
    by default).  With ``image_size`` (w, h), detection points are
    emitted in pixels; otherwise they stay normalized.
    """
    if not 0.0 < sigma < 1.0:
        raise ConfigError(f"sigma must be inside (0, 1), got {sigma}")
    sims = out.similarity.data
    k, m = sims.shape
    if token_mask is None:
        token_mask = np.ones(m, dtype=bool)
    token_mask = np.asarray(token_mask, dtype=bool)
    if token_mask.shape != (m,) or not token_mask.any():
        raise ConfigError("token mask must select at least one prompt token")
    cols = np.flatnonzero(token_mask)
    masked = sims[:, cols]
    best_col = masked.argmax(axis=1)
    best = masked[np.arange(k), best_col]
    sx, sy = image_size if image_size is not None else (1.0, 1.0)
    detections = [
        Detection(float(out.centers.data[i, 0] * sx),
                  float(out.centers.data[i, 1] * sy),
                  float(best[i]), int(cols[best_col[i]]), tile)
        for i in np.flatnonzero(best > sigma)
    ]
    return CountResult(len(detections), detections, sigma)


@dataclass
class TilePlan:
    """Overlapping tile rectangles covering the image."""
    tiles: list[tuple[float, float, float, float]]
    crop: tuple[float, float]
    overlap: tuple[float, float]

    def cover_count(self, x: float, y: float) -> int:
        return sum(1 for (x0, y0, x1, y1) in self.tiles
                   if x0 <= x <= x1 and y0 <= y <= y1)


def _axis_positions(extent: float, crop: float, stride: float) -> list[float]:
    if crop >= extent:
        return [0.0]
    n = math.ceil((extent - crop) / stride) + 1
    xs = [i * stride for i in range(n)]
    xs[-1] = extent - crop
    return xs


def plan_tiles(image_size: tuple[int, int],
               boxes: ExemplarBoxes | None) -> TilePlan:
    """Tile grid from the exemplar statistics.

    Crop extent is 4x the mean exemplar width/height and adjacent tiles
    overlap by 1.25x the mean extent; without exemplars the image is
    split into four equal quadrants.  Tiles are clamped to the image.
    """
    w, h = image_size
    if boxes is None or len(boxes) == 0:
        hw, hh = w / 2.0, h / 2.0
        tiles = [(0.0, 0.0, hw, hh), (hw, 0.0, 2 * hw, hh),
                 (0.0, hh, hw, 2 * hh), (hw, hh, 2 * hw, 2 * hh)]
        return TilePlan(tiles, (hw, hh), (0.0, 0.0))
    mean_w, mean_h = boxes.mean_extent()
    crop = (4.0 * mean_w, 4.0 * mean_h)
    overlap = (1.25 * mean_w, 1.25 * mean_h)
    stride = (crop[0] - overlap[0], crop[1] - overlap[1])
    xs = _axis_positions(w, crop[0], stride[0])
    ys = _axis_positions(h, crop[1], stride[1])
    tiles = [(x, y, min(x + crop[0], w), min(y + crop[1], h))
             for y in ys for x in xs]
    return TilePlan(tiles, crop, overlap)


def predict(model, prompt: PromptSpec) -> CountResult:
    """Run one prompt end to end (threshold, optional tiling and
    normalization); detection points are in original-image pixels."""
    sigma = DEFAULT_SIGMA if prompt.sigma is None else prompt.sigma
    if not 0.0 < sigma < 1.0:
        raise ConfigError(f"sigma must be inside (0, 1), got {sigma}")
    if prompt.adaptive_crop:
        result = tiled_count(model, prompt, sigma)
    else:
        result = _single_pass(model, prompt, sigma)
    if prompt.tt_norm:
        if prompt.masks is None:
            raise DataError("tt_norm requested but no instance masks supplied")
        result = tt_norm(result, InstanceMasks(prompt.masks), prompt.boxes)
    return result


def _single_pass(model, prompt: PromptSpec, sigma: float,
                 tile: int = 0) -> CountResult:
    h, w = prompt.pixels.shape[:2]
    with T.no_grad():
        out, token_set, text_prompt = model.forward_pixels(
            prompt.pixels, prompt.text, prompt.boxes, prompt.keyword)
    mask = None
    if prompt.keyword and text_prompt is not None \
            and text_prompt.keyword_span is not None:
        mask = token_set.keyword_mask(text_prompt.keyword_span)
    return count(out, sigma, mask, image_size=(w, h), tile=tile)


def tiled_count(model, prompt: PromptSpec, sigma: float = DEFAULT_SIGMA,
                ) -> CountResult:
    """Whole-image count, re-run over tiles when the budget saturates.

    Each per-tile detection is weighted by 1 / (number of tiles covering
    its center); the weighted total, rounded to the nearest integer, is
    the final count.
    """
    whole = _single_pass(model, prompt, sigma)
    if whole.count < model.config.k:
        return whole
    h, w = prompt.pixels.shape[:2]
    plan = plan_tiles((w, h), prompt.boxes)
    if len(plan.tiles) <= 1:
        return whole
    merged: list[Detection] = []
    total = 0.0
    for t, rect in enumerate(plan.tiles):
        x0, y0, x1, y1 = (round_half_up(v) for v in rect)
        tile_px = prompt.pixels[y0:y1, x0:x1]
        boxes_inside = None
        if prompt.boxes is not None and len(prompt.boxes):
            b = prompt.boxes.boxes
            keep = (b[:, 0] >= x0) & (b[:, 1] >= y0) \
                & (b[:, 2] <= x1) & (b[:, 3] <= y1)
            if keep.any():
                boxes_inside = ExemplarBoxes(
                    b[keep] - np.array([x0, y0, x0, y0], dtype=float))
        if boxes_inside is None and not (prompt.text and prompt.text.strip()):
            # exemplar-only prompt and no exemplar inside this tile: skip
            # it; overlapping neighbor tiles still see this region
            continue
        sub = PromptSpec(tile_px, prompt.text, boxes_inside,
                         prompt.keyword, sigma)
        result = _single_pass(model, sub, sigma, tile=t)
        for det in result.detections:
            gx, gy = det.x + x0, det.y + y0
            cover = max(1, plan.cover_count(gx, gy))
            total += 1.0 / cover
            merged.append(Detection(gx, gy, det.confidence,
                                    det.token_index, t))
    return CountResult(round_half_up(total), merged, sigma, len(plan.tiles))


@dataclass
class InstanceMasks:
    """Per-exemplar binary masks, each covering exactly one instance."""
    masks: list[np.ndarray]

    def __post_init__(self):
        self.masks = [np.asarray(m, dtype=bool) for m in self.masks]

    def __len__(self):
        return len(self.masks)

    def contains(self, index: int, x: float, y: float) -> bool:
        mask = self.masks[index]
        r, c = int(y), int(x)
        if not (0 <= r < mask.shape[0] and 0 <= c < mask.shape[1]):
            return False
        return bool(mask[r, c])


def tt_norm(result: CountResult, masks: InstanceMasks,
            boxes: ExemplarBoxes | None) -> CountResult:
    """Divide the count when exemplar masks each hold several detections.

    m = mean detections-per-exemplar-mask.  Detections inside the
    exemplar's box but outside its mask never contribute, so crowded
    boxes do not fake self-similarity.  When m rounds to a divisor
    d >= 2 the count becomes round(count / d) and duplicate detections
    are thinned: greedy suppression of lower-confidence neighbours
    within roughly one exemplar extent, with at most one survivor per
    instance mask, which makes a second application a no-op.
    """
    if boxes is None or len(boxes) != len(masks):
        n = 0 if boxes is None else len(boxes)
        raise DataError(f"{len(masks)} masks for {n} exemplars")
    if len(masks) == 0 or not result.detections:
        return result
    for i, (mask, box) in enumerate(zip(masks.masks, boxes.boxes)):
        ys, xs = np.nonzero(mask)
        if ys.size and not (
                box[0] - 1 <= xs.min() and xs.max() <= box[2] + 1
                and box[1] - 1 <= ys.min() and ys.max() <= box[3] + 1):
            raise DataError(f"mask {i} extends outside its exemplar box")

    dets = result.detections
    per_mask = [sum(1 for d in dets if masks.contains(i, d.x, d.y))
                for i in range(len(masks))]
    m = float(np.mean(per_mask))
    if m <= 1.5:
        return result
    divisor = round_half_up(m)
    target = round_half_up(result.count / divisor)
    mean_w, mean_h = boxes.mean_extent()
    rx, ry = 0.55 * mean_w, 0.55 * mean_h

    def home_mask(d: Detection) -> int:
        for i in range(len(masks)):
            if masks.contains(i, d.x, d.y):
                return i
        return -1

    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    kept: list[int] = []
    dropped: list[int] = []
    occupied: set[int] = set()
    for i in order:
        d = dets[i]
        near = any(abs(d.x - dets[j].x) < rx and abs(d.y - dets[j].y) < ry
                   for j in kept)
        home = home_mask(d)
        if near or (home >= 0 and home in occupied):
            dropped.append(i)
            continue
        kept.append(i)
        if home >= 0:
            occupied.add(home)
    if len(kept) > target:
        for i in kept[target:]:
            dropped.append(i)
        kept = kept[:target]
    for i in dropped:
        if len(kept) >= target:
            break
        home = home_mask(dets[i])
        if home >= 0 and home in occupied:
            continue
        kept.append(i)
        if home >= 0:
            occupied.add(home)
    detections = [dets[i] for i in sorted(kept)]
    return CountResult(len(detections), detections, result.sigma, result.tiles)


def evaluate(preds, gts) -> tuple[float, float]:
    """Mean absolute and root-mean-squared counting error over a test set."""
    preds = np.asarray(preds, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    if preds.shape != gts.shape or preds.ndim != 1:
        raise DataError(
            f"prediction/truth lists disagree: {preds.shape} vs {gts.shape}")
    if preds.size == 0:
        raise DataError("cannot evaluate zero images")
    err = preds - gts
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err ** 2)))
    return mae, rmse
