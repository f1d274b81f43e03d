"""Training-time augmentation: horizontal flip, scale jitter, random crop.

The flip mirrors points with the pixel-center convention x' = (W-1) - x
and boxes with the range convention [W - x1, W - x0], matching what
``pixels[:, ::-1]`` does to the image content.  Scale jitter resizes the
shortest side to a draw from a fixed size ladder; the optional crop
keeps only the points inside the window and clips exemplar boxes,
dropping any box whose own instance center is lost.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .encoders import ExemplarBoxes, ImageInput, resize_bilinear
from .scenes import CountingSample

FULL_SCALE_SIZES = tuple(range(480, 801, 32))   # shortest-side ladder at side 800
FULL_SCALE_CROP = (384, 600)
FULL_SCALE_SIDE = 800


@dataclass
class AugmentConfig:
    """Flip/scale/crop settings, by default the full-scale recipe shrunk
    proportionally to the configured inference side."""
    scale_sizes: tuple
    crop_range: tuple
    flip_prob: float = 0.5
    crop_prob: float = 0.5
    max_retries: int = 10

    @classmethod
    def for_side(cls, image_side: int) -> "AugmentConfig":
        f = image_side / FULL_SCALE_SIDE
        sizes = tuple(sorted({max(32, round(s * f)) for s in FULL_SCALE_SIZES}))
        crop = (max(32, round(FULL_SCALE_CROP[0] * f)),
                max(33, round(FULL_SCALE_CROP[1] * f)))
        return cls(scale_sizes=sizes, crop_range=crop)


def hflip(sample: CountingSample) -> CountingSample:
    w = sample.image.pixels.shape[1]
    pixels = sample.image.pixels[:, ::-1].copy()
    points = [np.column_stack([(w - 1) - p[:, 0], p[:, 1]]) if len(p) else p
              for p in sample.points]
    boxes = []
    for eb in sample.exemplar_boxes:
        b = eb.boxes
        flipped = np.column_stack([w - b[:, 2], b[:, 1], w - b[:, 0], b[:, 3]]) \
            if len(b) else b
        boxes.append(ExemplarBoxes(flipped))
    masks = None
    if sample.instance_masks is not None:
        masks = [[m[:, ::-1].copy() for m in per_class]
                 for per_class in sample.instance_masks]
    return replace(sample, image=ImageInput(pixels, sample.image.normalized),
                   points=points, exemplar_boxes=boxes, instance_masks=masks)


def resize(sample: CountingSample, min_side: int) -> CountingSample:
    h, w = sample.image.pixels.shape[:2]
    scale = min_side / min(h, w)
    if h <= w:
        nh, nw = min_side, max(min_side, round(w * scale))
    else:
        nh, nw = max(min_side, round(h * scale)), min_side
    sx, sy = nw / w, nh / h
    pixels = resize_bilinear(sample.image.pixels, nh, nw)
    points = [p * np.array([sx, sy]) if len(p) else p for p in sample.points]
    boxes = [eb.scaled(sx, sy) for eb in sample.exemplar_boxes]
    masks = None
    if sample.instance_masks is not None:
        rr = np.clip(((np.arange(nh) + 0.5) / sy - 0.5).round().astype(int), 0, h - 1)
        cc = np.clip(((np.arange(nw) + 0.5) / sx - 0.5).round().astype(int), 0, w - 1)
        masks = [[m[rr][:, cc] for m in per_class]
                 for per_class in sample.instance_masks]
    return replace(sample, image=ImageInput(pixels, sample.image.normalized),
                   points=points, exemplar_boxes=boxes, instance_masks=masks)


def crop(sample: CountingSample, window: tuple[int, int, int, int]
         ) -> CountingSample:
    """Crop to (x0, y0, x1, y1); keeps only points inside the window."""
    x0, y0, x1, y1 = (int(v) for v in window)
    pixels = sample.image.pixels[y0:y1, x0:x1].copy()
    points, boxes, masks = [], [], [] if sample.instance_masks else None
    for c, pts in enumerate(sample.points):
        if len(pts):
            inside = (pts[:, 0] >= x0) & (pts[:, 0] < x1) \
                & (pts[:, 1] >= y0) & (pts[:, 1] < y1)
            points.append(pts[inside] - np.array([x0, y0], dtype=float))
        else:
            points.append(pts)
        kept_boxes, kept_masks = [], []
        eb = sample.exemplar_boxes[c].boxes
        for i, b in enumerate(eb):
            cx, cy = (b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0
            if not (x0 <= cx < x1 and y0 <= cy < y1):
                continue
            clipped = [max(b[0], x0) - x0, max(b[1], y0) - y0,
                       min(b[2], x1) - x0, min(b[3], y1) - y0]
            if clipped[2] - clipped[0] < 1 or clipped[3] - clipped[1] < 1:
                continue
            kept_boxes.append(clipped)
            if sample.instance_masks is not None:
                kept_masks.append(sample.instance_masks[c][i][y0:y1, x0:x1])
        boxes.append(ExemplarBoxes(np.array(kept_boxes).reshape(-1, 4)))
        if masks is not None:
            masks.append(kept_masks)
    return replace(sample, image=ImageInput(pixels, sample.image.normalized),
                   points=points, exemplar_boxes=boxes, instance_masks=masks)


def augment(sample: CountingSample, rng: np.random.Generator,
            cfg: AugmentConfig) -> CountingSample:
    """Flip (p=1/2), then either resize-only or crop-then-resize (p=1/2).

    A crop that would keep no point and no exemplar is re-drawn a
    bounded number of times and then skipped.
    """
    out = sample
    if rng.random() < cfg.flip_prob:
        out = hflip(out)
    do_crop = rng.random() < cfg.crop_prob
    if do_crop:
        h, w = out.image.pixels.shape[:2]
        lo, hi = cfg.crop_range
        for _ in range(cfg.max_retries):
            cw = int(min(w, rng.integers(lo, hi + 1)))
            ch = int(min(h, rng.integers(lo, hi + 1)))
            x0 = int(rng.integers(0, w - cw + 1))
            y0 = int(rng.integers(0, h - ch + 1))
            candidate = crop(out, (x0, y0, x0 + cw, y0 + ch))
            if sum(len(p) for p in candidate.points) > 0 \
                    or sum(len(b) for b in candidate.exemplar_boxes) > 0:
                out = candidate
                break
    size = int(rng.choice(cfg.scale_sizes))
    return resize(out, size)
