"""Deterministic synthetic counting scenes with exact annotations.

Scenes are colored shapes on a noisy gray background.  Because the
renderer places every instance itself, points, exemplar boxes, and
per-instance masks are exact by construction, which makes ground truth
free and experiments reproducible from a single seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoders import ExemplarBoxes, ImageInput
from .errors import DataError

COLOR_TABLE = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.65, 0.15),
    "blue": (0.15, 0.25, 0.85),
    "yellow": (0.90, 0.85, 0.10),
    "magenta": (0.85, 0.15, 0.80),
    "orange": (0.95, 0.55, 0.10),
    "purple": (0.50, 0.15, 0.70),
    "teal": (0.10, 0.60, 0.60),
    "cyan": (0.15, 0.85, 0.90),
    "pink": (0.95, 0.60, 0.75),
    "lime": (0.60, 0.90, 0.20),
    "brown": (0.55, 0.35, 0.15),
    "white": (0.98, 0.98, 0.98),
    "olive": (0.50, 0.50, 0.10),
    "navy": (0.10, 0.10, 0.45),
}

SHAPES = ("circle", "square", "triangle", "cross")


@dataclass
class ClassDef:
    """One object category in a scene."""
    name: str                  # caption class name, e.g. "circle" or "red circle"
    shape: str
    color: tuple
    size_range: tuple = (3.5, 5.5)   # half-extent range in pixels


@dataclass
class SceneSpec:
    """Everything needed to render one scene deterministically."""
    width: int
    height: int
    classes: list[ClassDef]
    counts: list[int]
    clutter: float = 0.3       # 0 = well separated, 1 = touching allowed
    self_similar: bool = False  # draw each instance as two identical sub-parts
    noise: float = 0.02
    background: float = 0.42
    n_exemplars: int = 3
    seed: int = 0

    def __post_init__(self):
        if len(self.classes) != len(self.counts):
            raise DataError("one count per class required")
        if any(c < 0 for c in self.counts):
            raise DataError("counts must be non-negative")
        if not 0.0 <= self.clutter <= 1.0:
            raise DataError("clutter must be in [0, 1]")


@dataclass
class CountingSample:
    """A scene image with exact per-class annotations."""
    image: ImageInput
    class_names: list[str]
    points: list[np.ndarray]               # per class, (n, 2) of (x, y)
    exemplar_boxes: list[ExemplarBoxes]    # per class
    instance_masks: list[list[np.ndarray]] | None = None  # per class, per exemplar
    keyword: str | None = None
    image_id: str = ""

    def primary_count(self) -> int:
        return len(self.points[0])


def _shape_mask(shape: str, xx, yy, cx, cy, r) -> np.ndarray:
    dx, dy = xx - cx, yy - cy
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return (np.abs(dx) <= 0.9 * r) & (np.abs(dy) <= 0.9 * r)
    if shape == "triangle":
        return (np.abs(dy) <= r) & (np.abs(dx) <= (dy + r) * 0.55)
    if shape == "cross":
        arm = r / 3.0
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) \
            | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    raise DataError(f"unknown shape {shape!r}")


def _instance_mask(spec: SceneSpec, cls: ClassDef, xx, yy, cx, cy, r):
    if spec.self_similar:
        # two identical sub-parts; a naive detector sees two objects
        sub = 0.55 * r
        off = 0.7 * r
        return _shape_mask(cls.shape, xx, yy, cx - off, cy, sub) \
            | _shape_mask(cls.shape, xx, yy, cx + off, cy, sub)
    return _shape_mask(cls.shape, xx, yy, cx, cy, r)


def _effective_extent(spec: SceneSpec, r: float) -> float:
    return 1.25 * r if spec.self_similar else r


def generate(spec: SceneSpec) -> CountingSample:
    """Render a scene; pure function of the spec (seed included)."""
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    canvas = np.full((h, w, 3), spec.background)

    placed: list[tuple[float, float, float]] = []   # (cx, cy, extent)
    spacing = 1.8 - 0.8 * spec.clutter
    per_class: list[list[tuple[float, float, float]]] = []
    for cls, count in zip(spec.classes, spec.counts):
        mine = []
        for _ in range(count):
            for attempt in range(400):
                r = rng.uniform(*cls.size_range)
                ext = _effective_extent(spec, r)
                margin = ext + 2.0
                if 2 * margin >= min(w, h):
                    raise DataError("object too large for the canvas")
                cx = rng.uniform(margin, w - margin)
                cy = rng.uniform(margin, h - margin)
                ok = all(np.hypot(cx - px, cy - py)
                         >= (ext + pe) * spacing + 1.0
                         for px, py, pe in placed)
                if ok:
                    placed.append((cx, cy, ext))
                    mine.append((cx, cy, r))
                    break
            else:
                raise DataError(
                    f"unplaceable spec: {sum(spec.counts)} objects do not fit "
                    f"on a {w}x{h} canvas at clutter {spec.clutter}")
        per_class.append(mine)

    class_names, points, boxes_per_class, masks_per_class = [], [], [], []
    for cls, mine in zip(spec.classes, per_class):
        class_names.append(cls.name)
        pts = np.array([(cx, cy) for cx, cy, _ in mine]).reshape(-1, 2)
        points.append(pts)
        boxes, masks = [], []
        for idx, (cx, cy, r) in enumerate(mine):
            mask = _instance_mask(spec, cls, xx, yy, cx, cy, r)
            canvas[mask] = cls.color
            if idx < spec.n_exemplars:
                ext = _effective_extent(spec, r)
                boxes.append([max(0.0, cx - ext - 1), max(0.0, cy - ext - 1),
                              min(float(w), cx + ext + 1),
                              min(float(h), cy + ext + 1)])
                masks.append(mask)
        boxes_per_class.append(ExemplarBoxes(np.array(boxes).reshape(-1, 4)))
        masks_per_class.append(masks)

    if spec.noise > 0:
        canvas = np.clip(canvas + rng.normal(0, spec.noise, size=canvas.shape),
                         0.0, 1.0)
    image = ImageInput(canvas, normalized=True)
    return CountingSample(image, class_names, points, boxes_per_class,
                          masks_per_class)


def sample_spec(rng: np.random.Generator, width=96, height=96,
                shapes=("circle", "square", "triangle"),
                colors=("red", "green", "blue", "yellow", "magenta",
                        "orange", "purple", "teal"),
                count_range=(7, 30), n_classes=1, clutter=0.3,
                size_range=(3.5, 5.5), self_similar=False,
                name_style="shape", n_exemplars=3) -> SceneSpec:
    """Draw a random scene spec from the given pools (seeded by ``rng``)."""
    chosen_shapes = rng.choice(len(shapes), size=n_classes, replace=False)
    chosen_colors = rng.choice(len(colors), size=n_classes, replace=False)
    classes, counts = [], []
    for s, c in zip(chosen_shapes, chosen_colors):
        shape, color = shapes[int(s)], colors[int(c)]
        name = shape if name_style == "shape" else f"{color} {shape}"
        classes.append(ClassDef(name, shape, COLOR_TABLE[color], size_range))
        counts.append(int(rng.integers(count_range[0], count_range[1] + 1)))
    return SceneSpec(width, height, classes, counts, clutter=clutter,
                     self_similar=self_similar, n_exemplars=n_exemplars,
                     seed=int(rng.integers(0, 2 ** 31)))


def build_dataset(n: int, rng: np.random.Generator, **kwargs) -> list[CountingSample]:
    """Generate n scenes, re-drawing any spec that fails to place."""
    out = []
    while len(out) < n:
        spec = sample_spec(rng, **kwargs)
        try:
            sample = generate(spec)
        except DataError:
            continue
        sample.image_id = f"{len(out):04d}"
        out.append(sample)
    return out
