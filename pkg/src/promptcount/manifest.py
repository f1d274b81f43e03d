"""Annotation manifests: versioned JSON schema, corrections, name rules.

A manifest maps image ids to per-class annotations (points, exemplar
boxes, optional instance masks and a scoring keyword).  Loading applies
two kinds of fixes: class-name normalization (article stripping,
trailing-phrase removal, singularization via a small rule table) and
explicit per-image correction records that drop bad exemplars or
override a bad description.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .encoders import ExemplarBoxes, ImageInput
from .errors import ManifestError
from .scenes import CountingSample

SCHEMA_VERSION = 1

ARTICLES = ("the", "a", "an")
PREPOSITIONS = {"in", "on", "at", "of", "with", "from", "by", "near",
                "inside", "under", "over", "between", "behind"}
IRREGULAR_SINGULARS = {
    "geese": "goose", "mice": "mouse", "men": "man", "women": "woman",
    "children": "child", "people": "person", "feet": "foot", "teeth": "tooth",
}


def singularize(word: str) -> str:
    """Suffix-rule singularization with a small exception table."""
    if word in IRREGULAR_SINGULARS:
        return IRREGULAR_SINGULARS[word]
    if len(word) > 3 and word.endswith("ies"):
        return word[:-3] + "y"
    if len(word) > 4 and word.endswith(("shes", "ches", "xes", "zes", "sses", "oes")):
        return word[:-2]
    if len(word) > 3 and word.endswith("s") and not word.endswith("ss"):
        return word[:-1]
    return word


def normalize_class_name(name: str) -> str:
    """Lowercase, strip a leading article, cut any trailing prepositional
    phrase, and singularize the head (final) word.

    "the donuts in the donut tray" -> "donut".
    """
    words = name.lower().split()
    if words and words[0] in ARTICLES:
        words = words[1:]
    for i, word in enumerate(words):
        if word in PREPOSITIONS:
            words = words[:i]
            break
    if not words:
        raise ManifestError(f"class name {name!r} normalizes to nothing")
    words[-1] = singularize(words[-1])
    return " ".join(words)


# ---------------------------------------------------------------------------
# masks and images

def mask_to_rle(mask: np.ndarray) -> str:
    """Row-major run-length encoding: 'rle:H,W:start-length,...'."""
    mask = np.asarray(mask, dtype=bool)
    flat = mask.reshape(-1)
    padded = np.concatenate([[0], flat.astype(np.int8), [0]])
    flips = np.flatnonzero(np.diff(padded))   # True-run boundaries
    body = ",".join(f"{int(s)}-{int(e - s)}"
                    for s, e in zip(flips[0::2], flips[1::2]))
    return f"rle:{mask.shape[0]},{mask.shape[1]}:{body}"


def rle_to_mask(text: str) -> np.ndarray:
    if not text.startswith("rle:"):
        raise ManifestError(f"not an RLE mask string: {text[:30]!r}")
    try:
        _, dims, body = text.split(":", 2)
        h, w = (int(v) for v in dims.split(","))
        mask = np.zeros(h * w, dtype=bool)
        if body:
            for run in body.split(","):
                start, length = (int(v) for v in run.split("-"))
                mask[start:start + length] = True
        return mask.reshape(h, w)
    except (ValueError, IndexError) as exc:
        raise ManifestError(f"malformed RLE mask: {exc}") from exc


def save_image_png(pixels: np.ndarray, path) -> None:
    arr = np.clip(np.asarray(pixels) * 255.0, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_image_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


# ---------------------------------------------------------------------------
# manifest IO

def _require(cond: bool, image_id: str, fieldname: str, detail: str) -> None:
    if not cond:
        raise ManifestError(f"image {image_id}: {fieldname} {detail}")


def save_manifest(samples: list[CountingSample], out_dir, *,
                  write_images: bool = True,
                  corrections: list[dict] | None = None) -> str:
    """Write images/ plus manifest.json under ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    if write_images:
        os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        image_id = s.image_id or f"{i:04d}"
        rel = f"images/{image_id}.png"
        if write_images:
            save_image_png(s.image.pixels, os.path.join(out_dir, rel))
        classes = []
        for c, name in enumerate(s.class_names):
            entry = {
                "name": name,
                "points": np.asarray(s.points[c]).round(3).tolist(),
                "exemplar_boxes": s.exemplar_boxes[c].boxes.round(3).tolist(),
            }
            if s.instance_masks is not None and s.instance_masks[c]:
                entry["masks"] = [mask_to_rle(m) for m in s.instance_masks[c]]
            if c == 0 and s.keyword:
                entry["keyword"] = s.keyword
            classes.append(entry)
        h, w = s.image.pixels.shape[:2]
        entries.append({"id": image_id, "image": rel, "width": w, "height": h,
                        "classes": classes})
    doc = {"schema_version": SCHEMA_VERSION, "images": entries}
    if corrections:
        doc["corrections"] = corrections
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
    return path


def load_manifest(path, *, load_images: bool = True) -> list[CountingSample]:
    """Load and validate a manifest; applies corrections and name rules.

    Correction records: {"id": ..., "drop_exemplars": true} discards all
    exemplar boxes and masks of that image (text-only prompting);
    {"id": ..., "override_text": "..."} replaces the first class name.
    """
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ManifestError(
            f"unsupported schema_version {doc.get('schema_version')!r}")
    base = os.path.dirname(os.path.abspath(path))
    corrections = {c["id"]: c for c in doc.get("corrections", [])}
    samples = []
    for entry in doc.get("images", []):
        image_id = str(entry.get("id", "<missing id>"))
        _require("image" in entry, image_id, "image", "path is required")
        _require(isinstance(entry.get("classes"), list) and entry["classes"],
                 image_id, "classes", "must be a non-empty list")
        fix = corrections.get(image_id, {})
        if load_images:
            img_path = os.path.join(base, entry["image"])
            _require(os.path.exists(img_path), image_id, "image",
                     f"file not found: {entry['image']}")
            pixels = load_image_png(img_path)
        else:
            w = int(entry.get("width", 0))
            h = int(entry.get("height", 0))
            _require(w >= 32 and h >= 32, image_id, "width/height",
                     "required when images are not loaded")
            pixels = np.zeros((h, w, 3))
        h, w = pixels.shape[:2]
        names, points, boxes, masks, keyword = [], [], [], [], None
        for ci, cls in enumerate(entry["classes"]):
            fieldname = f"classes[{ci}]"
            _require(isinstance(cls.get("name"), str) and cls["name"].strip(),
                     image_id, f"{fieldname}.name", "is required")
            name = cls["name"]
            if ci == 0 and "override_text" in fix:
                name = fix["override_text"]
            names.append(normalize_class_name(name))
            pts = np.asarray(cls.get("points", []), dtype=np.float64)
            pts = pts.reshape(-1, 2) if pts.size else np.zeros((0, 2))
            _require(bool(np.all((pts[:, 0] >= 0) & (pts[:, 0] < w)
                                 & (pts[:, 1] >= 0) & (pts[:, 1] < h)))
                     if len(pts) else True,
                     image_id, f"{fieldname}.points", "must lie inside the image")
            points.append(pts)
            if fix.get("drop_exemplars"):
                boxes.append(ExemplarBoxes(np.zeros((0, 4))))
                masks.append([])
                continue
            raw_boxes = np.asarray(cls.get("exemplar_boxes", []),
                                   dtype=np.float64)
            raw_boxes = raw_boxes.reshape(-1, 4) if raw_boxes.size \
                else np.zeros((0, 4))
            eb = ExemplarBoxes(raw_boxes)
            try:
                eb.validate_for(w, h)
            except Exception as exc:
                raise ManifestError(
                    f"image {image_id}: {fieldname}.exemplar_boxes {exc}") from exc
            boxes.append(eb)
            cls_masks = []
            for mi, m in enumerate(cls.get("masks", [])):
                if isinstance(m, str) and m.startswith("rle:"):
                    arr = rle_to_mask(m)
                elif isinstance(m, str):
                    arr = load_image_png(os.path.join(base, m)).mean(axis=2) > 0.5
                else:
                    raise ManifestError(
                        f"image {image_id}: {fieldname}.masks[{mi}] must be "
                        "an RLE string or a file path")
                _require(arr.shape == (h, w), image_id,
                         f"{fieldname}.masks[{mi}]",
                         f"shape {arr.shape} does not match image {h}x{w}")
                cls_masks.append(arr)
            masks.append(cls_masks)
            if ci == 0 and cls.get("keyword"):
                keyword = str(cls["keyword"])
        samples.append(CountingSample(
            image=ImageInput(pixels, normalized=True),
            class_names=names, points=points, exemplar_boxes=boxes,
            instance_masks=masks, keyword=keyword, image_id=image_id))
    return samples
