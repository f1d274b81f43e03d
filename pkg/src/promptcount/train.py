"""Optimizer, schedule, and the per-image training loop.

Each step runs one image through the model, Hungarian-matches the
predicted queries to that image's points, backpropagates the combined
localization/classification loss, and applies one Adam update.  The
learning rate decays by a fixed factor on a fixed epoch cadence and
training stops early when validation MAE stops improving.
"""

from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .augment import AugmentConfig, augment
from .counting import count, evaluate
from .decoder import DecoderOutput
from .encoders import ExemplarBoxes, make_caption
from .errors import ConfigError, DataError
from .fusion import ANONYMOUS_CLASS
from .losses import LossConfig, match_and_loss
from .scenes import CountingSample


@dataclass
class TrainSchedule:
    """Epoch budget and learning-rate decay."""
    epochs: int = 30
    lr0: float = 1e-4
    decay_factor: float = 0.1
    decay_every: int = 10
    weight_decay: float = 1e-4
    patience: int | None = None     # early stop on stalled validation MAE

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 1-indexed epoch (decays every N epochs)."""
        if epoch < 1:
            raise ConfigError("epochs are 1-indexed")
        return self.lr0 * self.decay_factor ** ((epoch - 1) // self.decay_every)


class Adam:
    """Adam with decoupled weight decay over a named parameter dict."""

    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0, freeze: tuple = ()):
        self.params = {name: p for name, p in params.items()
                       if not any(name.startswith(f) for f in freeze)}
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            update = (self.m[name] / b1c) / (np.sqrt(self.v[name] / b2c) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= lr * update

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


@dataclass
class TrainConfig:
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    loss: LossConfig = field(default_factory=LossConfig)
    sigma: float = 0.23
    modality: str = "both"          # both | text | exemplar
    augment: bool = True
    augment_config: AugmentConfig | None = None
    max_steps: int | None = None
    seed: int = 0
    freeze: tuple = ()              # parameter-name prefixes left untouched
    # weight of the selection-alignment term: with untrained encoders the
    # token/prompt similarity that drives query selection gets no signal
    # from the decoder loss alone, so it is supervised directly (a token
    # is positive when an object center falls in its grid cell)
    aux_weight: float = 1.0
    log_path: str | None = None
    checkpoint_path: str | None = None


@dataclass
class TrainResult:
    history: list[dict]
    best_val_mae: float
    best_epoch: int
    steps: int
    checkpoint_path: str | None


def build_prompt(model, sample: CountingSample, modality: str = "both"):
    """Caption, exemplar boxes, and class labels for one training sample.

    All scene classes are concatenated into a single caption; each
    class's exemplars are tagged with its span index.  Text-only drops
    the boxes; exemplar-only drops the caption (single-class scenes
    only, since anonymous exemplars cannot be told apart).
    """
    if modality not in ("both", "text", "exemplar"):
        raise ConfigError(f"unknown modality {modality!r}")
    prompt = None
    if modality in ("both", "text"):
        prompt = make_caption(sample.class_names, model.vocab,
                              keyword=sample.keyword,
                              max_text_len=model.config.max_text_len)
    boxes = None
    exemplar_classes: list[int] = []
    if modality in ("both", "exemplar"):
        stacked = []
        for c, eb in enumerate(sample.exemplar_boxes):
            for b in eb.boxes:
                stacked.append(b)
                exemplar_classes.append(c if prompt is not None
                                        else ANONYMOUS_CLASS)
        if modality == "exemplar" and len(sample.class_names) > 1:
            raise DataError("exemplar-only prompts support one class per scene")
        if stacked:
            boxes = ExemplarBoxes(np.array(stacked))
    return prompt, boxes, np.asarray(exemplar_classes, dtype=np.int64)


def training_targets(sample: CountingSample, token_set):
    """Stacked normalized points plus a per-target token mask."""
    h, w = sample.image.pixels.shape[:2]
    points, masks = [], []
    for c, pts in enumerate(sample.points):
        if len(pts) == 0:
            continue
        mask = token_set.class_mask(c) if token_set.class_token_indices \
            else token_set.full_mask()
        for p in pts:
            points.append((p[0] / w, p[1] / h))
            masks.append(mask)
    return np.array(points).reshape(-1, 2), masks


def selection_alignment_loss(trace: dict, token_set, sample: CountingSample,
                             cfg: LossConfig):
    """Focal term on the raw token/prompt similarities behind Select.

    An image token is positive for the prompt tokens of class c exactly
    when some class-c object center falls inside its grid cell at the
    finest stride; coarser-level tokens are all negative, so each object
    aligns with a single token and duplicates are discouraged.
    """
    img_feats = trace["img_feats"]
    tok_feats = trace["tok_feats"]
    msf = trace["msf"]
    n, m = img_feats.shape[0], tok_feats.shape[0]
    positive = np.zeros((n, m))
    neg_weight = np.ones((n, m))
    (gh, gw), stride = msf.grids[0], msf.strides[0]
    for c, pts in enumerate(sample.points):
        if len(pts) == 0 or c >= len(token_set.class_token_indices):
            continue
        cols = token_set.class_token_indices[c]
        cc = np.clip((pts[:, 0] // stride).astype(int), 0, gw - 1)
        rr = np.clip((pts[:, 1] // stride).astype(int), 0, gh - 1)
        rows = rr * gw + cc
        positive[np.ix_(rows, cols)] = 1.0
        # duplicates fire from the cells around an object center: give
        # those negatives extra weight so near-misses are pushed down hard
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                r2 = np.clip(rr + dr, 0, gh - 1)
                c2 = np.clip(cc + dc, 0, gw - 1)
                neg_weight[np.ix_(r2 * gw + c2, cols)] = 3.0
    logits = T.matmul(img_feats, T.transpose(tok_feats)) \
        * (1.0 / math.sqrt(img_feats.shape[1]))
    sp_neg = T.softplus(logits)
    sp_pos = T.softplus(-logits)
    gamma = cfg.focal_gamma
    pos_term = cfg.focal_alpha * T.exp(-gamma * sp_neg) * sp_pos
    neg_term = (1.0 - cfg.focal_alpha) * T.exp(-gamma * sp_pos) * sp_neg
    return (T.Tensor(positive) * pos_term
            + T.Tensor(neg_weight * (1.0 - positive)) * neg_term).sum()


def train_step(model, sample: CountingSample, cfg: TrainConfig,
               optimizer: Adam, lr: float) -> float:
    """One forward/backward/update on a single sample; returns the loss."""
    prompt, boxes, ex_classes = build_prompt(model, sample, cfg.modality)
    T.reset_tape()
    trace: dict = {}
    out, token_set = model.forward(sample.image, prompt, boxes, ex_classes,
                                   trace=trace)
    targets, masks = training_targets(sample, token_set)
    if len(targets) > out.logits.shape[0]:
        raise DataError(
            f"{len(targets)} targets exceed the query budget "
            f"{out.logits.shape[0]}; raise k or crop the scene")
    token_masks = masks if masks else token_set.full_mask()
    anchors = trace["msf"].token_centers()[out.selection.indices]
    value, _ = match_and_loss(out, targets, token_masks, cfg.loss, anchors)
    for logits, centers in out.aux:     # deep supervision per decoder block
        block_out = DecoderOutput(T.sigmoid(logits), logits, centers,
                                  out.selection)
        block_loss, _ = match_and_loss(block_out, targets, token_masks,
                                       cfg.loss, anchors)
        value = value + block_loss
    if cfg.aux_weight > 0:
        value = value + cfg.aux_weight * selection_alignment_loss(
            trace, token_set, sample, cfg.loss)
    loss_val = value.item()
    if not math.isfinite(loss_val):
        raise RuntimeError(
            f"training diverged: loss={loss_val} on image "
            f"{sample.image_id or '<unnamed>'}")
    T.backward(value)
    optimizer.step(lr)
    optimizer.zero_grad()
    T.reset_tape()
    return loss_val


def validate(model, samples, cfg: TrainConfig) -> tuple[float, float]:
    """MAE/RMSE of primary-class counts at the configured threshold."""
    preds, gts = [], []
    for sample in samples:
        prompt, boxes, ex_classes = build_prompt(model, sample, cfg.modality)
        with T.no_grad():
            out, token_set = model.forward(sample.image, prompt, boxes,
                                           ex_classes)
        mask = token_set.class_mask(0) if token_set.class_token_indices \
            else token_set.full_mask()
        preds.append(count(out, cfg.sigma, mask).count)
        gts.append(sample.primary_count())
    return evaluate(preds, gts)


def train(model, train_samples, val_samples=None,
          cfg: TrainConfig | None = None) -> TrainResult:
    """Optimize the model; logs one CSV row per epoch and keeps the
    best-by-validation-MAE checkpoint when a path is configured."""
    cfg = cfg or TrainConfig()
    if not train_samples:
        raise DataError("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    aug_cfg = cfg.augment_config or AugmentConfig.for_side(model.config.image_side)
    optimizer = Adam(model.params(), weight_decay=cfg.schedule.weight_decay,
                     freeze=cfg.freeze)
    history: list[dict] = []
    best = (float("inf"), 0)
    steps = 0
    stale = 0
    if cfg.log_path:
        with open(cfg.log_path, "w", newline="") as fh:
            csv.writer(fh).writerow(["epoch", "loss", "val_mae", "val_rmse", "lr"])
    for epoch in range(1, cfg.schedule.epochs + 1):
        lr = cfg.schedule.lr_at(epoch)
        order = rng.permutation(len(train_samples))
        losses = []
        for idx in order:
            sample = train_samples[int(idx)]
            if cfg.augment:
                sample = augment(sample, rng, aug_cfg)
            losses.append(train_step(model, sample, cfg, optimizer, lr))
            steps += 1
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        val_mae = val_rmse = float("nan")
        if val_samples:
            val_mae, val_rmse = validate(model, val_samples, cfg)
            if val_mae < best[0]:
                best = (val_mae, epoch)
                stale = 0
                if cfg.checkpoint_path:
                    model.save(cfg.checkpoint_path, epoch=epoch,
                               metrics={"val_mae": val_mae,
                                        "val_rmse": val_rmse})
            else:
                stale += 1
        row = {"epoch": epoch, "loss": mean_loss, "val_mae": val_mae,
               "val_rmse": val_rmse, "lr": lr}
        history.append(row)
        if cfg.log_path:
            with open(cfg.log_path, "a", newline="") as fh:
                csv.writer(fh).writerow(
                    [epoch, f"{mean_loss:.6f}", f"{val_mae:.4f}",
                     f"{val_rmse:.4f}", f"{lr:.2e}"])
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break
        if val_samples and cfg.schedule.patience is not None \
                and stale > cfg.schedule.patience:
            break
    if cfg.checkpoint_path and not val_samples:
        model.save(cfg.checkpoint_path, epoch=history[-1]["epoch"],
                   metrics={"train_loss": history[-1]["loss"]})
    return TrainResult(history, best[0], best[1], steps,
                       cfg.checkpoint_path)
