"""Set-prediction training loss: L1 on matched centers + focal on all scores.

The total is  lambda_loc * sum_matched |c_hat - c|  +  lambda_cls * focal,
where focal runs over every (query, prompt token) score.  A matched
query is positive for every prompt token of its target's class (words
and exemplars); separators and everything else are negatives, and
unmatched queries are all-negative rows.  The same lambdas weight the
matching cost.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .decoder import DecoderOutput
from .errors import DataError
from .matching import MatchResult, hungarian_match
from .tensor import Tensor


@dataclass
class LossConfig:
    lambda_loc: float = 1.0
    lambda_cls: float = 5.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    # matching-only stabilizer: queries adjacent to one object predict
    # near-identical centers, so matching by predicted center alone
    # flip-flops between them across steps and duplicates never die; a
    # small cost on the query's own grid location makes the assignment
    # deterministic.  Has no effect on the loss value itself.
    lambda_anchor: float = 1.0

    def __post_init__(self):
        if self.lambda_loc <= 0 or self.lambda_cls <= 0:
            raise DataError("loss weights must be positive")


def focal_positive_cost(logits: np.ndarray, cfg: LossConfig) -> np.ndarray:
    """Focal loss of calling these logits positive: alpha (1-p)^g (-log p).

    Computed from logits for stability:  -log p = softplus(-z)  and
    (1-p)^g = exp(-g * softplus(z)).
    """
    sp_pos = np.logaddexp(0.0, -logits)
    sp_neg = np.logaddexp(0.0, logits)
    return cfg.focal_alpha * np.exp(-cfg.focal_gamma * sp_neg) * sp_pos


def match_cost(out: DecoderOutput, target_points: np.ndarray,
               token_mask: np.ndarray, cfg: LossConfig | None = None,
               anchors: np.ndarray | None = None) -> np.ndarray:
    """(k, l) matching cost: lambda_loc L1(center) + lambda_cls focal(score).

    The score of query i is its max similarity over the masked prompt
    tokens; ``token_mask`` may also be a per-target list of masks for
    multi-class scenes.  ``anchors`` (the queries' own normalized grid
    locations) adds the lambda_anchor stabilizer used during training.
    """
    cfg = cfg or LossConfig()
    targets = np.asarray(target_points, dtype=np.float64).reshape(-1, 2)
    masks = token_mask if isinstance(token_mask, list) \
        else [np.asarray(token_mask, dtype=bool)] * len(targets)
    if len(masks) != len(targets):
        raise DataError(f"{len(targets)} targets but {len(masks)} token masks")
    centers = out.centers.data
    logits = out.logits.data
    k = centers.shape[0]
    loc = np.abs(centers[:, None, :] - targets[None, :, :]).sum(axis=2)
    cls = np.empty((k, len(targets)))
    for j, mask in enumerate(masks):
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise DataError("token mask selects no prompt tokens")
        best = logits[:, mask].max(axis=1)
        cls[:, j] = focal_positive_cost(best, cfg)
    cost = cfg.lambda_loc * loc + cfg.lambda_cls * cls
    if anchors is not None:
        anchors = np.asarray(anchors, dtype=np.float64).reshape(k, 2)
        cost = cost + cfg.lambda_anchor * np.abs(
            anchors[:, None, :] - targets[None, :, :]).sum(axis=2)
    return cost


def loss(out: DecoderOutput, match: MatchResult, target_points: np.ndarray,
         token_mask, cfg: LossConfig | None = None) -> Tensor:
    """Scalar training loss for one image given a fixed matching."""
    cfg = cfg or LossConfig()
    targets = np.asarray(target_points, dtype=np.float64).reshape(-1, 2)
    k, m = out.logits.shape
    masks = token_mask if isinstance(token_mask, list) \
        else [np.asarray(token_mask, dtype=bool)] * len(targets)

    if match.assignment:
        qidx = match.query_for_target
        picked = T.gather_rows(out.centers, qidx)
        ordered = targets[[j for _, j in match.assignment]]
        loc_term = T.tabs(picked - Tensor(ordered)).sum()
    else:
        loc_term = Tensor([0.0])

    positive = np.zeros((k, m))
    for (q, j) in match.assignment:
        positive[q, np.asarray(masks[j], dtype=bool)] = 1.0

    z = out.logits
    sp_neg = T.softplus(z)          # -log(1 - p)
    sp_pos = T.softplus(-z)         # -log p
    gamma = cfg.focal_gamma
    pos_term = cfg.focal_alpha * T.exp(-gamma * sp_neg) * sp_pos
    neg_term = (1.0 - cfg.focal_alpha) * T.exp(-gamma * sp_pos) * sp_neg
    focal = (Tensor(positive) * pos_term
             + Tensor(1.0 - positive) * neg_term).sum()

    return cfg.lambda_loc * loc_term + cfg.lambda_cls * focal


def match_and_loss(out: DecoderOutput, target_points, token_mask,
                   cfg: LossConfig | None = None,
                   anchors: np.ndarray | None = None,
                   ) -> tuple[Tensor, MatchResult]:
    """Convenience: cost, optimal matching, then the loss for it."""
    cfg = cfg or LossConfig()
    targets = np.asarray(target_points, dtype=np.float64).reshape(-1, 2)
    if len(targets) == 0:
        match = MatchResult([], list(range(out.logits.shape[0])), 0.0)
    else:
        with T.no_grad():
            cost = match_cost(out, targets, token_mask, cfg, anchors)
        match = hungarian_match(cost, canonical=True)
    return loss(out, match, targets, token_mask, cfg), match
