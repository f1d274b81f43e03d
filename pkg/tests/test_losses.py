import math

import numpy as np
import pytest

from promptcount import tensor as T
from promptcount.decoder import DecoderOutput, QueryDecoder, QuerySelection, \
    select_queries
from promptcount.errors import DataError
from promptcount.losses import LossConfig, focal_positive_cost, loss, \
    match_and_loss, match_cost
from promptcount.matching import MatchResult, hungarian_match
from promptcount.tensor import Tensor

from gradcheck import assert_grads_match


def logit(p):
    return math.log(p / (1.0 - p))


def fake_output(centers, similarities):
    """DecoderOutput with fixed numbers (no decoder run)."""
    logits = Tensor(np.vectorize(logit)(np.asarray(similarities, dtype=float)))
    return DecoderOutput(
        similarity=T.sigmoid(logits),
        logits=logits,
        centers=Tensor(np.asarray(centers, dtype=float)),
        selection=QuerySelection(len(centers), np.arange(len(centers)),
                                 Tensor(np.zeros((len(centers), 1)))),
    )


class TestFocalValues:
    def test_positive_at_certainty_is_zero(self):
        val = focal_positive_cost(np.array([80.0]), LossConfig())
        assert val[0] == pytest.approx(0.0, abs=1e-30)

    def test_positive_at_half_matches_closed_form(self):
        # alpha (1-p)^gamma (-log p) = 0.25 * 0.25 * ln 2
        val = focal_positive_cost(np.array([0.0]), LossConfig())
        assert val[0] == pytest.approx(0.25 * 0.25 * math.log(2.0), rel=1e-12)

    def test_monotone_decreasing_in_confidence(self):
        vals = focal_positive_cost(np.linspace(-5, 5, 21), LossConfig())
        assert np.all(np.diff(vals) < 0)


class TestMatchCost:
    def test_perfect_prediction_is_column_minimum(self):
        out = fake_output(
            centers=[[0.2, 0.3], [0.8, 0.8], [0.5, 0.1]],
            similarities=[[0.999, 0.5], [0.4, 0.3], [0.2, 0.2]])
        cost = match_cost(out, [[0.2, 0.3]], np.array([True, False]))
        assert cost[0, 0] == pytest.approx(0.0, abs=1e-2)
        assert cost[0, 0] < cost[1, 0] and cost[0, 0] < cost[2, 0]

    def test_default_lambdas_are_one_and_five(self):
        cfg = LossConfig()
        assert cfg.lambda_loc == 1.0 and cfg.lambda_cls == 5.0
        assert cfg.focal_alpha == 0.25 and cfg.focal_gamma == 2.0

    def test_doubling_lambda_loc_doubles_only_l1_part(self):
        out = fake_output(centers=[[0.1, 0.1], [0.9, 0.9]],
                          similarities=[[0.7], [0.4]])
        targets = [[0.3, 0.5]]
        mask = np.array([True])
        base = match_cost(out, targets, mask, LossConfig(lambda_loc=1.0))
        doubled = match_cost(out, targets, mask, LossConfig(lambda_loc=2.0))
        cls_only = match_cost(out, targets, mask,
                              LossConfig(lambda_loc=1e-12))
        l1 = base - cls_only
        np.testing.assert_allclose(doubled - cls_only, 2 * l1, rtol=1e-9)

    def test_empty_token_mask_rejected(self):
        out = fake_output(centers=[[0.5, 0.5]], similarities=[[0.5]])
        with pytest.raises(DataError):
            match_cost(out, [[0.5, 0.5]], np.array([False]))

    def test_scaling_both_lambdas_preserves_argmin(self):
        rng = np.random.default_rng(3)
        out = fake_output(centers=rng.uniform(size=(6, 2)),
                          similarities=rng.uniform(0.05, 0.95, size=(6, 3)))
        targets = rng.uniform(size=(4, 2))
        mask = np.array([True, True, False])
        a = match_cost(out, targets, mask, LossConfig(1.0, 5.0))
        b = match_cost(out, targets, mask, LossConfig(3.0, 15.0))
        np.testing.assert_allclose(b, 3.0 * a, rtol=1e-9)
        assert hungarian_match(a).assignment == hungarian_match(b).assignment


class TestLoss:
    def test_zero_targets_penalizes_only_background(self):
        out = fake_output(centers=[[0.5, 0.5], [0.2, 0.2]],
                          similarities=[[0.5, 0.5], [0.5, 0.5]])
        match = MatchResult([], [0, 1], 0.0)
        cfg = LossConfig()
        value = loss(out, match, np.zeros((0, 2)), np.array([True, True]), cfg)
        # all four scores are background at p=0.5:
        # (1-alpha) p^gamma (-log(1-p)) each
        expect = cfg.lambda_cls * 4 * 0.75 * 0.25 * math.log(2.0)
        assert value.item() == pytest.approx(expect, rel=1e-9)

    def test_perfect_match_loss_near_zero(self):
        out = fake_output(centers=[[0.25, 0.75]],
                          similarities=[[1 - 1e-9]])
        match = MatchResult([(0, 0)], [], 0.0)
        value = loss(out, match, [[0.25, 0.75]], np.array([True]))
        assert value.item() == pytest.approx(0.0, abs=1e-6)

    def test_loss_permutation_invariant_to_target_order(self):
        rng = np.random.default_rng(5)
        out = fake_output(centers=rng.uniform(size=(5, 2)),
                          similarities=rng.uniform(0.05, 0.95, size=(5, 2)))
        targets = rng.uniform(size=(3, 2))
        mask = np.array([True, True])
        v1, _ = match_and_loss(out, targets, mask)
        v2, _ = match_and_loss(out, targets[::-1].copy(), mask)
        assert v1.item() == pytest.approx(v2.item(), rel=1e-12)

    def test_common_lambda_scale_scales_loss(self):
        rng = np.random.default_rng(6)
        out = fake_output(centers=rng.uniform(size=(4, 2)),
                          similarities=rng.uniform(0.05, 0.95, size=(4, 2)))
        targets = rng.uniform(size=(2, 2))
        mask = np.array([True, True])
        v1, m1 = match_and_loss(out, targets, mask, LossConfig(1.0, 5.0))
        v2, m2 = match_and_loss(out, targets, mask, LossConfig(2.0, 10.0))
        assert v2.item() == pytest.approx(2.0 * v1.item(), rel=1e-9)
        assert m1.assignment == m2.assignment

    def test_multi_class_masks_per_target(self):
        out = fake_output(centers=[[0.1, 0.1], [0.9, 0.9]],
                          similarities=[[0.9, 0.1], [0.1, 0.9]])
        targets = np.array([[0.1, 0.1], [0.9, 0.9]])
        masks = [np.array([True, False]), np.array([False, True])]
        value, match = match_and_loss(out, targets, masks)
        assert match.assignment == [(0, 0), (1, 1)]

    def test_full_loss_gradient_matches_finite_differences(self):
        # 3-query / 2-target toy through the real decoder, fixed matching.
        rng = np.random.default_rng(8)
        dec = QueryDecoder(rng, width=8, n_heads=2, n_blocks=1)
        img = Tensor(rng.normal(size=(6, 8)))
        tok = Tensor(rng.normal(size=(2, 8)), requires_grad=True)
        centers_grid = rng.uniform(size=(6, 2))
        targets = np.array([[0.3, 0.4], [0.7, 0.6]])
        mask = np.array([True, True])
        sel_idx = select_queries(img, tok, k=3).indices

        def run():
            sel = select_queries(img, tok, k=3)
            return dec(img, tok, sel, centers_grid)

        with T.no_grad():
            fixed_match = hungarian_match(
                match_cost(run(), targets, mask))

        def f():
            return loss(run(), fixed_match, targets, mask)

        blk = dec.blocks[0]
        params = {
            "tok": tok,
            "out_proj.w": dec.out_proj.w,
            "center_out.w": dec.center_out.w,
            "self.wv": blk["self"].wv[0].w,
            "ffn.w": blk["ffn"].lin1.w,
        }
        assert_grads_match(f, params, max_coords=6)
        assert (select_queries(img, tok, k=3).indices == sel_idx).all()
