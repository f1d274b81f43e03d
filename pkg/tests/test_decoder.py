import numpy as np
import pytest

from promptcount import tensor as T
from promptcount.decoder import QueryDecoder, select_queries
from promptcount.errors import PromptError, ShapeError
from promptcount.tensor import Tensor

from gradcheck import assert_grads_match

WIDTH = 16


def rng(seed=0):
    return np.random.default_rng(seed)


def features_with_row_max(row_maxes, width=WIDTH):
    """Image features whose max prompt similarity equals the given values."""
    n = len(row_maxes)
    img = np.zeros((n, width))
    img[:, 0] = row_maxes
    tok = np.zeros((2, width))
    tok[0, 0] = 1.0
    tok[1, 0] = 0.5
    return Tensor(img), Tensor(tok)


class TestSelectQueries:
    def test_top_k_by_row_max(self):
        img, tok = features_with_row_max([0.9, 0.1, 0.5])
        sel = select_queries(img, tok, k=2)
        assert set(sel.indices.tolist()) == {0, 2}
        assert sel.indices.tolist() == [0, 2]

    def test_tie_break_by_lower_index(self):
        img, tok = features_with_row_max([0.5, 0.5, 0.5])
        sel = select_queries(img, tok, k=2)
        assert sel.indices.tolist() == [0, 1]

    def test_matches_brute_force(self):
        r = rng(1)
        for _ in range(20):
            img = Tensor(r.normal(size=(12, WIDTH)))
            tok = Tensor(r.normal(size=(3, WIDTH)))
            k = int(r.integers(1, 12))
            sel = select_queries(img, tok, k)
            sims = (img.data @ tok.data.T).max(axis=1)
            best = set(np.sort(np.argsort(-sims, kind="stable")[:k]).tolist())
            assert set(sel.indices.tolist()) == best

    def test_budget_900_accepted_when_enough_tokens(self):
        r = rng(2)
        img = Tensor(r.normal(size=(1000, 8)))
        tok = Tensor(r.normal(size=(4, 8)))
        sel = select_queries(img, tok, k=900)
        assert sel.indices.shape == (900,)
        assert len(set(sel.indices.tolist())) == 900

    def test_k_equal_n_is_a_permutation(self):
        r = rng(3)
        img = Tensor(r.normal(size=(15, 8)))
        tok = Tensor(r.normal(size=(2, 8)))
        sel = select_queries(img, tok, k=15)
        assert sorted(sel.indices.tolist()) == list(range(15))

    def test_k_above_n_rejected(self):
        img, tok = features_with_row_max([0.1, 0.2])
        with pytest.raises(ShapeError, match="budget"):
            select_queries(img, tok, k=3)

    def test_empty_prompt_rejected(self):
        img = Tensor(np.zeros((4, WIDTH)))
        with pytest.raises(PromptError):
            select_queries(img, Tensor(np.zeros((0, WIDTH))), k=2)


class TestQueryDecoder:
    def make(self, n_blocks=2, width=WIDTH, seed=0):
        return QueryDecoder(rng(seed), width, n_heads=4, n_blocks=n_blocks)

    def scene(self, n=30, m=5, width=WIDTH, seed=1):
        r = rng(seed)
        img = Tensor(r.normal(size=(n, width)))
        tok = Tensor(r.normal(size=(m, width)))
        centers = r.uniform(0, 1, size=(n, 2))
        return img, tok, centers

    def test_output_shapes(self):
        dec = self.make()
        img, tok, centers = self.scene(n=40, m=5)
        sel = select_queries(img, tok, k=10)
        out = dec(img, tok, sel, centers)
        assert out.similarity.shape == (10, 5)
        assert out.centers.shape == (10, 2)

    def test_similarity_strictly_inside_unit_interval(self):
        dec = self.make()
        img, tok, centers = self.scene()
        out = dec(img, tok, select_queries(img, tok, k=8), centers)
        assert np.all(out.similarity.data > 0) and np.all(out.similarity.data < 1)
        assert np.all(out.centers.data > 0) and np.all(out.centers.data < 1)

    def test_zeroed_output_projection_gives_half_scores(self):
        dec = self.make()
        dec.out_proj.w.data[...] = 0.0
        dec.out_proj.b.data[...] = 0.0
        img, tok, centers = self.scene()
        out = dec(img, tok, select_queries(img, tok, k=6), centers)
        np.testing.assert_array_equal(out.similarity.data, 0.5)

    def test_deterministic(self):
        dec = self.make()
        img, tok, centers = self.scene(seed=9)
        sel = select_queries(img, tok, k=5)
        a = dec(img, tok, sel, centers)
        b = dec(img, tok, sel, centers)
        np.testing.assert_array_equal(a.similarity.data, b.similarity.data)

    def test_row_max_invariant_to_prompt_permutation(self):
        dec = self.make()
        img, tok, centers = self.scene(m=4, seed=4)
        sel = select_queries(img, tok, k=6)
        out = dec(img, tok, sel, centers)
        perm = [2, 0, 3, 1]
        tok_p = Tensor(tok.data[perm])
        sel_p = select_queries(img, tok_p, k=6)
        out_p = dec(img, tok_p, sel_p, centers)
        np.testing.assert_allclose(out_p.similarity.data.max(axis=1),
                                   out.similarity.data.max(axis=1), atol=1e-9)

    def test_gradcheck_small(self):
        dec = self.make(n_blocks=1, width=8)
        img, tok, centers = self.scene(n=6, m=2, width=8, seed=5)
        img.requires_grad = True
        img.grad = np.zeros_like(img.data)
        blk = dec.blocks[0]
        params = {
            "img": img,
            "offset": dec.content_offset,
            "out_proj": dec.out_proj.w,
            "center_out": dec.center_out.w,
            "tok_cross_k": blk["tok_cross"].wk[0].w,
        }

        def f():
            sel = select_queries(img, tok, k=3)
            out = dec(img, tok, sel, centers)
            return (out.similarity * out.similarity).sum() + out.centers.sum()

        assert_grads_match(f, params, max_coords=6)
