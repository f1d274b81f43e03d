import numpy as np
import pytest

from promptcount import tensor as T
from promptcount.encoders import Vocabulary, make_caption
from promptcount.errors import PromptError, ShapeError
from promptcount.fusion import ANONYMOUS_CLASS, EXEMPLAR, TEXT, FeatureEnhancer, \
    assemble_token_set, build_attention_mask
from promptcount.tensor import Tensor

from gradcheck import assert_grads_match

WIDTH = 16


def rng(seed=0):
    return np.random.default_rng(seed)


class TestBuildAttentionMask:
    def test_single_class_fully_connected(self):
        mask = build_attention_mask([TEXT, TEXT, EXEMPLAR, EXEMPLAR], [0, 0, 0, 0])
        assert mask.shape == (4, 4)
        assert mask.all()

    def test_two_classes_block_diagonal(self):
        kinds = [TEXT, EXEMPLAR, TEXT, TEXT, EXEMPLAR]
        ids = [0, 0, 1, 1, 1]
        mask = build_attention_mask(kinds, ids)
        assert mask[:2, :2].all() and mask[2:, 2:].all()
        assert not mask[:2, 2:].any() and not mask[2:, :2].any()

    def test_separators_attend_only_to_themselves(self):
        kinds = [TEXT, TEXT, TEXT, TEXT]
        ids = [0, -2, 1, -3]
        mask = build_attention_mask(kinds, ids)
        np.testing.assert_array_equal(mask[1], [False, True, False, False])
        np.testing.assert_array_equal(mask[3], [False, False, False, True])

    def test_anonymous_exemplars_attend_among_themselves(self):
        mask = build_attention_mask([EXEMPLAR] * 3, [ANONYMOUS_CLASS] * 3)
        assert mask.all()

    def test_exemplar_with_unknown_class_rejected(self):
        with pytest.raises(PromptError, match="unknown class id"):
            build_attention_mask([TEXT, EXEMPLAR], [0, 5])

    def test_anonymous_exemplar_with_text_rejected(self):
        with pytest.raises(PromptError):
            build_attention_mask([TEXT, EXEMPLAR], [0, ANONYMOUS_CLASS])

    def test_mask_is_symmetric(self):
        r = rng(1)
        ids = r.integers(-4, 3, size=12)
        kinds = [TEXT] * 12
        mask = build_attention_mask(kinds, ids)
        np.testing.assert_array_equal(mask, mask.T)


def token_set_for(classes, n_exemplars_per_class, width=WIDTH, seed=0):
    vocab = Vocabulary(sorted({w for c in classes for w in c.split()} | {"."}))
    prompt = make_caption(classes, vocab)
    r = rng(seed)
    text_emb = Tensor(r.normal(size=(len(prompt), width)))
    ex_classes = [c for c, n in enumerate(n_exemplars_per_class) for _ in range(n)]
    ex_emb = Tensor(r.normal(size=(len(ex_classes), width)))
    return assemble_token_set(prompt, text_emb, ex_emb, ex_classes), prompt


class TestAssembleTokenSet:
    def test_exemplars_follow_their_class_words(self):
        ts, _ = token_set_for(["red circle", "square"], [2, 1])
        assert ts.labels == ["red", "circle", "[exemplar 0]", "[exemplar 1]",
                             ".", "square", "[exemplar 2]", "."]
        assert ts.kinds == [TEXT, TEXT, EXEMPLAR, EXEMPLAR, TEXT, TEXT,
                            EXEMPLAR, TEXT]
        assert ts.n_text == 5 and ts.n_exemplars == 3

    def test_class_masks_cover_words_and_exemplars(self):
        ts, _ = token_set_for(["red circle", "square"], [2, 1])
        np.testing.assert_array_equal(
            ts.class_mask(0), [1, 1, 1, 1, 0, 0, 0, 0])
        np.testing.assert_array_equal(
            ts.class_mask(1), [0, 0, 0, 0, 0, 1, 1, 0])

    def test_keyword_mask_maps_caption_positions(self):
        vocab = Vocabulary(["red", "circle", "."])
        prompt = make_caption(["red circle"], vocab, keyword="circle")
        r = rng(0)
        ts = assemble_token_set(prompt, Tensor(r.normal(size=(3, WIDTH))),
                                Tensor(r.normal(size=(1, WIDTH))), [0])
        np.testing.assert_array_equal(
            ts.keyword_mask(prompt.keyword_span), [0, 1, 0, 0])

    def test_exemplar_only_prompt(self):
        r = rng(0)
        ts = assemble_token_set(None, Tensor(np.zeros((0, WIDTH))),
                                Tensor(r.normal(size=(2, WIDTH))),
                                [ANONYMOUS_CLASS, ANONYMOUS_CLASS])
        assert ts.n_text == 0 and ts.n_exemplars == 2
        assert ts.attn_mask.all()

    def test_empty_prompt_rejected(self):
        with pytest.raises(PromptError, match="empty prompt"):
            assemble_token_set(None, Tensor(np.zeros((0, WIDTH))),
                               Tensor(np.zeros((0, WIDTH))), [])

    def test_exemplar_class_out_of_range_rejected(self):
        vocab = Vocabulary(["circle", "."])
        prompt = make_caption(["circle"], vocab)
        r = rng(0)
        with pytest.raises(PromptError, match="unknown class id"):
            assemble_token_set(prompt, Tensor(r.normal(size=(2, WIDTH))),
                               Tensor(r.normal(size=(1, WIDTH))), [3])


class TestFeatureEnhancer:
    def make(self, n_blocks=2, width=WIDTH, seed=0):
        return FeatureEnhancer(rng(seed), width, n_heads=4, n_blocks=n_blocks)

    def test_shapes_text_only(self):
        enh = self.make()
        vocab = Vocabulary(["circle", "."])
        prompt = make_caption(["circle"], vocab)
        r = rng(1)
        ts = assemble_token_set(prompt, Tensor(r.normal(size=(2, WIDTH))),
                                Tensor(np.zeros((0, WIDTH))), [])
        img = Tensor(r.normal(size=(40, WIDTH)))
        tok_out, img_out = enh(img, ts)
        assert tok_out.shape == (2, WIDTH)
        assert img_out.shape == (40, WIDTH)

    def test_shapes_multimodal(self):
        enh = self.make()
        ts, _ = token_set_for(["red circle"], [3])
        img = Tensor(rng(1).normal(size=(30, WIDTH)))
        tok_out, img_out = enh(img, ts)
        assert tok_out.shape == (len(ts), WIDTH)

    def test_block_count_validated(self):
        with pytest.raises(ShapeError):
            self.make(n_blocks=0)

    def test_masked_pairs_have_exactly_zero_attention(self):
        enh = self.make(n_blocks=3)
        ts, _ = token_set_for(["red circle", "blue square"], [2, 2])
        img = Tensor(rng(2).normal(size=(25, WIDTH)))
        probe: dict = {}
        enh(img, ts, probe=probe)
        assert len(probe["token_attn"]) == 3
        forbidden = ~ts.attn_mask
        for per_block in probe["token_attn"]:
            for head_weights in per_block:
                assert np.all(head_weights[forbidden] == 0.0)
                allowed_rows = head_weights.sum(axis=1)
                np.testing.assert_allclose(allowed_rows, 1.0, atol=1e-9)

    def test_permuting_class_groups_permutes_tokens_only(self):
        enh = self.make(n_blocks=2, seed=3)
        r = rng(4)
        g1 = r.normal(size=(3, WIDTH))
        g2 = r.normal(size=(2, WIDTH))
        img = Tensor(r.normal(size=(20, WIDTH)))

        def run(emb, ids):
            from promptcount.fusion import TokenSet
            mask = build_attention_mask([TEXT] * len(ids), ids)
            ts = TokenSet(Tensor(emb), [TEXT] * len(ids), np.asarray(ids),
                          mask, [""] * len(ids), np.arange(len(ids)),
                          [], len(ids), 0)
            return enh(img, ts)

        tok_a, img_a = run(np.vstack([g1, g2]), [0, 0, 0, 1, 1])
        tok_b, img_b = run(np.vstack([g2, g1]), [1, 1, 0, 0, 0])
        np.testing.assert_allclose(tok_b.data[:2], tok_a.data[3:], atol=1e-9)
        np.testing.assert_allclose(tok_b.data[2:], tok_a.data[:3], atol=1e-9)
        np.testing.assert_allclose(img_b.data, img_a.data, atol=1e-9)

    def test_empty_prompt_rejected(self):
        enh = self.make()
        from promptcount.fusion import TokenSet
        ts = TokenSet(Tensor(np.zeros((0, WIDTH))), [], np.zeros(0, dtype=int),
                      np.zeros((0, 0), dtype=bool), [], np.zeros(0, dtype=int),
                      [], 0, 0)
        with pytest.raises(PromptError, match="empty prompt"):
            enh(Tensor(np.zeros((5, WIDTH))), ts)

    def test_deterministic_and_pure(self):
        enh = self.make()
        ts, _ = token_set_for(["circle"], [1], seed=5)
        img = Tensor(rng(6).normal(size=(12, WIDTH)))
        before = ts.embeddings.data.copy()
        a = enh(img, ts)[0].data.copy()
        b = enh(img, ts)[0].data.copy()
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(ts.embeddings.data, before)

    def test_gradcheck_through_fusion(self):
        enh = self.make(n_blocks=1, width=8)
        vocab = Vocabulary(["circle", "."])
        prompt = make_caption(["circle"], vocab)
        r = rng(7)
        text_emb = Tensor(r.normal(size=(2, 8)), requires_grad=True)
        ex_emb = Tensor(r.normal(size=(1, 8)), requires_grad=True)
        img = Tensor(r.normal(size=(6, 8)), requires_grad=True)
        blk = enh.blocks[0]
        params = {
            "text_emb": text_emb,
            "ex_emb": ex_emb,
            "img": img,
            "tok_self_q": blk["tok_self"].wq[0].w,
            "img_cross_v": blk["img_cross"].wv[1].w,
            "tok_ffn_w": blk["tok_ffn"].lin1.w,
        }

        def f():
            ts = assemble_token_set(prompt, text_emb, ex_emb, [0])
            tok_out, img_out = enh(img, ts)
            return (tok_out * tok_out).sum() + (img_out * img_out).sum()

        assert_grads_match(f, params, max_coords=6)
