import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import lstm_reference

from ctxreport.autodiff import LstmCellParams, ShapeError, Tensor, gather_columns
from ctxreport.encoder import (
    embed_image,
    encode_context,
    encode_context_batch,
    fuse_baseline,
    fuse_baseline_batch,
)


def cell_from(rng, D, H):
    return LstmCellParams.init(rng, D, H)


class TestEmbedImage:
    def test_zero_projection(self):
        out = embed_image(Tensor(np.ones(4)), Tensor(np.zeros((3, 4))))
        assert out.data.tolist() == [0.0, 0.0, 0.0]

    def test_matches_loop(self):
        rng = np.random.default_rng(0)
        w, f = rng.normal(size=(3, 4)), rng.normal(size=4)
        expected = [sum(w[i, j] * f[j] for j in range(4)) for i in range(3)]
        np.testing.assert_allclose(embed_image(Tensor(f), Tensor(w)).data, expected, atol=1e-14)

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            embed_image(Tensor(np.ones(5)), Tensor(np.zeros((3, 4))))


class TestEncodeContext:
    def test_zero_parameters_give_zero_context(self):
        cell = LstmCellParams.zeros(2, 2)
        h = encode_context(Tensor([0.3, -0.1]), [4, 5], Tensor(np.ones((2, 6))), cell)
        assert h.data.tolist() == [0.0, 0.0]

    def test_hand_two_step(self):
        # H=2, E=2: image step then one keyword step, against the scalar reference
        w_ih = [[0.2, -0.1], [0.4, 0.3], [-0.5, 0.1], [0.05, 0.2], [0.3, -0.3], [0.1, 0.6], [-0.2, 0.25], [0.45, -0.15]]
        w_hh = [[0.1, 0.2], [-0.3, 0.1], [0.25, -0.05], [0.0, 0.4], [0.2, 0.2], [-0.1, -0.2], [0.3, 0.1], [0.05, -0.35]]
        b = [0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]
        w_k = np.array([[0.0, 0.0, 0.0, 0.0, 0.7], [0.0, 0.0, 0.0, 0.0, -0.4]])
        img = [0.5, -1.0]
        cell = LstmCellParams(Tensor(w_ih), Tensor(w_hh), Tensor(b))
        got = encode_context(Tensor(img), [4], Tensor(w_k), cell)
        h, c = lstm_reference(img, [0.0, 0.0], [0.0, 0.0], w_ih, w_hh, b)
        h, c = lstm_reference(list(w_k[:, 4]), h, c, w_ih, w_hh, b)
        np.testing.assert_allclose(got.data, h, atol=1e-12, rtol=0)

    def test_no_keywords_is_single_image_step(self):
        rng = np.random.default_rng(1)
        cell = cell_from(rng, 3, 4)
        img = rng.normal(size=3)
        got = encode_context(Tensor(img), [], Tensor(np.zeros((3, 5))), cell)
        h, _ = lstm_reference(list(img), [0.0] * 4, [0.0] * 4, cell.w_ih.data.tolist(), cell.w_hh.data.tolist(),
                              cell.b.data.tolist())
        np.testing.assert_allclose(got.data, h, atol=1e-12)

    def test_keyword_order_matters(self):
        rng = np.random.default_rng(2)
        cell, w_k, img = cell_from(rng, 3, 4), Tensor(rng.normal(size=(3, 8))), Tensor(rng.normal(size=3))
        a = encode_context(img, [4, 5, 6], w_k, cell).data
        b = encode_context(img, [6, 5, 4], w_k, cell).data
        assert not np.allclose(a, b)

    def test_pad_rejected(self):
        with pytest.raises(ValueError, match="PAD"):
            encode_context(Tensor(np.zeros(2)), [4, 0], Tensor(np.zeros((2, 6))), LstmCellParams.zeros(2, 2))

    def test_out_of_range_keyword(self):
        with pytest.raises(IndexError):
            encode_context(Tensor(np.zeros(2)), [9], Tensor(np.zeros((2, 6))), LstmCellParams.zeros(2, 2))

    def test_batch_rows_match_single(self):
        rng = np.random.default_rng(3)
        cell, w_k = cell_from(rng, 3, 4), Tensor(rng.normal(size=(3, 9)))
        img = rng.normal(size=(4, 3))
        lists = [[4, 5, 6], [], [8], [7, 7, 4, 5, 6]]
        batched = encode_context_batch(Tensor(img), lists, w_k, cell).data
        for i, ids in enumerate(lists):
            single = encode_context(Tensor(img[i]), ids, w_k, cell).data
            np.testing.assert_allclose(batched[i], single, atol=1e-14)


keyword_lists = st.lists(st.integers(4, 9), max_size=6)


class TestBaselines:
    image = Tensor([1.0, 2.0, -1.0])
    keys = [Tensor([0.5, 0.5, 0.5]), Tensor([2.0, -1.0, 0.0])]

    def test_sum(self):
        assert fuse_baseline("sum", self.image, self.keys).data.tolist() == [3.5, 1.5, -0.5]

    def test_mul(self):
        assert fuse_baseline("mul", self.image, self.keys).data.tolist() == [1.0, -1.0, -0.0]

    def test_average(self):
        np.testing.assert_allclose(fuse_baseline("average", self.image, self.keys).data, [3.5 / 3, 0.5, -0.5 / 3])

    def test_no_keywords_returns_image(self):
        for s in ("sum", "mul", "average"):
            assert fuse_baseline(s, self.image, []).data.tolist() == [1.0, 2.0, -1.0]

    def test_unknown_strategy(self):
        with pytest.raises(ValueError):
            fuse_baseline("max", self.image, self.keys)

    @settings(max_examples=40, deadline=None)
    @given(st.sampled_from(["sum", "mul", "average"]), keyword_lists, st.randoms())
    def test_permutation_invariant(self, strategy, ids, rnd):
        w_k = Tensor(np.random.default_rng(5).normal(size=(3, 10)))
        shuffled = list(ids)
        rnd.shuffle(shuffled)
        a = fuse_baseline(strategy, self.image, [gather_columns(w_k, i) for i in ids]).data
        b = fuse_baseline(strategy, self.image, [gather_columns(w_k, i) for i in shuffled]).data
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("strategy", ["sum", "mul", "average"])
    def test_batch_rows_match_single(self, strategy):
        rng = np.random.default_rng(6)
        w_k, img = Tensor(rng.normal(size=(3, 9))), rng.normal(size=(3, 3))
        lists = [[4, 5], [], [8, 8, 6]]
        batched = fuse_baseline_batch(strategy, Tensor(img), lists, w_k).data
        for i, ids in enumerate(lists):
            single = fuse_baseline(strategy, Tensor(img[i]), [gather_columns(w_k, j) for j in ids]).data
            np.testing.assert_allclose(batched[i], single, atol=1e-14)
