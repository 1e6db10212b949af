"""Loss, optimizer, and metric oracles."""

import numpy as np
import pytest

from maskdepth import tensor as T
from maskdepth.losses import (LossWeights, masked_weighted_l1,
                              segmentation_bce, total_loss)
from maskdepth.metrics import Metrics, aggregate, evaluate_depth
from maskdepth.optim import Adam, adam_update


def as4(values):
    """1-d list -> (1, 1, 1, N) tensor."""
    arr = np.asarray(values, dtype=np.float64).reshape(1, 1, 1, -1)
    return T.Tensor(arr)


class TestMaskedWeightedL1:
    def test_hand_case(self):
        # pred [2, 4], gt [1, 2], fg [1, 0], lambda 3:
        # weights [3, 1], residuals [1, 2] -> (3*1 + 1*2) / 4 = 1.25
        loss = masked_weighted_l1(as4([2.0, 4.0]), as4([1.0, 2.0]),
                                  as4([1.0, 0.0]), 3.0)
        assert loss.item() == pytest.approx(1.25, abs=1e-12)

    def test_unmeasured_pixels_ignored(self):
        # third pixel has gt 0: arbitrary prediction there must not matter
        a = masked_weighted_l1(as4([2.0, 4.0, 123.0]), as4([1.0, 2.0, 0.0]),
                               as4([1.0, 0.0, 1.0]), 3.0)
        assert a.item() == pytest.approx(1.25, abs=1e-12)

    def test_lambda_one_is_plain_masked_mae(self):
        rng = np.random.default_rng(0)
        pred = rng.uniform(0, 80, 50)
        gt = rng.uniform(1, 80, 50)
        fg = (rng.random(50) < 0.5).astype(float)
        loss = masked_weighted_l1(as4(pred), as4(gt), as4(fg), 1.0)
        assert loss.item() == pytest.approx(np.abs(pred - gt).mean(), abs=1e-12)

    def test_l2_variant_squares_residuals(self):
        loss = masked_weighted_l1(as4([3.0]), as4([1.0]), as4([0.0]), 3.0, kind="l2")
        assert loss.item() == pytest.approx(4.0, abs=1e-12)

    def test_no_valid_pixels_raises(self):
        with pytest.raises(ValueError, match="no measured"):
            masked_weighted_l1(as4([1.0]), as4([0.0]), as4([0.0]), 3.0)

    def test_gradient_weighting(self):
        pred = T.Tensor(np.array([5.0, 5.0]).reshape(1, 1, 1, 2), requires_grad=True)
        with T.GradTape():
            loss = masked_weighted_l1(pred, as4([1.0, 1.0]), as4([1.0, 0.0]), 3.0)
            T.backward(loss)
        g = pred.grad.reshape(-1)
        # d/dpred of (3|p0-1| + |p1-1|)/4 with both residuals positive
        assert g[0] == pytest.approx(0.75)
        assert g[1] == pytest.approx(0.25)


class TestTotalLoss:
    def test_combination_oracle(self):
        # final term 1.0, init term 0.4, ground-truth masks: 1.0 + 0.5*0.4 = 1.2
        gt = as4([2.0, 2.0])
        fg = as4([0.0, 0.0])
        breakdown = total_loss(d_init=as4([1.6, 1.6]), d_final=as4([1.0, 3.0]),
                               gt=gt, m_seg=fg, m_gt_foreground=fg.data[:, 0],
                               weights=LossWeights(lambda_init=0.5))
        assert breakdown.final_term == pytest.approx(1.0, abs=1e-12)
        assert breakdown.init_term == pytest.approx(0.4, abs=1e-12)
        assert breakdown.seg_term == 0.0
        assert breakdown.total.item() == pytest.approx(1.2, abs=1e-12)

    def test_ground_truth_mode_seg_term_exactly_zero(self):
        gt = as4([2.0])
        breakdown = total_loss(as4([1.0]), as4([1.0]), gt, as4([1.0]),
                               np.ones((1, 1, 1)), LossWeights(),
                               mask_mode="ground_truth")
        assert breakdown.seg_term == 0.0

    def test_file_mode_seg_term_reported_but_constant(self):
        gt = as4([2.0, 4.0])
        m_seg = as4([0.9, 0.2])
        m_gt = np.array([[[1.0, 0.0]]])
        breakdown = total_loss(as4([1.0, 2.0]), as4([1.0, 2.0]), gt, m_seg,
                               m_gt, LossWeights(), mask_mode="file")
        want = segmentation_bce(m_seg.data[:, 0], m_gt)
        assert breakdown.seg_term == pytest.approx(want, abs=1e-12)
        assert breakdown.total.item() == pytest.approx(
            breakdown.final_term + 0.5 * breakdown.init_term + want, abs=1e-12)

    def test_seg_term_contributes_no_gradient(self):
        pred = T.Tensor(np.full((1, 1, 1, 2), 5.0), requires_grad=True)
        gt = as4([2.0, 4.0])
        m_seg = as4([0.9, 0.2])
        m_gt = np.array([[[1.0, 0.0]]])
        grads = []
        for mode in ("ground_truth", "file"):
            with T.GradTape():
                b = total_loss(as4([1.0, 2.0]), pred, gt, m_seg, m_gt,
                               LossWeights(), mask_mode=mode)
                T.backward(b.total)
            grads.append(pred.grad.copy())
            pred.grad = None
        np.testing.assert_array_equal(grads[0], grads[1])


class TestSegmentationBCE:
    def test_perfect_prediction_is_near_zero(self):
        gt = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert segmentation_bce(gt, gt) < 1e-5

    def test_clipping_keeps_confident_mistakes_finite(self):
        pred = np.array([[0.0, 1.0]])
        gt = np.array([[1.0, 0.0]])
        v = segmentation_bce(pred, gt)
        assert np.isfinite(v)
        assert v == pytest.approx(-np.log(1e-7), rel=1e-6)

    def test_uniform_prediction_is_ln2(self):
        pred = np.full((4, 4), 0.5)
        gt = (np.arange(16).reshape(4, 4) % 2).astype(float)
        assert segmentation_bce(pred, gt) == pytest.approx(np.log(2.0), abs=1e-12)


class TestMetrics:
    def test_hand_case(self):
        # pred [1, 3, 9], gt [2, 1, 0]: third pixel unmeasured,
        # errors [-1, 2] -> MAE 1.5, RMSE sqrt(2.5)
        m = evaluate_depth(np.array([1.0, 3.0, 9.0]), np.array([2.0, 1.0, 0.0]))
        assert m.mae == pytest.approx(1.5, abs=1e-9)
        assert m.rmse == pytest.approx(np.sqrt(2.5), abs=1e-9)
        assert m.n_valid == 2

    def test_perfect_prediction(self):
        gt = np.array([1.0, 2.0, 0.0])
        m = evaluate_depth(gt, gt)
        assert m.mae == 0.0
        assert m.rmse == 0.0

    def test_rmse_at_least_mae(self):
        rng = np.random.default_rng(4)
        pred = rng.uniform(0, 80, 300)
        gt = rng.uniform(0, 80, 300) * (rng.random(300) < 0.8)
        m = evaluate_depth(pred, gt)
        assert m.rmse >= m.mae

    def test_all_invalid_raises(self):
        with pytest.raises(ValueError, match="no measured"):
            evaluate_depth(np.ones(4), np.zeros(4))

    def test_aggregate_weights_by_valid_count(self):
        a = Metrics(mae=1.0, rmse=1.0, n_valid=100)
        b = Metrics(mae=4.0, rmse=5.0, n_valid=300)
        agg = aggregate([a, b])
        assert agg.n_valid == 400
        assert agg.mae == pytest.approx((1.0 * 100 + 4.0 * 300) / 400)
        assert agg.rmse == pytest.approx(np.sqrt((1.0 * 100 + 25.0 * 300) / 400))


class TestAdam:
    def test_quadratic_converges(self):
        # minimize x^2 from x=1 at lr 0.1: well under 0.05 after 200 steps
        x = T.Tensor(np.array(1.0), requires_grad=True)
        opt = Adam({"x": x}, lr=0.1)
        for _ in range(200):
            with T.GradTape():
                T.backward(T.mul(x, x))
            opt.step()
            opt.zero_grad()
        assert abs(x.item()) < 0.05

    def test_first_step_moves_by_lr(self):
        # bias correction makes the first update exactly lr * sign(g)
        x = T.Tensor(np.array([2.0]), requires_grad=True)
        x.grad = np.array([0.123])
        opt = Adam({"x": x}, lr=1e-2)
        opt.step()
        assert x.data[0] == pytest.approx(2.0 - 1e-2, rel=1e-6)

    def test_zero_gradient_fresh_state_no_move(self):
        x = T.Tensor(np.array([3.0]), requires_grad=True)
        x.grad = np.zeros(1)
        opt = Adam({"x": x}, lr=0.5)
        opt.step()
        assert x.data[0] == 3.0

    def test_none_gradient_skipped(self):
        x = T.Tensor(np.array([3.0]), requires_grad=True)
        opt = Adam({"x": x}, lr=0.5)
        opt.step()
        assert x.data[0] == 3.0
        assert opt.m["x"].sum() == 0.0

    def test_shape_mismatch_rejected(self):
        p = np.zeros(3)
        with pytest.raises(ValueError, match="shape"):
            adam_update(p, np.zeros(2), np.zeros(3), np.zeros(3), 1, 0.1)

    def test_deterministic_given_same_gradients(self):
        def run():
            x = T.Tensor(np.array([1.0, -2.0]), requires_grad=True)
            opt = Adam({"x": x}, lr=0.05)
            for i in range(50):
                x.grad = np.array([np.sin(i), np.cos(i)])
                opt.step()
                opt.zero_grad()
            return x.data.copy()

        np.testing.assert_array_equal(run(), run())

    def test_state_dict_round_trip(self):
        x = T.Tensor(np.array([1.0]), requires_grad=True)
        opt = Adam({"x": x}, lr=0.1)
        x.grad = np.array([0.5])
        opt.step()
        state = opt.state_dict()
        opt2 = Adam({"x": x}, lr=0.1)
        opt2.load_state_dict(state)
        assert opt2.t == 1
        np.testing.assert_array_equal(opt2.m["x"], opt.m["x"])
