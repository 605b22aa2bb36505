import math
import warnings
from types import SimpleNamespace

import numpy as np
import pytest

from reo import losses as L
from reo import tensor as T
from reo.tensor import Tensor, finite_diff_check, precision


def ce_oracle(logits, targets):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(targets)), targets].mean()


class TestFocal:
    def test_closed_form_two_class(self):
        # p_t = 1/2  ->  (1 - 1/2)^2 * ln 2
        with precision(np.float64):
            out = L.focal_loss(Tensor(np.zeros((1, 2))), [0], gamma=2.0)
        assert out.item() == pytest.approx(0.25 * math.log(2), abs=1e-12)
        assert 0.25 * math.log(2) == pytest.approx(0.17329, abs=1e-5)

    def test_gamma_zero_is_cross_entropy(self):
        rng = np.random.default_rng(0)
        with precision(np.float64):
            for _ in range(100):
                n, k = rng.integers(1, 20), rng.integers(2, 7)
                logits = rng.normal(0, 3, (n, k))
                t = rng.integers(0, k, n)
                got = L.focal_loss(Tensor(logits), t, gamma=0.0).item()
                assert abs(got - ce_oracle(logits, t)) < 1e-6

    def test_confident_correct_near_zero(self):
        logits = np.array([[20.0, -20.0]])
        assert L.focal_loss(Tensor(logits), [0]).item() < 1e-12

    def test_ignore_entries(self):
        logits = np.random.default_rng(1).normal(size=(4, 3))
        with precision(np.float64):
            full = L.focal_loss(Tensor(logits[:2]), [0, 2]).item()
            part = L.focal_loss(Tensor(logits), [0, 2, -1, -1]).item()
        assert part == pytest.approx(full, abs=1e-12)

    def test_all_ignored_warns(self):
        with pytest.warns(L.EmptyLossWarning):
            out = L.focal_loss(Tensor(np.zeros((3, 2))), [-1, -1, -1])
        assert out.item() == 0.0

    def test_out_of_range_target(self):
        with pytest.raises(ValueError):
            L.focal_loss(Tensor(np.zeros((2, 3))), [0, 3])

    def test_gradient(self):
        rng = np.random.default_rng(2)
        logits = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
        t = rng.integers(0, 4, 6)
        rep = finite_diff_check(lambda: L.focal_loss(logits, t, 2.0, class_weights=[1, 2, 0.5, 1]), [logits])
        assert rep.passed(1e-3), rep


class TestWeightedCE:
    def test_unit_weights_equal_ce(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(size=(9, 3))
        t = rng.integers(0, 3, 9)
        with precision(np.float64):
            got = L.weighted_cross_entropy(Tensor(logits), t).item()
        assert got == pytest.approx(ce_oracle(logits, t), abs=1e-10)

    def test_weight_normalisation_hand_case(self):
        # two entries, uniform logits: each term ln 2; weights 1 and 3 -> (1 + 3) ln2 / 4
        with precision(np.float64):
            got = L.weighted_cross_entropy(Tensor(np.zeros((2, 2))), [0, 1], class_weights=[1.0, 3.0]).item()
        assert got == pytest.approx(math.log(2), abs=1e-12)


class TestDice:
    def test_perfect(self):
        t = np.array([0, 1, 2, 1])
        assert L.dice_loss(Tensor(np.eye(3)[t]), t).item() == pytest.approx(0.0, abs=1e-5)

    def test_disjoint(self):
        t = np.array([0, 1, 0, 1])
        p = np.eye(2)[1 - t]
        assert L.dice_loss(Tensor(p), t).item() == pytest.approx(1.0, abs=1e-5)

    def test_hand_case(self):
        probs = np.array([[0.8, 0.2], [0.4, 0.6]])
        # class 0: 2*0.8 / (1.2 + 1); class 1: 2*0.6 / (0.8 + 1)
        expected = 1 - (1.6 / 2.2 + 1.2 / 1.8) / 2
        with precision(np.float64):
            got = L.dice_loss(Tensor(probs), [0, 1]).item()
        assert got == pytest.approx(expected, abs=1e-6)

    def test_gradient(self):
        rng = np.random.default_rng(4)
        logits = Tensor(rng.normal(size=(7, 3)), requires_grad=True)
        t = rng.integers(0, 3, 7)
        rep = finite_diff_check(lambda: L.dice_loss(T.softmax(logits, -1), t), [logits])
        assert rep.passed(1e-3), rep


class TestSmoothL1:
    @pytest.mark.parametrize("x, expected", [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5), (-2.0, 1.5), (1.0, 0.5)])
    def test_closed_form_points(self, x, expected):
        assert L.smooth_l1(Tensor([x]), [0.0]).item() == expected

    def test_mask(self):
        pred = Tensor([[0.5, 9.0], [2.0, 9.0]])
        target = np.zeros((2, 2))
        mask = np.array([[1, 0], [1, 0]])
        assert L.smooth_l1(pred, target, mask).item() == pytest.approx((0.125 + 1.5) / 2)

    def test_row_mask(self):
        pred = Tensor([[0.5, 0.5], [9.0, 9.0]])
        assert L.smooth_l1(pred, np.zeros((2, 2)), np.array([True, False])).item() == pytest.approx(0.125)

    def test_all_masked_warns(self):
        with pytest.warns(L.EmptyLossWarning):
            assert L.smooth_l1(Tensor([1.0]), [0.0], [0]).item() == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            L.smooth_l1(Tensor([1.0, 2.0]), [0.0])

    def test_gradient_away_from_kink(self):
        pred = Tensor([0.3, -0.7, 1.8, -2.5], requires_grad=True)
        rep = finite_diff_check(lambda: L.smooth_l1(pred, np.zeros(4)), [pred])
        assert rep.passed(1e-3), rep


def fake_prediction(rng, n, s):
    sem = Tensor(rng.normal(size=(n, s + 1)), requires_grad=True)
    from reo.model import geometry_from_semantics
    return SimpleNamespace(fine_sem=sem, fine_geo=geometry_from_semantics(sem),
                           fine_rgb=T.sigmoid(Tensor(rng.normal(size=(n, 3)))))


class TestComposite:
    def test_loss_3d_geometry_targets(self):
        rng = np.random.default_rng(5)
        with precision(np.float64):
            pred = fake_prediction(rng, 10, 4)
            labels = rng.integers(0, 5, 10)
            w = L.LossWeights()
            terms, flags = L.loss_3d(pred, labels, w, rng.random((10, 3)), rng.random(10) > 0.5)
            geo_t = (labels != 0).astype(int)
            expected = (L.focal_loss(pred.fine_geo, geo_t).item()
                        + L.dice_loss(T.softmax(pred.fine_geo, -1), geo_t).item())
        assert terms["geo3d"].item() == pytest.approx(expected, abs=1e-12)
        assert not flags

    def test_loss_3d_empty_texture_flagged(self):
        rng = np.random.default_rng(6)
        pred = fake_prediction(rng, 5, 4)
        terms, flags = L.loss_3d(pred, rng.integers(0, 5, 5), L.LossWeights(), np.zeros((5, 3)), np.zeros(5, bool))
        assert "rgb3d_empty" in flags and terms["rgb3d"].item() == 0.0

    def test_label_count_mismatch(self):
        pred = fake_prediction(np.random.default_rng(0), 5, 4)
        with pytest.raises(ValueError):
            L.loss_3d(pred, np.zeros(4, int), L.LossWeights())

    def test_loss_2d_terms_and_weights(self):
        rng = np.random.default_rng(7)
        with precision(np.float64):
            sem = Tensor(rng.normal(size=(4, 2, 3)))
            depth = Tensor(rng.random((1, 2, 3)) + 0.5)
            rgb = Tensor(rng.random((3, 2, 3)))
            sem_label = np.array([[0, 1, -1], [3, -1, 2]])
            depth_label = np.array([[1.0, -1, 2.0], [-1, -1, 0.7]])
            rgb_label = rng.random((3, 2, 3))
            w = L.LossWeights(depth=2.0)
            terms, flags = L.loss_2d((sem, depth, rgb), sem_label, depth_label, rgb_label, w)
            d = depth.data[0][depth_label > 0] - depth_label[depth_label > 0]
            ad = np.abs(d)
            sl1 = np.where(ad < 1, 0.5 * d * d, ad - 0.5).mean()
        assert terms["depth2d"].item() == pytest.approx(2.0 * sl1, abs=1e-12)
        assert not flags

    def test_loss_2d_no_labels_flagged(self):
        aux = (Tensor(np.zeros((4, 2, 2))), Tensor(np.ones((1, 2, 2))), Tensor(np.zeros((3, 2, 2))))
        terms, flags = L.loss_2d(aux, -np.ones((2, 2), int), -np.ones((2, 2)), np.zeros((3, 2, 2)), L.LossWeights())
        assert {"sem2d_empty", "depth2d_empty"} <= flags
        assert terms["sem2d"].item() == 0.0 and terms["depth2d"].item() == 0.0

    def test_total_is_sum_of_terms(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            vals = {k: Tensor(rng.random() * 5) for k in L.TERM_NAMES}
            rep = L.total_loss(vals)
            assert abs(rep.total - sum(v.item() for v in vals.values())) < 1e-6

    def test_total_unknown_term(self):
        with pytest.raises(ValueError):
            L.total_loss({"bogus": Tensor(1.0)})

    def test_negative_weight_rejected(self):
        with pytest.raises(T.ConfigError):
            L.LossWeights(depth=-1)
        with pytest.raises(T.ConfigError):
            L.LossWeights(criterion="hinge")

    def test_wce_switch(self):
        rng = np.random.default_rng(9)
        pred = fake_prediction(rng, 8, 4)
        labels = rng.integers(0, 5, 8)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            a, _ = L.loss_3d(pred, labels, L.LossWeights(criterion="wce"))
            b, _ = L.loss_3d(pred, labels, L.LossWeights())
        assert a["sem3d"].item() != b["sem3d"].item()

    def test_combined_gradient(self):
        rng = np.random.default_rng(10)
        sem = Tensor(rng.normal(size=(6, 5)), requires_grad=True)
        labels = rng.integers(0, 5, 6)
        from reo.model import geometry_from_semantics

        def f():
            pred = SimpleNamespace(fine_sem=sem, fine_geo=geometry_from_semantics(sem),
                                   fine_rgb=T.sigmoid(sem[:, :3]))
            terms, _ = L.loss_3d(pred, labels, L.LossWeights(), rng_target, np.ones(6, bool))
            return L.total_loss(terms).tensor

        rng_target = rng.random((6, 3))
        rep = finite_diff_check(f, [sem])
        assert rep.passed(1e-3), rep
