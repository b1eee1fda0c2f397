import math

import numpy as np
import pytest

from hoidet import autodiff as ad
from hoidet.autodiff import Tape, Tensor, backward
from hoidet.losses import (HOIInstance, LossBreakdown, giou, giou_pairs,
                           losses, match_layer, matching_cost, total_loss)
from hoidet.matching import MatchResult
from hoidet.model import ModelConfig, PredictionSet
from hoidet.rng import Rng


def make_preds(hb, ob, po, pi):
    return PredictionSet(human_box=Tensor(np.asarray(hb, dtype=np.float64)),
                         object_box=Tensor(np.asarray(ob, dtype=np.float64)),
                         object_prob=Tensor(np.asarray(po, dtype=np.float64)),
                         interaction_prob=Tensor(np.asarray(pi, dtype=np.float64)))


CFG = ModelConfig.toy()


class TestGiou:
    def test_identical_boxes(self):
        assert giou((0.4, 0.6, 0.2, 0.3), (0.4, 0.6, 0.2, 0.3)) == 1.0

    def test_touching_squares_give_zero(self):
        # side-by-side: IoU 0, enclosure exactly covers the union
        assert giou((0.25, 0.5, 0.5, 1.0), (0.75, 0.5, 0.5, 1.0)) == 0.0

    def test_hand_negative_case(self):
        # disjoint 0.2-squares at opposite corners:
        # union 0.08, enclosure 0.7 * 0.7 = 0.49 -> giou = -(0.49-0.08)/0.49
        val = giou((0.25, 0.25, 0.2, 0.2), (0.75, 0.75, 0.2, 0.2))
        np.testing.assert_allclose(val, -(0.49 - 0.08) / 0.49, atol=1e-15)

    def test_non_positive_size_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            giou((0.5, 0.5, 0.0, 0.2), (0.5, 0.5, 0.1, 0.1))

    def test_range_on_random_boxes(self):
        rng = Rng(3)
        for i in range(200):
            s = rng.split(i)
            a = (s.uniform((), 0.2, 0.8), s.uniform((), 0.2, 0.8),
                 s.uniform((), 0.05, 0.4), s.uniform((), 0.05, 0.4))
            b = (s.uniform((), 0.2, 0.8), s.uniform((), 0.2, 0.8),
                 s.uniform((), 0.05, 0.4), s.uniform((), 0.05, 0.4))
            v = giou(a, b)
            assert -1.0 < v <= 1.0

    def test_pairs_gradient(self):
        rng = Rng(9)
        p = Tensor(rng.split("p").uniform((4, 4), -1, 1), requires_grad=True)
        q = Tensor(rng.split("q").uniform((4, 4), -1, 1), requires_grad=True)

        def f(ts):
            return ad.sum_all(giou_pairs(ad.sigmoid(ts["p"]), ad.sigmoid(ts["q"])))

        report = ad.grad_check(f, {"p": p, "q": q})
        assert report.passed, report.format()


class TestMatchingCost:
    def test_perfect_query_costs_zero(self):
        gt = HOIInstance((0.3, 0.3, 0.2, 0.2), (0.6, 0.6, 0.2, 0.2), 1, 2)
        po = np.zeros((2, CFG.num_obj_classes + 1))
        po[0, 1] = 1.0
        po[1, CFG.num_obj_classes] = 1.0
        pi = np.zeros((2, CFG.num_interactions))
        pi[0, 2] = 1.0
        preds = make_preds([gt.human_box, (0.5, 0.5, 0.1, 0.1)],
                           [gt.object_box, (0.5, 0.5, 0.1, 0.1)], po, pi)
        cost = matching_cost(preds, [gt], CFG)
        assert cost.shape == (1, 2)
        assert cost[0, 0] == 0.0
        assert cost[0, 1] > 0.0

    def test_costs_non_negative(self):
        rng = Rng(5)
        for trial in range(20):
            s = rng.split(trial)
            n = 4
            po = np.abs(s.uniform((n, CFG.num_obj_classes + 1), 0, 1))
            po /= po.sum(axis=1, keepdims=True)
            pi = s.uniform((n, CFG.num_interactions), 0, 1)
            preds = make_preds(s.uniform((n, 4), 0.3, 0.7), s.uniform((n, 4), 0.3, 0.7), po, pi)
            gts = [HOIInstance((0.4, 0.4, 0.2, 0.2), (0.6, 0.6, 0.2, 0.2), 0, 1)]
            assert np.all(matching_cost(preds, gts, CFG) >= 0.0)

    def test_hand_matrix(self):
        gts = [HOIInstance((0.5, 0.5, 0.2, 0.2), (0.3, 0.3, 0.2, 0.2), 0, 1),
               HOIInstance((0.7, 0.7, 0.2, 0.2), (0.5, 0.5, 0.2, 0.2), 1, 0)]
        rng = Rng(10)
        n = 3
        hb = rng.split("hb").uniform((n, 4), 0.2, 0.8)
        ob = rng.split("ob").uniform((n, 4), 0.2, 0.8)
        po = np.abs(rng.split("po").uniform((n, CFG.num_obj_classes + 1), 0.1, 1))
        po /= po.sum(axis=1, keepdims=True)
        pi = rng.split("pi").uniform((n, CFG.num_interactions), 0.1, 0.9)
        preds = make_preds(hb, ob, po, pi)
        cost = matching_cost(preds, gts, CFG)
        from hoidet.losses import giou_np
        for g, gt in enumerate(gts):
            for i in range(n):
                l1 = np.abs(hb[i] - gt.human_box).sum() + np.abs(ob[i] - gt.object_box).sum()
                gi = 2.0 - giou_np(hb[i], np.asarray(gt.human_box)) \
                     - giou_np(ob[i], np.asarray(gt.object_box))
                expected = (CFG.w_l1 * l1 + CFG.w_giou * gi
                            + CFG.w_obj * (1 - po[i, gt.obj_class])
                            + CFG.w_int * (1 - pi[i, gt.int_class]))
                np.testing.assert_allclose(cost[g, i], expected, atol=1e-12)

    def test_class_out_of_range(self):
        preds = make_preds(np.full((1, 4), 0.5), np.full((1, 4), 0.5),
                           np.full((1, CFG.num_obj_classes + 1), 0.2),
                           np.full((1, CFG.num_interactions), 0.5))
        bad = HOIInstance((0.5, 0.5, 0.2, 0.2), (0.5, 0.5, 0.2, 0.2), 99, 0)
        with pytest.raises(ValueError, match="class out of range"):
            matching_cost(preds, [bad], CFG)


def _near_perfect_preds(gts, n, eps=1e-8):
    # probabilities pinned to 1 - eps on targets; never exactly 0 or 1,
    # matching what softmax/sigmoid heads can emit
    hb = np.full((n, 4), 0.5)
    ob = np.full((n, 4), 0.5)
    po = np.full((n, CFG.num_obj_classes + 1), eps / CFG.num_obj_classes)
    po[:, CFG.num_obj_classes] = 1.0 - eps
    pi = np.full((n, CFG.num_interactions), eps)
    for q, gt in enumerate(gts):
        hb[q] = gt.human_box
        ob[q] = gt.object_box
        po[q, :] = eps / CFG.num_obj_classes
        po[q, gt.obj_class] = 1.0 - eps
        pi[q, :] = eps
        pi[q, gt.int_class] = 1.0 - eps
    return make_preds(hb, ob, po, pi)


class TestLosses:
    GTS = [HOIInstance((0.3, 0.4, 0.25, 0.3), (0.55, 0.6, 0.2, 0.2), 0, 1),
           HOIInstance((0.7, 0.3, 0.2, 0.3), (0.3, 0.7, 0.25, 0.2), 2, 3)]

    def test_near_perfect_predictions(self):
        preds = _near_perfect_preds(self.GTS, n=4)
        match = match_layer(preds, self.GTS, CFG)
        assert match.pairs == [(0, 0), (1, 1)]
        terms = losses(preds, self.GTS, match, CFG)
        assert terms.l1.item() == 0.0
        assert terms.giou.item() == 0.0
        assert terms.oc.item() < 1e-6
        assert terms.ic.item() < 1e-6

    def test_zero_gts_reduces_to_background_terms(self):
        n = 3
        po = np.full((n, CFG.num_obj_classes + 1), 1.0 / (CFG.num_obj_classes + 1))
        pi = np.full((n, CFG.num_interactions), 0.5)
        preds = make_preds(np.full((n, 4), 0.5), np.full((n, 4), 0.5), po, pi)
        match = match_layer(preds, [], CFG)
        terms = losses(preds, [], match, CFG)
        assert terms.l1.item() == 0.0 and terms.giou.item() == 0.0
        np.testing.assert_allclose(terms.oc.item(), -math.log(1 / 5), atol=1e-12)
        # all-negative focal at p = 0.5, gamma 2: 0.25 * ln 2 per entry / max(G,1)=1
        expected_ic = n * CFG.num_interactions * 0.25 * math.log(2.0)
        np.testing.assert_allclose(terms.ic.item(), expected_ic, atol=1e-12)

    def test_focal_closed_form_single_pair(self):
        gt = [HOIInstance((0.4, 0.4, 0.2, 0.2), (0.6, 0.6, 0.2, 0.2), 1, 2)]
        n = 1
        po = np.full((n, CFG.num_obj_classes + 1), 1e-9)
        po[0, 1] = 1.0 - 4e-9
        pi = np.full((n, CFG.num_interactions), 0.5)
        preds = make_preds([gt[0].human_box], [gt[0].object_box], po, pi)
        match = MatchResult(pairs=[(0, 0)], unmatched_queries=[], total_cost=0.0)
        terms = losses(preds, gt, match, CFG)
        # positive: alpha (1-p)^2 (-ln p); negatives: p^2 (-ln(1-p)); all at p=0.5
        pos = 0.25 * 0.25 * math.log(2.0)
        neg = (CFG.num_interactions - 1) * 0.25 * math.log(2.0)
        np.testing.assert_allclose(terms.ic.item(), pos + neg, atol=1e-14)

    def test_focal_reduces_to_bce_at_alpha_one_gamma_zero(self):
        cfg = ModelConfig.toy(focal_alpha=1.0, focal_gamma=0.0)
        rng = Rng(12)
        n = 4
        pi = rng.split("pi").uniform((n, cfg.num_interactions), 0.05, 0.95)
        po = np.full((n, cfg.num_obj_classes + 1), 1.0 / (cfg.num_obj_classes + 1))
        gts = self.GTS
        preds = make_preds(np.full((n, 4), 0.5), np.full((n, 4), 0.5), po, pi)
        match = MatchResult(pairs=[(0, 1), (1, 3)], unmatched_queries=[0, 2], total_cost=0.0)
        terms = losses(preds, gts, match, cfg)
        target = np.zeros((n, cfg.num_interactions))
        target[1, gts[0].int_class] = 1.0
        target[3, gts[1].int_class] = 1.0
        bce = -(target * np.log(pi) + (1 - target) * np.log(1 - pi)).sum() / 2
        np.testing.assert_allclose(terms.ic.item(), bce, atol=1e-9)

    def test_losses_non_negative_random(self):
        rng = Rng(77)
        for trial in range(10):
            s = rng.split(trial)
            n = 5
            po = np.abs(s.uniform((n, CFG.num_obj_classes + 1), 0.05, 1))
            po /= po.sum(axis=1, keepdims=True)
            pi = s.uniform((n, CFG.num_interactions), 0.05, 0.95)
            preds = make_preds(s.uniform((n, 4), 0.3, 0.7), s.uniform((n, 4), 0.3, 0.7), po, pi)
            match = match_layer(preds, self.GTS, CFG)
            terms = losses(preds, self.GTS, match, CFG)
            for field in ("l1", "giou", "oc", "ic", "total"):
                assert getattr(terms, field).item() >= 0.0

    def test_permutation_invariance(self):
        rng = Rng(31)
        n = 6
        po = np.abs(rng.split("po").uniform((n, CFG.num_obj_classes + 1), 0.05, 1))
        po /= po.sum(axis=1, keepdims=True)
        pi = rng.split("pi").uniform((n, CFG.num_interactions), 0.05, 0.95)
        preds = make_preds(rng.split("hb").uniform((n, 4), 0.3, 0.7),
                           rng.split("ob").uniform((n, 4), 0.3, 0.7), po, pi)
        t1, _ = total_loss([preds], self.GTS, CFG)
        t2, _ = total_loss([preds], list(reversed(self.GTS)), CFG)
        np.testing.assert_allclose(t1.total.item(), t2.total.item(), atol=1e-12)


class TestTotalLoss:
    GTS = TestLosses.GTS

    def _random_preds(self, seed, n=4):
        s = Rng(seed)
        po = np.abs(s.split("po").uniform((n, CFG.num_obj_classes + 1), 0.05, 1))
        po /= po.sum(axis=1, keepdims=True)
        pi = s.split("pi").uniform((n, CFG.num_interactions), 0.05, 0.95)
        return make_preds(s.split("hb").uniform((n, 4), 0.3, 0.7),
                          s.split("ob").uniform((n, 4), 0.3, 0.7), po, pi)

    def test_single_layer_equals_losses(self):
        preds = self._random_preds(1)
        terms, breakdown = total_loss([preds], self.GTS, CFG)
        match = match_layer(preds, self.GTS, CFG)
        direct = losses(preds, self.GTS, match, CFG)
        assert terms.total.item() == direct.total.item()
        assert breakdown.per_layer[0].total == direct.total.item()

    def test_duplicated_layer_doubles_total(self):
        preds = self._random_preds(2)
        single, _ = total_loss([preds], self.GTS, CFG)
        double, _ = total_loss([preds, preds], self.GTS, CFG)
        assert double.total.item() == 2.0 * single.total.item()
        assert double.l1.item() == 2.0 * single.l1.item()

    def test_total_equals_weighted_dot_exactly(self):
        preds = self._random_preds(3)
        terms, breakdown = total_loss([preds, self._random_preds(4)], self.GTS, CFG)
        manual = (breakdown.l1 * CFG.w_l1 + breakdown.giou * CFG.w_giou
                  + breakdown.oc * CFG.w_obj + breakdown.ic * CFG.w_int)
        assert breakdown.total == manual
        assert terms.total.item() == manual

    def test_gradient_through_total_loss(self):
        rng = Rng(55)
        n = 3
        raw = {k: Tensor(rng.split(k).uniform(shape, -1.5, 1.5), requires_grad=True)
               for k, shape in (("hb", (n, 4)), ("ob", (n, 4)),
                                ("po", (n, CFG.num_obj_classes + 1)),
                                ("pi", (n, CFG.num_interactions)))}
        base = PredictionSet(human_box=ad.sigmoid(raw["hb"]), object_box=ad.sigmoid(raw["ob"]),
                             object_prob=ad.softmax(raw["po"]), interaction_prob=ad.sigmoid(raw["pi"]))
        frozen = [match_layer(base, self.GTS, CFG)]

        def f(ts):
            preds = PredictionSet(
                human_box=ad.sigmoid(ts["hb"]), object_box=ad.sigmoid(ts["ob"]),
                object_prob=ad.softmax(ts["po"]), interaction_prob=ad.sigmoid(ts["pi"]))
            terms, _ = total_loss([preds], self.GTS, CFG, matches=frozen)
            return terms.total

        report = ad.grad_check(f, raw)
        assert report.passed, report.format()
