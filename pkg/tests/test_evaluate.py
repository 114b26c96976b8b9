from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plumescan.detector import Instance
from plumescan.evaluate import (
    EvaluationError, MetricsReport, SweepCase, average_precision, instance_metrics, map_at_iou,
    match_instances, parse_grid, pixel_metrics, pooled_map, sweep, sweep_csv, union_semantic,
)
from plumescan.postproc import PipelineConfig
from plumescan.raster import BinaryMask, GridGeometry
from reference import dense, enumerated_ap, greedy_match_reference

G = GridGeometry(12, 12)


def block(r, c, h, w, score=1.0):
    return Instance(BinaryMask((r, c, h, w), np.ones((h, w), bool)), score)


def random_masks(rng, n, shape=(12, 12), scores=True):
    out = []
    for _ in range(n):
        h, w = rng.integers(1, 6, size=2)
        r, c = rng.integers(0, shape[0] - h + 1), rng.integers(0, shape[1] - w + 1)
        data = rng.random((h, w)) < 0.8
        data[0, 0] = data[-1, -1] = True
        data[0, -1] = data[-1, 0] = True
        s = float(rng.choice([0.3, 0.5, 0.7, 0.9])) if scores else 1.0
        out.append(Instance(BinaryMask((int(r), int(c), int(h), int(w)), data), s))
    return out


class TestPixel:
    def test_union(self):
        a, b = block(0, 0, 2, 2), block(5, 5, 3, 3)
        assert union_semantic([a], G).sum() == 4
        assert union_semantic([a, b], G).sum() == 13
        c = block(1, 1, 2, 2)
        assert union_semantic([a, c], G).sum() == 4 + 4 - 1

    def test_examples(self):
        t = np.zeros((2, 2), bool)
        t[0] = True
        assert pixel_metrics(t, t) == (1.0, 1.0, 1.0)
        truth = np.array([1, 1, 1, 0], bool)
        pred = np.array([1, 1, 0, 1], bool)
        assert pixel_metrics(pred, truth) == pytest.approx((2 / 3, 2 / 3, 2 / 3))
        assert pixel_metrics(np.zeros(4, bool), truth) == (1.0, 0.0, 0.0)
        assert pixel_metrics(np.zeros(4, bool), np.zeros(4, bool)) == (1.0, 1.0, 1.0)

    @settings(max_examples=100)
    @given(st.integers(0, 2**31))
    def test_union_crosscheck(self, seed):
        rng = np.random.default_rng(seed)
        preds, truths = random_masks(rng, 4), random_masks(rng, 3)
        P = np.any([dense(p.mask, (12, 12)) for p in preds], axis=0)
        T = np.any([dense(t.mask, (12, 12)) for t in truths], axis=0)
        tp, fp, fn = (P & T).sum(), (P & ~T).sum(), (~P & T).sum()
        p = tp / (tp + fp) if tp + fp else 1.0
        r = tp / (tp + fn) if tp + fn else 1.0
        got = pixel_metrics(union_semantic(preds, G), union_semantic(truths, G))
        assert got[:2] == pytest.approx((p, r))
        f = got[2]
        assert f == (0.0 if p == 0 or r == 0 else pytest.approx(2 * p * r / (p + r)))


class TestMatching:
    def test_full_cover(self):
        pred, truth = block(0, 0, 4, 4, 0.9), block(1, 1, 2, 2)
        m = match_instances([pred], [truth], 0.1)
        assert m.pairs == ((0, 0, 0.25),)

    def test_single_claim(self):
        truth = block(0, 0, 4, 4)
        p1, p2 = block(0, 0, 4, 3, 0.8), block(0, 0, 4, 4, 0.9)
        m = match_instances([p1, p2], [truth], 0.1)
        assert [(i, j) for i, j, _ in m.pairs] == [(1, 0)] and m.unmatched_preds == (0,)

    def test_theta_range(self):
        with pytest.raises(EvaluationError):
            match_instances([], [], 0.0)
        with pytest.raises(EvaluationError):
            match_instances([], [], 1.0)

    @settings(max_examples=1000)
    @given(st.integers(0, 2**31), st.integers(0, 6), st.integers(0, 6), st.sampled_from([0.1, 0.3, 0.5]))
    def test_against_reference(self, seed, n_pred, n_truth, theta):
        rng = np.random.default_rng(seed)
        preds, truths = random_masks(rng, n_pred), random_masks(rng, n_truth, scores=False)
        m = match_instances(preds, truths, theta)
        ref = greedy_match_reference([dense(p.mask, (12, 12)) for p in preds], [p.score for p in preds],
                                     [dense(t.mask, (12, 12)) for t in truths], theta)
        assert sorted((i, j) for i, j, _ in m.pairs) == ref
        assert all(iou > theta for _, _, iou in m.pairs)
        assert len({j for _, j, _ in m.pairs}) == len(m.pairs)

    def test_metrics(self):
        from plumescan.evaluate import MatchResult
        r = instance_metrics(MatchResult(((0, 0, 1.0), (1, 1, 1.0), (2, 2, 1.0)), (3,), (3,)))
        assert (r.TP, r.FP, r.FN) == (3, 1, 1)
        assert (r.precision, r.recall, r.f1) == (0.75, 0.75, 0.75)
        r = instance_metrics(MatchResult((), (), (0, 1)))
        assert (r.precision, r.recall, r.f1) == (1.0, 0.0, 0.0)
        r = instance_metrics(MatchResult(((0, 0, 1.0),), (), ()))
        assert (r.precision, r.recall, r.f1) == (1.0, 1.0, 1.0)


def ranked_case(flags):
    """Disjoint predictions in descending score; flag 1 = lands on its own truth."""
    preds, truths = [], []
    for k, hit in enumerate(flags):
        score = 0.95 - 0.1 * k
        preds.append(block(0, 2 * k, 1, 1, score) if hit else block(10, 2 * k, 1, 1, score))
        if hit:
            truths.append(block(0, 2 * k, 1, 1))
    return preds, truths


class TestMap:
    def test_single(self):
        assert map_at_iou([block(0, 0, 2, 2, 0.9)], [block(0, 0, 2, 2)]) == 1.0

    def test_none_match(self):
        assert map_at_iou([block(0, 0, 2, 2, 0.9)], [block(5, 5, 2, 2)]) == 0.0

    def test_hand_case(self):
        flags = [1, 0, 1, 0, 1]
        preds, truths = ranked_case(flags)
        assert enumerated_ap(flags, 3) == Fraction(34, 45)
        assert abs(map_at_iou(preds, truths) - 34 / 45) < 1e-12

    @settings(max_examples=200)
    @given(st.lists(st.integers(0, 1), min_size=1, max_size=9), st.integers(0, 3))
    def test_against_enumeration(self, flags, missed):
        preds, truths = ranked_case(flags)
        truths = truths + [block(6, 2 * i, 1, 1) for i in range(missed)]
        if not truths:
            with pytest.raises(EvaluationError, match="mAP undefined"):
                map_at_iou(preds, truths)
            return
        got = map_at_iou(preds, truths)
        assert abs(got - float(enumerated_ap(flags, len(truths)))) < 1e-12
        assert 0.0 <= got <= 1.0

    def test_pooled_map_bounds(self):
        a = ranked_case([1, 0, 1])
        b = ranked_case([0, 1])
        pooled = pooled_map([a, b])
        assert 0 < pooled < 1
        assert average_precision([]) == 0.0


class TestSweep:
    def _cases(self):
        truth = block(2, 2, 6, 6)
        preds = [block(2, 2, 6, 6, 0.95), block(3, 3, 6, 6, 0.85), block(0, 8, 3, 3, 0.5),
                 block(9, 0, 2, 2, 0.9)]
        return [SweepCase(preds, [truth])]

    def test_tau_trend(self):
        reps = sweep(self._cases(), "tau", [0.0, 1.0], PipelineConfig(delta=0.9))
        assert reps[0].FP >= reps[1].FP

    def test_delta_single_detection(self):
        cases = [SweepCase([block(0, 0, 3, 3, 0.9)], [block(0, 0, 3, 3)])]
        reps = sweep(cases, "delta", [0.05, 0.3, 0.6])
        assert len({(r.TP, r.FP, r.FN) for r in reps}) == 1

    def test_theta_trend(self):
        truth = block(0, 0, 6, 6)
        loose = [block(0, 0, 6, 2, 0.9), block(4, 4, 6, 6, 0.8)]  # IoU 1/3 and 4/68
        reps = sweep([SweepCase(loose, [truth])], "theta", [0.05, 0.1, 0.5], PipelineConfig(tau=0.0, delta=0.9))
        tps = [r.TP for r in reps]
        assert tps == sorted(tps, reverse=True) and tps[0] > tps[-1]

    def test_csv(self):
        reps = sweep(self._cases(), "tau", [0.9, 0.1])
        text = sweep_csv(reps)
        lines = text.strip().split("\n")
        assert lines[0] == "param,value,TP,FP,FN,precision,recall,f1,map"
        assert [ln.split(",")[1] for ln in lines[1:]] == ["0.1", "0.9"]

    def test_errors(self):
        with pytest.raises(EvaluationError):
            sweep(self._cases(), "k", [1.0])
        with pytest.raises(EvaluationError):
            sweep(self._cases(), "tau", [])

    def test_parse_grid(self):
        assert parse_grid("0:1:0.25") == [0.0, 0.25, 0.5, 0.75, 1.0]
        assert parse_grid("0.1, 0.5") == [0.1, 0.5]
        assert len(parse_grid("0:1:0.05")) == 21
        with pytest.raises(ValueError):
            parse_grid("1:0:0")

    def test_report_json(self):
        r = MetricsReport(1, 0, 0, 1.0, 1.0, 1.0, 1.0, "baseline", (0.8, 0.2, 0.1))
        d = r.to_json()
        assert d["thresholds"] == {"tau": 0.8, "delta": 0.2, "theta": 0.1}
        assert "conventions" in d
