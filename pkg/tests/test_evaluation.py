import numpy as np
import pytest

from ade.evaluation import (
    EvaluationCurve,
    ProtocolError,
    biased_argmax,
    build_curve,
    calibration_gammas,
    evaluate,
    plot_curves,
    read_curve_csv,
    summarize,
    write_curve_csv,
)
from ade.inference import ScoreTable

from oracles import (
    calibration_gamma_oracle,
    protocol_oracle,
    trapezoid_auc_oracle,
)


def make_table(blended, truth, unseen, p_attr=None, p_obj=None,
               candidates=None):
    blended = np.asarray(blended, dtype=float)
    n_img, n_cand = blended.shape
    unseen = np.asarray(unseen)
    if candidates is None:
        candidates = [(j, 0) for j in range(n_cand)]
    if p_attr is None:
        n_attr = max(a for a, _ in candidates) + 1
        p_attr = np.full((n_img, n_attr), 1.0 / n_attr)
    if p_obj is None:
        n_obj = max(o for _, o in candidates) + 1
        p_obj = np.full((n_img, n_obj), 1.0 / n_obj)
    truth = np.asarray(truth)
    return ScoreTable(
        candidates=candidates, unseen_candidate=unseen, blended=blended,
        p_comp=blended, p_attr=p_attr, p_obj=p_obj, truth=truth,
        attr_labels=np.array([candidates[t][0] for t in truth]),
        obj_labels=np.array([candidates[t][1] for t in truth]),
        image_ids=[f"i{k}" for k in range(n_img)], beta=0.0)


class TestCalibrationGammas:
    def test_simple_subtraction(self):
        table = make_table([[0.8, 0.5]], [1], [False, True])
        gammas = calibration_gammas(table)
        assert gammas[1] == pytest.approx(0.3)

    def test_negative_gamma_allowed(self):
        table = make_table([[0.6, 0.8]], [1], [False, True])
        gammas = calibration_gammas(table)
        assert gammas[1] == pytest.approx(-0.2)

    def test_counts_and_endpoints(self):
        rng = np.random.default_rng(0)
        blended = rng.random((6, 4))
        truth = [3, 3, 2, 0, 1, 3]  # three unseen-truth images (cand 3)
        table = make_table(blended, truth, [False, False, False, True])
        gammas = calibration_gammas(table)
        assert len(gammas) == 3 + 2
        assert gammas[0] < gammas[1]
        assert gammas[-1] > gammas[-2]
        inner = calibration_gamma_oracle(
            blended.tolist(), truth, [False, False, False, True])
        assert np.allclose(gammas[1:-1], inner)

    def test_no_unseen_images_is_an_error(self):
        table = make_table([[0.8, 0.5]], [0], [False, True])
        with pytest.raises(ProtocolError):
            calibration_gammas(table)


class TestBiasedArgmax:
    def test_zero_bias_is_plain_argmax(self):
        scores = np.array([[0.2, 0.5, 0.1]])
        assert biased_argmax(scores, 0.0, np.array([False, False, True]))[0] == 1

    def test_large_bias_selects_best_unseen(self):
        scores = np.array([[0.9, 0.5, 0.6]])
        unseen = np.array([False, True, True])
        assert biased_argmax(scores, 100.0, unseen)[0] == 2

    def test_tie_breaks_to_lowest_index(self):
        scores = np.array([[0.5, 0.5, 0.5]])
        assert biased_argmax(scores, 0.0, np.zeros(3, dtype=bool))[0] == 0

    def test_sweep_matches_hand_enumeration(self):
        # 2 seen / 2 unseen candidates, exhaustive oracle over the sweep
        rng = np.random.default_rng(1)
        blended = rng.random((8, 4))
        truth = [0, 1, 2, 3, 0, 2, 3, 1]
        unseen = [False, False, True, True]
        table = make_table(blended, truth, unseen)
        gammas = calibration_gammas(table)
        curve = build_curve(table, gammas)
        expected = protocol_oracle(blended.tolist(), truth, unseen,
                                   [p[0] for p in curve.points])
        for point, exp in zip(curve.points, expected):
            assert point == pytest.approx(exp, abs=1e-12)


class TestBuildCurve:
    def test_perfect_classifier_reaches_corner(self):
        blended = np.eye(4) + 0.001
        table = make_table(blended, [0, 1, 2, 3], [False, False, True, True])
        curve = build_curve(table, calibration_gammas(table))
        assert any(s == 1.0 and u == 1.0 for _, s, u in curve.points)

    def test_fixed_seen_predictor_has_zero_unseen_at_low_gamma(self):
        blended = np.tile([1.0, 0.1, 0.1, 0.1], (4, 1))
        table = make_table(blended, [0, 0, 2, 3], [False, False, True, True])
        curve = build_curve(table, calibration_gammas(table))
        low = curve.points[0]
        assert low[2] == 0.0  # unseen accuracy zero below transitions

    def test_monotone_tradeoff(self):
        rng = np.random.default_rng(2)
        blended = rng.random((30, 6))
        truth = rng.integers(0, 6, size=30)
        unseen = np.array([False, False, False, True, True, True])
        while not unseen[truth].any() or not (~unseen[truth]).any():
            truth = rng.integers(0, 6, size=30)
        table = make_table(blended, truth, unseen)
        curve = build_curve(table, calibration_gammas(table))
        seen = curve.seen
        unseen_acc = curve.unseen
        assert all(a >= b - 1e-12 for a, b in zip(seen, seen[1:]))
        assert all(a <= b + 1e-12 for a, b in zip(unseen_acc, unseen_acc[1:]))

    def test_long_gamma_lists_are_quantile_subsampled(self):
        rng = np.random.default_rng(3)
        gammas = np.sort(rng.normal(size=500))
        blended = rng.random((4, 3))
        table = make_table(blended, [0, 1, 2, 2], [False, False, True])
        curve = build_curve(table, gammas, max_points=100)
        assert len(curve.points) <= 101  # quantiles + extremes + zero bias
        assert curve.points[0][0] == pytest.approx(gammas[0])
        assert curve.points[-1][0] == pytest.approx(gammas[-1])


class TestSummarize:
    def test_unit_triangle_auc_is_fifty(self):
        curve = EvaluationCurve([(0.0, 1.0, 0.0), (1.0, 0.0, 1.0)])
        table = make_table(np.ones((2, 2)), [0, 1], [False, True])
        report = summarize(curve, table)
        assert report.auc == pytest.approx(50.0)

    def test_single_point_hm(self):
        curve = EvaluationCurve([(0.0, 0.6, 0.6)])
        table = make_table(np.ones((2, 2)), [0, 1], [False, True])
        report = summarize(curve, table)
        assert report.best_hm == pytest.approx(60.0)

    def test_auc_matches_integration_oracle(self):
        rng = np.random.default_rng(4)
        seen = np.sort(rng.random(5))[::-1]
        unseen = np.sort(rng.random(5))
        curve = EvaluationCurve([(float(g), float(s), float(u)) for g, s, u
                                 in zip(range(5), seen, unseen)])
        table = make_table(np.ones((2, 2)), [0, 1], [False, True])
        report = summarize(curve, table)
        expected = trapezoid_auc_oracle(list(zip(seen, unseen)))
        assert report.auc == pytest.approx(100 * expected, abs=1e-9)

    def test_auc_invariant_to_duplicate_points(self):
        pts = [(0.0, 0.9, 0.1), (1.0, 0.5, 0.5), (2.0, 0.1, 0.8)]
        dup = pts + [pts[1], pts[1]]
        table = make_table(np.ones((2, 2)), [0, 1], [False, True])
        a = summarize(EvaluationCurve(pts), table).auc
        b = summarize(EvaluationCurve(sorted(dup)), table).auc
        assert a == pytest.approx(b, abs=1e-12)

    def test_best_hm_at_least_hm_at_gamma_zero(self):
        rng = np.random.default_rng(5)
        blended = rng.random((20, 4))
        truth = rng.integers(0, 4, size=20)
        unseen = np.array([False, False, True, True])
        while not unseen[truth].any() or not (~unseen[truth]).any():
            truth = rng.integers(0, 4, size=20)
        table = make_table(blended, truth, unseen)
        curve, report = evaluate(table)
        pred0 = biased_argmax(table.blended, 0.0, unseen)
        seen_mask = ~unseen[truth]
        s0 = (pred0 == truth)[seen_mask].mean()
        u0 = (pred0 == truth)[~seen_mask].mean()
        hm0 = 0.0 if s0 + u0 == 0 else 200.0 * s0 * u0 / (s0 + u0)
        assert report.best_hm >= hm0 - 1e-9

    def test_attr_obj_accuracy_from_heads(self):
        candidates = [(0, 0), (0, 1), (1, 0), (1, 1)]
        p_attr = np.array([[0.9, 0.1], [0.2, 0.8]])
        p_obj = np.array([[0.3, 0.7], [0.6, 0.4]])
        table = make_table(np.eye(2, 4) + 0.01, [0, 3],
                           [False, False, False, True],
                           p_attr=p_attr, p_obj=p_obj, candidates=candidates)
        curve, report = evaluate(table)
        # image 0: attr argmax 0 == label 0; image 1: attr argmax 1 == label 1
        assert report.attr_acc == pytest.approx(100.0)
        # image 0: obj argmax 1 != label 0; image 1: obj argmax 0 != label 1
        assert report.obj_acc == pytest.approx(0.0)


class TestScoreDumpConsumption:
    def test_protocol_runs_off_a_dump_file(self, tmp_path):
        from ade.inference import write_score_dump, read_score_dump

        rng = np.random.default_rng(9)
        blended = rng.random((6, 4))
        truth = np.array([0, 1, 2, 3, 0, 3])
        table = make_table(blended, truth, [False, False, True, True])
        write_score_dump(tmp_path / "scores.jsonl", table)
        loaded = read_score_dump(tmp_path / "scores.jsonl")
        curve_direct, report_direct = evaluate(table)
        curve_loaded, report_loaded = evaluate(loaded)
        assert curve_direct.points == curve_loaded.points
        assert report_direct == report_loaded


class TestCurveIo:
    def test_csv_roundtrip(self, tmp_path):
        curve = EvaluationCurve([(0.0, 0.75, 0.25), (0.5, 0.5, 0.5)])
        write_curve_csv(tmp_path / "curve.csv", curve)
        back = read_curve_csv(tmp_path / "curve.csv")
        assert back.points == curve.points

    def test_empty_csv_rejected(self, tmp_path):
        (tmp_path / "c.csv").write_text("gamma,seen_acc,unseen_acc\n")
        with pytest.raises(ProtocolError):
            read_curve_csv(tmp_path / "c.csv")

    def test_svg_plot(self, tmp_path):
        curve = EvaluationCurve([(0.0, 0.9, 0.1), (1.0, 0.2, 0.7)])
        plot_curves(tmp_path / "out.svg", {"run": curve})
        blob = (tmp_path / "out.svg").read_text()
        assert "<svg" in blob

    def test_plot_nothing_rejected(self, tmp_path):
        with pytest.raises(ProtocolError):
            plot_curves(tmp_path / "out.svg", {})
