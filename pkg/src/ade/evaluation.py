"""Generalized evaluation protocol: calibration sweep, curve, AUC, HM.

A calibration bias added to every unseen candidate trades seen accuracy for
unseen accuracy; sweeping it over the per-image critical values traces the
unseen-seen curve, from which AUC, the best harmonic mean, and the best
seen/unseen accuracies derive. Attribute and object accuracies are read from
the independent concept heads at zero bias (the marginalized variant is
reported alongside for reference).
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np

from .inference import ScoreTable

MAX_CURVE_POINTS = 100


class ProtocolError(ValueError):
    """The score table cannot support the protocol (e.g. no unseen images)."""


@dataclass
class EvaluationCurve:
    points: list[tuple[float, float, float]]  # (gamma, seen_acc, unseen_acc)

    @property
    def seen(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])

    @property
    def unseen(self) -> np.ndarray:
        return np.array([p[2] for p in self.points])


@dataclass
class MetricsReport:
    auc: float          # area under the unseen-seen curve, x100
    best_hm: float      # percent
    best_seen: float    # percent
    best_unseen: float  # percent
    attr_acc: float     # percent, independent head at zero bias
    obj_acc: float      # percent
    attr_acc_from_blend: float  # percent, marginalized from the blended argmax
    obj_acc_from_blend: float


def calibration_gammas(table: ScoreTable, endpoint_margin: float | None = None):
    """One critical bias per unseen-truth image, sorted, plus two endpoints
    that push the sweep past both extremes."""
    unseen_img = table.unseen_candidate[table.truth]
    if not unseen_img.any():
        raise ProtocolError("no unseen-composition images; the calibration "
                            "protocol is undefined")
    scores = table.blended[unseen_img]
    seen_scores = scores[:, ~table.unseen_candidate]
    true_scores = np.take_along_axis(
        scores, table.truth[unseen_img][:, None], axis=1)[:, 0]
    gammas = np.sort(seen_scores.max(axis=1) - true_scores)
    if endpoint_margin is None:
        span = float(gammas[-1] - gammas[0])
        endpoint_margin = 1e-6 * max(1.0, span)
    return np.concatenate(([gammas[0] - endpoint_margin], gammas,
                           [gammas[-1] + endpoint_margin]))


def biased_argmax(scores: np.ndarray, gamma: float,
                  unseen_candidate: np.ndarray) -> np.ndarray:
    """Argmax after adding gamma to every unseen candidate; lowest index wins
    ties (argmax returns the first maximum)."""
    biased = scores + gamma * unseen_candidate.astype(scores.dtype)
    return np.argmax(biased, axis=-1)


def build_curve(table: ScoreTable, gammas, max_points: int = MAX_CURVE_POINTS):
    """Seen/unseen top-1 accuracy at each bias; long gamma lists are
    subsampled to `max_points` quantiles with the extremes kept. The unbiased
    point (zero bias) is always part of the sweep."""
    gammas = np.asarray(gammas, dtype=float)
    if gammas.size > max_points:
        qs = np.quantile(gammas, np.linspace(0.0, 1.0, max_points - 2))
        gammas = np.unique(np.concatenate(([gammas[0]], qs, [gammas[-1]])))
    gammas = np.union1d(gammas, [0.0])
    unseen_img = table.unseen_candidate[table.truth]
    seen_img = ~unseen_img
    points = []
    for gamma in gammas:
        pred = biased_argmax(table.blended, float(gamma), table.unseen_candidate)
        correct = pred == table.truth
        seen_acc = float(correct[seen_img].mean()) if seen_img.any() else 0.0
        unseen_acc = float(correct[unseen_img].mean()) if unseen_img.any() else 0.0
        points.append((float(gamma), seen_acc, unseen_acc))
    return EvaluationCurve(points)


def summarize(curve: EvaluationCurve, table: ScoreTable) -> MetricsReport:
    seen = curve.seen
    unseen = curve.unseen
    order = np.argsort(seen, kind="stable")
    s_sorted, u_sorted = seen[order], unseen[order]
    auc = float(np.trapezoid(u_sorted, s_sorted)) if len(seen) > 1 else 0.0
    both = seen + unseen
    hm = np.where(both > 0, 2.0 * seen * unseen / np.where(both > 0, both, 1.0), 0.0)

    attr_pred = table.p_attr.argmax(axis=1)
    obj_pred = table.p_obj.argmax(axis=1)
    pred0 = biased_argmax(table.blended, 0.0, table.unseen_candidate)
    cand = np.asarray(table.candidates)
    return MetricsReport(
        auc=100.0 * auc,
        best_hm=100.0 * float(hm.max()),
        best_seen=100.0 * float(seen.max()),
        best_unseen=100.0 * float(unseen.max()),
        attr_acc=100.0 * float((attr_pred == table.attr_labels).mean()),
        obj_acc=100.0 * float((obj_pred == table.obj_labels).mean()),
        attr_acc_from_blend=100.0 * float(
            (cand[pred0, 0] == table.attr_labels).mean()),
        obj_acc_from_blend=100.0 * float(
            (cand[pred0, 1] == table.obj_labels).mean()),
    )


def evaluate(table: ScoreTable):
    """Convenience: gammas -> curve -> report."""
    curve = build_curve(table, calibration_gammas(table))
    return curve, summarize(curve, table)


def write_metrics_json(path, report: MetricsReport, extra: dict | None = None):
    payload = asdict(report)
    if extra:
        payload.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_curve_csv(path, curve: EvaluationCurve) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["gamma", "seen_acc", "unseen_acc"])
        for gamma, s, u in curve.points:
            writer.writerow([repr(gamma), repr(s), repr(u)])


def read_curve_csv(path) -> EvaluationCurve:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ProtocolError(f"{path} holds no curve points")
    points = [(float(g), float(s), float(u)) for g, s, u in rows[1:]]
    return EvaluationCurve(points)


def plot_curves(path, curves: dict[str, EvaluationCurve]) -> None:
    """Overlay unseen-seen curves (seen on x, unseen on y) into an SVG."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not curves:
        raise ProtocolError("nothing to plot")
    fig, ax = plt.subplots(figsize=(5, 4))
    for label, curve in curves.items():
        order = np.argsort(curve.seen, kind="stable")
        auc = 100.0 * float(np.trapezoid(curve.unseen[order], curve.seen[order]))
        ax.plot(curve.seen, curve.unseen, marker=".", markersize=3,
                label=f"{label} (AUC {auc:.1f})")
    ax.set_xlabel("seen accuracy")
    ax.set_ylabel("unseen accuracy")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
