"""ROC analysis, Youden cutoffs, score histograms and zero-pixel correlation."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import plots
from .data import is_abnormal
from .errors import EvaluationError


@dataclass
class RocCurve:
    """ROC points ordered by decreasing threshold (so FPR/TPR never decrease).

    A sample is called positive when its decision statistic is ``>=`` the
    threshold. The first point uses ``+inf`` and sits at (0, 0).
    """

    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    n_pos: int
    n_neg: int

    @property
    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.thresholds.tolist(), self.fpr.tolist(), self.tpr.tolist()))

    @property
    def auc(self) -> float:
        return auc(self)

    @property
    def youden(self) -> tuple[float, float]:
        return youden_cutoff(self)


def roc(scores, labels, positive=1) -> RocCurve:
    """ROC curve of decision statistic ``scores`` (higher means positive).

    Every distinct score is a threshold; tied scores move FPR and TPR
    together, which gives ties half credit in the area.
    """
    s = np.asarray(scores, dtype=np.float64)
    lab = np.asarray(labels)
    if s.shape != lab.shape or s.ndim != 1:
        raise EvaluationError("scores and labels must be 1-D and the same length")
    if not np.all(np.isfinite(s)):
        raise EvaluationError("scores must be finite")
    pos = lab == positive
    n_pos = int(pos.sum())
    n_neg = int(len(pos) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("ROC needs both positive and negative samples")
    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    tp = np.cumsum(pos[order])
    fp = np.cumsum(~pos[order])
    # last index of each run of equal scores
    last = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    thresholds = np.r_[np.inf, s_sorted[last]]
    tpr = np.r_[0.0, tp[last] / n_pos]
    fpr = np.r_[0.0, fp[last] / n_neg]
    return RocCurve(thresholds, fpr, tpr, n_pos, n_neg)


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under the curve."""
    dx = np.diff(curve.fpr)
    return float(np.sum(dx * (curve.tpr[1:] + curve.tpr[:-1]) / 2.0))


def youden_cutoff(curve: RocCurve) -> tuple[float, float]:
    """Threshold maximising ``J = TPR - FPR``; ties go to the lower FPR."""
    j = curve.tpr - curve.fpr
    best = int(np.argmax(j))  # first maximum == lowest FPR, since FPR is non-decreasing
    return float(curve.thresholds[best]), float(j[best])


# record-level helpers -------------------------------------------------------


def _labeled(records):
    return [r for r in records if r.label is not None]


def subclasses(records) -> list[str]:
    names = {r.label.split(":", 1)[1] for r in _labeled(records) if r.label.startswith("abnormal:")}
    return sorted(names)


def records_roc(records, field: str = "posterior_score") -> RocCurve:
    """Abnormal-vs-normal ROC using ``-field`` as the abnormality statistic."""
    recs = _labeled(records)
    if not recs:
        raise EvaluationError("no labeled records")
    scores = [-getattr(r, field) for r in recs]
    labels = [is_abnormal(r.label) for r in recs]
    return roc(scores, labels, positive=True)


def per_label_roc(records, subclass: str | None, field: str = "posterior_score") -> RocCurve:
    """ROC of normal records against one abnormal subclass only.

    ``subclass`` of ``None`` or ``"abnormal"`` selects every abnormal record.
    """
    recs = _labeled(records)
    normal = [r for r in recs if r.label == "normal"]
    if subclass in (None, "abnormal"):
        chosen = [r for r in recs if is_abnormal(r.label)]
    else:
        chosen = [r for r in recs if r.label in (f"abnormal:{subclass}", subclass)]
    if not chosen:
        raise EvaluationError(f"no records with subclass {subclass!r}")
    return records_roc(normal + chosen, field)


@dataclass
class Histogram:
    field: str
    edges: np.ndarray
    counts: dict


def _class_of(label) -> str:
    if label is None:
        return "unlabeled"
    return "abnormal" if is_abnormal(label) else "normal"


def histogram(records, field: str = "posterior_score", bins: int = 20) -> Histogram:
    """Per-class counts over equal-width bins spanning the observed range."""
    if bins < 1:
        raise ValueError("bins must be at least 1")
    values = np.array([getattr(r, field) for r in records], dtype=np.float64)
    if values.size == 0:
        raise EvaluationError("histogram of zero records")
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    classes = np.array([_class_of(r.label) for r in records])
    counts = {}
    for cls in ("normal", "abnormal", "unlabeled"):
        sel = values[classes == cls]
        if sel.size:
            counts[cls], _ = np.histogram(sel, bins=edges)
    return Histogram(field, edges, counts)


def pearson(a, b) -> tuple[float, bool]:
    """Pearson correlation and a flag that is True when it is undefined.

    Undefined (zero-variance) cases are reported as 0.0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    da, db = a - a.mean(), b - b.mean()
    denom = math.sqrt(float(np.dot(da, da)) * float(np.dot(db, db)))
    if denom == 0.0:
        return 0.0, True
    return float(np.dot(da, db) / denom), False


def scatter_zero_pixels(records) -> dict:
    """Zero-pixel fraction against likelihood-only and posterior scores."""
    zpf = [r.zero_pixel_fraction for r in records]
    lik = [r.loglik_normal for r in records]
    post = [r.posterior_score for r in records]
    r_lik, und_lik = pearson(zpf, lik)
    r_post, und_post = pearson(zpf, post)
    return {
        "zero_pixel_fraction": zpf,
        "likelihood_score": lik,
        "posterior_score": post,
        "labels": [r.label for r in records],
        "corr_likelihood": r_lik,
        "corr_likelihood_undefined": und_lik,
        "corr_posterior": r_post,
        "corr_posterior_undefined": und_post,
    }


# output ---------------------------------------------------------------------


def write_roc_csv(path, curve: RocCurve, field_sign: float = -1.0) -> None:
    """Write ``threshold,fpr,tpr``.

    Thresholds are converted back to the score's own scale (``field_sign``
    of -1 undoes the negation used for normality scores): a record is
    flagged abnormal when its score is ``<=`` the threshold.
    """
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for t, x, y in curve.points:
            w.writerow([repr(field_sign * t), repr(x), repr(y)])


def write_histogram_csv(path, hist: Histogram) -> None:
    classes = list(hist.counts)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi"] + classes)
        for i in range(len(hist.edges) - 1):
            w.writerow([repr(hist.edges[i]), repr(hist.edges[i + 1])] + [int(hist.counts[c][i]) for c in classes])


def write_scatter_csv(path, scatter: dict) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["zero_pixel_fraction", "likelihood_score", "posterior_score", "label"])
        for row in zip(
            scatter["zero_pixel_fraction"], scatter["likelihood_score"], scatter["posterior_score"], scatter["labels"]
        ):
            w.writerow([repr(row[0]), repr(row[1]), repr(row[2]), row[3] or ""])


def _curve_summary(curve: RocCurve) -> dict:
    t, j = youden_cutoff(curve)
    return {
        "auc": auc(curve),
        "youden_threshold": -t,
        "youden_j": j,
        "n_abnormal": curve.n_pos,
        "n_normal": curve.n_neg,
    }


def evaluate(records, out_dir: str | os.PathLike, bins: int = 20) -> dict:
    """Write ``roc.csv``, ``summary.json``, histograms, scatter data and SVGs.

    ``youden_threshold`` values are on the score scale: records with a score
    at or below it are flagged abnormal.
    """
    labeled = _labeled(records)
    if not labeled:
        raise EvaluationError("no labeled records to evaluate")
    os.makedirs(out_dir, exist_ok=True)
    summary = {"counts": {"records": len(records), "labeled": len(labeled)}}
    svgs = {}
    for field, tag in (("posterior_score", "posterior"), ("loglik_normal", "likelihood")):
        overall = records_roc(labeled, field)
        block = {"overall": _curve_summary(overall), "per_label": {}}
        curves = {"overall": overall}
        for sub in subclasses(labeled):
            c = per_label_roc(labeled, sub, field)
            block["per_label"][sub] = _curve_summary(c)
            curves[sub] = c
        summary[tag] = block
        prefix = "roc" if tag == "posterior" else "roc_likelihood"
        write_roc_csv(os.path.join(out_dir, f"{prefix}.csv"), overall)
        svgs[f"{prefix}.svg"] = plots.roc_svg(curves, title=f"ROC ({tag})")
        hist = histogram(records, field, bins)
        write_histogram_csv(os.path.join(out_dir, f"hist_{tag}.csv"), hist)
        svgs[f"hist_{tag}.svg"] = plots.histogram_svg(hist, title=f"Histogram of {field}")
    scatter = scatter_zero_pixels(records)
    write_scatter_csv(os.path.join(out_dir, "zero_pixels.csv"), scatter)
    svgs["zero_pixels.svg"] = plots.scatter_svg(scatter)
    summary["zero_pixel_correlation"] = {
        "likelihood": scatter["corr_likelihood"],
        "likelihood_undefined": scatter["corr_likelihood_undefined"],
        "posterior": scatter["corr_posterior"],
        "posterior_undefined": scatter["corr_posterior_undefined"],
    }
    for name, text in svgs.items():
        with open(os.path.join(out_dir, name), "w") as f:
            f.write(text)
    with open(os.path.join(out_dir, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    return summary
