"""Detection metrics: object- and pixel-level scores, AP sweeps, calibration, NFA validation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .nfa import ELLIPTICAL, NaiveModel, estimate_naive_model, nfa_curve, sigm_alpha_array, significance
from .numerics import no_grad

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)
DEFAULT_THRESHOLDS = np.linspace(0.0, 1.0, 51)


def binarize(scores, threshold: float) -> np.ndarray:
    """Positive iff score > threshold (strict)."""
    return np.asarray(scores) > threshold


@dataclass
class Component:
    pixels: np.ndarray  # flat indices into the image
    bbox: tuple  # (row_min, col_min, row_max, col_max), inclusive

    @property
    def area(self) -> int:
        return int(self.pixels.size)


@dataclass
class DetectionSet:
    labels: np.ndarray  # 0 = background, 1..k in raster order of each component's first pixel
    components: list
    threshold: Optional[float] = None

    def __len__(self) -> int:
        return len(self.components)


def connected_components(binary, threshold: Optional[float] = None) -> DetectionSet:
    """8-connected labeling; label order follows the raster position of each component's first pixel."""
    binary = np.asarray(binary, dtype=bool)
    labels, count = ndimage.label(binary, structure=EIGHT_CONNECTED)
    comps = []
    if count:
        flat = labels.ravel()
        order = np.argsort(flat, kind="stable")
        bounds = np.searchsorted(flat[order], np.arange(1, count + 2))
        w = binary.shape[1]
        for lab in range(count):
            pix = order[bounds[lab]:bounds[lab + 1]]
            r, c = pix // w, pix % w
            comps.append(Component(pix, (int(r.min()), int(c.min()), int(r.max()), int(c.max()))))
    return DetectionSet(labels, comps, threshold)


def iou_matrix(pred: DetectionSet, gt: DetectionSet) -> np.ndarray:
    p, g = len(pred), len(gt)
    if p == 0 or g == 0:
        return np.zeros((p, g))
    both = (pred.labels > 0) & (gt.labels > 0)
    inter = np.zeros((p + 1, g + 1))
    np.add.at(inter, (pred.labels[both], gt.labels[both]), 1.0)
    inter = inter[1:, 1:]
    area_p = np.array([c.area for c in pred.components], dtype=float)
    area_g = np.array([c.area for c in gt.components], dtype=float)
    return inter / (area_p[:, None] + area_g[None, :] - inter)


@dataclass
class MatchResult:
    tp: list  # (pred index, gt index, iou)
    fp: list  # unmatched prediction indices
    fn: list  # unmatched ground-truth indices


def match_objects(pred: DetectionSet, gt: DetectionSet, iou_min: float = 0.05) -> MatchResult:
    """Greedy one-to-one matching by descending IoU (ties: lower pred index, then lower gt index)."""
    if pred.labels.shape != gt.labels.shape:
        raise ValueError(f"image size mismatch: {pred.labels.shape} vs {gt.labels.shape}")
    iou = iou_matrix(pred, gt)
    cand = [(-iou[i, j], i, j) for i, j in zip(*np.nonzero(iou >= iou_min))]
    cand.sort()
    used_p, used_g, tp = set(), set(), []
    for neg, i, j in cand:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        tp.append((int(i), int(j), float(-neg)))
    fp = [i for i in range(len(pred)) if i not in used_p]
    fn = [j for j in range(len(gt)) if j not in used_g]
    return MatchResult(tp, fp, fn)


@dataclass
class ObjectMetrics:
    precision: float
    recall: float
    f1: float
    fa_per_image: float
    tp: int = 0
    fp: int = 0
    fn: int = 0


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def object_counts(scores: Sequence, gts: Sequence, threshold: float, iou_min: float = 0.05) -> tuple[int, int, int]:
    tp = fp = fn = 0
    for s, g in zip(scores, gts):
        m = match_objects(connected_components(binarize(s, threshold)), connected_components(np.asarray(g) > 0), iou_min)
        tp, fp, fn = tp + len(m.tp), fp + len(m.fp), fn + len(m.fn)
    return tp, fp, fn


def object_metrics(scores: Sequence, gts: Sequence, threshold: float, iou_min: float = 0.05) -> ObjectMetrics:
    """Micro-averaged object-level precision/recall/F1 and false alarms per image."""
    if len(scores) == 0:
        raise ValueError("object_metrics needs at least one image")
    tp, fp, fn = object_counts(scores, gts, threshold, iou_min)
    p, r, f1 = _prf(tp, fp, fn)
    return ObjectMetrics(p, r, f1, fp / len(scores), tp, fp, fn)


def ap_from_curve(precision: Sequence[float], recall: Sequence[float]) -> float:
    """Area under the monotone precision envelope: Σ Δrecall · max precision at recall ≥ r."""
    p = np.asarray(precision, dtype=float)
    r = np.asarray(recall, dtype=float)
    order = np.lexsort((-p, r))
    p, r = p[order], r[order]
    env = np.maximum.accumulate(p[::-1])[::-1]
    prev = np.concatenate([[0.0], r[:-1]])
    return float(np.sum((r - prev) * env))


def _thresholds(scores: Sequence, thresholds) -> np.ndarray:
    if thresholds is None:
        return DEFAULT_THRESHOLDS
    if isinstance(thresholds, str) and thresholds == "unique":
        vals = np.unique(np.concatenate([np.asarray(s).ravel() for s in scores]))
        return np.concatenate([[-np.inf], vals])
    return np.asarray(thresholds, dtype=float)


def pr_curve(scores: Sequence, gts: Sequence, thresholds=None, iou_min: float = 0.05) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    ts = _thresholds(scores, thresholds)
    prec, rec = [], []
    for t in ts:
        p, r, _ = _prf(*object_counts(scores, gts, t, iou_min))
        prec.append(p)
        rec.append(r)
    return ts, np.array(prec), np.array(rec)


def average_precision(scores: Sequence, gts: Sequence, thresholds=None, iou_min: float = 0.05) -> float:
    """Object-level AP over a threshold sweep (51 evenly spaced values by default).

    ``thresholds="unique"`` sweeps every distinct score, which makes the result
    invariant to strictly increasing transforms of the scores.
    """
    _, p, r = pr_curve(scores, gts, thresholds, iou_min)
    return ap_from_curve(p, r)


@dataclass
class PixelMetrics:
    precision: float
    recall: float
    f1: float
    ap: Optional[float] = None
    tolerance_px: int = 2


def _tolerance_counts(pred: np.ndarray, gt: np.ndarray, tol: int) -> tuple[int, int, int]:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"image size mismatch: {pred.shape} vs {gt.shape}")
    near = ndimage.binary_dilation(gt, structure=np.ones((2 * tol + 1, 2 * tol + 1), bool)) if tol > 0 else gt
    tp = int(np.sum(pred & gt))
    fp = int(np.sum(pred & ~near))  # predictions in the ring around gt are ignored
    fn = int(np.sum(gt & ~pred))
    return tp, fp, fn


def pixel_metrics_with_tolerance(pred, gt, tol_px: int = 2) -> PixelMetrics:
    """Pixel precision/recall where predictions within ``tol_px`` (Chebyshev) of gt are ignored."""
    preds = [pred] if np.ndim(pred) == 2 else list(pred)
    gts = [gt] if np.ndim(gt) == 2 else list(gt)
    tp = fp = fn = 0
    for p, g in zip(preds, gts):
        a, b, c = _tolerance_counts(p, g, tol_px)
        tp, fp, fn = tp + a, fp + b, fn + c
    precision, recall, f1 = _prf(tp, fp, fn)
    return PixelMetrics(precision, recall, f1, None, tol_px)


def pixel_average_precision(scores: Sequence, gts: Sequence, tol_px: int = 2, thresholds=None) -> float:
    ts = _thresholds(scores, thresholds)
    prec, rec = [], []
    for t in ts:
        m = pixel_metrics_with_tolerance([binarize(s, t) for s in scores], [np.asarray(g) > 0 for g in gts], tol_px)
        prec.append(m.precision)
        rec.append(m.recall)
    return ap_from_curve(prec, rec)


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

def _histograms(scores: np.ndarray, gt: np.ndarray, threshold: float, bins: int) -> dict:
    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = np.clip(np.floor(scores * bins).astype(int), 0, bins - 1)
    pos = scores > threshold
    count_all = np.bincount(idx, minlength=bins)
    count_gt = np.bincount(idx, weights=gt.astype(float), minlength=bins)
    tp = np.bincount(idx[pos & gt], minlength=bins)
    fp = np.bincount(idx[pos & ~gt], minlength=bins)
    accuracy = [float(count_gt[b] / count_all[b]) if count_all[b] else None for b in range(bins)]
    extreme = float((count_all[0] + count_all[-1]) / max(count_all.sum(), 1))
    return {
        "bin_edges": edges.tolist(),
        "score_hist": count_all.astype(int).tolist(),
        "tp_hist": tp.astype(int).tolist(),
        "fp_hist": fp.astype(int).tolist(),
        "accuracy": accuracy,
        "extreme_fraction": extreme,
    }


def accuracy_inversions(accuracy: Sequence[Optional[float]], counts: Optional[Sequence[int]] = None,
                        z: float = 0.0) -> int:
    """Number of adjacent decreases in per-bin accuracy across occupied bins.

    Parameters
    ----------
    accuracy : sequence of float or None
        Per-bin accuracy; ``None`` marks an empty bin, which is skipped.
    counts : sequence of int, optional
        Pixels per bin. Required when ``z > 0``.
    z : float
        A decrease only counts when it exceeds ``z`` combined binomial
        standard errors of the two bins; 0 counts every decrease.
    """
    if z > 0 and counts is None:
        raise ValueError("a noise-aware count needs the per-bin pixel counts")
    occ = [(a, counts[i] if counts is not None else 0) for i, a in enumerate(accuracy) if a is not None]
    inversions = 0
    for (a, na), (b, nb) in zip(occ, occ[1:]):
        se = math.sqrt(a * (1 - a) / na + b * (1 - b) / nb) if z > 0 else 0.0
        inversions += int(a - b > z * se)
    return inversions


def calibration_report(
    scores,
    gt,
    threshold: float,
    bins: int = 10,
    significance_values=None,
    alpha: Optional[float] = None,
    n_test: int = 1,
    alpha_recalib: Optional[float] = None,
) -> dict:
    """Score histograms for TP/FP pixels and accuracy per score bin.

    With ``alpha_recalib`` and stored fused significance values, the scores are
    recomputed with the new slope (no retraining) and both reports are returned.
    """
    s = np.concatenate([np.asarray(x, float).ravel() for x in scores]) if np.ndim(scores) != 1 else np.asarray(scores, float)
    g = np.concatenate([np.asarray(x).ravel() > 0 for x in gt]) if np.ndim(gt) != 1 else np.asarray(gt) > 0
    report = {"threshold": threshold, "bins": bins, "original": _histograms(s, g, threshold, bins)}
    if alpha_recalib is not None:
        if significance_values is None:
            raise ValueError("recalibration needs the stored significance values")
        sig = np.concatenate([np.asarray(x, float).ravel() for x in significance_values])
        if alpha is not None and alpha_recalib == alpha:
            recal = s
        else:
            recal = sigm_alpha_array(sig, alpha_recalib, n_test)
        report["alpha"] = alpha
        report["alpha_recalib"] = alpha_recalib
        report["recalibrated"] = _histograms(recal, g, threshold, bins)
    return report


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    object: dict
    pixel: dict
    calibration: dict = field(default_factory=dict)
    threshold: float = 0.1

    def to_json(self, path=None) -> str:
        text = json.dumps(asdict(self), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text)
        return text


def evaluate(scores: Sequence, gts: Sequence, threshold: float, tol_px: int = 2, bins: int = 10,
             iou_min: float = 0.05) -> MetricsReport:
    om = object_metrics(scores, gts, threshold, iou_min)
    ap = average_precision(scores, gts, iou_min=iou_min)
    pm = pixel_metrics_with_tolerance([binarize(s, threshold) for s in scores], [np.asarray(g) > 0 for g in gts], tol_px)
    pm.ap = pixel_average_precision(scores, gts, tol_px)
    obj = {"precision": om.precision, "recall": om.recall, "f1": om.f1, "ap": ap, "fa_per_image": om.fa_per_image,
           "tp": om.tp, "fp": om.fp, "fn": om.fn}
    pix = {"precision": pm.precision, "recall": pm.recall, "f1": pm.f1, "ap": pm.ap, "tolerance_px": tol_px}
    return MetricsReport(obj, pix, calibration_report(scores, gts, threshold, bins), threshold)


def fragmentation(scores: Sequence, gts: Sequence, fractions: Sequence[float] = (0.5, 0.7, 0.9), margin: int = 2) -> float:
    """Mean number of components per ground-truth object when binarized at high thresholds.

    Each object is thresholded at ``q`` times its own peak score, inside its
    neighbourhood (gt dilated by ``margin``). 1.0 means objects never break up.
    """
    counts = []
    for s, g in zip(scores, gts):
        s = np.asarray(s, dtype=float)
        gt_sets = connected_components(np.asarray(g) > 0)
        for comp in gt_sets.components:
            region = np.zeros(s.shape, dtype=bool)
            region.flat[comp.pixels] = True
            region = ndimage.binary_dilation(region, structure=np.ones((2 * margin + 1,) * 2, bool))
            peak = s[region].max()
            if peak <= 0:
                continue
            for q in fractions:
                counts.append(len(connected_components(region & (s > q * peak))))
    return float(np.mean(counts)) if counts else float("nan")


# ---------------------------------------------------------------------------
# a contrario validation
# ---------------------------------------------------------------------------

@dataclass
class MeaningfulnessRow:
    epsilon: float
    mean: float
    se: float
    bound: float
    holds: bool


def epsilon_meaningfulness_check(
    k: int = 4,
    size: tuple = (100, 100),
    epsilons: Sequence[float] = (1.0, 10.0),
    trials: int = 200,
    seed: int = 0,
    estimated: bool = False,
    form: str = ELLIPTICAL,
) -> list:
    """Monte Carlo count of pixels with NFA <= ε on pure background noise.

    Noise is Gaussian with a random diagonal covariance. With the true model
    the mean count should stay below ε (+ 3 standard errors); with
    ``estimated=True`` the model is re-estimated per map and the result is
    only reported.
    """
    if trials < 100:
        raise ValueError(f"need at least 100 trials, got {trials}")
    rng = np.random.default_rng(seed)
    h, w = size
    scales = np.exp(rng.uniform(-1.0, 1.0, size=k))
    true_model = NaiveModel.from_covariance(form, scales**2, n_test=h * w)
    thresholds = np.array([-math.log(e) for e in epsilons])
    counts = np.zeros((trials, len(epsilons)))
    with no_grad():
        for t in range(trials):
            x = rng.standard_normal((1, k, h, w)) * scales[None, :, None, None]
            model = estimate_naive_model(x, form) if estimated else true_model
            s = significance(x, model).values.data.ravel()
            counts[t] = [(s >= th - 1e-9).sum() for th in thresholds]
    rows = []
    for j, eps in enumerate(epsilons):
        mean = float(counts[:, j].mean())
        se = float(counts[:, j].std(ddof=1) / math.sqrt(trials))
        rows.append(MeaningfulnessRow(float(eps), mean, se, float(eps), mean <= eps + 3 * se))
    return rows


def curve_export(x_values, k: int = 1, n_test: int = 1, path=None) -> list:
    """Rows of (x, log10 NFA, significance) for a centred unit-variance point at distance |x|."""
    x = np.asarray(x_values, dtype=float)
    log10_nfa, s = nfa_curve(x, k, n_test)
    rows = [(float(a), float(b), float(c)) for a, b, c in zip(x, log10_nfa, s)]
    if path is not None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "log10_nfa", "significance"])
            writer.writerows(rows)
    return rows
