"""Evaluation suite for the three tasks, numpy only.

Saliency is scored pixel-wise: F-measure with beta^2 = 0.3 (reported as the
maximum over a 255-threshold sweep), MAE, and the structure measure. Edge and
skeleton maps are thinned by orientation-based non-maximal suppression and
scored under tolerant one-to-one pixel matching: edges report ODS and OIS,
skeletons the dataset-optimal F. Edge and skeleton F use beta^2 = 1.

Zero-denominator conventions, used everywhere: precision is 1 when there are
no positive predictions, recall is 1 when the groundtruth is empty, and F is
0 when its own denominator vanishes.
"""

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from dfinet.errors import ConfigError
from dfinet.tasks import check_task

SALIENCY_BETA2 = 0.3
BOUNDARY_BETA2 = 1.0
SALIENCY_THRESHOLDS = np.arange(1, 256) / 256.0
BOUNDARY_THRESHOLDS = np.arange(1, 100) / 100.0

_EPS = float(np.finfo(np.float64).eps)


def _plane(a) -> np.ndarray:
    """View input as a single 2-D map, squeezing leading singleton axes."""
    a = np.asarray(a, dtype=np.float64)
    while a.ndim > 2 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise ConfigError(f"expected a 2-D map, got shape {a.shape}")
    return a


def _check_pair(pred, gt, binary_gt=True):
    pred = _plane(pred)
    gt = _plane(gt)
    if pred.shape != gt.shape:
        raise ConfigError(f"pred {pred.shape} and gt {gt.shape} differ in shape")
    if binary_gt and not np.isin(gt, (0.0, 1.0)).all():
        raise ConfigError("groundtruth map is not binary")
    return pred, gt


def _safe_div(num, den, default):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.full(np.broadcast_shapes(num.shape, den.shape), float(default))
    np.divide(num, den, out=out, where=den > 0)
    return out


def precision_recall(tp, fp, fn):
    p = _safe_div(tp, np.asarray(tp, np.float64) + fp, 1.0)
    r = _safe_div(tp, np.asarray(tp, np.float64) + fn, 1.0)
    return p, r


def f_beta(precision, recall, beta2):
    num = (1.0 + beta2) * np.asarray(precision, np.float64) * recall
    return _safe_div(num, beta2 * np.asarray(precision, np.float64) + recall, 0.0)


@dataclass
class PrCurve:
    thresholds: np.ndarray  # descending
    precision: np.ndarray
    recall: np.ndarray

    def __post_init__(self):
        self.thresholds = np.asarray(self.thresholds, dtype=np.float64)
        self.precision = np.asarray(self.precision, dtype=np.float64)
        self.recall = np.asarray(self.recall, dtype=np.float64)
        if not len(self.thresholds) == len(self.precision) == len(self.recall):
            raise ConfigError("PR curve fields must have equal length")

    def f_scores(self, beta2: float) -> np.ndarray:
        return f_beta(self.precision, self.recall, beta2)


@dataclass
class MatchTolerance:
    delta: float = 0.0075

    def __post_init__(self):
        if self.delta < 0:
            raise ConfigError(f"delta: must be >= 0, got {self.delta}")

    def radius(self, shape) -> float:
        """Matching radius in pixels: delta times the image diagonal."""
        h, w = shape
        return self.delta * float(np.hypot(h, w))


# --- pixel-wise saliency metrics ---------------------------------------------


def binary_counts(pred_bin: np.ndarray, gt_bin: np.ndarray):
    pred_bin = np.asarray(pred_bin, dtype=bool)
    gt_bin = np.asarray(gt_bin, dtype=bool)
    tp = int(np.count_nonzero(pred_bin & gt_bin))
    fp = int(np.count_nonzero(pred_bin & ~gt_bin))
    fn = int(np.count_nonzero(~pred_bin & gt_bin))
    return tp, fp, fn


def f_measure(pred, gt, threshold: float, beta2: float = SALIENCY_BETA2) -> float:
    """F-score of pred binarized at `threshold` (pred >= threshold)."""
    pred, gt = _check_pair(pred, gt)
    tp, fp, fn = binary_counts(pred >= threshold, gt > 0.5)
    p, r = precision_recall(tp, fp, fn)
    return float(f_beta(p, r, beta2))


def f_measure_curve(pred, gt, thresholds=SALIENCY_THRESHOLDS,
                    beta2: float = SALIENCY_BETA2) -> PrCurve:
    pred, gt = _check_pair(pred, gt)
    gt_bin = gt > 0.5
    order = np.sort(np.asarray(thresholds, dtype=np.float64))[::-1]
    flat = pred.reshape(-1)
    gt_flat = gt_bin.reshape(-1)
    binar = flat[None, :] >= order[:, None]
    tp = (binar & gt_flat[None, :]).sum(axis=1)
    fp = (binar & ~gt_flat[None, :]).sum(axis=1)
    fn = (~binar & gt_flat[None, :]).sum(axis=1)
    p, r = precision_recall(tp, fp, fn)
    return PrCurve(order, p, r)


def max_f_measure(pred, gt, beta2: float = SALIENCY_BETA2) -> float:
    curve = f_measure_curve(pred, gt, beta2=beta2)
    return float(curve.f_scores(beta2).max())


def f_measure_adaptive(pred, gt, beta2: float = SALIENCY_BETA2) -> float:
    """F-score at the image-adaptive threshold min(2 * mean(pred), 1)."""
    pred, _ = _check_pair(pred, gt)
    return f_measure(pred, gt, min(2.0 * float(pred.mean()), 1.0), beta2)


def mae(pred, gt) -> float:
    pred, gt = _check_pair(pred, gt, binary_gt=False)
    return float(np.abs(pred - gt).mean())


# --- structure measure --------------------------------------------------------


def _dispersion_score(x: np.ndarray) -> float:
    m = float(x.mean()) if x.size else 0.0
    s = float(x.std(ddof=1)) if x.size > 1 else 0.0
    return 2.0 * m / (m * m + 1.0 + s + _EPS)


def _object_score(pred: np.ndarray, gt: np.ndarray) -> float:
    mu = float(gt.mean())
    fg = _dispersion_score(pred[gt])
    bg = _dispersion_score(1.0 - pred[~gt])
    return mu * fg + (1.0 - mu) * bg


def _ssim_block(x: np.ndarray, y: np.ndarray) -> float:
    n = x.size
    if n == 0:
        return 1.0
    mx, my = float(x.mean()), float(y.mean())
    if n > 1:
        vx = float(x.var(ddof=1))
        vy = float(y.var(ddof=1))
        cxy = float(((x - mx) * (y - my)).sum() / (n - 1))
    else:
        vx = vy = cxy = 0.0
    a = 4.0 * mx * my * cxy
    b = (mx * mx + my * my) * (vx + vy)
    if a != 0.0:
        return a / (b + _EPS)
    return 1.0 if b == 0.0 else 0.0


def _region_score(pred: np.ndarray, gt: np.ndarray) -> float:
    ys, xs = np.nonzero(gt)
    cy = int(round(float(ys.mean())))
    cx = int(round(float(xs.mean())))
    h, w = gt.shape
    total = h * w
    score = 0.0
    for rows in (slice(0, cy + 1), slice(cy + 1, None)):
        for cols in (slice(0, cx + 1), slice(cx + 1, None)):
            pq = pred[rows, cols]
            weight = pq.size / total
            score += weight * _ssim_block(pq, gt[rows, cols].astype(np.float64))
    return score


def s_measure(pred, gt, alpha: float = 0.5) -> float:
    """Structure measure: object- and region-aware similarity, in [0, 1].

    Degenerate groundtruths short-circuit: an all-background gt scores
    1 - mean(pred), an all-foreground gt scores mean(pred).
    """
    pred, gt = _check_pair(pred, gt)
    gt_bin = gt > 0.5
    mu = float(gt_bin.mean())
    if mu == 0.0:
        return float(1.0 - pred.mean())
    if mu == 1.0:
        return float(pred.mean())
    s = alpha * _object_score(pred, gt_bin) + (1 - alpha) * _region_score(pred, gt_bin)
    return float(min(1.0, max(0.0, s)))


# --- thinning and tolerant matching -------------------------------------------


def bilinear_sample(grid: np.ndarray, y: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Sample grid at fractional coordinates, clamped to the border."""
    h, w = grid.shape
    y = np.clip(y, 0.0, h - 1.0)
    x = np.clip(x, 0.0, w - 1.0)
    y0 = np.floor(y).astype(np.int64)
    x0 = np.floor(x).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = y - y0
    wx = x - x0
    return (
        grid[y0, x0] * (1 - wy) * (1 - wx)
        + grid[y0, x1] * (1 - wy) * wx
        + grid[y1, x0] * wy * (1 - wx)
        + grid[y1, x1] * wy * wx
    )


def nms_thin(pred, sigma: float = 1.0, tol: float = 1e-6) -> np.ndarray:
    """Orientation-based non-maximal suppression of a soft boundary map.

    The local orientation comes from the gradient of a Gaussian-smoothed copy.
    A pixel survives when its value is at least the linearly interpolated value
    one unit step away along the gradient, in both senses; pixels with no
    preferred direction (vanishing gradient) survive outright. Surviving
    pixels keep their original value, everything else becomes zero.
    """
    p = _plane(pred)
    smooth = ndimage.gaussian_filter(p, sigma=sigma)
    gy, gx = np.gradient(smooth)
    norm = np.hypot(gy, gx)
    flat = norm < tol
    safe = np.where(flat, 1.0, norm)
    uy = gy / safe
    ux = gx / safe
    ys, xs = np.indices(p.shape)
    fwd = bilinear_sample(p, ys + uy, xs + ux)
    bwd = bilinear_sample(p, ys - uy, xs - ux)
    keep = flat | ((p + tol >= fwd) & (p + tol >= bwd))
    return np.where(keep, p, 0.0)


def correspond(pred, gt, tol: MatchTolerance = MatchTolerance()):
    """One-to-one greedy nearest-neighbor matching of positive pixels.

    Returns (TP, FP, FN). Pairs within radius delta * diagonal are matched
    greedily by increasing distance (ties broken by pixel order), each pixel
    at most once. Nonzero pixels count as positive.
    """
    pred_pts = np.argwhere(_plane(pred) != 0)
    gt_pts = np.argwhere(_plane(gt) != 0)
    if len(pred_pts) == 0 or len(gt_pts) == 0:
        return 0, len(pred_pts), len(gt_pts)
    radius = tol.radius(_plane(gt).shape)
    tree = cKDTree(gt_pts)
    pairs = []
    for i, neighbors in enumerate(tree.query_ball_point(pred_pts, radius)):
        for j in neighbors:
            d2 = float(((pred_pts[i] - gt_pts[j]) ** 2).sum())
            pairs.append((d2, i, j))
    pairs.sort()
    used_pred = np.zeros(len(pred_pts), dtype=bool)
    used_gt = np.zeros(len(gt_pts), dtype=bool)
    tp = 0
    for _, i, j in pairs:
        if not used_pred[i] and not used_gt[j]:
            used_pred[i] = used_gt[j] = True
            tp += 1
    return tp, len(pred_pts) - tp, len(gt_pts) - tp


def _threshold_counts(preds, gts, tol, thresholds):
    """(image, threshold, [tp fp fn]) counts on pre-thinned maps."""
    counts = np.zeros((len(preds), len(thresholds), 3), dtype=np.float64)
    for i, (pred, gt) in enumerate(zip(preds, gts)):
        p = _plane(pred)
        for k, t in enumerate(thresholds):
            counts[i, k] = correspond(p >= t, gt, tol)
    return counts


def ods_ois(preds, gts, tol: MatchTolerance = MatchTolerance(),
            thresholds=BOUNDARY_THRESHOLDS, beta2: float = BOUNDARY_BETA2):
    """Dataset-fixed and per-image optimal-threshold F on pre-thinned maps.

    ODS maximizes F of the dataset-aggregated counts over a shared threshold;
    OIS picks each image's best threshold (lowest wins ties), sums the counts
    at those thresholds, and computes F once. Returns (ODS, OIS, PrCurve).
    """
    if len(preds) == 0 or len(preds) != len(gts):
        raise ConfigError(f"need parallel nonempty lists, got {len(preds)} and {len(gts)}")
    thresholds = np.sort(np.asarray(thresholds, dtype=np.float64))
    counts = _threshold_counts(preds, gts, tol, thresholds)

    total = counts.sum(axis=0)
    p, r = precision_recall(total[:, 0], total[:, 1], total[:, 2])
    ods = float(f_beta(p, r, beta2).max())

    per_p, per_r = precision_recall(counts[..., 0], counts[..., 1], counts[..., 2])
    per_f = f_beta(per_p, per_r, beta2)
    best = per_f.argmax(axis=1)
    chosen = counts[np.arange(len(preds)), best].sum(axis=0)
    op, orr = precision_recall(chosen[0], chosen[1], chosen[2])
    ois = float(f_beta(op, orr, beta2))

    curve = PrCurve(thresholds[::-1], p[::-1], r[::-1])
    return ods, ois, curve


def skeleton_fm(preds, gts, tol: MatchTolerance = MatchTolerance(),
                thresholds=BOUNDARY_THRESHOLDS):
    """Dataset-optimal-threshold F (beta^2 = 1) on pre-thinned skeleton maps."""
    fm, _, curve = ods_ois(preds, gts, tol, thresholds, beta2=1.0)
    return fm, curve


# --- dataset-level reports -----------------------------------------------------


@dataclass
class MetricReport:
    task: str
    values: dict[str, float]
    curve: PrCurve


def _saliency_report(preds, gts, thresholds=SALIENCY_THRESHOLDS) -> MetricReport:
    order = np.sort(np.asarray(thresholds, dtype=np.float64))[::-1]
    ps, rs, maes, ss = [], [], [], []
    for pred, gt in zip(preds, gts):
        curve = f_measure_curve(pred, gt, order)
        ps.append(curve.precision)
        rs.append(curve.recall)
        maes.append(mae(pred, gt))
        ss.append(s_measure(pred, gt))
    curve = PrCurve(order, np.mean(ps, axis=0), np.mean(rs, axis=0))
    values = {
        "f_beta": float(curve.f_scores(SALIENCY_BETA2).max()),
        "mae": float(np.mean(maes)),
        "s_measure": float(np.mean(ss)),
    }
    return MetricReport("saliency", values, curve)


def evaluate_dataset(preds, gts, task: str,
                     tol: MatchTolerance = MatchTolerance(),
                     saliency_thresholds=SALIENCY_THRESHOLDS,
                     boundary_thresholds=BOUNDARY_THRESHOLDS) -> MetricReport:
    """Task-appropriate metric bundle over parallel prediction/gt lists.

    Saliency: max F (beta^2 = 0.3), MAE, structure measure. Edge: ODS and
    OIS. Skeleton: dataset-optimal F. Edge and skeleton predictions are
    thinned here before matching.
    """
    check_task(task)
    if len(preds) == 0 or len(preds) != len(gts):
        raise ConfigError(f"need parallel nonempty lists, got {len(preds)} and {len(gts)}")
    if task == "saliency":
        return _saliency_report(preds, gts, saliency_thresholds)
    thinned = [nms_thin(p) for p in preds]
    if task == "edge":
        ods, ois, curve = ods_ois(thinned, gts, tol, boundary_thresholds)
        return MetricReport("edge", {"ods": ods, "ois": ois}, curve)
    fm, curve = skeleton_fm(thinned, gts, tol, boundary_thresholds)
    return MetricReport("skeleton", {"f_m": fm}, curve)


def write_report(report: MetricReport, out_dir, dataset: str = "dataset") -> None:
    """Serialize a report: metrics CSV/JSON plus a PR-curve CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [(dataset, report.task, k, v) for k, v in sorted(report.values.items())]
    with open(out_dir / f"metrics_{report.task}.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["dataset", "task", "metric", "value"])
        writer.writerows(rows)
    with open(out_dir / f"metrics_{report.task}.json", "w") as f:
        json.dump({"dataset": dataset, "task": report.task, "values": report.values},
                  f, indent=2, sort_keys=True)
        f.write("\n")
    with open(out_dir / f"curve_{report.task}.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["threshold", "precision", "recall"])
        for t, p, r in zip(report.curve.thresholds, report.curve.precision,
                           report.curve.recall):
            writer.writerow([f"{t:.6f}", f"{p:.8f}", f"{r:.8f}"])
