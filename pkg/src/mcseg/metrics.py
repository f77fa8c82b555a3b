"""Dataset-level precision-recall evaluation with a spatial match tolerance.

Probability maps are binarized at a sweep of thresholds; at each threshold a
predicted positive matches if its Euclidean distance to the closest
ground-truth positive is at most tau, and vice versa for recall. Counts are
accumulated over the whole dataset before deriving precision and recall, from
which ODS (best dataset-scale F-score), AP (area under P(R)) and AP60 (same
area restricted to recall in [.6, 1]) follow. Evaluation never applies
non-maximum suppression.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


def default_thresholds():
    return np.round(np.linspace(0.01, 0.99, 99), 6)


@dataclass
class EvalConfig:
    thresholds: np.ndarray = field(default_factory=default_thresholds)
    tau: float = 0.0
    nms: bool = False

    def validate(self):
        th = np.asarray(self.thresholds, dtype=np.float64)
        if th.ndim != 1 or th.size == 0:
            raise ValueError("thresholds must be a non-empty 1-d sequence")
        if np.any(th <= 0) or np.any(th >= 1):
            raise ValueError("thresholds must lie strictly inside (0, 1)")
        if np.any(np.diff(th) <= 0):
            raise ValueError("thresholds must be strictly increasing")
        if self.tau < 0:
            raise ValueError("tau must be non-negative")
        if self.nms:
            raise ValueError("evaluation is defined without non-maximum suppression")
        return th


@dataclass
class EvalCurve:
    thresholds: np.ndarray
    matched_pred: np.ndarray
    total_pred: np.ndarray
    matched_gt: np.ndarray
    total_gt: np.ndarray

    @property
    def precision(self):
        return np.where(self.total_pred > 0,
                        self.matched_pred / np.maximum(self.total_pred, 1), 1.0)

    @property
    def recall(self):
        return np.where(self.total_gt > 0,
                        self.matched_gt / np.maximum(self.total_gt, 1), 1.0)

    @property
    def fscore(self):
        p, r = self.precision, self.recall
        s = p + r
        return np.where(s > 0, 2 * p * r / np.where(s > 0, s, 1.0), 0.0)


def tolerance(width, height):
    """Matching tolerance 0.0075 * sqrt(W^2 + H^2); ~2.7 px at 256x256."""
    if width < 1 or height < 1:
        raise ValueError("image dimensions must be positive, got %dx%d"
                         % (width, height))
    return 0.0075 * float(np.sqrt(width ** 2 + height ** 2))


def euclidean_dt(mask):
    """Exact Euclidean distance to the nearest positive pixel (inf if none)."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.full(mask.shape, np.inf)
    return ndimage.distance_transform_edt(~mask)


def match_counts(pred, gt, tau):
    """(matched_pred, total_pred, matched_gt, total_gt) under tolerance tau."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError("shape mismatch: pred %s vs gt %s"
                         % (pred.shape, gt.shape))
    total_pred = int(pred.sum())
    total_gt = int(gt.sum())
    if tau == 0:
        hit = int(np.count_nonzero(pred & gt))
        return hit, total_pred, hit, total_gt
    matched_pred = int(np.count_nonzero(pred & (euclidean_dt(gt) <= tau)))
    matched_gt = int(np.count_nonzero(gt & (euclidean_dt(pred) <= tau)))
    return matched_pred, total_pred, matched_gt, total_gt


def pr_sweep(prob_maps, gt_maps, cfg=None):
    """Accumulate match counts dataset-wide per threshold -> EvalCurve.

    ``prob_maps`` holds per-image probabilities in [0, 1]; a pixel is
    predicted positive when its probability is >= the threshold.
    """
    cfg = cfg or EvalConfig()
    th = cfg.validate()
    prob_maps = list(prob_maps)
    gt_maps = list(gt_maps)
    if not prob_maps:
        raise ValueError("pr_sweep needs at least one image")
    if len(prob_maps) != len(gt_maps):
        raise ValueError("got %d probability maps but %d ground-truth maps"
                         % (len(prob_maps), len(gt_maps)))
    nt = th.size
    mp = np.zeros(nt, dtype=np.int64)
    tp = np.zeros(nt, dtype=np.int64)
    mg = np.zeros(nt, dtype=np.int64)
    tg = np.zeros(nt, dtype=np.int64)
    for prob, gt in zip(prob_maps, gt_maps):
        prob = np.asarray(prob, dtype=np.float64)
        gt = np.asarray(gt, dtype=bool)
        if prob.shape != gt.shape:
            raise ValueError("probability/ground-truth shape mismatch: %s vs %s"
                             % (prob.shape, gt.shape))
        dt_gt = None
        if cfg.tau > 0:
            dt_gt = euclidean_dt(gt)
        for i, t in enumerate(th):
            pred = prob >= t
            if cfg.tau == 0:
                hit = int(np.count_nonzero(pred & gt))
                a, b, c, d = hit, int(pred.sum()), hit, int(gt.sum())
            else:
                a = int(np.count_nonzero(pred & (dt_gt <= cfg.tau)))
                b = int(pred.sum())
                c = int(np.count_nonzero(gt & (euclidean_dt(pred) <= cfg.tau)))
                d = int(gt.sum())
            mp[i] += a
            tp[i] += b
            mg[i] += c
            tg[i] += d
    return EvalCurve(th, mp, tp, mg, tg)


def _pr_points(curve):
    """Recall-sorted (r, p) points; duplicate recalls keep the best precision."""
    r = curve.recall
    p = curve.precision
    order = np.argsort(r, kind="stable")
    r, p = r[order], p[order]
    rs, ps = [], []
    for ri, pi in zip(r, p):
        if rs and ri == rs[-1]:
            ps[-1] = max(ps[-1], pi)
        else:
            rs.append(ri)
            ps.append(pi)
    return np.asarray(rs), np.asarray(ps)


def ods(curve):
    """Best F-score over the threshold sweep (dataset scale)."""
    if curve.thresholds.size == 0:
        raise ValueError("empty curve")
    return float(curve.fscore.max())


def ap(curve):
    """Area under P(R): trapezoid on recall-sorted points, with the lowest
    point's precision extended flat to recall 0; no area past the maximum
    attained recall."""
    r, p = _pr_points(curve)
    if r.size == 0:
        raise ValueError("empty curve")
    r = np.concatenate([[0.0], r])
    p = np.concatenate([[p[0]], p])
    return float(_trapezoid(p, r))


def ap60(curve, lo=0.6):
    """AP restricted to recall in [lo, 1], normalized by (1 - lo).

    P is linearly interpolated at recall = lo; recall never attained
    contributes zero area.
    """
    r, p = _pr_points(curve)
    if r.size == 0:
        raise ValueError("empty curve")
    rmax = r[-1]
    if rmax < lo:
        return 0.0
    r = np.concatenate([[0.0], r])
    p = np.concatenate([[p[0]], p])
    p_lo = float(np.interp(lo, r, p))
    keep = r > lo
    rs = np.concatenate([[lo], r[keep]])
    ps = np.concatenate([[p_lo], p[keep]])
    return float(_trapezoid(ps, rs) / (1.0 - lo))


def summarize(curve):
    return {"ods": ods(curve), "ap": ap(curve), "ap60": ap60(curve)}


def write_curve(path, curve):
    """Plain-text table: one `threshold precision recall fscore` line each."""
    p, r, f = curve.precision, curve.recall, curve.fscore
    with open(path, "w") as fh:
        fh.write("# threshold precision recall fscore\n")
        for i, t in enumerate(curve.thresholds):
            fh.write("%.6f %.9f %.9f %.9f\n" % (t, p[i], r[i], f[i]))


def read_curve(path):
    rows = np.loadtxt(path, comments="#", ndmin=2)
    th, p, r = rows[:, 0], rows[:, 1], rows[:, 2]
    # reconstruct integer-free counts; scale by a nominal total so the
    # precision/recall ratios survive round-tripping
    scale = 10 ** 9
    tp = np.full(th.shape, scale, dtype=np.int64)
    tg = np.full(th.shape, scale, dtype=np.int64)
    return EvalCurve(th, np.round(p * scale).astype(np.int64), tp,
                     np.round(r * scale).astype(np.int64), tg)
