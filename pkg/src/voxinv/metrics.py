"""Chamfer distance, Hausdorff distance, and threshold F1 between point sets.

Distances are Euclidean over (x, y, z) in meters. Nearest-neighbor queries go
through a k-d tree (``scipy.spatial.cKDTree``); ``brute_nearest`` is the
O(|P||Q|) reference path.
"""
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree


def _xyz(points):
    p = np.asarray(points, dtype=np.float64)
    if p.size == 0:
        return np.zeros((0, 3))
    return p.reshape(len(p), -1)[:, :3]


def brute_nearest(P, Q, block=2048):
    """Distance from every point of P to its nearest point of Q, by exhaustive search."""
    P, Q = _xyz(P), _xyz(Q)
    out = np.empty(len(P))
    for s in range(0, len(P), block):
        d2 = ((P[s:s + block, None, :] - Q[None, :, :]) ** 2).sum(axis=2)
        out[s:s + block] = np.sqrt(d2.min(axis=1))
    return out


def nearest(P, Q):
    """Distance from every point of P to its nearest point of Q."""
    P, Q = _xyz(P), _xyz(Q)
    if len(Q) == 0:
        raise ValueError("nearest-neighbor query against an empty point set")
    d, _ = cKDTree(Q).query(P, k=1)
    return np.asarray(d, dtype=np.float64)


def _pair(P, Q, nn):
    if len(_xyz(P)) == 0 or len(_xyz(Q)) == 0:
        raise ValueError("distance between point sets is undefined when either set is empty")
    return nn(P, Q), nn(Q, P)


def chamfer_distance(P, Q, nn=nearest):
    pq, qp = _pair(P, Q, nn)
    return 0.5 * (pq.mean() + qp.mean())


def hausdorff_distance(P, Q, nn=nearest):
    pq, qp = _pair(P, Q, nn)
    return float(max(pq.max(), qp.max()))


@dataclass
class MetricReport:
    cd: float
    hd: float
    f1: float
    precision: float
    recall: float
    threshold: float
    n_gt: int
    n_restored: int
    degenerate: bool = False

    def as_dict(self, centimeters=False):
        d = asdict(self)
        if centimeters:
            d["cd_cm"] = None if np.isnan(self.cd) else self.cd * 100
            d["hd_cm"] = None if np.isnan(self.hd) else self.hd * 100
            d["threshold_cm"] = self.threshold * 100
            for k in ("cd", "hd", "threshold"):
                d.pop(k)
        return d


def _f1(precision, recall):
    if precision <= 0 or recall <= 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def f1_score(gt, restored, threshold, nn=nearest):
    """(f1, precision, recall, degenerate) with radius-existence matching."""
    if threshold <= 0:
        raise ValueError("F1 threshold must be positive")
    gt, restored = _xyz(gt), _xyz(restored)
    if len(gt) == 0 or len(restored) == 0:
        return 0.0, 0.0, 0.0, True
    precision = float(np.mean(nn(restored, gt) <= threshold))
    recall = float(np.mean(nn(gt, restored) <= threshold))
    return _f1(precision, recall), precision, recall, False


def evaluate(gt, restored, threshold, nn=nearest):
    """All metrics at once, sharing the two nearest-neighbor passes."""
    gt, restored = _xyz(gt), _xyz(restored)
    if len(gt) == 0 or len(restored) == 0:
        return MetricReport(float("nan"), float("nan"), 0.0, 0.0, 0.0, threshold, len(gt),
                            len(restored), degenerate=True)
    rg = nn(restored, gt)
    gr = nn(gt, restored)
    precision = float(np.mean(rg <= threshold))
    recall = float(np.mean(gr <= threshold))
    return MetricReport(
        cd=0.5 * (rg.mean() + gr.mean()),
        hd=float(max(rg.max(), gr.max())),
        f1=_f1(precision, recall),
        precision=precision,
        recall=recall,
        threshold=threshold,
        n_gt=len(gt),
        n_restored=len(restored),
    )
