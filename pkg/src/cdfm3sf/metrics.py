"""Binary cloud-mask scoring: confusion counts, scalar scores, ROC and UA-PA curves.

Naming follows the convention used for the reported scores: producer's
accuracy (PA) is Precision and user's accuracy (UA) is Recall. Many
remote-sensing texts use the opposite pairing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NODATA = 255
SCORE_NAMES = ("OA", "Precision", "Recall", "F1", "IoU")
DEFAULT_THRESHOLDS = np.linspace(0.0, 1.0, 101)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class CurvePoint:
    threshold: float
    x: float
    y: float


def confusion(pred, ref) -> ConfusionCounts:
    """Tally a binary prediction against a 0/1/255 reference; no-data is skipped."""
    pred, ref = np.asarray(pred), np.asarray(ref)
    if pred.shape != ref.shape:
        raise ValueError(f"confusion: prediction {pred.shape} vs reference {ref.shape}")
    valid = ref != NODATA
    p = (pred == 1) & valid
    r = (ref == 1) & valid
    tp = int((p & r).sum())
    fp = int((p & ~r).sum())
    fn = int((~p & r & valid).sum())
    tn = int(valid.sum()) - tp - fp - fn
    return ConfusionCounts(tp, tn, fp, fn)


def scores(c: ConfusionCounts) -> tuple[dict, list[str]]:
    """OA, Precision, Recall, F1 and IoU, plus a list of zero-denominator flags.

    Empty denominators: Precision is 1 when FN == 0 else 0; Recall is 1
    when FP == 0 else 0; F1 is 0 when P + R == 0; IoU is 1 on an empty union.
    """
    if c.total <= 0:
        raise ValueError("scores: no valid pixels")
    flags = []
    oa = (c.tp + c.tn) / c.total
    if c.tp + c.fp:
        precision = c.tp / (c.tp + c.fp)
    else:
        precision = 1.0 if c.fn == 0 else 0.0
        flags.append("precision:no-predicted-cloud")
    if c.tp + c.fn:
        recall = c.tp / (c.tp + c.fn)
    else:
        recall = 1.0 if c.fp == 0 else 0.0
        flags.append("recall:no-reference-cloud")
    if precision + recall:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1 = 0.0
        flags.append("f1:zero-precision-and-recall")
    union = c.tp + c.fp + c.fn
    if union:
        iou = c.tp / union
    else:
        iou = 1.0
        flags.append("iou:empty-union")
    return {"OA": oa, "Precision": precision, "Recall": recall, "F1": f1, "IoU": iou}, flags


def _rates(c: ConfusionCounts) -> tuple[float, float]:
    tpr = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    fpr = c.fp / (c.fp + c.tn) if c.fp + c.tn else 0.0
    return fpr, tpr


def curves(prob, ref, thresholds=None) -> tuple[list[CurvePoint], list[CurvePoint]]:
    """Sweep thresholds (prob >= t is cloud); return ROC (FPR, TPR) and UA-PA (PA, UA) points."""
    prob, ref = np.asarray(prob, dtype=np.float64), np.asarray(ref)
    if prob.shape != ref.shape:
        raise ValueError(f"curves: probability {prob.shape} vs reference {ref.shape}")
    ts = DEFAULT_THRESHOLDS if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    if np.any(np.diff(ts) < 0):
        raise ValueError("curves: thresholds must be sorted ascending")
    valid = ref != NODATA
    p = prob[valid]
    r = ref[valid] == 1
    # counts of cloud / clear reference pixels with prob >= t, via sorting
    pos = np.sort(p[r])
    neg = np.sort(p[~r])
    n_pos, n_neg = pos.size, neg.size
    roc, uapa = [], []
    for t in ts:
        tp = n_pos - int(np.searchsorted(pos, t, side="left"))
        fp = n_neg - int(np.searchsorted(neg, t, side="left"))
        c = ConfusionCounts(tp, n_neg - fp, fp, n_pos - tp)
        fpr, tpr = _rates(c)
        s, _ = scores(c) if c.total else ({"Precision": 0.0, "Recall": 0.0}, [])
        roc.append(CurvePoint(float(t), fpr, tpr))
        uapa.append(CurvePoint(float(t), s["Precision"], s["Recall"]))
    return roc, uapa


def auc(points, roc: bool = True) -> float:
    """Trapezoidal area; ROC curves get (0,0) and (1,1) appended if absent."""
    xy = [(p.x, p.y) if isinstance(p, CurvePoint) else tuple(p) for p in points]
    if len(xy) < 2:
        raise ValueError("auc: need at least two points")
    if roc:
        if (0.0, 0.0) not in xy:
            xy.append((0.0, 0.0))
        if (1.0, 1.0) not in xy:
            xy.append((1.0, 1.0))
    xy.sort()
    x = np.array([a for a, _ in xy])
    y = np.array([b for _, b in xy])
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))


def format_report(rows: dict[str, dict]) -> tuple[str, str]:
    """(tab-separated, human-readable) tables in OA/Precision/Recall/F1/IoU order."""
    tsv = ["name\t" + "\t".join(SCORE_NAMES)]
    text = [f"{'name':<16}" + "".join(f"{n:>11}" for n in SCORE_NAMES)]
    for name, s in rows.items():
        tsv.append(name + "\t" + "\t".join(repr(float(s[n])) for n in SCORE_NAMES))
        cells = [f"{100 * s['OA']:10.2f}%", f"{100 * s['Precision']:10.2f}%",
                 f"{100 * s['Recall']:10.2f}%", f"{s['F1']:11.4f}", f"{s['IoU']:11.4f}"]
        text.append(f"{name:<16}" + "".join(cells))
    return "\n".join(tsv) + "\n", "\n".join(text) + "\n"


def write_curve(points, path) -> None:
    with open(path, "w") as f:
        for p in points:
            f.write(f"{p.threshold!r}\t{p.x!r}\t{p.y!r}\n")
