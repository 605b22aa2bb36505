"""Occupancy evaluation: confusion counts, SC IoU, per-class IoU and mIoU."""
from __future__ import annotations

import csv
import io as _io

import numpy as np

from .tensor import DataError

CSV_COLUMNS = ("scene", "kind", "class_id", "class_name", "tp", "fp", "fn", "iou", "flags")


class ConfusionMatrix:
    """(S+1)x(S+1) counts, rows = ground truth, columns = prediction. Class 0 is free."""

    def __init__(self, n_classes, counts=None):
        self.n = int(n_classes)
        if counts is None:
            counts = np.zeros((self.n, self.n), dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)
        if self.counts.shape != (self.n, self.n):
            raise ValueError(f"counts must be {self.n}x{self.n}")

    @property
    def total(self):
        return int(self.counts.sum())

    def accumulate(self, pred, gt, mask=None):
        pred = np.asarray(pred).reshape(-1)
        gt = np.asarray(gt).reshape(-1)
        if pred.shape != gt.shape:
            raise DataError(f"{pred.size} predictions for {gt.size} labels")
        if mask is not None:
            mask = np.asarray(mask, dtype=bool).reshape(-1)
            if mask.shape != gt.shape:
                raise DataError("mask size does not match labels")
            pred, gt = pred[mask], gt[mask]
        for name, arr in (("prediction", pred), ("ground truth", gt)):
            if arr.size and (arr.min() < 0 or arr.max() >= self.n):
                raise DataError(f"{name} label outside [0, {self.n - 1}]")
        self.counts += np.bincount(gt.astype(np.int64) * self.n + pred.astype(np.int64),
                                   minlength=self.n * self.n).reshape(self.n, self.n)
        return self

    def merge(self, other):
        if other.n != self.n:
            raise ValueError("cannot merge matrices of different sizes")
        return ConfusionMatrix(self.n, self.counts + other.counts)

    __add__ = merge

    def binary(self):
        """Collapse to free vs occupied."""
        c = self.counts
        return np.array([[c[0, 0], c[0, 1:].sum()], [c[1:, 0].sum(), c[1:, 1:].sum()]], dtype=np.int64)


def scene_completion_iou(cm):
    """IoU of the occupied class after binarizing. Returns (iou, degenerate)."""
    b = cm.binary()
    tp, fp, fn = b[1, 1], b[0, 1], b[1, 0]
    if tp + fp + fn == 0:
        return 1.0, True
    return tp / (tp + fp + fn), False


def class_iou_and_miou(cm, classes=None):
    """Per-class IoU for ``classes`` (default 1..S) and their mean.

    Classes absent from both ground truth and prediction get IoU None and
    are left out of the mean; they are returned in ``absent``.
    """
    classes = list(range(1, cm.n)) if classes is None else list(classes)
    if not classes:
        raise ValueError("class subset is empty")
    c = cm.counts
    per, absent = {}, []
    for k in classes:
        tp = c[k, k]
        denom = c[k, :].sum() + c[:, k].sum() - tp
        if denom == 0:
            per[k] = None
            absent.append(k)
        else:
            per[k] = tp / denom
    vals = [v for v in per.values() if v is not None]
    miou = float(np.mean(vals)) if vals else float("nan")
    return per, miou, absent


def chance_miou(gt_counts):
    """Expected mIoU of a predictor that draws labels from the gt class frequencies.

    For frequency f_c the expected IoU is f_c^2 / (2 f_c - f_c^2) = f_c / (2 - f_c).
    """
    f = np.asarray(gt_counts, dtype=np.float64)
    f = f / f.sum()
    occ = f[1:][f[1:] > 0]
    return float(np.mean(occ / (2.0 - occ))) if occ.size else float("nan")


def uniform_chance_miou(gt_counts):
    """Expected mIoU of a predictor drawing uniformly over all S+1 classes."""
    f = np.asarray(gt_counts, dtype=np.float64)
    f = f / f.sum()
    n = len(f)
    occ = f[1:][f[1:] > 0]
    # IoU_c = (f/n) / (f + 1/n - f/n)
    return float(np.mean(occ / (n * occ + 1.0 - occ))) if occ.size else float("nan")


def _class_rows(scene, cm, names):
    per, miou, absent = class_iou_and_miou(cm)
    c = cm.counts
    rows = []
    for k, iou in per.items():
        rows.append({"scene": scene, "kind": "class", "class_id": k,
                     "class_name": names[k] if k < len(names) else str(k),
                     "tp": int(c[k, k]), "fp": int(c[:, k].sum() - c[k, k]), "fn": int(c[k, :].sum() - c[k, k]),
                     "iou": "" if iou is None else f"{iou:.6f}", "flags": "absent" if iou is None else ""})
    b = cm.binary()
    sc, degenerate = scene_completion_iou(cm)
    rows.append({"scene": scene, "kind": "summary", "class_id": "", "class_name": "sc_iou",
                 "tp": int(b[1, 1]), "fp": int(b[0, 1]), "fn": int(b[1, 0]), "iou": f"{sc:.6f}",
                 "flags": "degenerate" if degenerate else ""})
    flag = "absent_excluded:" + ";".join(str(a) for a in absent) if absent else "absent_excluded:none"
    rows.append({"scene": scene, "kind": "summary", "class_id": "", "class_name": "miou",
                 "tp": "", "fp": "", "fn": "", "iou": "" if np.isnan(miou) else f"{miou:.6f}", "flags": flag})
    return rows


def report_rows(per_scene, names):
    """Rows for every (scene, class) plus per-scene and pooled summaries.

    ``per_scene`` maps scene id -> ConfusionMatrix. The pooled rows use scene "all".
    """
    rows = []
    pooled = None
    for scene, cm in per_scene.items():
        rows.extend(_class_rows(scene, cm, names))
        pooled = cm if pooled is None else pooled.merge(cm)
    if pooled is not None:
        rows.extend(_class_rows("all", pooled, names))
    return rows


def write_csv(rows, path=None):
    buf = _io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def summary(rows, scene="all"):
    out = {}
    for r in rows:
        if r["scene"] == scene and r["kind"] == "summary" and r["iou"] != "":
            out[r["class_name"]] = float(r["iou"])
    return out
