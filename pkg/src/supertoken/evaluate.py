"""Token-to-pixel projection, patch voting, confusion matrices and metrics."""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .hsi_io import IGNORE, ClassMap


def project_to_pixels(token_classes, assignment):
    token_classes = np.asarray(token_classes, dtype=np.int64)
    idx = assignment.indices
    if idx.size and (idx.min() < 0 or idx.max() >= len(token_classes)):
        raise ValueError(
            f"assignment references token {int(idx.max())} but only {len(token_classes)} token classes given"
        )
    return ClassMap(token_classes[idx])


def patch_offsets(height, width, size, stride=1):
    """Top-left corners of ``size x size`` patches tiling the image with the
    given stride; the last row/column of patches is flush with the border."""
    if size > height or size > width:
        raise ValueError(f"patch size {size} exceeds image {height}x{width}")

    def starts(n):
        s = list(range(0, n - size + 1, stride))
        if s[-1] != n - size:
            s.append(n - size)
        return s

    return [(r, c) for r in starts(height) for c in starts(width)]


def patch_vote(patches, height, width):
    """Per-pixel majority class over all covering patches, ties to the lowest id.

    ``patches`` is a list of ``(ClassMap, (row, col))`` placed at that offset.
    """
    num_classes = 1 + max(int(p.class_ids.max()) for p, _ in patches)
    votes = np.zeros((height, width, num_classes), dtype=np.int64)
    rows, cols = np.indices((height, width))
    for pmap, (r0, c0) in patches:
        ids = pmap.class_ids
        ph, pw = ids.shape
        if r0 < 0 or c0 < 0 or r0 + ph > height or c0 + pw > width:
            raise ValueError(f"patch at ({r0}, {c0}) of size {ph}x{pw} falls outside the image")
        np.add.at(votes, (rows[r0 : r0 + ph, c0 : c0 + pw], cols[r0 : r0 + ph, c0 : c0 + pw], ids), 1)
    covered = votes.sum(axis=2) > 0
    if not covered.all():
        r, c = np.argwhere(~covered)[0]
        raise ValueError(f"pixel ({r}, {c}) is not covered by any patch")
    return ClassMap(np.argmax(votes, axis=2))


def confusion(pred, gt, num_classes):
    """Rows are ground truth, columns predictions; IGNORE pixels skipped."""
    p = pred.class_ids.reshape(-1)
    g = gt.class_ids.reshape(-1)
    if pred.class_ids.shape != gt.class_ids.shape:
        raise ValueError(f"prediction shape {pred.class_ids.shape} != ground truth {gt.class_ids.shape}")
    keep = g != IGNORE
    p, g = p[keep], g[keep]
    if g.size and (g.max() >= num_classes or p.max() >= num_classes):
        raise ValueError(f"class id >= num_classes ({num_classes})")
    return np.bincount(g * num_classes + p, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


@dataclass
class MetricsReport:
    oa: float
    aa: float
    kappa: float
    miou: float
    f1: np.ndarray
    cf1: float
    iou: np.ndarray
    support: np.ndarray

    def as_rows(self):
        rows = [("oa", self.oa), ("aa", self.aa), ("kappa", self.kappa), ("miou", self.miou), ("cf1", self.cf1)]
        rows += [(f"f1_{c}", float(v)) for c, v in enumerate(self.f1)]
        rows += [(f"iou_{c}", float(v)) for c, v in enumerate(self.iou)]
        return rows


def metrics(cm):
    """OA, AA, kappa, mIoU, per-class F1 and CF1 from a confusion matrix.

    AA, mIoU and CF1 average over classes with ground-truth support.  When
    chance agreement is 1 (a single class in play) kappa is 1 if OA is 1,
    else 0.
    """
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if total <= 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(cm)
    gt_count = cm.sum(axis=1)
    pred_count = cm.sum(axis=0)
    supported = gt_count > 0
    oa = tp.sum() / total
    recall = np.divide(tp, gt_count, out=np.zeros_like(tp), where=gt_count > 0)
    precision = np.divide(tp, pred_count, out=np.zeros_like(tp), where=pred_count > 0)
    pr = precision + recall
    f1 = np.divide(2 * precision * recall, pr, out=np.zeros_like(tp), where=pr > 0)
    union = gt_count + pred_count - tp
    iou = np.divide(tp, union, out=np.zeros_like(tp), where=union > 0)
    pe = float((gt_count * pred_count).sum() / (total * total))
    if pe >= 1.0:
        kappa = 1.0 if oa == 1.0 else 0.0
    else:
        kappa = (oa - pe) / (1.0 - pe)
    return MetricsReport(
        oa=float(oa),
        aa=float(recall[supported].mean()),
        kappa=float(kappa),
        miou=float(iou[supported].mean()),
        f1=f1,
        cf1=float(f1[supported].mean()),
        iou=iou,
        support=gt_count.astype(np.int64),
    )


def write_metrics_csv(report, path):
    Path(path).write_text("metric,value\n" + "".join(f"{k},{v!r}\n" for k, v in report.as_rows()))


def write_confusion_csv(cm, path):
    n = cm.shape[0]
    lines = ["gt\\pred," + ",".join(str(c) for c in range(n))]
    lines += [f"{g}," + ",".join(str(int(v)) for v in cm[g]) for g in range(n)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_confusion_csv(path):
    lines = Path(path).read_text().splitlines()[1:]
    return np.array([[int(v) for v in line.split(",")[1:]] for line in lines if line.strip()])
