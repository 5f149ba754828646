"""Class-proportion soft labels per supertoken, and their hard-label ablation."""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cluster import AssociationMatrix, assigned_weights
from .hsi_io import IGNORE

MODES = ("hard-count", "assoc-weighted")


@dataclass
class SoftLabelMatrix:
    rows: np.ndarray  # (M_total, C') class proportions
    valid: np.ndarray  # (M_total,) bool; False when a token holds only IGNORE pixels

    @property
    def num_tokens(self):
        return self.rows.shape[0]

    @property
    def num_classes(self):
        return self.rows.shape[1]


def soft_labels(assignment, assoc, gt, num_classes, mode="hard-count"):
    """Per-token class distribution over the labeled pixels assigned to it.

    ``hard-count`` counts pixels; ``assoc-weighted`` sums each pixel's
    association weight to its own center.  ``assoc`` is an
    ``AssociationMatrix`` or a precomputed length-N array of those weights,
    and may be None in hard-count mode.  IGNORE pixels contribute to neither
    numerator nor denominator.
    """
    if mode not in MODES:
        raise ValueError(f"unknown soft-label mode {mode!r}")
    flat = assignment.flat()
    labels = gt.class_ids.reshape(-1)
    if labels.shape != flat.shape:
        raise ValueError("label map and assignment map differ in size")
    keep = labels != IGNORE
    if keep.any() and labels[keep].max() >= num_classes:
        raise ValueError(f"num_classes {num_classes} smaller than observed class id {int(labels[keep].max())}")
    if mode == "assoc-weighted":
        if assoc is None:
            raise ValueError("assoc-weighted mode needs association weights")
        if isinstance(assoc, AssociationMatrix):
            assoc = assigned_weights(assoc, assignment)
        w = np.asarray(assoc, dtype=np.float64).reshape(-1)[keep]
    else:
        w = np.ones(int(keep.sum()))
    n_tokens = assignment.num_centers
    hist = np.bincount(
        flat[keep] * num_classes + labels[keep], weights=w, minlength=n_tokens * num_classes
    ).reshape(n_tokens, num_classes)
    total = hist.sum(axis=1)
    valid = total > 0
    rows = np.zeros_like(hist)
    rows[valid] = hist[valid] / total[valid, None]
    return SoftLabelMatrix(rows, valid)


def hard_labels(labels):
    """Argmax class per valid token (ties to the lowest id); IGNORE otherwise."""
    out = np.argmax(labels.rows, axis=1).astype(np.int64)
    out[~labels.valid] = IGNORE
    return out


def one_hot(token_classes, num_classes):
    """Inverse direction of ``hard_labels``: a SoftLabelMatrix of one-hot rows."""
    token_classes = np.asarray(token_classes)
    valid = token_classes != IGNORE
    rows = np.zeros((len(token_classes), num_classes))
    rows[np.flatnonzero(valid), token_classes[valid]] = 1.0
    return SoftLabelMatrix(rows, valid)


def write_soft_labels_csv(labels, path):
    header = "valid," + ",".join(f"class_{c}" for c in range(labels.num_classes))
    lines = [header]
    for ok, row in zip(labels.valid, labels.rows):
        lines.append(f"{int(ok)}," + ",".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_soft_labels_csv(path):
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("valid"):
        raise ValueError(f"{path}: missing 'valid,...' header")
    data = [line.split(",") for line in text[1:] if line.strip()]
    valid = np.array([int(r[0]) for r in data], dtype=bool)
    rows = np.array([[float(v) for v in r[1:]] for r in data])
    return SoftLabelMatrix(rows.reshape(len(data), len(text[0].split(",")) - 1), valid)
