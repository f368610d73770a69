"""Segmentation metrics: streaming confusion matrix, mIoU, run aggregation.

The confusion matrix is accumulated dataset-wide with a single bincount per
(prediction, ground truth) pair; rows index ground truth, columns index
prediction, both in catalog order. Ignore pixels are dropped before
counting and therefore contribute to nothing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from fss.datamodel import ClassCatalog, LabelMask


def _as_array(mask: np.ndarray | LabelMask) -> np.ndarray:
    return mask.data if isinstance(mask, LabelMask) else mask


@dataclass
class ConfusionMatrix:
    """Streaming n_classes x n_classes confusion matrix for one catalog."""

    catalog: ClassCatalog
    counts: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        n = self.catalog.n_classes
        if self.counts is None:
            self.counts = np.zeros((n, n), dtype=np.int64)
        else:
            self.counts = np.asarray(self.counts, dtype=np.int64)
            if self.counts.shape != (n, n):
                raise ValueError(
                    f"counts shape {self.counts.shape} does not match catalog ({n} classes)"
                )
        # id -> row/col index lookup, catalog order
        ids = self.catalog.class_ids
        self._lut = np.full(max(ids) + 1, -1, dtype=np.int64)
        for idx, cid in enumerate(ids):
            self._lut[cid] = idx

    def update(self, pred: np.ndarray, gt: np.ndarray | LabelMask) -> None:
        """Accumulate one prediction/ground-truth pair of equal shape."""
        gt_arr = _as_array(gt)
        pred = np.asarray(pred)
        if pred.shape != gt_arr.shape:
            raise ValueError(f"pred shape {pred.shape} != gt shape {gt_arr.shape}")

        keep = gt_arr != self.catalog.ignore_id
        p = pred[keep].ravel()
        g = gt_arr[keep].ravel()
        if p.size == 0:
            return

        self._check_ids(p, "prediction")
        self._check_ids(g, "ground truth")

        n = self.catalog.n_classes
        flat = self._lut[g] * n + self._lut[p]
        self.counts += np.bincount(flat, minlength=n * n).reshape(n, n)

    def _check_ids(self, values: np.ndarray, what: str) -> None:
        invalid = (values < 0) | (values >= self._lut.size)
        invalid |= self._lut[np.clip(values, 0, self._lut.size - 1)] < 0
        if invalid.any():
            bad = sorted(int(v) for v in np.unique(values[invalid]))
            raise ValueError(f"{what} contains non-catalog ids: {bad}")

    def merge(self, other: ConfusionMatrix) -> ConfusionMatrix:
        """Elementwise sum with a matrix over the same catalog."""
        if other.catalog != self.catalog:
            raise ValueError("cannot merge confusion matrices over different catalogs")
        return ConfusionMatrix(self.catalog, self.counts + other.counts)

    def per_class_iou(self) -> dict[int, float | None]:
        """IoU per class id; None where TP+FP+FN = 0 (undefined)."""
        tp = np.diag(self.counts).astype(np.float64)
        fp = self.counts.sum(axis=0).astype(np.float64) - tp
        fn = self.counts.sum(axis=1).astype(np.float64) - tp
        denom = tp + fp + fn
        out: dict[int, float | None] = {}
        for idx, cid in enumerate(self.catalog.class_ids):
            out[cid] = None if denom[idx] == 0 else float(tp[idx] / denom[idx])
        return out

    def miou(self) -> tuple[float, tuple[int, ...]]:
        """Mean IoU over defined classes, plus the ids excluded as undefined."""
        ious = self.per_class_iou()
        defined = [v for v in ious.values() if v is not None]
        excluded = tuple(cid for cid, v in ious.items() if v is None)
        if not defined:
            raise ValueError("mIoU undefined: every class has an empty denominator")
        return float(np.mean(defined)), excluded


@dataclass(frozen=True)
class RunSummary:
    """Mean / spread of a scalar metric across repeated runs."""

    mean: float
    std: float | None
    n: int


def aggregate_runs(values: Iterable[float]) -> RunSummary:
    """Mean and sample standard deviation (ddof=1) across runs.

    A single run yields std None rather than 0.0 so unaggregated cells
    stay visible in reports.
    """
    vals = [float(v) for v in values]
    if not vals:
        raise ValueError("no values to aggregate")
    mean = float(np.mean(vals))
    std = float(np.std(vals, ddof=1)) if len(vals) >= 2 else None
    return RunSummary(mean=mean, std=std, n=len(vals))


def object_size_report(
    pairs: Iterable[tuple[np.ndarray, np.ndarray | LabelMask]],
    class_id: int,
    ignore_id: int = 255,
) -> list[tuple[int, float]]:
    """Per-image (ground-truth area, single-class IoU) pairs for one class.

    Images where the class is absent from both prediction and ground truth
    carry no signal and are skipped. Images with spurious predictions only
    (area 0) report IoU 0.0.
    """
    out: list[tuple[int, float]] = []
    for pred, gt in pairs:
        gt_arr = _as_array(gt)
        pred = np.asarray(pred)
        if pred.shape != gt_arr.shape:
            raise ValueError(f"pred shape {pred.shape} != gt shape {gt_arr.shape}")
        keep = gt_arr != ignore_id
        p = pred[keep] == class_id
        g = gt_arr[keep] == class_id
        area = int(g.sum())
        tp = int((p & g).sum())
        fp = int((p & ~g).sum())
        fn = int((~p & g).sum())
        if area == 0 and fp == 0:
            continue
        iou = 0.0 if area == 0 else tp / (tp + fp + fn)
        out.append((area, float(iou)))
    return out
