"""Depth metrics on the transparent-object mask, plus dataset aggregation."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

THRESHOLDS = (1.05, 1.10, 1.25)
COLUMNS = ("rmse", "rel", "mae", "delta_1_05", "delta_1_10", "delta_1_25")


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class MetricReport:
    rmse: float
    rel: float
    mae: float
    delta_1_05: float
    delta_1_10: float
    delta_1_25: float
    pixels: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class _Sums:
    """Additive sufficient statistics; pixel-weighted aggregation is their sum."""

    sq: float
    rel: float
    ab: float
    hits: tuple
    n: int

    def __add__(self, other: "_Sums") -> "_Sums":
        return _Sums(self.sq + other.sq, self.rel + other.rel, self.ab + other.ab,
                     tuple(a + b for a, b in zip(self.hits, other.hits)), self.n + other.n)

    def report(self) -> MetricReport:
        if self.n == 0:
            raise MetricError("empty mask")
        n = self.n
        return MetricReport(float(np.sqrt(self.sq / n)), self.rel / n, self.ab / n,
                            *(100.0 * h / n for h in self.hits), pixels=n)


def _sums(pred: np.ndarray, gt: np.ndarray) -> _Sums:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    gt = np.asarray(gt, dtype=np.float64).ravel()
    if pred.shape != gt.shape:
        raise MetricError("shape mismatch")
    if gt.size == 0:
        raise MetricError("empty mask")
    if not np.all(gt > 0):
        raise MetricError("non-positive ground truth on mask")
    err = pred - gt
    restored = pred > 0
    with np.errstate(divide="ignore"):
        ratio = np.where(restored, np.maximum(pred / gt, gt / np.where(restored, pred, 1.0)), np.inf)
    hits = tuple(int(np.count_nonzero(ratio < t)) for t in THRESHOLDS)
    return _Sums(float(np.sum(err * err)), float(np.sum(np.abs(err) / gt)), float(np.sum(np.abs(err))),
                 hits, int(gt.size))


def evaluate_arrays(pred: np.ndarray, gt: np.ndarray) -> MetricReport:
    """Metrics over already-masked 1-D pixel arrays."""
    return _sums(pred, gt).report()


def evaluate(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> MetricReport:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != gt.shape or gt.shape != mask.shape:
        raise MetricError("shape mismatch")
    return evaluate_arrays(pred[mask], gt[mask])


@dataclass
class DatasetReport:
    restored: MetricReport
    corrupted: MetricReport
    per_scene: list

    def to_dict(self) -> dict:
        return {"restored": self.restored.to_dict(), "corrupted": self.corrupted.to_dict(),
                "per_scene": self.per_scene}


def evaluate_dataset(restore_fn, scenes) -> DatasetReport:
    """Pixel-weighted metrics over ``scenes`` for ``restore_fn(scene) -> depth``.

    ``scenes`` yields (name, SceneRecord) pairs. The corrupted input is scored
    on the same masks as the baseline row.
    """
    total_r = total_c = None
    rows = []
    for name, rec in scenes:
        mask = rec.mask_obj.astype(bool)
        pred = restore_fn(rec)
        sr = _sums(np.asarray(pred)[mask], rec.depth_gt[mask])
        sc = _sums(rec.depth_raw[mask], rec.depth_gt[mask])
        total_r = sr if total_r is None else total_r + sr
        total_c = sc if total_c is None else total_c + sc
        rows.append({"scene": name, "kind": rec.meta.get("kind"), "restored": sr.report().to_dict(),
                     "corrupted": sc.report().to_dict()})
    if total_r is None:
        raise MetricError("empty split")
    return DatasetReport(total_r.report(), total_c.report(), rows)


def format_table(rows: dict[str, MetricReport]) -> str:
    """Aligned text table: RMSE, REL, MAE, then the three delta columns."""
    head = ["method", "RMSE", "REL", "MAE", "d1.05", "d1.10", "d1.25", "pixels"]
    body = [[name, f"{r.rmse:.4f}", f"{r.rel:.4f}", f"{r.mae:.4f}", f"{r.delta_1_05:.2f}",
             f"{r.delta_1_10:.2f}", f"{r.delta_1_25:.2f}", str(r.pixels)] for name, r in rows.items()]
    widths = [max(len(row[i]) for row in [head] + body) for i in range(len(head))]
    fmt = lambda row: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))
    return "\n".join([fmt(head)] + [fmt(r) for r in body])
