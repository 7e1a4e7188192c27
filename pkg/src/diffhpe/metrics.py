"""Accuracy and coherence metrics, report records and cross-domain matrices.

Metric functions are unit-agnostic; :func:`evaluate_predictions` takes poses
in meters and reports millimeters.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .skeleton import SkeletonGraph, segment_lengths

REPORT_FIELDS = (
    "model", "train_pattern", "test_pattern", "H", "K",
    "mpjpe_mm", "symmetry_gap_mm", "temporal_std_mm", "mpjpe_hypotheses_mm",
)
METRICS = ("mpjpe_mm", "symmetry_gap_mm", "temporal_std_mm")


def mpjpe(pred, gt, root_index: int = 0) -> float:
    """Mean per-joint position error after moving each predicted root onto the true root."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
    err = (pred - pred[..., root_index:root_index + 1, :]) - (gt - gt[..., root_index:root_index + 1, :])
    return float(np.mean(np.linalg.norm(err, axis=-1)))


def _as_clips(preds, graph: SkeletonGraph):
    preds = np.asarray(preds, dtype=np.float64)
    if preds.ndim == 3:
        preds = preds[None]
    if preds.ndim != 4 or preds.shape[-1] != 3:
        raise ValueError(f"expected clips of shape (K, L, J, 3), got {preds.shape}")
    if preds.shape[-2] != graph.num_joints:
        raise ValueError(f"clips have {preds.shape[-2]} joints, skeleton has {graph.num_joints}")
    return preds


def symmetry_gap(preds, graph: SkeletonGraph) -> float:
    """Mean |left segment length - mirrored right segment length| over clips, frames, pairs."""
    if not graph.left_segments:
        raise ValueError("skeleton has no left/right segment pairs")
    y = segment_lengths(_as_clips(preds, graph), graph)
    left = list(graph.left_segments)
    right = [graph.tau[s] for s in left]
    return float(np.mean(np.abs(y[..., left] - y[..., right])))


def temporal_std(preds, graph: SkeletonGraph) -> float:
    """Mean over clips and segments of the population std of segment length over time."""
    y = segment_lengths(_as_clips(preds, graph), graph)
    return float(np.mean(np.std(y, axis=1)))


@dataclass
class EvalReport:
    mpjpe_mm: float
    symmetry_gap_mm: float
    temporal_std_mm: float
    K: int
    H: int = 1
    mpjpe_hypotheses_mm: float | None = None
    model: str = ""
    train_pattern: str = ""
    test_pattern: str = "none"
    per_action: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("a report needs at least one clip")
        for name in METRICS:
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    def row(self) -> dict:
        d = self.to_dict()
        return {k: d[k] for k in REPORT_FIELDS}


def evaluate_predictions(pred, gt, graph: SkeletonGraph, hypotheses=None, root_index=None, **labels) -> EvalReport:
    """Report on (K, L, J, 3) predictions in meters against ground truth.

    ``hypotheses`` (H, K, L, J, 3), when given, adds the mean per-hypothesis
    MPJPE as a diagnostic.
    """
    root = graph.root if root_index is None else root_index
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    hyp_mm = None
    H = 1
    if hypotheses is not None:
        hypotheses = np.asarray(hypotheses, dtype=np.float64)
        H = hypotheses.shape[0]
        hyp_mm = 1000.0 * float(np.mean([mpjpe(h, gt, root) for h in hypotheses]))
    return EvalReport(
        mpjpe_mm=1000.0 * mpjpe(pred, gt, root),
        symmetry_gap_mm=1000.0 * symmetry_gap(pred, graph),
        temporal_std_mm=1000.0 * temporal_std(pred, graph),
        K=int(_as_clips(pred, graph).shape[0]),
        H=H,
        mpjpe_hypotheses_mm=hyp_mm,
        **labels,
    )


def cross_domain_matrix(models: dict, train_patterns, test_patterns, evaluate, metric="mpjpe_mm") -> np.ndarray:
    """Matrix[r, c] = metric of the model trained under ``train_patterns[r]``
    evaluated under ``test_patterns[c]``.

    ``evaluate(model, test_pattern)`` returns an :class:`EvalReport` or a
    plain number.
    """
    out = np.zeros((len(train_patterns), len(test_patterns)))
    for r, tp in enumerate(train_patterns):
        if tp not in models:
            raise KeyError(f"no model trained under pattern {tp!r}")
        for c, sp in enumerate(test_patterns):
            res = evaluate(models[tp], sp)
            out[r, c] = getattr(res, metric) if isinstance(res, EvalReport) else float(res)
    return out


def difference_matrix(baseline: np.ndarray, candidate: np.ndarray) -> np.ndarray:
    """``baseline - candidate``: positive cells favour the candidate (lower-is-better metrics)."""
    baseline = np.asarray(baseline, dtype=np.float64)
    candidate = np.asarray(candidate, dtype=np.float64)
    if baseline.shape != candidate.shape:
        raise ValueError(f"matrix shapes differ: {baseline.shape} vs {candidate.shape}")
    return baseline - candidate


def write_table(reports, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=REPORT_FIELDS)
        w.writeheader()
        for r in reports:
            w.writerow(r.row() if isinstance(r, EvalReport) else {k: r.get(k) for k in REPORT_FIELDS})
    return path


def read_table(path) -> list:
    rows = []
    with Path(path).open(newline="") as f:
        for row in csv.DictReader(f):
            for k in ("H", "K"):
                row[k] = int(row[k])
            for k in METRICS + ("mpjpe_hypotheses_mm",):
                row[k] = float(row[k]) if row[k] not in ("", None) else None
            rows.append(row)
    return rows


def matrix_from_table(rows, model, train_patterns, test_patterns, metric="mpjpe_mm") -> np.ndarray:
    cells = {(r["train_pattern"], r["test_pattern"]): r[metric] for r in rows if r["model"] == model}
    out = np.zeros((len(train_patterns), len(test_patterns)))
    for i, tp in enumerate(train_patterns):
        for j, sp in enumerate(test_patterns):
            if (tp, sp) not in cells:
                raise KeyError(f"table has no {model!r} cell for train={tp!r}, test={sp!r}")
            out[i, j] = cells[(tp, sp)]
    return out
