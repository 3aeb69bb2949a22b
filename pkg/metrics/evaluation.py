"""
Depth completion error metrics.

Pixels count when the ground truth is positive and at most ``max_depth``
meters; predictions are never clipped. Inverse-depth errors are reported in
1/km, threshold accuracies in percent.
"""

import logging
from dataclasses import asdict, dataclass, fields

import numpy as np

from geometry.camera import DepthMap
from main.exceptions import ContractError, DimensionError

logger = logging.getLogger(__name__)

DELTA_BASE = 1.25


@dataclass(frozen=True)
class MetricsReport:
    rmse: float
    mae: float
    abs_rel: float
    irmse: float
    imae: float
    delta1: float
    delta2: float
    delta3: float
    valid_count: int

    @classmethod
    def field_names(cls) -> tuple:
        return tuple(f.name for f in fields(cls))

    def to_dict(self) -> dict:
        return asdict(self)


def _values(depth) -> np.ndarray:
    if isinstance(depth, DepthMap):
        return depth.values
    return np.asarray(getattr(depth, "data", depth), dtype=np.float64)


def valid_pairs(pred, gt, max_depth) -> tuple[np.ndarray, np.ndarray]:
    """The (prediction, ground truth) values the metrics are computed over."""
    pred, gt = _values(pred), _values(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    if not max_depth > 0:
        raise ContractError(f"max_depth must be positive, got {max_depth}")
    mask = (gt > 0) & (gt <= max_depth)
    if not mask.any():
        raise ContractError(f"no ground-truth pixels in (0, {max_depth}]")
    d, d_star = pred[mask], gt[mask]
    if np.any(d <= 0):
        raise ContractError(f"{int((d <= 0).sum())} valid pixels have non-positive predictions")
    return d, d_star


def _report(d, d_star) -> MetricsReport:
    diff = d - d_star
    inverse_diff = 1000.0 / d - 1000.0 / d_star
    ratio = np.maximum(d / d_star, d_star / d)
    return MetricsReport(
        rmse=float(np.sqrt(np.mean(diff * diff))),
        mae=float(np.mean(np.abs(diff))),
        abs_rel=float(np.mean(np.abs(diff) / d_star)),
        irmse=float(np.sqrt(np.mean(inverse_diff * inverse_diff))),
        imae=float(np.mean(np.abs(inverse_diff))),
        delta1=float(100.0 * np.mean(ratio < DELTA_BASE)),
        delta2=float(100.0 * np.mean(ratio < DELTA_BASE**2)),
        delta3=float(100.0 * np.mean(ratio < DELTA_BASE**3)),
        valid_count=int(d.size),
    )


def evaluate(pred, gt, max_depth) -> MetricsReport:
    return _report(*valid_pairs(pred, gt, max_depth))


def evaluate_many(pairs, max_depth) -> MetricsReport:
    """Aggregate report pooled over every valid pixel of every (pred, gt) pair."""
    collected = [valid_pairs(pred, gt, max_depth) for pred, gt in pairs]
    if not collected:
        raise ContractError("nothing to evaluate")
    report = _report(np.concatenate([d for d, _ in collected]), np.concatenate([g for _, g in collected]))
    logger.debug(f"[EVAL] pooled pairs={len(collected)} valid={report.valid_count} rmse={report.rmse:.6g}")
    return report
