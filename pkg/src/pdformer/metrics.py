"""Masked MAE / MAPE / RMSE with optional low-flow filtering."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class MetricRow:
    mae: float | None
    mape_percent: float | None
    rmse: float | None
    count: int
    mape_count: int


@dataclass
class EvalReport:
    overall: MetricRow
    per_channel: list[MetricRow]
    # per_horizon[h][c]
    per_horizon: list[list[MetricRow]]
    total_points: int
    filter_threshold: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def mae(self) -> float:
        return self.overall.mae

    @property
    def rmse(self) -> float:
        return self.overall.rmse

    @property
    def mape(self) -> float | None:
        return self.overall.mape_percent

    def to_dict(self) -> dict:
        def row(r: MetricRow) -> dict:
            return dict(r.__dict__)

        return {
            "overall": row(self.overall),
            "per_channel": [row(r) for r in self.per_channel],
            "per_horizon": [[row(r) for r in hs] for hs in self.per_horizon],
            "total_points": self.total_points,
            "filter_threshold": self.filter_threshold,
            **self.extra,
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["horizon", "channel", "mae", "mape_percent", "rmse", "count"])
            for h, rows in enumerate(self.per_horizon, 1):
                for c, r in enumerate(rows):
                    w.writerow([h, c, r.mae, r.mape_percent, r.rmse, r.count])


def _score(err: np.ndarray, truth: np.ndarray, keep: np.ndarray) -> MetricRow:
    n = int(keep.sum())
    if n == 0:
        return MetricRow(None, None, None, 0, 0)
    e = err[keep]
    t = truth[keep]
    nz = t != 0
    mape = float(np.mean(np.abs(e[nz]) / np.abs(t[nz])) * 100.0) if nz.any() else None
    return MetricRow(
        float(np.mean(np.abs(e))),
        mape,
        float(np.sqrt(np.mean(e**2))),
        n,
        int(nz.sum()),
    )


def evaluate(pred, truth, missing_mask=None, filter_threshold: float | None = None) -> EvalReport:
    """Score predictions against ground truth.

    Arrays are (..., T', N, C); a bare (N, C) or (T', N, C) is promoted.
    Missing truth points are dropped, and with ``filter_threshold`` so are
    points whose truth lies below it. Zero-valued truth is left out of MAPE
    only.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    while pred.ndim < 4:
        pred, truth = pred[None], truth[None]
        if missing_mask is not None:
            missing_mask = np.asarray(missing_mask)[None]
    keep = np.isfinite(truth)
    if missing_mask is not None:
        keep &= ~np.asarray(missing_mask, dtype=bool).reshape(truth.shape)
    if filter_threshold is not None:
        keep &= truth >= filter_threshold
    if not keep.any():
        raise ValueError("no points left to evaluate after masking/filtering")
    err = np.where(keep, pred - truth, 0.0)
    truth0 = np.where(keep, truth, 0.0)
    _, Tp, _, C = truth.shape
    overall = _score(err, truth0, keep)
    per_channel = [_score(err[..., c], truth0[..., c], keep[..., c]) for c in range(C)]
    per_h = [
        [_score(err[:, h, :, c], truth0[:, h, :, c], keep[:, h, :, c]) for c in range(C)] for h in range(Tp)
    ]
    return EvalReport(overall, per_channel, per_h, int(truth.size), filter_threshold)
