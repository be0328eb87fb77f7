"""Training loop: masked loss on denormalized outputs, AdamW, clipping,
early stopping on validation MAE."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import Sample, Scaler, make_batch
from .metrics import EvalReport, evaluate
from .model import PDFormer

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 200
    patience: int = 20
    seed: int = 0
    grad_clip_norm: float = 5.0
    loss_kind: str = "mae"  # or "huber"
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    shuffle: bool = True
    max_steps: int | None = None
    eval_batch_size: int = 64
    filter_threshold: float | None = None

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss_kind not in ("mae", "huber"):
            raise ValueError(f"unknown loss_kind {self.loss_kind!r}")


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_state: dict | None = None
    best_epoch: int = -1
    best_val_mae: float = float("inf")
    steps: int = 0
    diverged: bool = False


def masked_loss(pred: ad.Tensor, target: np.ndarray, missing: np.ndarray, kind: str = "mae") -> ad.Tensor:
    """Mean absolute (or Huber) error over non-missing target points."""
    keep = (~missing).astype(pred.dtype)
    count = keep.sum()
    if count == 0:
        raise ValueError("batch has no observed targets")
    resid = pred - np.where(missing, 0.0, target).astype(pred.dtype)
    per_point = ad.abs(resid) if kind == "mae" else ad.huber(resid, 1.0)
    return ad.scale(ad.sum(per_point * keep), 1.0 / float(count))


def batch_loss(model: PDFormer, samples: list[Sample], scaler: Scaler, kind: str = "mae", rng=None) -> ad.Tensor:
    b = make_batch(samples, scaler)
    out = model.forward(b.x, b.meta, rng=rng)
    return masked_loss(scaler.inverse(out), b.y, b.y_missing, kind)


def predict(model: PDFormer, samples: list[Sample], scaler: Scaler, batch_size: int = 64) -> np.ndarray:
    """Denormalized forecasts (M, T', N, C) for ``samples``, in a fixed batch order."""
    outs = []
    for s in range(0, len(samples), batch_size):
        b = make_batch(samples[s : s + batch_size], scaler)
        outs.append(scaler.inverse(model.forward(b.x, b.meta).data).astype(np.float64))
    return np.concatenate(outs, axis=0)


def evaluate_samples(
    model: PDFormer,
    samples: list[Sample],
    scaler: Scaler,
    batch_size: int = 64,
    filter_threshold: float | None = None,
) -> EvalReport:
    pred = predict(model, samples, scaler, batch_size)
    truth = np.stack([s.target for s in samples])
    miss = np.stack([s.target_missing for s in samples])
    return evaluate(pred, truth, miss, filter_threshold)


def mean_baseline_mae(train: list[Sample], test: list[Sample]) -> float:
    """MAE of predicting each channel's training mean everywhere."""
    stacked = np.stack([np.where(s.target_missing, np.nan, s.target) for s in train])
    mu = np.nanmean(stacked.reshape(-1, stacked.shape[-1]), axis=0)
    truth = np.stack([s.target for s in test])
    miss = np.stack([s.target_missing for s in test])
    return evaluate(np.broadcast_to(mu, truth.shape), truth, miss).mae


def train(
    model: PDFormer,
    train_samples: list[Sample],
    val_samples: list[Sample],
    cfg: TrainConfig,
    scaler: Scaler | None = None,
    out_dir=None,
) -> TrainResult:
    """Fit ``model`` in place and leave it holding the best-validation weights.

    With ``out_dir``, ``history.csv`` is written there.
    """
    if not train_samples or not val_samples:
        raise ValueError("training and validation splits must be non-empty")
    scaler = scaler or model.scaler
    if scaler is None:
        raise ValueError("train needs a Scaler fitted on the training split")
    params = model.parameters()
    opt = ad.AdamW(params, cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    drop_rng = np.random.default_rng(cfg.seed + 1) if model.cfg.dropout > 0 else None
    res = TrainResult(best_state=model.state_dict())
    bad_epochs = 0
    n = len(train_samples)

    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        losses = []
        for s in range(0, n, cfg.batch_size):
            batch = [train_samples[i] for i in order[s : s + cfg.batch_size]]
            opt.zero_grad()
            loss = batch_loss(model, batch, scaler, cfg.loss_kind, drop_rng)
            lv = float(loss.data)
            if not np.isfinite(lv):
                log.error("loss became %s at step %d; restoring last good weights", lv, res.steps)
                res.diverged = True
                break
            ad.backward(loss)
            ad.clip_grad_norm(params, cfg.grad_clip_norm)
            opt.step()
            res.steps += 1
            losses.append(lv)
            if cfg.max_steps is not None and res.steps >= cfg.max_steps:
                break
        if res.diverged:
            break
        rep = evaluate_samples(model, val_samples, scaler, cfg.eval_batch_size, cfg.filter_threshold)
        row = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)) if losses else float("nan"),
            "val_mae": rep.mae,
            "val_rmse": rep.rmse,
            "val_mape": rep.mape,
            "wall_seconds": time.perf_counter() - t0,
        }
        res.history.append(row)
        log.info("epoch %d train %.4f val_mae %.4f", epoch, row["train_loss"], rep.mae)
        if rep.mae < res.best_val_mae:
            res.best_val_mae = rep.mae
            res.best_epoch = epoch
            res.best_state = model.state_dict()
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                break
        if cfg.max_steps is not None and res.steps >= cfg.max_steps:
            break

    model.load_state_dict(res.best_state)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_history(out / "history.csv", res.history)
    return res


def write_history(path, history: list[dict]) -> None:
    cols = ["epoch", "train_loss", "val_mae", "val_rmse", "val_mape", "wall_seconds"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for row in history:
            w.writerow({k: row[k] for k in cols})
