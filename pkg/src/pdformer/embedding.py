"""Input embedding: data projection + Laplacian, periodic and positional terms."""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timedelta

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor


@dataclass(frozen=True)
class TimeIndexMeta:
    """Per-step calendar indices for an input window.

    Arrays are (T,) for a single window or (B, T) for a batch.
    """

    week_index: np.ndarray  # 1..7, Monday = 1
    day_slot: np.ndarray  # 0 .. slots_per_day - 1
    step: np.ndarray  # absolute step index in the source series

    @classmethod
    def for_steps(cls, start: datetime, interval_minutes: int, steps) -> "TimeIndexMeta":
        steps = np.asarray(steps, dtype=np.int64)
        week = np.empty(steps.shape, dtype=np.int64)
        slot = np.empty(steps.shape, dtype=np.int64)
        for idx, s in np.ndenumerate(steps):
            ts = start + timedelta(minutes=int(s) * interval_minutes)
            week[idx] = ts.isoweekday()
            slot[idx] = (ts.hour * 60 + ts.minute) // interval_minutes
        return cls(week, slot, steps)

    def __len__(self) -> int:
        return self.week_index.shape[-1]

    @staticmethod
    def stack(metas) -> "TimeIndexMeta":
        metas = list(metas)
        return TimeIndexMeta(
            np.stack([m.week_index for m in metas]),
            np.stack([m.day_slot for m in metas]),
            np.stack([m.step for m in metas]),
        )


def slots_per_day(interval_minutes: int) -> int:
    if interval_minutes < 1 or 1440 % interval_minutes:
        raise ValueError(f"interval {interval_minutes} min does not divide a day")
    return 1440 // interval_minutes


def temporal_position_encoding(T: int, d: int) -> np.ndarray:
    """Sinusoidal table: ``PE[t, 2i] = sin(t / 10000^(2i/d))``, ``PE[t, 2i+1] = cos(.)``."""
    if d % 2:
        raise ValueError(f"positional encoding needs an even dimension, got {d}")
    t = np.arange(T, dtype=np.float64)[:, None]
    freq = 10000.0 ** (np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.zeros((T, d))
    pe[:, 0::2] = np.sin(t / freq)
    pe[:, 1::2] = np.cos(t / freq)
    return pe


def _uniform(rng, shape, bound, dtype):
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def linear_init(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float64):
    """Weight and bias drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(fan_in)
    return _uniform(rng, (fan_in, fan_out), bound, dtype), _uniform(rng, (fan_out,), bound, dtype)


def init_embedding_params(
    params: dict, rng: np.random.Generator, C: int, k: int, d: int, n_slots: int, dtype=np.float64
) -> None:
    w, b = linear_init(rng, C, d, dtype)
    params["embed.data.w"] = Parameter(w, "embed.data.w")
    params["embed.data.b"] = Parameter(b, "embed.data.b")
    w, b = linear_init(rng, k, d, dtype)
    params["embed.lap.w"] = Parameter(w, "embed.lap.w")
    params["embed.lap.b"] = Parameter(b, "embed.lap.b")
    params["embed.week"] = Parameter(_uniform(rng, (7, d), 0.04, dtype), "embed.week")
    params["embed.day"] = Parameter(_uniform(rng, (n_slots, d), 0.04, dtype), "embed.day")


def embed(params: dict, window, meta: TimeIndexMeta, basis: np.ndarray, pe: np.ndarray) -> Tensor:
    """Sum of data, spatial, weekly, daily and positional embeddings.

    ``window`` is (B, T, N, C), meta arrays are (B, T), ``basis`` is (N, k)
    and ``pe`` is (T, d). Returns a (B, T, N, d) tensor.
    """
    window = ad.as_tensor(window)
    B, T, N, C = window.shape
    d = params["embed.data.w"].shape[1]
    if params["embed.data.w"].shape[0] != C:
        raise ValueError(f"window has {C} channels, data projection expects {params['embed.data.w'].shape[0]}")
    if basis.shape[0] != N:
        raise ValueError(f"Laplacian basis has {basis.shape[0]} rows for {N} nodes")
    if meta.week_index.shape != (B, T):
        raise ValueError(f"meta shape {meta.week_index.shape} does not match window batch/time {(B, T)}")
    if pe.shape != (T, d):
        raise ValueError(f"positional table {pe.shape} does not match {(T, d)}")

    x = window @ params["embed.data.w"] + params["embed.data.b"]
    spe = ad.as_tensor(basis.astype(window.dtype)) @ params["embed.lap.w"] + params["embed.lap.b"]  # (N, d)
    x = x + spe
    week = ad.take_rows(params["embed.week"], meta.week_index - 1)  # (B, T, d)
    day = ad.take_rows(params["embed.day"], meta.day_slot)
    periodic = ad.reshape(week + day, (B, T, 1, d))
    x = x + periodic
    return x + pe.astype(window.dtype)[:, None, :]
