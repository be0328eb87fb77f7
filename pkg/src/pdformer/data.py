"""Traffic tensors: file I/O, normalization, windowing into samples, chronological
splits and synthetic desk-scale datasets."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

from .embedding import TimeIndexMeta, slots_per_day
from .graph import RoadNetwork, build_from_edge_list, grid_to_graph, read_edge_list, ring_graph

DEFAULT_START = datetime(2018, 1, 1)  # a Monday


@dataclass
class TrafficTensor:
    values: np.ndarray  # (T_total, N, C)
    missing: np.ndarray  # same shape, bool
    interval_minutes: int = 5
    start: datetime = DEFAULT_START

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError(f"traffic tensor must be (time, nodes, channels), got {self.values.shape}")
        self.missing = np.asarray(self.missing, dtype=bool)
        if self.missing.shape != self.values.shape:
            raise ValueError("missing mask shape differs from values")

    @classmethod
    def from_values(cls, values, interval_minutes: int = 5, start: datetime = DEFAULT_START) -> "TrafficTensor":
        values = np.asarray(values, dtype=np.float64)
        return cls(values, np.isnan(values), interval_minutes, start)

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def slots_per_day(self) -> int:
        return slots_per_day(self.interval_minutes)

    def meta(self, start_step: int, length: int) -> TimeIndexMeta:
        return TimeIndexMeta.for_steps(self.start, self.interval_minutes, np.arange(start_step, start_step + length))


@dataclass
class Scaler:
    """Per-channel z-score statistics fitted on training data only."""

    mean: np.ndarray
    std: np.ndarray
    degenerate: tuple = field(default=())

    @classmethod
    def fit(cls, values: np.ndarray, missing: np.ndarray | None = None) -> "Scaler":
        v = np.asarray(values, dtype=np.float64).copy()
        if missing is not None:
            v[missing] = np.nan
        flat = v.reshape(-1, v.shape[-1])
        mean = np.nanmean(flat, axis=0)
        std = np.nanstd(flat, axis=0)
        bad = tuple(int(i) for i in np.flatnonzero(~(std > 0)))
        if bad:
            warnings.warn(f"channels {bad} have zero variance; using std=1", stacklevel=2)
        return cls(mean, np.where(std > 0, std, 1.0), bad)

    def transform(self, x):
        return (np.asarray(x) - self.mean) / self.std

    def inverse(self, x):
        # works for numpy arrays and autodiff tensors alike
        if isinstance(x, np.ndarray):
            return x * self.std + self.mean
        return x * self.std.astype(x.dtype) + self.mean.astype(x.dtype)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "degenerate": list(self.degenerate)}

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(np.asarray(d["mean"], float), np.asarray(d["std"], float), tuple(d.get("degenerate", ())))


@dataclass
class Sample:
    """One forecasting example; arrays are views into the source tensor."""

    index: int
    input: np.ndarray  # (T, N, C)
    target: np.ndarray  # (T', N, C)
    input_missing: np.ndarray
    target_missing: np.ndarray
    meta: TimeIndexMeta
    S: int = 3

    @property
    def delay_history(self) -> np.ndarray:
        """(T, N, C, S) raw histories ending at each input step, edge-padded at the window start."""
        T = self.input.shape[0]
        idx = np.clip(np.arange(T)[:, None] + np.arange(-self.S + 1, 1)[None, :], 0, None)
        return np.moveaxis(self.input[idx], 1, -1)


# ---------------------------------------------------------------- file formats


def write_flow_file(path, values: np.ndarray) -> None:
    """Header ``T,N,C`` then one line per step with N*C values, channel fastest."""
    values = np.asarray(values, dtype=np.float64)
    T, N, C = values.shape
    flat = values.reshape(T, N * C)
    lines = [f"{T},{N},{C}"]
    lines += [",".join(repr(float(v)) for v in row) for row in flat]
    Path(path).write_text("\n".join(lines) + "\n")


def read_flow_file(path, interval_minutes: int = 5, start: datetime = DEFAULT_START) -> TrafficTensor:
    text = Path(path).read_text()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty flow file")
    try:
        T, N, C = (int(v) for v in lines[0].split(","))
    except ValueError:
        raise ValueError(f"{path}: header must be 'T,N,C', got {lines[0]!r}") from None
    body = lines[1:]
    if len(body) != T:
        raise ValueError(f"{path}: header declares {T} rows, found {len(body)}")
    if T == 0:
        raise ValueError(f"{path}: no timesteps")
    rows = []
    for i, ln in enumerate(body, 2):
        parts = ln.split(",")
        if len(parts) != N * C:
            raise ValueError(f"{path}:{i}: expected {N * C} values, got {len(parts)}")
        rows.append([float(p) for p in parts])
    values = np.array(rows, dtype=np.float64).reshape(T, N, C)
    return TrafficTensor.from_values(values, interval_minutes, start)


def load_graph_dataset(flow_file, edge_file, interval_minutes: int = 5, start: datetime = DEFAULT_START):
    tensor = read_flow_file(flow_file, interval_minutes, start)
    N = tensor.shape[1]
    net = read_edge_list(edge_file)
    if net.node_count > N:
        raise ValueError(f"edge file references node {net.node_count - 1} but flow file has {N} nodes")
    net = build_from_edge_list(N, net.edges)
    return tensor, net


def load_grid_dataset(flow_file, rows: int, cols: int, interval_minutes: int = 30, start: datetime = DEFAULT_START):
    tensor = read_flow_file(flow_file, interval_minutes, start)
    _, N, C = tensor.shape
    if N != rows * cols:
        raise ValueError(f"grid {rows}x{cols} has {rows * cols} cells but flow file has {N} nodes")
    if C != 2:
        raise ValueError(f"grid datasets carry inflow and outflow (C=2), got C={C}")
    return tensor, grid_to_graph(rows, cols)


# ---------------------------------------------------------------- windowing


def make_samples(tensor: TrafficTensor, T: int, T_prime: int, S: int = 3) -> list[Sample]:
    total = tensor.shape[0]
    if total < T + T_prime:
        raise ValueError(f"series of length {total} is too short for T={T}, T'={T_prime}")
    week_all, slot_all, steps = _calendar(tensor)
    out = []
    for i in range(total - T - T_prime + 1):
        sl_in, sl_out = slice(i, i + T), slice(i + T, i + T + T_prime)
        meta = TimeIndexMeta(week_all[sl_in], slot_all[sl_in], steps[sl_in])
        out.append(
            Sample(
                i,
                tensor.values[sl_in],
                tensor.values[sl_out],
                tensor.missing[sl_in],
                tensor.missing[sl_out],
                meta,
                S,
            )
        )
    return out


def _calendar(tensor: TrafficTensor):
    total = tensor.shape[0]
    spd = tensor.slots_per_day
    start = tensor.start
    minute0 = start.hour * 60 + start.minute
    steps = np.arange(total)
    slot0 = minute0 // tensor.interval_minutes
    slot = (slot0 + steps) % spd
    day = (slot0 + steps) // spd
    week = (start.isoweekday() - 1 + day) % 7 + 1
    return week, slot, steps


def split(samples: list, ratios=(0.6, 0.2, 0.2)) -> tuple[list, list, list]:
    """Chronological contiguous split; floors for val/test, remainder to training."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"split ratios must be three non-negative values summing to 1, got {ratios}")
    n = len(samples)
    n_val = math.floor(n * ratios[1] + 1e-9)
    n_test = math.floor(n * ratios[2] + 1e-9)
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) <= 0:
        raise ValueError(f"split of {n} samples by {ratios} leaves an empty part ({n_train}/{n_val}/{n_test})")
    return samples[:n_train], samples[n_train : n_train + n_val], samples[n_train + n_val :]


def training_span(train: list[Sample]) -> slice:
    """Source-time slice covered by the training samples (inputs and targets)."""
    first, last = train[0], train[-1]
    T, Tp = first.input.shape[0], first.target.shape[0]
    return slice(first.index, last.index + T + Tp)


@dataclass
class Batch:
    x: np.ndarray  # normalized inputs (B, T, N, C), missing filled with 0
    y: np.ndarray  # raw targets (B, T', N, C)
    y_missing: np.ndarray
    meta: TimeIndexMeta


def make_batch(samples: list[Sample], scaler: Scaler) -> Batch:
    x = np.stack([s.input for s in samples])
    xm = np.stack([s.input_missing for s in samples])
    x = np.where(xm, 0.0, scaler.transform(np.where(xm, 0.0, x)))
    y = np.stack([s.target for s in samples])
    ym = np.stack([s.target_missing for s in samples]) | ~np.isfinite(y)
    meta = TimeIndexMeta.stack(s.meta for s in samples)
    return Batch(x, y, ym, meta)


# ---------------------------------------------------------------- synthetic data


def daily_profile(hours: np.ndarray) -> np.ndarray:
    """Double-peak daily flow shape in vehicles per interval."""
    morning = np.exp(-0.5 * ((hours - 8.0) / 1.2) ** 2)
    evening = np.exp(-0.5 * ((hours - 17.5) / 1.5) ** 2)
    return 40.0 + 160.0 * morning + 120.0 * evening


def generate_synthetic(
    N: int = 6,
    days: int = 3,
    interval_minutes: int = 5,
    delay_steps: int = 2,
    noise_sigma: float = 0.05,
    seed: int = 0,
    start: datetime = DEFAULT_START,
) -> tuple[TrafficTensor, RoadNetwork]:
    """Ring of ``N`` nodes; node ``i`` replays node ``i-1`` ``delay_steps`` later.

    Node 0 carries :func:`daily_profile` plus Gaussian noise of ``noise_sigma``
    flow units; the noise propagates with the flow, so with any noise level
    ``values[t, i] == values[t - delay_steps, i - 1]``.
    """
    if delay_steps < 0:
        raise ValueError("delay_steps must be >= 0")
    spd = slots_per_day(interval_minutes)
    total = days * spd
    lead = (N - 1) * delay_steps
    rng = np.random.default_rng(seed)
    t = np.arange(-lead, total)
    hours = ((t % spd) * interval_minutes) / 60.0
    base = daily_profile(hours) + noise_sigma * rng.standard_normal(len(t))
    base = np.maximum(base, 0.0)
    values = np.empty((total, N, 1))
    for i in range(N):
        off = lead - i * delay_steps
        values[:, i, 0] = base[off : off + total]
    return TrafficTensor.from_values(values, interval_minutes, start), ring_graph(N)


def generate_similar_pattern(
    N: int = 8,
    days: int = 3,
    interval_minutes: int = 5,
    pair: tuple[int, int] | None = None,
    noise_sigma: float = 0.05,
    seed: int = 0,
    start: datetime = DEFAULT_START,
) -> tuple[TrafficTensor, RoadNetwork]:
    """Ring whose nodes each get a distinct daily profile, except one distant
    ``pair`` that shares the same one.

    Profiles are double peaks with node-specific peak hours and heights.
    """
    pair = pair or (0, N // 2)
    spd = slots_per_day(interval_minutes)
    total = days * spd
    rng = np.random.default_rng(seed)
    hours = ((np.arange(total) % spd) * interval_minutes) / 60.0
    values = np.empty((total, N, 1))
    shapes = {}
    for i in range(N):
        key = pair[0] if i in pair else i
        if key not in shapes:
            p1 = rng.uniform(6.0, 11.0)
            p2 = rng.uniform(15.0, 21.0)
            a1, a2 = rng.uniform(60.0, 200.0, size=2)
            base = rng.uniform(20.0, 60.0)
            shapes[key] = (
                base
                + a1 * np.exp(-0.5 * ((hours - p1) / 1.3) ** 2)
                + a2 * np.exp(-0.5 * ((hours - p2) / 1.6) ** 2)
            )
        values[:, i, 0] = shapes[key]
    values = np.maximum(values + noise_sigma * rng.standard_normal(values.shape), 0.0)
    return TrafficTensor.from_values(values, interval_minutes, start), ring_graph(N)
