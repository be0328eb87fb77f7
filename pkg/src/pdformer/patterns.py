"""DTW-based semantic neighbours and k-Shape traffic-pattern extraction."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CONST_TOL = 1e-8


@dataclass(frozen=True)
class SemanticMask:
    mask: np.ndarray
    K: int


@dataclass(frozen=True)
class PatternSet:
    centroids: np.ndarray  # (N_p, S)
    labels: np.ndarray | None = field(default=None, repr=False)
    objective_history: tuple = field(default=(), repr=False)

    @property
    def window(self) -> int:
        return self.centroids.shape[1]

    @property
    def n_patterns(self) -> int:
        return self.centroids.shape[0]


# ---------------------------------------------------------------- DTW


def dtw_distance(a, b) -> float:
    """Unconstrained DTW with |a_i - b_j| local cost."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("dtw_distance: series must be non-empty")
    return float(_dtw_batch(a[None, :], b[None, :])[0])


def _dtw_batch(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """DTW between rows ``A[p]`` and ``B[p]``, sweeping anti-diagonals."""
    P, n = A.shape
    m = B.shape[1]
    cost = np.abs(A[:, :, None] - B[:, None, :])  # (P, n, m)
    D = np.full((P, n + 1, m + 1), np.inf)
    D[:, 0, 0] = 0.0
    for s in range(2, n + m + 1):
        i = np.arange(max(1, s - m), min(n, s - 1) + 1)
        j = s - i
        best = np.minimum(np.minimum(D[:, i - 1, j], D[:, i, j - 1]), D[:, i - 1, j - 1])
        D[:, i, j] = cost[:, i - 1, j - 1] + best
    return D[:, n, m]


def pairwise_dtw(series) -> np.ndarray:
    """Symmetric matrix of DTW distances between equal-length series rows."""
    X = np.asarray(series, dtype=np.float64)
    n = len(X)
    iu, ju = np.triu_indices(n, k=1)
    out = np.zeros((n, n))
    chunk = 256
    for s in range(0, len(iu), chunk):
        a, b = iu[s : s + chunk], ju[s : s + chunk]
        d = _dtw_batch(X[a], X[b])
        out[a, b] = d
        out[b, a] = d
    return out


def semantic_mask(node_series, K: int = 3) -> SemanticMask:
    """Mark, per row, the ``K`` most DTW-similar other nodes plus the node itself.

    Ties go to the lower node index.
    """
    X = np.asarray(node_series, dtype=np.float64)
    n = len(X)
    if not 0 <= K < n:
        raise ValueError(f"K must satisfy 0 <= K < N={n}, got {K}")
    if X.ndim != 2 or X.shape[1] == 0:
        raise ValueError("semantic_mask: need one non-empty series per node")
    dist = pairwise_dtw(X)
    mask = np.eye(n, dtype=np.int8)
    for i in range(n):
        others = [j for j in range(n) if j != i]
        order = sorted(others, key=lambda j: (dist[i, j], j))
        mask[i, order[:K]] = 1
    return SemanticMask(mask, K)


def daily_profiles(values: np.ndarray, missing: np.ndarray | None, slots_per_day: int) -> np.ndarray:
    """Per-node mean daily profile, channels concatenated: (N, slots * C).

    ``values`` is (L, N, C). When fewer than ``slots_per_day`` steps are
    available the profile covers only the observed slots.
    """
    L, N, C = values.shape
    v = values.astype(np.float64).copy()
    if missing is not None:
        v[missing] = np.nan
    slots = min(slots_per_day, L)
    prof = np.empty((slots, N, C))
    for s in range(slots):
        with np.errstate(all="ignore"):
            prof[s] = np.nanmean(v[s::slots_per_day], axis=0)
    # slots that were always missing fall back to the node/channel mean
    fill = np.nanmean(prof, axis=0)
    prof = np.where(np.isnan(prof), fill[None], prof)
    prof = np.nan_to_num(prof)
    return prof.transpose(1, 2, 0).reshape(N, C * slots)


# ---------------------------------------------------------------- windows


def znorm(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Z-normalize along ``axis``; (near-)constant slices become all zeros."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=axis, keepdims=True)
    sd = x.std(axis=axis, keepdims=True)
    flat = sd < CONST_TOL
    return np.where(flat, 0.0, (x - mu) / np.where(flat, 1.0, sd))


def extract_windows(values: np.ndarray, S: int, channel: int = 0, missing: np.ndarray | None = None) -> np.ndarray:
    """All stride-1 length-``S`` windows of every node's series, z-normalized.

    ``values`` is (L, N, C); windows touching a missing value are dropped.
    Returns an array of shape (num_windows, S), node-major order.
    """
    values = np.asarray(values)
    L, N, _ = values.shape
    if S < 2:
        raise ValueError("window size S must be >= 2")
    if L < S:
        raise ValueError(f"series length {L} shorter than window {S}")
    series = values[:, :, channel].T  # (N, L)
    win = np.lib.stride_tricks.sliding_window_view(series, S, axis=1)  # (N, L-S+1, S)
    win = win.reshape(-1, S)
    if missing is not None:
        miss = np.lib.stride_tricks.sliding_window_view(missing[:, :, channel].T, S, axis=1).reshape(-1, S)
        win = win[~miss.any(axis=1)]
    win = win[np.isfinite(win).all(axis=1)]
    if len(win) == 0:
        raise ValueError("no valid windows to extract")
    return znorm(win)


# ---------------------------------------------------------------- k-Shape


def _ncc_all_shifts(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Coefficient-normalized cross-correlation of each row of X with y.

    Returns (len(X), 2S-1); column ``S-1+w`` holds shift ``w`` of y relative to x.
    """
    S = X.shape[1]
    cc = np.empty((len(X), 2 * S - 1))
    for w in range(-(S - 1), S):
        if w >= 0:
            cc[:, S - 1 + w] = X[:, w:] @ y[: S - w]
        else:
            cc[:, S - 1 + w] = X[:, : S + w] @ y[-w:]
    denom = np.linalg.norm(X, axis=1) * np.linalg.norm(y)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(denom[:, None] > 0, cc / np.where(denom > 0, denom, 1.0)[:, None], 0.0)
    return out


def sbd(x, y) -> float:
    """Shape-based distance 1 - max over shifts of the normalized cross-correlation."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return float(1.0 - _ncc_all_shifts(x[None, :], y).max())


def _sbd_matrix(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    return np.stack([1.0 - _ncc_all_shifts(X, c).max(axis=1) for c in C], axis=1)


def _shift(x: np.ndarray, w: int) -> np.ndarray:
    """Shift a series by ``w`` positions with zero fill (positive = right)."""
    out = np.zeros_like(x)
    if w > 0:
        out[w:] = x[:-w]
    elif w < 0:
        out[:w] = x[-w:]
    else:
        out[:] = x
    return out


def _extract_shape(members: np.ndarray, ref: np.ndarray) -> np.ndarray:
    S = members.shape[1]
    if np.any(ref):
        aligned = []
        ncc = _ncc_all_shifts(members, ref)
        for x, row in zip(members, ncc):
            w = int(np.argmax(row)) - (S - 1)
            # row maximizes sum x[i+w] * ref[i]; align x onto ref's frame
            aligned.append(_shift(x, -w))
        aligned = znorm(np.array(aligned))
    else:
        aligned = members
    Q = np.eye(S) - np.ones((S, S)) / S
    M = Q @ (aligned.T @ aligned) @ Q
    vals, vecs = np.linalg.eigh(M)
    c = vecs[:, -1]
    if np.any(ref):
        if c @ ref < 0:
            c = -c
    elif aligned.sum(axis=0) @ c < 0:
        c = -c
    return znorm(c)


def kshape_cluster(windows, n_clusters: int = 16, seed: int = 0, max_iter: int = 100) -> PatternSet:
    """k-Shape clustering of equal-length series.

    Inputs are z-normalized first, so scaled/shifted copies cluster
    identically. A refined centroid is only accepted when it does not increase
    its cluster's total SBD, which keeps the objective non-increasing.
    """
    X = znorm(np.asarray(windows, dtype=np.float64))
    n, S = X.shape
    if n_clusters < 1:
        raise ValueError("need at least one cluster")
    if n < n_clusters:
        raise ValueError(f"only {n} windows for {n_clusters} clusters")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, n_clusters, size=n)
    centroids = np.zeros((n_clusters, S))
    history = []
    for _ in range(max_iter):
        for k in range(n_clusters):
            members = X[labels == k]
            if len(members) == 0:
                continue
            cand = _extract_shape(members, centroids[k])
            if np.any(centroids[k]):
                old = _sbd_matrix(members, centroids[k : k + 1]).sum()
                new = _sbd_matrix(members, cand[None]).sum()
                if new > old:
                    continue
            centroids[k] = cand
        dist = _sbd_matrix(X, centroids)
        new_labels = np.argmin(dist, axis=1)
        # keep the current label on exact ties so assignment never worsens
        cur = dist[np.arange(n), labels]
        keep = dist[np.arange(n), new_labels] >= cur
        new_labels = np.where(keep, labels, new_labels)
        for k in range(n_clusters):
            if np.any(new_labels == k):
                continue
            own = dist[np.arange(n), new_labels]
            # a window alone in its cluster cannot be moved without emptying it
            counts = np.bincount(new_labels, minlength=n_clusters)
            own = np.where(counts[new_labels] > 1, own, -np.inf)
            far = int(np.argmax(own))
            new_labels[far] = k
            centroids[k] = X[far]
            dist[:, k] = _sbd_matrix(X, centroids[k : k + 1])[:, 0]
        history.append(float(dist[np.arange(n), new_labels].sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return PatternSet(centroids.copy(), labels.copy(), tuple(history))


# ---------------------------------------------------------------- file formats


def write_patterns_csv(path, patterns: PatternSet) -> None:
    c = patterns.centroids
    body = "\n".join(",".join(repr(float(v)) for v in row) for row in c)
    Path(path).write_text(f"{c.shape[0]},{c.shape[1]}\n{body}\n")


def read_patterns_csv(path) -> PatternSet:
    lines = Path(path).read_text().strip().splitlines()
    n_p, s = (int(v) for v in lines[0].split(","))
    c = np.array([[float(v) for v in ln.split(",")] for ln in lines[1 : n_p + 1]])
    if c.shape != (n_p, s):
        raise ValueError(f"{path}: header says {n_p}x{s}, body is {c.shape}")
    return PatternSet(c)
