"""Spatial-temporal encoder layer: geographic / semantic / temporal heads fused
in one multi-head block, delay-aware key update, FFN, post-norm residuals."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .embedding import linear_init
from .patterns import znorm


@dataclass(frozen=True)
class HeadConfig:
    h_geo: int = 2
    h_sem: int = 2
    h_t: int = 4
    d: int = 64

    def __post_init__(self):
        if min(self.h_geo, self.h_sem, self.h_t) < 0 or self.total == 0:
            raise ValueError(f"invalid head counts {self.h_geo}/{self.h_sem}/{self.h_t}")
        if self.d % self.total:
            raise ValueError(f"d={self.d} is not divisible by {self.total} heads")

    @property
    def total(self) -> int:
        return self.h_geo + self.h_sem + self.h_t

    @property
    def d_prime(self) -> int:
        return self.d // self.total


def delay_histories(window: np.ndarray, S: int) -> np.ndarray:
    """Length-``S`` histories ending at every step of the window, z-normalized.

    ``window`` is (B, T, N, C); the result is (B, T, N, C, S). Steps before the
    window start repeat its first value.
    """
    window = np.asarray(window)
    T = window.shape[1]
    idx = np.arange(T)[:, None] + np.arange(-S + 1, 1)[None, :]  # (T, S)
    idx = np.clip(idx, 0, None)
    h = window[:, idx]  # (B, T, S, N, C)
    return znorm(np.moveaxis(h, 2, -1))


def init_layer_params(
    params: dict, prefix: str, rng: np.random.Generator, cfg: HeadConfig, S: int | None, dtype=np.float64
) -> None:
    """Register one encoder layer's weights under ``prefix``.

    Per-kind Q/K/V matrices are (d, h * d'); column block ``i`` is head ``i``.
    ``S=None`` skips the delay memory.
    """
    d, dp = cfg.d, cfg.d_prime

    def put(name, arr):
        params[f"{prefix}.{name}"] = Parameter(arr.astype(dtype), f"{prefix}.{name}")

    bound = 1.0 / np.sqrt(d)
    for kind, h in (("geo", cfg.h_geo), ("sem", cfg.h_sem), ("t", cfg.h_t)):
        if h == 0:
            continue
        for m in ("q", "k", "v"):
            put(f"{kind}.w_{m}", rng.uniform(-bound, bound, (d, h * dp)))
    if S is not None and cfg.h_geo > 0:
        b = 1.0 / np.sqrt(S)
        for m in ("u", "m", "c"):
            put(f"delay.w_{m}", rng.uniform(-b, b, (S, dp)))
    put("w_o", rng.uniform(-bound, bound, (d, d)))
    put("norm1.gain", np.ones(d))
    put("norm1.bias", np.zeros(d))
    w, b = linear_init(rng, d, 4 * d)
    put("ffn.w1", w)
    put("ffn.b1", b)
    w, b = linear_init(rng, 4 * d, d)
    put("ffn.w2", w)
    put("ffn.b2", b)
    put("norm2.gain", np.ones(d))
    put("norm2.bias", np.zeros(d))


def spatial_scores(x_t, w_q, w_k, d_prime: int | None = None) -> Tensor:
    """Scaled dot-product scores ``(x W_q)(x W_k)^T / sqrt(d')`` for one slice."""
    x_t = ad.as_tensor(x_t)
    if x_t.shape[-1] != w_q.shape[0] or w_q.shape != w_k.shape:
        raise ad.ShapeError(f"spatial_scores: x {x_t.shape}, W_q {w_q.shape}, W_k {w_k.shape}")
    dp = d_prime or w_q.shape[1]
    q = x_t @ w_q
    k = x_t @ w_k
    return ad.scale(q @ ad.transpose_last2(k), 1.0 / np.sqrt(dp))


def delay_transform(history: np.ndarray, patterns: np.ndarray, w_u, w_m, w_c) -> Tensor:
    """Pattern-memory summary of each node's recent history.

    ``history`` is (..., C, S) and already z-normalized; ``patterns`` is
    (N_p, S). Each channel's history attends over the patterns and the
    per-channel summaries are added, giving (..., d').
    """
    S = patterns.shape[1]
    if history.shape[-1] != S:
        raise ValueError(f"history length {history.shape[-1]} does not match pattern window {S}")
    P = ad.as_tensor(patterns.astype(w_u.dtype))
    u = ad.as_tensor(history.astype(w_u.dtype)) @ w_u  # (..., C, d')
    mem = P @ w_m  # (N_p, d')
    sim = ad.softmax_lastdim(u @ ad.transpose_last2(mem))  # (..., C, N_p)
    r = sim @ (P @ w_c)  # (..., C, d')
    return ad.sum(r, axis=-2)


def _split_heads(x: Tensor, h: int, dp: int) -> Tensor:
    # (A, B, L, h*dp) -> (A, B, h, L, dp)
    A, B, L, _ = x.shape
    return ad.permute(ad.reshape(x, (A, B, L, h, dp)), (0, 1, 3, 2, 4))


def _merge_heads(z: Tensor) -> Tensor:
    A, B, h, L, dp = z.shape
    return ad.reshape(ad.permute(z, (0, 1, 3, 2, 4)), (A, B, L, h * dp))


def _attend(x: Tensor, params: dict, key: str, h: int, dp: int, mask, key_extra=None, capture=None):
    q = _split_heads(x @ params[f"{key}.w_q"], h, dp)
    k = _split_heads(x @ params[f"{key}.w_k"], h, dp)
    v = _split_heads(x @ params[f"{key}.w_v"], h, dp)
    if key_extra is not None:
        k = k + key_extra
    scores = ad.scale(q @ ad.transpose_last2(k), 1.0 / np.sqrt(dp))
    probs = ad.softmax_lastdim(scores, mask)
    if capture is not None:
        capture.append(probs.data)
    return _merge_heads(probs @ v)


def fused_attention(
    x,
    params: dict,
    prefix: str,
    cfg: HeadConfig,
    geo_mask: np.ndarray,
    sem_mask: np.ndarray,
    histories: np.ndarray | None = None,
    patterns: np.ndarray | None = None,
    capture: dict | None = None,
) -> Tensor:
    """Heterogeneous multi-head attention over a (B, T, N, d) tensor.

    Geographic heads attend across nodes under ``geo_mask`` with delay-updated
    keys (when ``histories``/``patterns`` are given and the layer owns a delay
    memory); semantic heads use ``sem_mask``; temporal heads attend across
    time per node without a mask. Head outputs are concatenated and projected.
    """
    x = ad.as_tensor(x)
    B, T, N, d = x.shape
    if d != cfg.d:
        raise ad.ShapeError(f"input feature size {d} != model dim {cfg.d}")
    for nm, m in (("geo", geo_mask), ("sem", sem_mask)):
        if np.shape(m) != (N, N):
            raise ad.ShapeError(f"{nm} mask shape {np.shape(m)} != {(N, N)}")
    dp = cfg.d_prime
    outs = []
    if cfg.h_geo:
        extra = None
        if histories is not None and f"{prefix}.delay.w_u" in params:
            R = delay_transform(
                histories,
                patterns,
                params[f"{prefix}.delay.w_u"],
                params[f"{prefix}.delay.w_m"],
                params[f"{prefix}.delay.w_c"],
            )  # (B, T, N, d')
            extra = ad.reshape(R, (B, T, 1, N, dp))
        cap = [] if capture is not None else None
        outs.append(_attend(x, params, f"{prefix}.geo", cfg.h_geo, dp, geo_mask, extra, cap))
        if cap is not None:
            capture["geo"] = cap[0]  # (B, T, h, N, N)
    if cfg.h_sem:
        cap = [] if capture is not None else None
        outs.append(_attend(x, params, f"{prefix}.sem", cfg.h_sem, dp, sem_mask, None, cap))
        if cap is not None:
            capture["sem"] = cap[0]
    if cfg.h_t:
        xt = ad.permute(x, (0, 2, 1, 3))  # (B, N, T, d)
        cap = [] if capture is not None else None
        z = _attend(xt, params, f"{prefix}.t", cfg.h_t, dp, None, None, cap)
        outs.append(ad.permute(z, (0, 2, 1, 3)))
        if cap is not None:
            capture["t"] = cap[0]  # (B, N, h, T, T)
    cat = outs[0] if len(outs) == 1 else ad.concat_lastdim(outs)
    return cat @ params[f"{prefix}.w_o"]


def encoder_layer(
    x,
    params: dict,
    prefix: str,
    cfg: HeadConfig,
    geo_mask,
    sem_mask,
    histories=None,
    patterns=None,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    capture: dict | None = None,
) -> Tensor:
    """``y = LN(x + STAttn(x))``, ``out = LN(y + FFN(y))``."""
    x = ad.as_tensor(x)
    attn = fused_attention(x, params, prefix, cfg, geo_mask, sem_mask, histories, patterns, capture)
    attn = ad.dropout(attn, dropout, rng)
    y = ad.layer_norm(x + attn, params[f"{prefix}.norm1.gain"], params[f"{prefix}.norm1.bias"])
    hidden = ad.gelu(y @ params[f"{prefix}.ffn.w1"] + params[f"{prefix}.ffn.b1"])
    ffn = hidden @ params[f"{prefix}.ffn.w2"] + params[f"{prefix}.ffn.b2"]
    ffn = ad.dropout(ffn, dropout, rng)
    return ad.layer_norm(y + ffn, params[f"{prefix}.norm2.gain"], params[f"{prefix}.norm2.bias"])
