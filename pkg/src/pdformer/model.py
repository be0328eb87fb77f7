"""The full forecaster: embedding, stacked encoder layers, skip convolutions and
a direct multi-step output head."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .data import Scaler
from .embedding import TimeIndexMeta, embed, init_embedding_params, linear_init, slots_per_day, temporal_position_encoding
from .encoder import HeadConfig, delay_histories, encoder_layer, init_layer_params


@dataclass
class ModelConfig:
    T: int = 12
    T_prime: int = 12
    N: int = 6
    C: int = 1
    d: int = 32
    d_sk: int = 64
    L: int = 2
    h_geo: int = 2
    h_sem: int = 2
    h_t: int = 4
    lam: int = 2
    K: int = 3
    N_p: int = 16
    S: int = 3
    k: int = 4
    interval_minutes: int = 5
    seed: int = 0
    dropout: float = 0.0
    use_delay: bool = True
    use_mask: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        for name in ("T", "T_prime", "N", "C", "d", "d_sk", "L", "S", "k", "interval_minutes", "N_p"):
            if getattr(self, name) < 1:
                raise ValueError(f"config field {name} must be positive, got {getattr(self, name)}")
        self.heads  # validates divisibility
        slots_per_day(self.interval_minutes)
        if self.d % 2:
            raise ValueError(f"d must be even for the positional encoding, got {self.d}")

    @property
    def heads(self) -> HeadConfig:
        return HeadConfig(self.h_geo, self.h_sem, self.h_t, self.d)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**data)


class PDFormer:
    """Holds parameters plus the frozen preprocessing artefacts (masks,
    Laplacian basis, traffic patterns) the forward pass needs."""

    def __init__(
        self,
        cfg: ModelConfig,
        geo_mask: np.ndarray,
        sem_mask: np.ndarray,
        basis: np.ndarray,
        patterns: np.ndarray | None,
        scaler: Scaler | None = None,
    ):
        self.cfg = cfg
        N = cfg.N
        if geo_mask.shape != (N, N) or sem_mask.shape != (N, N):
            raise ValueError(f"masks must be {(N, N)}, got {geo_mask.shape} and {sem_mask.shape}")
        if basis.shape != (N, cfg.k):
            raise ValueError(f"Laplacian basis must be {(N, cfg.k)}, got {basis.shape}")
        if cfg.use_delay and cfg.h_geo:
            if patterns is None or patterns.shape[1] != cfg.S:
                raise ValueError(f"delay memory needs patterns with window S={cfg.S}")
        self.geo_mask = np.asarray(geo_mask)
        self.sem_mask = np.asarray(sem_mask)
        if not cfg.use_mask:
            self.geo_mask = np.ones_like(self.geo_mask)
            self.sem_mask = np.ones_like(self.sem_mask)
        self.basis = np.asarray(basis, dtype=np.float64)
        self.patterns = None if patterns is None else np.asarray(patterns, dtype=np.float64)
        self.scaler = scaler
        self.pe = temporal_position_encoding(cfg.T, cfg.d)
        self.params: dict[str, Parameter] = {}
        self._init_params()

    def _init_params(self) -> None:
        cfg = self.cfg
        rng = np.random.default_rng(cfg.seed)
        dt = cfg.np_dtype
        init_embedding_params(self.params, rng, cfg.C, cfg.k, cfg.d, slots_per_day(cfg.interval_minutes), dt)
        S = cfg.S if cfg.use_delay else None
        for l in range(cfg.L):
            init_layer_params(self.params, f"layers.{l}", rng, cfg.heads, S, dt)
            w, b = linear_init(rng, cfg.d, cfg.d_sk, dt)
            self.params[f"skip.{l}.w"] = Parameter(w, f"skip.{l}.w")
            self.params[f"skip.{l}.b"] = Parameter(b, f"skip.{l}.b")
        w, b = linear_init(rng, cfg.T, cfg.T_prime, dt)
        self.params["out.conv1.w"] = Parameter(w, "out.conv1.w")
        self.params["out.conv1.b"] = Parameter(b, "out.conv1.b")
        w, b = linear_init(rng, cfg.d_sk, cfg.C, dt)
        self.params["out.conv2.w"] = Parameter(w, "out.conv2.w")
        self.params["out.conv2.b"] = Parameter(b, "out.conv2.b")

    # ------------------------------------------------------------ accessors

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    # ------------------------------------------------------------ forward

    def forward(
        self,
        window,
        meta: TimeIndexMeta,
        rng: np.random.Generator | None = None,
        capture: list | None = None,
    ) -> Tensor:
        """Map a normalized (B, T, N, C) window to a normalized (B, T', N, C) forecast.

        An unbatched (T, N, C) window with (T,) meta arrays is also accepted and
        returns (T', N, C). ``rng`` enables dropout; ``capture`` collects
        per-layer attention probabilities.
        """
        cfg = self.cfg
        window = np.asarray(window.data if isinstance(window, Tensor) else window)
        single = window.ndim == 3
        if single:
            window = window[None]
            meta = TimeIndexMeta(meta.week_index[None], meta.day_slot[None], meta.step[None])
        if window.shape[1:] != (cfg.T, cfg.N, cfg.C):
            raise ValueError(f"window shape {window.shape[1:]} does not match config {(cfg.T, cfg.N, cfg.C)}")
        window = window.astype(cfg.np_dtype)
        drop = cfg.dropout if rng is not None else 0.0

        x = embed(self.params, window, meta, self.basis, self.pe)
        x = ad.dropout(x, drop, rng)
        hist = delay_histories(window, cfg.S) if cfg.use_delay else None
        skips = None
        for l in range(cfg.L):
            cap = {} if capture is not None else None
            x = encoder_layer(
                x,
                self.params,
                f"layers.{l}",
                cfg.heads,
                self.geo_mask,
                self.sem_mask,
                hist,
                self.patterns,
                drop,
                rng,
                cap,
            )
            if capture is not None:
                capture.append(cap)
            sk = x @ self.params[f"skip.{l}.w"] + self.params[f"skip.{l}.b"]
            skips = sk if skips is None else skips + sk
        # skips: (B, T, N, d_sk) -> time axis last for the horizon map
        h = ad.permute(skips, (0, 2, 3, 1))  # (B, N, d_sk, T)
        h = ad.gelu(h @ self.params["out.conv1.w"] + self.params["out.conv1.b"])  # (B, N, d_sk, T')
        h = ad.permute(h, (0, 3, 1, 2))  # (B, T', N, d_sk)
        out = h @ self.params["out.conv2.w"] + self.params["out.conv2.b"]
        if single:
            out = ad.reshape(out, out.shape[1:])
        return out

    __call__ = forward

    def predict_denormalized(self, window, meta: TimeIndexMeta, scaler: Scaler | None = None) -> np.ndarray:
        """Forecast in flow units from a raw (un-normalized) window."""
        scaler = scaler or self.scaler
        if scaler is None:
            raise ValueError("predict_denormalized needs a fitted Scaler")
        z = scaler.transform(np.asarray(window, dtype=np.float64))
        return scaler.inverse(self.forward(np.nan_to_num(z), meta).data.astype(np.float64))

    # ------------------------------------------------------------ persistence

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = set(self.params) - set(state)
            extra = set(state) - set(self.params)
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data[...] = state[k]

    def save(self, path, artifacts: dict | None = None) -> None:
        """Write ``path`` (PDF1 weights) and ``path.json`` (config sidecar)."""
        path = Path(path)
        ad.save_checkpoint(path, self.parameters())
        sidecar = {
            "config": asdict(self.cfg),
            "artifacts": artifacts or {},
            "scaler": self.scaler.to_dict() if self.scaler else None,
        }
        Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_model(path, geo_mask, sem_mask, basis, patterns) -> PDFormer:
    """Rebuild a model from a checkpoint and its sidecar plus preprocessing arrays."""
    meta = json.loads(Path(str(path) + ".json").read_text())
    cfg = ModelConfig.from_dict(meta["config"])
    scaler = Scaler.from_dict(meta["scaler"]) if meta.get("scaler") else None
    model = PDFormer(cfg, geo_mask, sem_mask, basis, patterns, scaler)
    state = ad.load_checkpoint(path)
    model.load_state_dict({k: v.astype(cfg.np_dtype) for k, v in state.items()})
    return model
