"""Command-line pipeline: ``synth``, ``preprocess``, ``train``, ``evaluate``,
``export-attention``.

All commands read one flat TOML config; ``--seed``/``--out-dir`` and the
command-specific flags override it. Exit codes: 0 ok, 2 config error,
3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from datetime import datetime
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .data import (
    Scaler,
    TrafficTensor,
    generate_synthetic,
    load_graph_dataset,
    make_batch,
    load_grid_dataset,
    make_samples,
    split,
    training_span,
    write_flow_file,
)
from .graph import (
    geographic_mask,
    hop_distances,
    laplacian_embedding_basis,
    read_matrix_csv,
    write_edge_list,
    write_matrix_csv,
)
from .model import ModelConfig, PDFormer, load_model
from .patterns import daily_profiles, extract_windows, kshape_cluster, read_patterns_csv, semantic_mask, write_patterns_csv
from .training import TrainConfig, evaluate_samples, train, write_history

log = logging.getLogger("pdformer")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


class NumericError(Exception):
    pass


@dataclass
class RunConfig:
    # dataset
    dataset: str = "synthetic"  # synthetic | graph | grid
    flow_file: str = ""
    edge_file: str = ""
    rows: int = 0
    cols: int = 0
    interval_minutes: int = 5
    start: str = "2018-01-01T00:00:00"
    split: tuple = (0.6, 0.2, 0.2)
    # synthetic generator
    synth_nodes: int = 6
    synth_days: int = 3
    synth_delay: int = 2
    synth_noise: float = 0.05
    # preprocessing
    lam: int = 2
    K: int = 3
    N_p: int = 16
    S: int = 3
    k: int = 4
    max_pattern_windows: int = 20000
    # model
    T: int = 12
    T_prime: int = 12
    d: int = 32
    d_sk: int = 64
    L: int = 2
    h_geo: int = 2
    h_sem: int = 2
    h_t: int = 4
    dropout: float = 0.0
    use_delay: bool = True
    use_mask: bool = True
    dtype: str = "float32"
    # training
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 200
    max_steps: int = 0
    patience: int = 20
    grad_clip_norm: float = 5.0
    loss_kind: str = "mae"
    weight_decay: float = 0.01
    eval_batch_size: int = 64
    filter_threshold: float = 0.0  # 0 disables the low-flow filter
    # run
    seed: int = 0
    out_dir: str = "run"

    @classmethod
    def load(cls, path: str | None, overrides: dict) -> "RunConfig":
        data = {}
        if path:
            p = Path(path)
            if not p.exists():
                raise ConfigError(f"config file {path} not found")
            try:
                data = tomllib.loads(p.read_text())
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        if "split" in data:
            data["split"] = tuple(data["split"])
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.dataset not in ("synthetic", "graph", "grid"):
            raise ConfigError(f"dataset must be synthetic, graph or grid, got {self.dataset!r}")
        total = self.h_geo + self.h_sem + self.h_t
        if total < 1 or self.d % total:
            raise ConfigError(f"d={self.d} must be divisible by h_geo+h_sem+h_t={total}")
        if self.d % 2:
            raise ConfigError(f"d must be even, got {self.d}")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigError(f"split must be three ratios summing to 1, got {self.split}")
        if 1440 % self.interval_minutes:
            raise ConfigError(f"interval_minutes={self.interval_minutes} does not divide a day")
        for name in ("T", "T_prime", "S", "k", "N_p", "L", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.lam < 0 or self.K < 0 or self.epochs < 0:
            raise ConfigError("lam, K and epochs must be non-negative")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        try:
            datetime.fromisoformat(self.start)
        except ValueError:
            raise ConfigError(f"start must be ISO datetime, got {self.start!r}") from None

    @property
    def start_dt(self) -> datetime:
        return datetime.fromisoformat(self.start)

    def model_config(self, N: int, C: int) -> ModelConfig:
        keys = ("T", "T_prime", "d", "d_sk", "L", "h_geo", "h_sem", "h_t", "lam", "K", "N_p", "S", "k")
        keys += ("interval_minutes", "seed", "dropout", "use_delay", "use_mask", "dtype")
        return ModelConfig(N=N, C=C, **{k: getattr(self, k) for k in keys})

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr,
            batch_size=self.batch_size,
            max_epochs=self.epochs,
            patience=self.patience,
            seed=self.seed,
            grad_clip_norm=self.grad_clip_norm,
            loss_kind=self.loss_kind,
            weight_decay=self.weight_decay,
            max_steps=self.max_steps or None,
            eval_batch_size=self.eval_batch_size,
            filter_threshold=self.filter_threshold or None,
        )


# ---------------------------------------------------------------- helpers


def digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(out: Path, name: str, cfg: RunConfig, inputs: list[Path], outputs: list[Path]) -> Path:
    manifest = {
        "tool_version": __version__,
        "seed": cfg.seed,
        "config": asdict(cfg),
        "inputs": {str(p): digest(p) for p in inputs},
        "artifacts": {p.name: digest(p) for p in outputs},
    }
    path = out / name
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def _dataset_files(cfg: RunConfig, out: Path) -> tuple[Path, Path]:
    if cfg.dataset == "synthetic" and not cfg.flow_file:
        return out / "flow.csv", out / "edges.csv"
    return Path(cfg.flow_file), Path(cfg.edge_file)


def load_dataset(cfg: RunConfig, out: Path):
    flow, edges = _dataset_files(cfg, out)
    if not flow.exists():
        raise DataError(f"flow file {flow} not found (run `synth` or set flow_file)")
    try:
        if cfg.dataset == "grid":
            return load_grid_dataset(flow, cfg.rows, cfg.cols, cfg.interval_minutes, cfg.start_dt)
        if not edges.exists():
            raise DataError(f"edge file {edges} not found")
        return load_graph_dataset(flow, edges, cfg.interval_minutes, cfg.start_dt)
    except ValueError as exc:
        raise DataError(str(exc)) from None


def _splits(cfg: RunConfig, tensor: TrafficTensor):
    try:
        samples = make_samples(tensor, cfg.T, cfg.T_prime, cfg.S)
        return split(samples, cfg.split)
    except ValueError as exc:
        raise DataError(str(exc)) from None


ARTIFACTS = ("geo_mask.csv", "sem_mask.csv", "laplacian_basis.csv", "patterns.csv", "scaler.json")


def _load_artifacts(out: Path):
    missing = [a for a in ARTIFACTS if not (out / a).exists()]
    if missing:
        raise DataError(f"missing preprocessing artifacts {missing} in {out}; run `preprocess` first")
    geo = read_matrix_csv(out / "geo_mask.csv", np.int8)
    sem = read_matrix_csv(out / "sem_mask.csv", np.int8)
    basis = read_matrix_csv(out / "laplacian_basis.csv")
    pats = read_patterns_csv(out / "patterns.csv").centroids
    scaler = Scaler.from_dict(json.loads((out / "scaler.json").read_text()))
    return geo, sem, basis, pats, scaler


# ---------------------------------------------------------------- commands


def cmd_synth(cfg: RunConfig, args) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tensor, net = generate_synthetic(
        cfg.synth_nodes, cfg.synth_days, cfg.interval_minutes, cfg.synth_delay, cfg.synth_noise, cfg.seed, cfg.start_dt
    )
    write_flow_file(out / "flow.csv", tensor.values)
    write_edge_list(out / "edges.csv", net)
    print(f"wrote {out / 'flow.csv'} ({tensor.shape}) and {out / 'edges.csv'} ({len(net.edges)} edges)")
    return 0


def cmd_preprocess(cfg: RunConfig, args) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.dataset == "synthetic" and not cfg.flow_file and not (out / "flow.csv").exists():
        cmd_synth(cfg, args)
    tensor, net = load_dataset(cfg, out)
    train_s, _, _ = _splits(cfg, tensor)
    span = training_span(train_s)
    values, missing = tensor.values[span], tensor.missing[span]
    N, C = tensor.shape[1], tensor.shape[2]
    if cfg.K >= N:
        raise ConfigError(f"K={cfg.K} must be smaller than the node count {N}")

    geo = geographic_mask(hop_distances(net), cfg.lam)
    sem = semantic_mask(daily_profiles(values, missing, tensor.slots_per_day), cfg.K).mask
    try:
        basis = laplacian_embedding_basis(net, cfg.k)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    windows = np.concatenate([extract_windows(values, cfg.S, c, missing) for c in range(C)])
    if len(windows) > cfg.max_pattern_windows:
        rng = np.random.default_rng(cfg.seed)
        windows = windows[np.sort(rng.choice(len(windows), cfg.max_pattern_windows, replace=False))]
    try:
        patterns = kshape_cluster(windows, cfg.N_p, cfg.seed)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    scaler = Scaler.fit(values, missing)

    write_matrix_csv(out / "geo_mask.csv", geo)
    write_matrix_csv(out / "sem_mask.csv", sem)
    write_matrix_csv(out / "laplacian_basis.csv", basis.vectors)
    write_patterns_csv(out / "patterns.csv", patterns)
    (out / "scaler.json").write_text(json.dumps(scaler.to_dict(), indent=2))
    inputs = [p for p in _dataset_files(cfg, out) if p.exists()]
    _write_manifest(out, "manifest.json", cfg, inputs, [out / a for a in ARTIFACTS])
    print(f"preprocessed N={N} C={C}: {len(train_s)} training samples, {len(windows)} pattern windows -> {out}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    out = Path(cfg.out_dir)
    geo, sem, basis, pats, scaler = _load_artifacts(out)
    tensor, _ = load_dataset(cfg, out)
    N, C = tensor.shape[1], tensor.shape[2]
    try:
        mcfg = cfg.model_config(N, C)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    train_s, val_s, _ = _splits(cfg, tensor)
    model = PDFormer(mcfg, geo, sem, basis, pats, scaler)
    ckpt = out / "best.ckpt"
    artifacts = {a: str(out / a) for a in ARTIFACTS}
    if cfg.epochs == 0:
        model.save(ckpt, artifacts)
        write_history(out / "history.csv", [])
        print(f"epochs=0: wrote initialized checkpoint {ckpt}")
        return 0
    res = train(model, train_s, val_s, cfg.train_config(), scaler, out)
    model.save(ckpt, artifacts)
    if res.diverged and res.best_epoch < 0:
        raise NumericError("training diverged before the first validation")
    best = res.history[res.best_epoch] if res.best_epoch >= 0 else {}
    print(
        f"best epoch {res.best_epoch}: val MAE {best.get('val_mae')}, RMSE {best.get('val_rmse')}, "
        f"MAPE {best.get('val_mape')}% ({res.steps} steps)"
    )
    _write_manifest(out, "train_manifest.json", cfg, [out / a for a in ARTIFACTS], [ckpt, out / "history.csv"])
    return 4 if res.diverged else 0


def _load_for_eval(cfg: RunConfig, checkpoint: str | None):
    out = Path(cfg.out_dir)
    ckpt = Path(checkpoint) if checkpoint else out / "best.ckpt"
    if not ckpt.exists():
        raise DataError(f"checkpoint {ckpt} not found; run `train` first")
    geo, sem, basis, pats, _ = _load_artifacts(out)
    try:
        model = load_model(ckpt, geo, sem, basis, pats)
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"checkpoint does not match artifacts: {exc}") from None
    tensor, _ = load_dataset(cfg, out)
    mc = model.cfg
    if (tensor.shape[1], tensor.shape[2]) != (mc.N, mc.C) or (cfg.T, cfg.T_prime) != (mc.T, mc.T_prime):
        raise ConfigError(
            f"dataset/config {(tensor.shape[1], tensor.shape[2], cfg.T, cfg.T_prime)} does not match "
            f"checkpoint {(mc.N, mc.C, mc.T, mc.T_prime)}"
        )
    return model, tensor, ckpt


def cmd_evaluate(cfg: RunConfig, args) -> int:
    model, tensor, ckpt = _load_for_eval(cfg, args.checkpoint)
    parts = dict(zip(("train", "val", "test"), _splits(cfg, tensor)))
    samples = parts[args.split]
    thr = args.filter_threshold if args.filter_threshold is not None else (cfg.filter_threshold or None)
    rep = evaluate_samples(model, samples, model.scaler, cfg.eval_batch_size, thr or None)
    rep.extra = {"split": args.split, "checkpoint": ckpt.name, "samples": len(samples)}
    out = Path(cfg.out_dir)
    rep.write_json(out / f"eval_{args.split}.json")
    rep.write_csv(out / f"eval_{args.split}.csv")
    print(f"{args.split}: MAE {rep.mae:.6f} RMSE {rep.rmse:.6f} MAPE {rep.mape}% over {rep.overall.count} points")
    return 0


def cmd_export_attention(cfg: RunConfig, args) -> int:
    model, tensor, _ = _load_for_eval(cfg, args.checkpoint)
    samples = make_samples(tensor, cfg.T, cfg.T_prime, cfg.S)
    if not 0 <= args.sample_index < len(samples):
        raise DataError(f"sample index {args.sample_index} outside [0, {len(samples)})")
    b = make_batch([samples[args.sample_index]], model.scaler)
    cap: list = []
    model.forward(b.x, b.meta, capture=cap)
    path = Path(args.output) if args.output else Path(cfg.out_dir) / f"attention_{args.sample_index}.jsonl"
    with open(path, "w") as fh:
        for layer, maps in enumerate(cap):
            for kind, arr in maps.items():
                a = arr[0]  # spatial: (T, h, N, N); temporal: (N, h, T, T)
                for head in range(a.shape[1]):
                    for idx in range(a.shape[0]):
                        rec = {
                            "layer": layer,
                            "head_kind": kind,
                            "head_index": head,
                            "slice_or_node": idx,
                            "matrix": a[idx, head].astype(float).tolist(),
                        }
                        fh.write(json.dumps(rec) + "\n")
    print(f"wrote {path}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "export-attention": cmd_export_attention,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat TOML config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir", dest="out_dir")
    parser = argparse.ArgumentParser(prog="pdformer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write a synthetic ring dataset")
    sub.add_parser("preprocess", parents=[common], help="masks, Laplacian basis, patterns, scaler")
    p = sub.add_parser("train", parents=[common], help="train and keep the best-validation checkpoint")
    p.add_argument("--epochs", type=int)
    p = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on one split")
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--filter-threshold", type=float, dest="filter_threshold")
    p = sub.add_parser("export-attention", parents=[common], help="dump attention maps as JSON lines")
    p.add_argument("--checkpoint")
    p.add_argument("--sample-index", type=int, default=0, dest="sample_index")
    p.add_argument("--output")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        overrides = {"seed": args.seed, "out_dir": args.out_dir, "epochs": getattr(args, "epochs", None)}
        cfg = RunConfig.load(args.config, overrides)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
