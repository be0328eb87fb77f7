"""
The file-based pipeline
=======================

Runs every command of the ``pdformer`` tool in a temporary directory with a
small config: synthesize data, preprocess, train, evaluate, and dump the
attention maps. The same steps work from a shell, e.g.
``pdformer train --config run.toml --out-dir run``.
"""

import json
import tempfile
from pathlib import Path

from pdformer.cli import main

CONFIG = """
synth_nodes = 6
synth_days = 2
interval_minutes = 15
N_p = 8
T = 8
T_prime = 4
d = 16
d_sk = 32
epochs = 5
batch_size = 16
lr = 0.005
"""

with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    (tmp / "run.toml").write_text(CONFIG)
    common = ["--config", str(tmp / "run.toml"), "--out-dir", str(tmp / "run")]
    for cmd, extra in [
        ("synth", []),
        ("preprocess", []),
        ("train", []),
        ("evaluate", ["--split", "test"]),
        ("export-attention", ["--sample-index", "0"]),
    ]:
        print(f"$ pdformer {cmd} {' '.join(extra)}")
        code = main([cmd, *common, *extra])
        assert code == 0, f"{cmd} exited with {code}"

    print("\nartifacts:", sorted(p.name for p in (tmp / "run").iterdir()))
    manifest = json.loads((tmp / "run" / "manifest.json").read_text())
    print("preprocessing digests:", {k: v[:12] for k, v in manifest["artifacts"].items()})
    first = json.loads((tmp / "run" / "attention_0.jsonl").read_text().splitlines()[0])
    print("first attention record:", {k: first[k] for k in ("layer", "head_kind", "head_index", "slice_or_node")})
