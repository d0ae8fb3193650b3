"""Smoke test for the `tov` extension module.

Build it first (`cargo build --release -p tov-py`), then run
`python3 python/smoke_test.py`. Set TOV_LIB to point at a specific
shared library.
"""

import importlib.util
import json
import math
import os
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_module(tmp):
    candidates = [os.environ.get("TOV_LIB")] if os.environ.get("TOV_LIB") else [
        ROOT / "target" / "release" / "libtov.so",
        ROOT / "target" / "debug" / "libtov.so",
        ROOT / "target" / "release" / "libtov.dylib",
    ]
    lib = next((Path(c) for c in candidates if c and Path(c).exists()), None)
    if lib is None:
        sys.exit("libtov not found; run `cargo build --release -p tov-py` first")
    target = Path(tmp) / "tov.so"
    shutil.copy(lib, target)
    spec = importlib.util.spec_from_file_location("tov", target)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def close(a, b, tol=1e-9):
    assert abs(a - b) <= tol, (a, b)


def main():
    with tempfile.TemporaryDirectory() as tmp:
        tov = load_module(tmp)

        assert tov.param_count(pos_table_tokens=785) == 5526720
        assert tov.param_count() == 5395392

        close(tov.invariance_loss([[1.0, 1.0]], [[-1.0, 1.0]]), 4.0)
        close(tov.covariance_loss([[1.0, 1.0], [-1.0, -1.0]]), 4.0)
        close(tov.temporal_loss([0.0], [1]), math.log(2.0), 1e-11)
        close(tov.pearson([1.0, 2.0, 3.0], [1.0, 3.0, 2.0]), 0.5)
        close(tov.cosine_similarity_matrix([[1.0, 1.0], [1.0, 0.0]])[0][1], 1 / math.sqrt(2))
        assert tov.f1_scores([0, 1, 2], [0, 1, 2], 3)["macro"] == 1.0

        data = Path(tmp) / "dots.obsv"
        frames = tov.gen_synthetic(str(data), episodes=2, episode_len=10, size=16)
        store = tov.ObservationStore.read(str(data))
        assert frames == 20 and store.episode_lengths() == [10, 10]
        assert store.shape == (16, 16, 3)
        assert len(store.frame(0, 0)) == 3 * 16 * 16

        out = Path(tmp) / "run"
        config = {
            "model": {"image_size": 16, "patch_size": 8, "embed_dim": 8, "depth": 1, "heads": 2},
            "ssl": {"expander_dims": [8, 8], "epochs": 1, "warmup_epochs": 0, "batch_size": 4,
                    "optimizer": "adamw", "base_lr": 0.01},
        }
        log = tov.pretrain(str(data), str(out), json.dumps(config))
        assert log and all(math.isfinite(r["total"]) for r in log)

        enc = tov.Encoder.load(str(out / "checkpoint_epoch1.tovp"))
        y = enc.encode(store, [(0, t) for t in range(6)])
        assert len(y) == 6 and len(y[0]) == enc.embed_dim == 8

        summary = json.loads(tov.diagnose(str(out / "checkpoint_epoch1.tovp"), str(data),
                                          sample_n=12, out=str(Path(tmp) / "diag")))
        assert summary["n"] == 12 and summary["d"] == 8
        assert (Path(tmp) / "diag" / "spectrum.csv").exists()

        try:
            tov.param_count(heads=5)
        except ValueError as e:
            assert "heads" in str(e)
        else:
            raise AssertionError("bad head count accepted")
    print("python smoke test passed")


if __name__ == "__main__":
    main()
