import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from imgqsar.cli import build_parser, main
from imgqsar.data import DESK_FIXTURES

from conftest import SMALL_SMILES, activity_row

CMET = str(DESK_FIXTURES["cMet"])


class TestParser:
    def test_train_defaults(self):
        a = build_parser().parse_args(["train", "--input", "x.csv", "--out", "o"])
        assert a.family == "convnet" and a.head == "extended" and a.grid is False and a.patience == 250

    def test_grid_verb(self):
        a = build_parser().parse_args(["grid", "--input", "x.csv", "--out", "o"])
        assert a.func.__name__ == "cmd_grid"

    def test_requires_verb(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args([])

    def test_bad_family(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["train", "--input", "x", "--out", "o", "--family", "svm"])


class TestVerbs:
    def test_fingerprint(self, tmp_path, capsys):
        assert main(["fingerprint", "--input", CMET, "--out", str(tmp_path / "fp"), "--nbits", "256"]) == 0
        assert (tmp_path / "fp.npz").exists()
        assert "x 256" in capsys.readouterr().out

    def test_depict(self, tmp_path):
        assert main(["depict", "--input", CMET, "--out", str(tmp_path / "img")]) == 0
        assert len(list((tmp_path / "img").glob("*.png"))) == 24

    def test_curate_from_raw(self, tmp_path, capsys):
        raw = tmp_path / "raw.jsonl"
        raw.write_text("\n".join(json.dumps(activity_row(f"CHEMBL{i}", s, 100.0 * (i + 1)))
                                 for i, s in enumerate(SMALL_SMILES)) + "\n")
        out = tmp_path / "cur.csv"
        assert main(["curate", "--dataset", "KB", "--raw", str(raw), "--out", str(out)]) == 0
        assert len(pd.read_csv(out)) == len(SMALL_SMILES)
        assert "curated" in capsys.readouterr().out

    def test_fetch_offline_cold_cache(self, tmp_path, capsys):
        rc = main(["fetch", "--dataset", "KB", "--cache-dir", str(tmp_path), "--offline"])
        assert rc == 1 and "error" in capsys.readouterr().err

    def test_train_rf_then_evaluate_and_ensemble(self, tmp_path, capsys):
        rf, dnn = tmp_path / "rf", tmp_path / "dnn"
        assert main(["train", "--family", "rf", "--input", CMET, "--out", str(rf), "--nbits", "512"]) == 0
        assert main(["train", "--family", "dnn", "--input", CMET, "--out", str(dnn), "--nbits", "512",
                     "--max-epochs", "5"]) == 0
        m = json.loads((rf / "metrics.json").read_text())
        assert m["rmse"] >= 0 and "baseline_rmse" in m
        capsys.readouterr()
        assert main(["evaluate", "--predictions", str(rf / "predictions.csv"), "--family", "rf"]) == 0
        assert "rmse" in json.loads(capsys.readouterr().out)
        out = tmp_path / "ens.csv"
        assert main(["ensemble", "--a", str(rf / "predictions.csv"), "--b", str(dnn / "predictions.csv"),
                     "--family-b", "dnn", "--out", str(out)]) == 0
        e, a, b = (pd.read_csv(p) for p in (out, rf / "predictions.csv", dnn / "predictions.csv"))
        assert np.allclose(e["predicted"], (a["predicted"] + b["predicted"]) / 2)

    def test_train_convnet_smoke(self, tmp_path):
        out = tmp_path / "conv"
        rc = main(["train", "--input", CMET, "--out", str(out), "--no-pretrained", "--max-epochs", "1",
                   "--batch", "4", "--head", "vanilla"])
        assert rc == 0
        assert (out / "trace.csv").exists() and (out / "predictions.csv").exists()

    def test_run_list_report(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"datasets": ["cMet"], "repetitions": 1, "families": ["rf"],
                                   "fingerprint_bits": [256], "offline": True}))
        store = tmp_path / "store"
        assert main(["run", str(cfg), "--output-root", str(store)]) == 0
        assert "created 2" in capsys.readouterr().out
        assert main(["run", str(cfg), "--output-root", str(store)]) == 0
        assert "created 0, skipped 2" in capsys.readouterr().out
        assert main(["list", "--store", str(store), "--family", "rf", "--json"]) == 0
        rows = json.loads(capsys.readouterr().out)
        assert len(rows) == 1 and rows[0]["status"] == "complete"
        assert main(["analyze", "--store", str(store)]) == 0
        assert main(["report", "--store", str(store), "--out", str(tmp_path / "rep")]) == 0
        assert (tmp_path / "rep" / "index.md").exists()

    def test_list_empty(self, tmp_path, capsys):
        assert main(["list", "--store", str(tmp_path)]) == 0
        assert "no runs" in capsys.readouterr().out
