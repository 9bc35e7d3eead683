import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from imgqsar import experiment as E
from imgqsar.catalog import CYTOTOXICITY_SETS
from imgqsar.experiment import ExperimentConfig, RunStore, list_runs, run_experiment
from imgqsar.report import PREDICTION_R2_BANDS, make_report

from conftest import SMALL_SMILES, activity_row

EXTRA_SMILES = ["CCCCC", "CCCCO", "CCCN", "c1ccccc1N", "c1ccccc1C", "CC(C)C", "CCC(=O)O", "OCC(O)CO", "CCOCC", "NCCN",
                "c1ccoc1", "c1ccsc1"]


def snapshot(root: Path) -> dict:
    return {str(p.relative_to(root)): (p.stat().st_mtime_ns, p.read_bytes())
            for p in sorted(root.rglob("*")) if p.is_file()}


def tiny_config(tmp_path, **kw) -> ExperimentConfig:
    base = dict(name="tiny", datasets=["cMet"], repetitions=2, families=["rf", "dnn", "convnet"],
                fingerprint_bits=[128, 2048], architectures=["AlexNet"], heads=["vanilla"], pretrained=False,
                grid={"lr0": [0.001], "decay": [0.6], "step": [25], "augmentation": [0, 1], "batch": [16]},
                train={"max_epochs": 2}, dnn={"max_epochs": 20, "patience": 5}, save_weights=False,
                output_root=str(tmp_path / "store"), offline=True, jobs=1)
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def tiny_store(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("exp")
    cfg = tiny_config(tmp)
    delta = run_experiment(cfg)
    return cfg, delta


def synthetic_raw_dir(path: Path, names, n=30):
    path.mkdir(parents=True, exist_ok=True)
    smiles = SMALL_SMILES + EXTRA_SMILES
    for k, name in enumerate(names):
        rng = np.random.default_rng(k)
        rows = [activity_row(f"CHEMBL{k}{i:03d}", smiles[i % len(smiles)] + "C" * (i // len(smiles)),
                             float(10 ** rng.uniform(1, 4))) for i in range(n)]
        (path / f"{name}.jsonl").write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    return path


class TestConfig:
    def test_unknown_dataset(self):
        with pytest.raises(ValueError, match="catalog"):
            ExperimentConfig(datasets=["Mars"])

    def test_repetitions(self):
        with pytest.raises(ValueError):
            ExperimentConfig(repetitions=0)

    def test_from_json_overrides(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"datasets": ["cMet"], "repetitions": 3}))
        cfg = ExperimentConfig.from_json(p, repetitions=5, jobs=None)
        assert cfg.repetitions == 5 and cfg.jobs == 1

    def test_unknown_field(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"bogus": 1}))
        with pytest.raises(ValueError, match="bogus"):
            ExperimentConfig.from_json(p)

    def test_shipped_desk_config_valid(self):
        cfg = ExperimentConfig.from_json(Path(__file__).parents[1] / "configs" / "desk.json")
        assert cfg.repetitions >= 1

    def test_run_hash_changes_with_params(self):
        a = E.RunSpec("d", 0, "rf", "rf-128", {"nbits": 128}, 0)
        b = E.RunSpec("d", 0, "rf", "rf-128", {"nbits": 128, "x": 1}, 0)
        assert a.run_id != b.run_id and a.run_id.startswith("d/rep0/rf-128-")


class TestRunExperiment:
    def test_expected_runs(self, tiny_store):
        cfg, delta = tiny_store
        assert delta["failed"] == []
        df = list_runs(cfg.output_root)
        counts = df.groupby("family").size().to_dict()
        # per repetition: baseline, 2 RF, 2 DNN, 2 ConvNet cells, 1 scramble, 1 ensemble
        assert counts == {"mean_baseline": 2, "rf": 4, "dnn": 4, "convnet": 4, "scramble": 2, "ensemble": 2}
        assert (df["status"] == "complete").all()

    def test_artifacts_carry_hash_and_seed(self, tiny_store):
        cfg, _ = tiny_store
        store = RunStore(cfg.output_root)
        for rid, meta in store.iter_runs():
            assert meta["config_hash"] in rid and "split_seed" in meta
            assert (store.run_dir(rid) / "predictions.csv").exists()
            assert (store.run_dir(rid) / "metrics.json").exists()
            if meta["family"] in ("convnet", "dnn", "scramble"):
                assert (store.run_dir(rid) / "trace.csv").exists()

    def test_each_repetition_redraws_split(self, tiny_store):
        cfg, _ = tiny_store
        d = Path(cfg.output_root) / "datasets" / "cMet" / "splits"
        a = json.loads((d / "rep0.json").read_text())
        b = json.loads((d / "rep1.json").read_text())
        assert a["test_ids"] != b["test_ids"]

    def test_ensemble_is_average_of_members(self, tiny_store):
        cfg, _ = tiny_store
        store = RunStore(cfg.output_root)
        for rid, meta in store.iter_runs():
            if meta["family"] != "ensemble":
                continue
            rf_id, conv_id = meta["members"]
            e = pd.read_csv(store.run_dir(rid) / "predictions.csv").set_index("compound_id")
            a = pd.read_csv(store.run_dir(rf_id) / "predictions.csv").set_index("compound_id")
            b = pd.read_csv(store.run_dir(conv_id) / "predictions.csv").set_index("compound_id")
            assert np.allclose(e["predicted"], (a.loc[e.index, "predicted"] + b.loc[e.index, "predicted"]) / 2)

    def test_rerun_is_noop(self, tiny_store):
        cfg, _ = tiny_store
        root = Path(cfg.output_root)
        before = snapshot(root)
        delta = run_experiment(cfg)
        assert delta["created"] == [] and delta["failed"] == []
        assert snapshot(root) == before

    def test_analysis_written(self, tiny_store):
        cfg, _ = tiny_store
        a = Path(cfg.output_root) / "analysis"
        assert (a / "family_fit.json").exists()
        fit = json.loads((a / "family_fit.json").read_text())
        assert fit["n"] == 8 and fit["reference_levels"]["model"] == "convnet"
        assert (a / "arch_observations.csv").exists()

    def test_index(self, tiny_store):
        cfg, _ = tiny_store
        idx = json.loads((Path(cfg.output_root) / "index.json").read_text())
        assert len(idx) == len(list_runs(cfg.output_root))


class TestResume:
    def test_interrupted_grid_resumes(self, tmp_path):
        cfg = tiny_config(tmp_path, families=["convnet"], repetitions=1, y_scramble=False,
                          grid={"lr0": [0.001, 0.0001], "decay": [0.6], "step": [25], "augmentation": [0],
                                "batch": [16]})
        seen = []

        def stop_after_one(msg):
            seen.append(msg)
            if len(seen) == 3:  # baseline, first grid cell, then interrupt the second
                raise KeyboardInterrupt

        with pytest.raises(KeyboardInterrupt):
            run_experiment(cfg, progress=stop_after_one)
        root = Path(cfg.output_root)
        done = {p.parent for p in root.glob("runs/*/rep0/*/run.json")}
        assert len(done) == 2
        before = {p: p.read_bytes() for d in done for p in d.iterdir()}
        delta = run_experiment(cfg)
        assert len(delta["created"]) == 1 and len(delta["skipped"]) == 2
        assert all(p.read_bytes() == b for p, b in before.items())

    def test_failure_recorded_and_others_continue(self, tmp_path, monkeypatch):
        real = E.train_rf

        def flaky(model, train):
            if train[0].shape[1] == 128:
                raise MemoryError("simulated exhaustion")
            return real(model, train)

        monkeypatch.setattr(E, "train_rf", flaky)
        cfg = tiny_config(tmp_path, families=["rf"], repetitions=1)
        delta = run_experiment(cfg)
        assert len(delta["failed"]) == 1
        df = list_runs(cfg.output_root)
        failed = df[df["status"] == "failed"]
        assert len(failed) == 1 and "rf-128" in failed["run_id"].iloc[0]
        meta = json.loads((Path(cfg.output_root) / "runs" / failed["run_id"].iloc[0] / "run.json").read_text())
        assert meta["stage"] == "rf" and "simulated" in meta["error"]
        assert (df[df["family"] == "rf"]["status"] == "complete").sum() == 1
        monkeypatch.setattr(E, "train_rf", real)
        delta = run_experiment(cfg)
        assert len(delta["created"]) == 1  # failed run retried, completed ones kept

    def test_offline_cold_cache_reported(self, tmp_path):
        cfg = tiny_config(tmp_path, datasets=["A2780"], families=["rf"], cache_dir=str(tmp_path / "empty"))
        delta = run_experiment(cfg)
        assert delta["failed"] and "A2780/prepare" in delta["failed"][0]


class TestRfAcrossCellLines:
    def test_ten_repetitions_eight_sets(self, tmp_path):
        raw = synthetic_raw_dir(tmp_path / "raw", CYTOTOXICITY_SETS)
        cfg = ExperimentConfig(datasets=list(CYTOTOXICITY_SETS), repetitions=10, families=["rf"],
                               fingerprint_bits=[2048], output_root=str(tmp_path / "s"), raw_dir=str(raw),
                               offline=True)
        delta = run_experiment(cfg)
        assert delta["failed"] == []
        preds = list(Path(cfg.output_root).glob("runs/*/rep*/rf-2048-*/predictions.csv"))
        assert len(preds) == 80


class TestMultitask:
    def test_two_task_group(self, tmp_path):
        raw = synthetic_raw_dir(tmp_path / "raw", ["COX-1", "COX-2"], n=24)
        # make the two tasks overlap on half of their compounds
        rows2 = [json.loads(l) for l in (raw / "COX-2.jsonl").read_text().splitlines()]
        for r in rows2[:12]:
            r["molecule_chembl_id"] = r["molecule_chembl_id"].replace("CHEMBL1", "CHEMBL0", 1)
        (raw / "COX-2.jsonl").write_text("\n".join(json.dumps(r) for r in rows2) + "\n")
        cfg = tiny_config(tmp_path, datasets=[], raw_dir=str(raw), repetitions=1,
                          multitask=[{"name": "COX", "tasks": ["COX-1", "COX-2"]}])
        delta = run_experiment(cfg)
        assert delta["failed"] == []
        (meta,) = [m for _, m in RunStore(cfg.output_root).iter_runs()]
        assert meta["family"] == "multitask" and set(meta["task_rmse"]) == {"COX-1", "COX-2"}
        out = make_report(cfg.output_root, tmp_path / "rep")
        assert "multitask_table" in out["written"]

    def test_bad_group(self):
        with pytest.raises(ValueError):
            ExperimentConfig(multitask=[{"name": "X", "tasks": ["COX-1"]}])


class TestListRuns:
    def test_empty(self, tmp_path):
        assert list_runs(tmp_path).empty

    def test_filter_and_corrupt(self, tiny_store, tmp_path):
        cfg, _ = tiny_store
        df = list_runs(cfg.output_root, dataset="cMet")
        assert len(df) and (df["dataset"] == "cMet").all()
        assert list_runs(cfg.output_root, dataset="A2780").empty
        assert (list_runs(cfg.output_root, family="rf")["family"] == "rf").all()
        bad = tmp_path / "runs" / "KB" / "rep0" / "rf-2048-abc"
        bad.mkdir(parents=True)
        (bad / "run.json").write_text("{not json")
        df = list_runs(tmp_path)
        assert df["status"].tolist() == ["corrupt"] and df["dataset"].tolist() == ["KB"]

    def test_diverged_shows_epoch(self, tmp_path):
        spec = E.RunSpec("KB", 0, "convnet", "AlexNet-extended", {}, 0)
        from imgqsar.train import TrainingDiverged
        E._fail_run(RunStore(tmp_path), spec, "convnet", TrainingDiverged(17))
        df = list_runs(tmp_path)
        assert df["status"].iloc[0] == "diverged" and df["abort_epoch"].iloc[0] == 17


class TestReport:
    def test_full_bundle(self, tiny_store, tmp_path):
        cfg, _ = tiny_store
        out = make_report(cfg.output_root, tmp_path / "report")
        for png in (tmp_path / "report").glob("*.png"):
            assert png.with_suffix(".csv").exists(), png.name
        assert "architectures" in out["written"] and "target_families" in out["written"]
        fam = pd.read_csv(tmp_path / "report" / "target_families.csv")
        assert "mean_baseline" in set(fam["family"])
        arch = pd.read_csv(tmp_path / "report" / "architectures.csv")
        assert "mean_baseline" in set(arch["model"])
        index = (tmp_path / "report" / "index.md").read_text()
        assert "cell_line_families" in index  # skipped: no cell-line sets in this store

    def test_rf_only(self, tmp_path):
        cfg = tiny_config(tmp_path, families=["rf"], repetitions=2)
        run_experiment(cfg)
        out = make_report(cfg.output_root, tmp_path / "report")
        fam = pd.read_csv(tmp_path / "report" / "target_families.csv")
        assert set(fam["family"]) == {"rf", "mean_baseline"}
        assert "architectures" in out["skipped"] and "ConvNet" in out["skipped"]["architectures"]
        assert (tmp_path / "report" / "index.md").exists()

    def test_published_bands(self):
        # prose reports R2 0.80-0.89; the figure caption gives 0.72-0.84
        assert PREDICTION_R2_BANDS == {"text": (0.80, 0.89), "figure": (0.72, 0.84)}

    def test_empty_store(self, tmp_path):
        out = make_report(tmp_path / "nothing", tmp_path / "r")
        assert out["written"] == [] and "all" in out["skipped"]
