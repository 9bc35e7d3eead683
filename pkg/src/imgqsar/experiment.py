"""Declarative experiment runner over a resumable, content-addressed run store.

Store layout (all paths relative to ``output_root``)::

    datasets/<name>/curated.csv          compound_id,smiles,pic50
    datasets/<name>/curation.json
    datasets/<name>/images/              <compound_id>.png + manifest.json
    datasets/<name>/fp<nbits>.npz|.json
    datasets/<name>/splits/rep<r>.json
    runs/<name>/rep<r>/<model>-<hash>/   run.json, metrics.json, predictions.csv[, trace.csv, weights.pt]
    analysis/                            factorial fits and diagnostics
    index.json                           run summary, single writer
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import tempfile
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd
import torch

from . import data as D
from .catalog import CATALOG
from .depict import RenderParams, load_images, render_dataset
from .evaluate import (PredictionSet, UndefinedCorrelation, ensemble_average, mean_predictor_baseline,
                       regression_metrics, rmse)
from .factorial import OBSERVATION_COLUMNS, anova_effects, diagnostics, encode_design, fit_ols
from .fingerprints import fp_matrix, load_matrix, save_matrix
from .models import (AssetStore, BackboneSpec, DnnSpec, HeadSpec, build_fp_dnn, build_image_regressor, build_rf,
                     save_model)
from .data import CuratedCompound
from .train import (ArrayFeeder, DnnTrainConfig, HyperparamGrid, ImageFeeder, TrainConfig, TrainingDiverged,
                    multitask_labels, predict, train_dnn, train_image_model, train_multitask, train_rf, y_scramble)

log = logging.getLogger(__name__)

FAMILIES = ("rf", "dnn", "convnet")
JOBS_ENV = "IMGQSAR_JOBS"


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    datasets: list = field(default_factory=lambda: list(D.DESK_FIXTURES))
    max_compounds: int | None = None
    repetitions: int = 10
    seed: int = 0
    families: list = field(default_factory=lambda: list(FAMILIES))
    fingerprint_bits: list = field(default_factory=lambda: [128, 256, 512, 1024, 2048])
    architectures: list = field(default_factory=lambda: ["AlexNet", "DenseNet-201", "ResNet-152", "VGG-19-bn"])
    heads: list = field(default_factory=lambda: ["vanilla", "extended"])
    pretrained: bool = True
    grid: dict | None = None  # HyperparamGrid fields; None means the full 120-cell grid
    train: dict = field(default_factory=dict)  # TrainConfig overrides (max_epochs, patience, ...)
    dnn: dict = field(default_factory=dict)  # DnnTrainConfig overrides
    y_scramble: bool = True
    multitask: list = field(default_factory=list)  # [{"name": "COX", "tasks": ["COX-1", "COX-2"]}]
    save_weights: bool = True
    output_root: str = "runs"
    offline: bool = False
    cache_dir: str | None = None
    raw_dir: str | None = None  # directory of <name>.jsonl raw activity dumps
    asset_dir: str | None = None
    density: int = 800
    jobs: int = 1

    def __post_init__(self):
        unknown = [d for d in self.datasets if d not in CATALOG and d not in D.DESK_FIXTURES]
        if unknown:
            raise ValueError(f"data sets not in catalog: {unknown}")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        bad = [f for f in self.families if f not in FAMILIES]
        if bad:
            raise ValueError(f"unknown model families: {bad}")
        for group in self.multitask:
            missing = [t for t in group.get("tasks", []) if t not in CATALOG and t not in D.DESK_FIXTURES]
            if missing or len(group.get("tasks", [])) < 2 or not group.get("name"):
                raise ValueError(f"multi-task group needs a name and >= 2 known tasks: {group}")

    @classmethod
    def from_json(cls, path: str | Path, **overrides) -> "ExperimentConfig":
        raw = json.loads(Path(path).read_text())
        raw.pop("$schema", None)
        raw.update({k: v for k, v in overrides.items() if v is not None})
        known = {f.name for f in fields(cls)}
        extra = sorted(set(raw) - known)
        if extra:
            raise ValueError(f"unknown config fields: {extra}")
        return cls(**raw)

    def hyper_grid(self) -> HyperparamGrid:
        return HyperparamGrid(**{k: tuple(v) for k, v in (self.grid or {}).items()})

    def base_train_config(self) -> TrainConfig:
        return TrainConfig(**self.train)

    def dnn_config(self) -> DnnTrainConfig:
        return DnnTrainConfig(**self.dnn)


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:12]


def _file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


def atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_if_changed(path: Path, text: str) -> bool:
    if path.exists() and path.read_text() == text:
        return False
    atomic_write_text(path, text)
    return True


@dataclass
class RunSpec:
    dataset: str
    repetition: int
    family: str  # rf, dnn, convnet, ensemble, mean_baseline, scramble
    model: str  # human label: rf-2048, AlexNet-extended, ...
    params: dict
    split_seed: int

    @property
    def config_hash(self) -> str:
        return _hash({"family": self.family, "model": self.model, "params": self.params, "split_seed": self.split_seed})

    @property
    def run_id(self) -> str:
        return f"{self.dataset}/rep{self.repetition}/{self.model}-{self.config_hash}"


class RunStore:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    def dataset_dir(self, name: str) -> Path:
        return self.root / "datasets" / name

    def run_dir(self, run_id: str) -> Path:
        return self.root / "runs" / run_id

    def is_complete(self, run_id: str) -> bool:
        meta = self.run_dir(run_id) / "run.json"
        if not meta.exists():
            return False
        try:
            return json.loads(meta.read_text()).get("status") == "complete"
        except json.JSONDecodeError:
            return False

    def iter_runs(self):
        base = self.root / "runs"
        if not base.exists():
            return
        for meta in sorted(base.glob("*/rep*/*/run.json")):
            run_id = str(meta.parent.relative_to(base))
            try:
                yield run_id, json.loads(meta.read_text())
            except (json.JSONDecodeError, OSError) as exc:
                yield run_id, {"status": "corrupt", "error": str(exc)}

    def predictions(self, run_id: str, family: str) -> PredictionSet:
        return PredictionSet.read_csv(self.run_dir(run_id) / "predictions.csv", family)

    def update_index(self) -> bool:
        rows = [dict(run_id=rid, **{k: meta.get(k) for k in
                ("dataset", "family", "model", "repetition", "config_hash", "status", "best_val_rmse", "test_rmse")})
                for rid, meta in self.iter_runs()]
        return write_if_changed(self.root / "index.json", json.dumps(rows, indent=1, sort_keys=True, default=str))


# -- dataset stages ----------------------------------------------------------------------

def stage_curate(config: ExperimentConfig, store: RunStore, name: str) -> Path:
    out = store.dataset_dir(name) / "curated.csv"
    if out.exists():
        return out
    if name in D.DESK_FIXTURES:
        curated = D.load_fixture(name, config.max_compounds, seed=config.seed)
        report = {"source": "vendored fixture", "n_curated": len(curated)}
    else:
        entry = CATALOG[name]
        if config.raw_dir and (Path(config.raw_dir) / f"{name}.jsonl").exists():
            records = D.read_records_jsonl(Path(config.raw_dir) / f"{name}.jsonl", entry.source_id)
        else:
            records = D.fetch_bioactivities(entry, config.cache_dir, offline=config.offline)
        curated, rep = D.curate(records)
        if len(curated) != entry.expected_count:
            log.warning("%s: %d curated compounds, catalog expects %d", name, len(curated), entry.expected_count)
        if config.max_compounds and len(curated) > config.max_compounds:
            idx = np.sort(np.random.Generator(np.random.PCG64(config.seed)).choice(
                len(curated), config.max_compounds, replace=False))
            curated = [curated[i] for i in idx]
        report = {"source": entry.source_id, "n_raw": rep.n_raw, "n_filtered": rep.n_filtered,
                  "n_pairs": rep.n_pairs, "n_curated": rep.n_curated, "expected": entry.expected_count,
                  "rejected_values": rep.rejected_values, "rejected_structures": dict(rep.rejected_structures)}
    D.write_curated_csv(curated, out)
    atomic_write_text(out.with_name("curation.json"), json.dumps(report, indent=1, sort_keys=True))
    return out


def stage_depict(config: ExperimentConfig, store: RunStore, name: str) -> Path:
    img_dir = store.dataset_dir(name) / "images"
    if (img_dir / "manifest.json").exists():
        return img_dir
    curated = D.read_curated_csv(store.dataset_dir(name) / "curated.csv")
    render_dataset(curated, RenderParams(density=config.density), img_dir, workers=config.jobs)
    return img_dir


def stage_fingerprints(config: ExperimentConfig, store: RunStore, name: str) -> None:
    curated = None
    for nbits in config.fingerprint_bits:
        path = store.dataset_dir(name) / f"fp{nbits}"
        if path.with_suffix(".json").exists():
            continue
        curated = curated or D.read_curated_csv(store.dataset_dir(name) / "curated.csv")
        save_matrix(fp_matrix(curated, 2, nbits), path)


def stage_split(config: ExperimentConfig, store: RunStore, name: str, rep: int) -> D.DatasetSplit:
    path = store.dataset_dir(name) / "splits" / f"rep{rep}.json"
    if path.exists():
        return D.DatasetSplit.from_json(path.read_text())
    curated = D.read_curated_csv(store.dataset_dir(name) / "curated.csv")
    split = D.split_dataset(curated, config.seed + rep)
    atomic_write_text(path, split.to_json())
    return split


# -- run execution ----------------------------------------------------------------------------

class _DatasetCache:
    def __init__(self, store: RunStore, name: str):
        self.store, self.name = store, name
        self.curated = D.read_curated_csv(store.dataset_dir(name) / "curated.csv")
        self.labels = {c.compound_id: c.pic50 for c in self.curated}
        self._images = None
        self._fps = {}

    def _load_images(self) -> dict:
        if self._images is None:
            img_dir = self.store.dataset_dir(self.name) / "images"
            manifest = json.loads((img_dir / "manifest.json").read_text())
            ok = list(manifest["images"])
            self._images = dict(zip(ok, load_images(img_dir, ok))) if ok else {}
        return self._images

    def images(self, ids):
        imgs = self._load_images()
        return np.stack([imgs[i] for i in ids])

    def fingerprints(self, nbits, ids):
        if nbits not in self._fps:
            m = load_matrix(self.store.dataset_dir(self.name) / f"fp{nbits}")
            self._fps[nbits] = dict(zip(m.compound_ids, m.rows))
        return np.stack([self._fps[nbits][i] for i in ids]).astype(np.float32)

    def rendered(self, ids):
        imgs = self._load_images()
        return [i for i in ids if i in imgs]


def _finish_run(store: RunStore, spec: RunSpec, preds: PredictionSet, extra: dict) -> dict:
    run_dir = store.run_dir(spec.run_id)
    run_dir.mkdir(parents=True, exist_ok=True)
    preds.write_csv(run_dir / "predictions.csv")
    metrics = {"rmse": rmse(preds), "n": len(preds)}
    try:
        metrics.update(regression_metrics(preds).as_dict())
    except (UndefinedCorrelation, ValueError) as exc:
        metrics["correlation_note"] = str(exc)
    atomic_write_text(run_dir / "metrics.json", json.dumps(metrics, indent=1, sort_keys=True))
    meta_path = run_dir / "run.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}  # training trace metadata
    meta.pop("error", None)
    meta.update({"run_id": spec.run_id, "dataset": spec.dataset, "family": spec.family, "model": spec.model,
                 "repetition": spec.repetition, "split_seed": spec.split_seed, "params": spec.params,
                 "config_hash": spec.config_hash, "test_rmse": metrics["rmse"], "status": "complete"})
    meta.update(extra)
    atomic_write_text(run_dir / "run.json", json.dumps(meta, indent=1, sort_keys=True, default=str))
    return meta


def _fail_run(store: RunStore, spec: RunSpec, stage: str, exc: BaseException) -> dict:
    meta = {"run_id": spec.run_id, "dataset": spec.dataset, "family": spec.family, "model": spec.model,
            "repetition": spec.repetition, "config_hash": spec.config_hash, "stage": stage,
            "status": "diverged" if isinstance(exc, TrainingDiverged) else "failed", "error": str(exc)}
    if isinstance(exc, TrainingDiverged):
        meta["abort_epoch"] = exc.epoch
    atomic_write_text(store.run_dir(spec.run_id) / "run.json", json.dumps(meta, indent=1, sort_keys=True))
    return meta


def _execute(config: ExperimentConfig, store: RunStore, cache: _DatasetCache, split: D.DatasetSplit,
             spec: RunSpec, assets: AssetStore) -> dict:
    run_dir = store.run_dir(spec.run_id)
    curated = cache.curated
    labels = cache.labels
    if spec.params.get("y_scramble"):
        scrambled = y_scramble(curated, split, seed=spec.split_seed)
        labels = {c.compound_id: c.pic50 for c in scrambled}
    true = cache.labels
    tr, va, te = split.train_ids, split.val_ids, split.test_ids
    if spec.family in ("convnet", "scramble"):
        tr, va, te = cache.rendered(tr), cache.rendered(va), cache.rendered(te)
    ytr = np.array([labels[i] for i in tr])
    yva = np.array([labels[i] for i in va])
    yte = np.array([true[i] for i in te])
    extra: dict = {}
    fam = spec.family

    if fam == "mean_baseline":
        preds = mean_predictor_baseline(ytr, (te, yte), spec.run_id)
    elif fam == "rf":
        nbits = spec.params["nbits"]
        model, secs = train_rf(build_rf(seed=spec.split_seed), (cache.fingerprints(nbits, tr), ytr))
        pred = model.predict(cache.fingerprints(nbits, te))
        preds = PredictionSet(spec.run_id, "rf", te, yte, pred)
        extra["wall_seconds"] = secs
    elif fam == "dnn":
        nbits = spec.params["nbits"]
        cfg = replace(config.dnn_config(), seed=spec.split_seed)
        torch.manual_seed(spec.split_seed)
        model = build_fp_dnn(DnnSpec(input_dim=nbits))
        model, trace = train_dnn(model, (cache.fingerprints(nbits, tr), ytr), (cache.fingerprints(nbits, va), yva), cfg)
        pred = predict(model, ArrayFeeder(cache.fingerprints(nbits, te)))[:, 0]
        preds = PredictionSet(spec.run_id, "dnn", te, yte, pred)
        trace.write(run_dir, {"config": asdict(cfg)})
        extra.update(best_val_rmse=trace.best_val_rmse, best_epoch=trace.best_epoch,
                     stop_reason=trace.stop_reason, wall_seconds=trace.wall_seconds)
        if config.save_weights:
            save_model(model, run_dir, {"seed": spec.split_seed})
    elif fam in ("convnet", "scramble"):
        cfg = TrainConfig(**spec.params["train"])
        torch.manual_seed(cfg.seed)
        model = build_image_regressor(BackboneSpec(spec.params["arch"], pretrained=config.pretrained),
                                      HeadSpec(spec.params["head"]), assets)
        model, trace = train_image_model(model, (cache.images(tr), ytr), (cache.images(va), yva), cfg)
        pred = predict(model, ImageFeeder(cache.images(te)))[:, 0]
        preds = PredictionSet(spec.run_id, "convnet", te, yte, pred)
        trace.write(run_dir, {"config": asdict(cfg), "model": model.metadata()})
        extra.update(best_val_rmse=trace.best_val_rmse, best_epoch=trace.best_epoch,
                     stop_reason=trace.stop_reason, wall_seconds=trace.wall_seconds)
        if config.save_weights:
            save_model(model, run_dir, {"seed": cfg.seed, "data_hash": spec.params.get("data_hash")})
    else:
        raise ValueError(f"cannot execute family {fam}")
    return _finish_run(store, spec, preds, extra)


def _convnet_specs(config: ExperimentConfig, name: str, rep: int, seed: int, data_hash: str) -> list[RunSpec]:
    specs = []
    base = replace(config.base_train_config(), seed=seed)
    for arch in config.architectures:
        for head in config.heads:
            for cfg in config.hyper_grid().configs(base):
                params = {"arch": arch, "head": head, "train": asdict(cfg), "pretrained": config.pretrained,
                          "data_hash": data_hash}
                specs.append(RunSpec(name, rep, "convnet", f"{arch}-{head}", params, seed))
    return specs


def run_experiment(config: ExperimentConfig, progress: Callable[[str], None] | None = None) -> dict:
    """Execute every stage, skipping work whose outputs already exist. Returns created/skipped/failed run ids."""
    store = RunStore(config.output_root)
    store.root.mkdir(parents=True, exist_ok=True)
    write_if_changed(store.root / "config.json", json.dumps(asdict(config), indent=1, sort_keys=True))
    assets = AssetStore(config.asset_dir, offline=config.offline)
    delta = {"created": [], "skipped": [], "failed": []}
    say = progress or (lambda msg: log.info(msg))
    jobs = int(os.environ.get(JOBS_ENV, config.jobs))

    def run_all(specs, cache, split):
        todo = []
        for s in specs:
            if store.is_complete(s.run_id):
                delta["skipped"].append(s.run_id)
            else:
                todo.append(s)

        def one(s):
            say(f"run {s.run_id}")
            try:
                return _execute(config, store, cache, split, s, assets)
            except Exception as exc:  # recorded per run; independent runs continue
                log.error("run %s failed: %s\n%s", s.run_id, exc, traceback.format_exc())
                return _fail_run(store, s, s.family, exc)

        if jobs > 1 and len(todo) > 1:
            with ThreadPoolExecutor(jobs) as pool:
                metas = list(pool.map(one, todo))
        else:
            metas = [one(s) for s in todo]
        for s, m in zip(todo, metas):
            (delta["created"] if m["status"] == "complete" else delta["failed"]).append(s.run_id)
        store.update_index()

    for name in config.datasets:
        try:
            stage_curate(config, store, name)
            if "convnet" in config.families:
                stage_depict(config, store, name)
            if {"rf", "dnn"} & set(config.families):
                stage_fingerprints(config, store, name)
        except Exception as exc:
            log.error("data set %s failed during preparation: %s", name, exc)
            delta["failed"].append(f"{name}/prepare: {exc}")
            continue
        cache = _DatasetCache(store, name)
        data_hash = _file_hash(store.dataset_dir(name) / "curated.csv")
        for rep in range(config.repetitions):
            split = stage_split(config, store, name, rep)
            seed = split.seed
            specs = [RunSpec(name, rep, "mean_baseline", "mean_baseline", {"data_hash": data_hash}, seed)]
            for nbits in config.fingerprint_bits:
                if "rf" in config.families:
                    specs.append(RunSpec(name, rep, "rf", f"rf-{nbits}", {"nbits": nbits, "data_hash": data_hash}, seed))
                if "dnn" in config.families:
                    specs.append(RunSpec(name, rep, "dnn", f"dnn-{nbits}",
                                         {"nbits": nbits, "dnn": asdict(config.dnn_config()),
                                          "data_hash": data_hash}, seed))
            conv = _convnet_specs(config, name, rep, seed, data_hash) if "convnet" in config.families else []
            run_all(specs + conv, cache, split)

            if conv and config.y_scramble:
                best = _best_by_val(store, [s.run_id for s in conv])
                if best is not None:
                    params = dict(best["params"], y_scramble=True)
                    run_all([RunSpec(name, rep, "scramble", f"scramble-{best['model']}", params, seed)], cache, split)

            ens = _ensemble(config, store, name, rep, seed, [s.run_id for s in conv], specs)
            if ens:
                (delta["skipped"] if ens["skipped"] else delta["created"]).append(ens["run_id"])

    for group in config.multitask:
        try:
            run_multitask_group(config, store, group, assets, delta, say)
        except Exception as exc:
            log.error("multi-task group %s failed during preparation: %s", group["name"], exc)
            delta["failed"].append(f"{group['name']}/prepare: {exc}")

    analyze(store)
    store.update_index()
    return delta


def run_multitask_group(config: ExperimentConfig, store: RunStore, group: dict, assets: AssetStore,
                        delta: dict, say: Callable[[str], None]) -> None:
    """One n-task ConvNet per repetition over the union of the tasks' compounds (missing labels masked)."""
    name, tasks = group["name"], list(group["tasks"])
    for t in tasks:
        stage_curate(config, store, t)
    ids, structures, Y = multitask_labels([D.read_curated_csv(store.dataset_dir(t) / "curated.csv") for t in tasks])
    ddir = store.dataset_dir(name)
    labels_path = ddir / "multitask.csv"
    if not labels_path.exists():
        ddir.mkdir(parents=True, exist_ok=True)
        frame = pd.DataFrame(Y, columns=tasks)
        frame.insert(0, "smiles", structures)
        frame.insert(0, "compound_id", ids)
        atomic_write_text(labels_path, frame.to_csv(index=False))
    if not (ddir / "curated.csv").exists():
        first = [CuratedCompound(i, s, float(np.nanmean(y))) for i, s, y in zip(ids, structures, Y)]
        D.write_curated_csv(first, ddir / "curated.csv")
    stage_depict(config, store, name)
    cache = _DatasetCache(store, name)
    row = {i: y for i, y in zip(ids, Y)}
    arch, head = config.architectures[0], config.heads[-1]
    cfg0 = config.hyper_grid().configs(config.base_train_config())[0]
    data_hash = _file_hash(labels_path)
    for rep in range(config.repetitions):
        split = stage_split(config, store, name, rep)
        cfg = replace(cfg0, seed=split.seed)
        spec = RunSpec(name, rep, "multitask", f"{arch}-{head}-x{len(tasks)}",
                       {"arch": arch, "head": head, "tasks": tasks, "train": asdict(cfg), "data_hash": data_hash,
                        "pretrained": config.pretrained}, split.seed)
        if store.is_complete(spec.run_id):
            delta["skipped"].append(spec.run_id)
            continue
        say(f"run {spec.run_id}")
        try:
            _execute_multitask(config, store, cache, split, spec, row, assets)
            delta["created"].append(spec.run_id)
        except Exception as exc:
            log.error("run %s failed: %s", spec.run_id, exc)
            _fail_run(store, spec, "multitask", exc)
            delta["failed"].append(spec.run_id)
    store.update_index()


def _execute_multitask(config, store, cache, split, spec, row, assets) -> dict:
    tasks = spec.params["tasks"]
    tr, va, te = (cache.rendered(p) for p in (split.train_ids, split.val_ids, split.test_ids))
    Y = lambda part: np.stack([row[i] for i in part])
    cfg = TrainConfig(**spec.params["train"])
    torch.manual_seed(cfg.seed)
    model = build_image_regressor(BackboneSpec(spec.params["arch"], pretrained=config.pretrained),
                                  HeadSpec(spec.params["head"], n_tasks=len(tasks)), assets)
    model, trace = train_multitask(model, (cache.images(tr), Y(tr)), (cache.images(va), Y(va)), cfg)
    pred = predict(model, ImageFeeder(cache.images(te)))
    obs = Y(te)
    run_dir = store.run_dir(spec.run_id)
    trace.write(run_dir, {"config": asdict(cfg), "model": model.metadata()})
    task_rmse = {}
    for k, task in enumerate(tasks):
        m = ~np.isnan(obs[:, k])
        ids_k = [i for i, keep in zip(te, m) if keep]
        ps = PredictionSet(spec.run_id, "convnet", ids_k, obs[m, k], pred[m, k])
        ps.write_csv(run_dir / f"predictions_{task}.csv")
        task_rmse[task] = rmse(ps) if len(ps) else math.nan
    if config.save_weights:
        save_model(model, run_dir, {"seed": cfg.seed})
    atomic_write_text(run_dir / "metrics.json", json.dumps({"task_rmse": task_rmse}, indent=1, sort_keys=True))
    meta = json.loads((run_dir / "run.json").read_text())
    meta.update({"run_id": spec.run_id, "dataset": spec.dataset, "family": "multitask", "model": spec.model,
                 "repetition": spec.repetition, "split_seed": spec.split_seed, "params": spec.params,
                 "config_hash": spec.config_hash, "task_rmse": task_rmse,
                 "test_rmse": float(np.nanmean(list(task_rmse.values()))), "best_val_rmse": trace.best_val_rmse,
                 "best_epoch": trace.best_epoch, "status": "complete"})
    atomic_write_text(run_dir / "run.json", json.dumps(meta, indent=1, sort_keys=True, default=str))
    return meta


def _best_by_val(store: RunStore, run_ids: list[str]) -> dict | None:
    metas = [json.loads((store.run_dir(r) / "run.json").read_text()) for r in run_ids
             if (store.run_dir(r) / "run.json").exists()]
    metas = [m for m in metas if m.get("status") == "complete"]
    if not metas:
        return None
    return min(metas, key=lambda m: m.get("best_val_rmse", math.inf))


def _ensemble(config, store, name, rep, seed, conv_ids, specs) -> dict | None:
    """RF (longest fingerprint) + the ConvNet with the lowest test RMSE for this data set and repetition."""
    if "rf" not in config.families or not conv_ids:
        return None
    rf_spec = [s for s in specs if s.family == "rf" and s.params["nbits"] == max(config.fingerprint_bits)][0]
    metas = [json.loads((store.run_dir(r) / "run.json").read_text()) for r in conv_ids]
    metas = [m for m in metas if m.get("status") == "complete"]
    if not metas or not store.is_complete(rf_spec.run_id):
        return None
    best = min(metas, key=lambda m: m["test_rmse"])
    spec = RunSpec(name, rep, "ensemble", "ensemble", {"rf": rf_spec.run_id, "convnet": best["run_id"]}, seed)
    if store.is_complete(spec.run_id):
        return {"run_id": spec.run_id, "skipped": True}
    a = store.predictions(rf_spec.run_id, "rf")
    b = store.predictions(best["run_id"], "convnet")
    common = [i for i in a.compound_ids if i in set(b.compound_ids)]
    keep_a = [a.compound_ids.index(i) for i in common]
    a = PredictionSet(a.run_id, "rf", common, a.observed[keep_a], a.predicted[keep_a])
    keep_b = [b.compound_ids.index(i) for i in common]
    b = PredictionSet(b.run_id, "convnet", common, b.observed[keep_b], b.predicted[keep_b])
    ens = ensemble_average(a, b, spec.run_id)
    _finish_run(store, spec, ens, {"members": [rf_spec.run_id, best["run_id"]]})
    return {"run_id": spec.run_id, "skipped": False}


# -- analysis ------------------------------------------------------------------------------

def _complete_runs(store: RunStore) -> pd.DataFrame:
    rows = [m for _, m in store.iter_runs() if m.get("status") == "complete"]
    return pd.DataFrame(rows)


def arch_observations(runs: pd.DataFrame) -> pd.DataFrame:
    """One response per (data set, architecture, batch, augmentation, repetition).

    Within a cell, the lr/decay/step combination with the lowest validation
    RMSE is kept; the response is its test-set RMSE.
    """
    conv = runs[runs["family"] == "convnet"] if len(runs) else runs
    if conv.empty:
        return pd.DataFrame(columns=["dataset", "model", "batch", "augmentation", "repetition", "response"])
    conv = conv.copy()
    conv["batch"] = conv["params"].map(lambda p: p["train"]["batch"])
    conv["augmentation"] = conv["params"].map(lambda p: p["train"]["augmentation"])
    conv["model"] = conv["params"].map(lambda p: p["arch"] if p["head"] == "vanilla" else f"{p['arch']} (ext)")
    idx = conv.groupby(["dataset", "model", "batch", "augmentation", "repetition"])["best_val_rmse"].idxmin()
    best = conv.loc[idx]
    return pd.DataFrame({"dataset": best["dataset"], "model": best["model"], "batch": best["batch"],
                         "augmentation": best["augmentation"], "repetition": best["repetition"],
                         "response": best["test_rmse"]}).reset_index(drop=True)


def family_observations(runs: pd.DataFrame) -> pd.DataFrame:
    """Per (data set, repetition): best ConvNet by test RMSE, RF and DNN on the longest fingerprint, ensemble."""
    if runs.empty:
        return pd.DataFrame(columns=["dataset", "model", "repetition", "response"])
    rows = []
    for (ds, rep), g in runs.groupby(["dataset", "repetition"]):
        conv = g[g["family"] == "convnet"]
        if not conv.empty:
            rows.append((ds, "convnet", rep, conv["test_rmse"].min()))
        for fam in ("rf", "dnn"):
            f = g[g["family"] == fam]
            if not f.empty:
                nb = f["params"].map(lambda p: p["nbits"])
                rows.append((ds, fam, rep, f.loc[nb.idxmax(), "test_rmse"]))
        e = g[g["family"] == "ensemble"]
        if not e.empty:
            rows.append((ds, "ensemble", rep, e["test_rmse"].iloc[0]))
    return pd.DataFrame(rows, columns=["dataset", "model", "repetition", "response"])


def _reference(obs: pd.DataFrame, preferred: dict) -> dict:
    ref = {}
    for f, lv in preferred.items():
        values = sorted(obs[f].astype(str).unique())
        ref[f] = lv if lv in values else values[0]
    return ref


def analyze(store: RunStore) -> dict:
    """Fit both factorial models from persisted metrics only."""
    out = store.root / "analysis"
    out.mkdir(parents=True, exist_ok=True)
    runs = _complete_runs(store)
    results = {}
    for name, obs, pref in (
        ("arch", arch_observations(runs), {"dataset": "A2780", "model": "AlexNet", "batch": "4", "augmentation": "0"}),
        ("family", family_observations(runs), {"dataset": "A2780", "model": "convnet"}),
    ):
        obs_path = out / f"{name}_observations.csv"
        cols = [c for c in OBSERVATION_COLUMNS if c in obs.columns] if name == "arch" else None
        write_if_changed(obs_path, obs.to_csv(index=False, columns=cols))
        err_path = out / f"{name}_error.txt"
        if len(obs) == 0:
            write_if_changed(err_path, "no observations\n")
            continue
        try:
            ref = _reference(obs, pref)
            design = encode_design(obs, name, reference=ref)
            fit = fit_ols(design, obs["response"].to_numpy())
        except Exception as exc:
            write_if_changed(err_path, f"{type(exc).__name__}: {exc}\n")
            results[name] = {"error": str(exc)}
            continue
        if err_path.exists():
            err_path.unlink()
        summary = fit.to_json_dict()
        summary["reference_levels"] = design.reference_levels
        summary["response"] = "test-set RMSE per run"
        write_if_changed(out / f"{name}_fit.json", json.dumps(summary, indent=1, sort_keys=True))
        write_if_changed(out / f"{name}_anova.csv", anova_effects(fit, design).to_csv(index=False))
        qq, fr = diagnostics(fit)
        write_if_changed(out / f"{name}_qq.csv", qq.to_csv(index=False))
        write_if_changed(out / f"{name}_fitted_residual.csv", fr.to_csv(index=False))
        results[name] = summary
    return results


def list_runs(store: RunStore | str | Path, dataset: str | None = None, family: str | None = None) -> pd.DataFrame:
    store = store if isinstance(store, RunStore) else RunStore(store)
    cols = ["run_id", "dataset", "model", "family", "config_hash", "status", "best_val_rmse", "test_rmse",
            "abort_epoch"]
    rows = []
    for rid, meta in store.iter_runs():
        if meta.get("status") == "corrupt":
            parts = rid.split("/")
            meta = dict(meta, dataset=parts[0] if parts else None)
        rows.append({c: meta.get(c) for c in cols} | {"run_id": rid})
    df = pd.DataFrame(rows, columns=cols)
    if dataset:
        df = df[df["dataset"] == dataset]
    if family:
        df = df[df["family"] == family]
    return df.reset_index(drop=True)
