"""Command line entry point: ``imgqsar <verb> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np


def _curated(path):
    from .data import read_curated_csv
    return read_curated_csv(path)


def cmd_fetch(args):
    from .catalog import CATALOG
    from .data import fetch_bioactivities
    recs = fetch_bioactivities(CATALOG[args.dataset], args.cache_dir, offline=args.offline)
    print(f"{args.dataset}: {len(recs)} activity records cached")


def cmd_curate(args):
    from .catalog import CATALOG
    from .data import curate, fetch_bioactivities, read_records_jsonl, write_curated_csv
    entry = CATALOG[args.dataset]
    if args.raw:
        records = read_records_jsonl(args.raw, entry.source_id)
    else:
        records = fetch_bioactivities(entry, args.cache_dir, offline=args.offline)
    curated, rep = curate(records)
    write_curated_csv(curated, args.out)
    print(f"{args.dataset}: {rep.n_raw} raw, {rep.n_filtered} after filters, {rep.n_curated} curated "
          f"(catalog {entry.expected_count}); rejected structures {dict(rep.rejected_structures)}")


def cmd_depict(args):
    from .depict import RenderParams, render_dataset
    m = render_dataset(_curated(args.input), RenderParams(density=args.density), args.out, workers=args.jobs)
    print(f"rendered {len(m['images'])} images, {len(m['failures'])} failures -> {args.out}")


def cmd_fingerprint(args):
    from .fingerprints import fp_matrix, save_matrix
    m = fp_matrix(_curated(args.input), args.radius, args.nbits)
    save_matrix(m, args.out)
    print(f"{m.rows.shape[0]} x {m.nbits} fingerprint matrix -> {args.out}.npz")


def _train_one(args, scramble=False):
    import torch
    from .data import split_dataset
    from .depict import RenderParams, render_many
    from .evaluate import PredictionSet, mean_predictor_baseline, regression_metrics, rmse
    from .fingerprints import fp_matrix
    from .models import AssetStore, BackboneSpec, DnnSpec, HeadSpec, build_fp_dnn, build_image_regressor, build_rf, save_model
    from .train import (DnnTrainConfig, HyperparamGrid, ImageFeeder, ArrayFeeder, TrainConfig, grid_search, predict,
                        train_dnn, train_image_model, train_rf, y_scramble)

    curated = _curated(args.input)
    split = split_dataset(curated, args.seed)
    true = {c.compound_id: c.pic50 for c in curated}
    if scramble:
        curated = y_scramble(curated, split, args.seed)
    lab = {c.compound_id: c.pic50 for c in curated}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "split.json").write_text(split.to_json())
    tr, va, te = split.train_ids, split.val_ids, split.test_ids

    if args.family == "convnet":
        ids, stack, failures = render_many(curated, RenderParams(density=args.density))
        img = dict(zip(ids, stack))
        tr, va, te = [[i for i in part if i in img] for part in (tr, va, te)]
        x = lambda part: np.stack([img[i] for i in part])
        base = TrainConfig(lr0=args.lr, decay=args.decay, step=args.step, batch=args.batch,
                           augmentation=args.augment, max_epochs=args.max_epochs, patience=args.patience,
                           seed=args.seed)
        store = AssetStore(args.asset_dir, offline=args.offline)

        def fit(cfg):
            torch.manual_seed(cfg.seed)
            model = build_image_regressor(BackboneSpec(args.arch, pretrained=not args.no_pretrained),
                                          HeadSpec(args.head), store)
            model, trace = train_image_model(model, (x(tr), [lab[i] for i in tr]), (x(va), [lab[i] for i in va]), cfg,
                                             deterministic=args.deterministic)
            fit.models[cfg] = model
            return trace
        fit.models = {}
        if args.grid:
            cfg, results = grid_search(fit, HyperparamGrid(), base)
            (out / "grid.json").write_text(json.dumps([{"config": asdict(c), "best_val_rmse": t.best_val_rmse}
                                                        for c, t in results], indent=1, default=str))
            trace = dict(results)[cfg]
        else:
            cfg = base
            trace = fit(cfg)
        model = fit.models[cfg]
        pred = predict(model, ImageFeeder(x(te)))[:, 0]
        trace.write(out, {"config": asdict(cfg), "model": model.metadata()})
        if args.save_weights:
            save_model(model, out)
    else:
        m = fp_matrix(curated, 2, args.nbits)
        rows = dict(zip(m.compound_ids, m.rows.astype(np.float32)))
        x = lambda part: np.stack([rows[i] for i in part])
        if args.family == "rf":
            model, _ = train_rf(build_rf(seed=args.seed), (x(tr), [lab[i] for i in tr]))
            pred = model.predict(x(te))
        else:
            torch.manual_seed(args.seed)
            cfg = DnnTrainConfig(max_epochs=args.max_epochs, seed=args.seed)
            model, trace = train_dnn(build_fp_dnn(DnnSpec(input_dim=args.nbits)), (x(tr), [lab[i] for i in tr]),
                                     (x(va), [lab[i] for i in va]), cfg)
            pred = predict(model, ArrayFeeder(x(te)))[:, 0]
            trace.write(out, {"config": asdict(cfg)})
            if args.save_weights:
                save_model(model, out)
    fam = "convnet" if args.family == "convnet" else args.family
    ps = PredictionSet(out.name, fam, te, [true[i] for i in te], pred)
    ps.write_csv(out / "predictions.csv")
    base = mean_predictor_baseline([lab[i] for i in tr], (te, [true[i] for i in te]))
    metrics = {"rmse": rmse(ps), "baseline_rmse": rmse(base)}
    try:
        metrics.update(regression_metrics(ps).as_dict())
    except ValueError:
        pass
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1))
    print(json.dumps(metrics))


def cmd_train(args):
    _train_one(args, scramble=args.y_scramble)


def cmd_grid(args):
    args.grid = True
    _train_one(args, scramble=args.y_scramble)


def cmd_scramble(args):
    _train_one(args, scramble=True)


def cmd_evaluate(args):
    from .evaluate import PredictionSet, regression_metrics, rmse
    p = PredictionSet.read_csv(args.predictions, args.family)
    try:
        out = regression_metrics(p).as_dict()
    except ValueError as exc:
        out = {"rmse": rmse(p), "n": len(p), "note": str(exc)}
    print(json.dumps(out))


def cmd_ensemble(args):
    from .evaluate import PredictionSet, ensemble_average, rmse
    a = PredictionSet.read_csv(args.a, args.family_a)
    b = PredictionSet.read_csv(args.b, args.family_b)
    e = ensemble_average(a, b, args.run_id)
    e.write_csv(args.out)
    print(json.dumps({"rmse_a": rmse(a), "rmse_b": rmse(b), "rmse_ensemble": rmse(e)}))


def cmd_analyze(args):
    from .experiment import RunStore, analyze
    res = analyze(RunStore(args.store))
    for name, fit in res.items():
        if "error" in fit:
            print(f"{name}: {fit['error']}")
        else:
            print(f"{name}: R2 {fit['r2']} adj {fit['adjusted_r2']} F {fit['f_statistic']} n {fit['n']}")


def cmd_report(args):
    from .report import make_report
    res = make_report(args.store, args.out)
    print(f"written: {', '.join(res['written']) or '-'}")
    for k, v in res["skipped"].items():
        print(f"skipped {k}: {v}")


def cmd_list(args):
    from .experiment import list_runs
    df = list_runs(args.store, args.dataset, args.family)
    if args.json:
        print(df.to_json(orient="records"))
    else:
        print(df.to_string(index=False) if len(df) else "no runs")


def cmd_run(args):
    from .experiment import ExperimentConfig, run_experiment
    cfg = ExperimentConfig.from_json(args.config, output_root=args.output_root, repetitions=args.repetitions,
                                     jobs=args.jobs, offline=True if args.offline else None)
    delta = run_experiment(cfg, progress=print if args.verbose else None)
    print(f"created {len(delta['created'])}, skipped {len(delta['skipped'])}, failed {len(delta['failed'])}")
    for f in delta["failed"]:
        print(f"  failed: {f}")
    return 1 if delta["failed"] else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="imgqsar", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def source(sp):
        sp.add_argument("--dataset", required=True, help="catalog name, e.g. A2780")
        sp.add_argument("--cache-dir")
        sp.add_argument("--offline", action="store_true")

    sp = sub.add_parser("fetch", help="download and cache raw activities")
    source(sp)
    sp.set_defaults(func=cmd_fetch)

    sp = sub.add_parser("curate", help="filter, aggregate and standardize to a curated CSV")
    source(sp)
    sp.add_argument("--raw", help="raw activity JSONL instead of the cache")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_curate)

    sp = sub.add_parser("depict", help="render curated compounds to PNG")
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--density", type=int, default=800)
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_depict)

    sp = sub.add_parser("fingerprint", help="Morgan fingerprint matrix")
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True, help="output stem; writes .npz and .json")
    sp.add_argument("--nbits", type=int, default=2048)
    sp.add_argument("--radius", type=int, default=2)
    sp.set_defaults(func=cmd_fingerprint)

    for verb, fn, hlp in (("train", cmd_train, "train one model on a fresh split"),
                          ("grid", cmd_grid, "grid search over the full ConvNet hyperparameter grid"),
                          ("scramble", cmd_scramble, "Y-scrambled control run")):
        sp = sub.add_parser(verb, help=hlp)
        sp.add_argument("--input", required=True, help="curated CSV")
        sp.add_argument("--out", required=True, help="run directory")
        sp.add_argument("--family", choices=["convnet", "dnn", "rf"], default="convnet")
        sp.add_argument("--arch", default="AlexNet")
        sp.add_argument("--head", choices=["vanilla", "extended"], default="extended")
        sp.add_argument("--lr", type=float, default=0.01)
        sp.add_argument("--decay", type=float, default=0.1)
        sp.add_argument("--step", type=int, default=10)
        sp.add_argument("--batch", type=int, default=16)
        sp.add_argument("--augment", type=int, choices=[0, 1], default=0)
        sp.add_argument("--max-epochs", type=int, default=600)
        sp.add_argument("--patience", type=int, default=250)
        sp.add_argument("--nbits", type=int, default=2048)
        sp.add_argument("--density", type=int, default=800)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--asset-dir")
        sp.add_argument("--offline", action="store_true")
        sp.add_argument("--no-pretrained", action="store_true", help="random backbone initialization")
        sp.add_argument("--deterministic", action="store_true")
        sp.add_argument("--save-weights", action="store_true")
        sp.add_argument("--y-scramble", action="store_true")
        sp.set_defaults(func=fn, grid=False)

    sp = sub.add_parser("evaluate", help="metrics for a predictions CSV")
    sp.add_argument("--predictions", required=True)
    sp.add_argument("--family", default="convnet")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("ensemble", help="average two prediction sets")
    sp.add_argument("--a", required=True)
    sp.add_argument("--b", required=True)
    sp.add_argument("--family-a", default="rf")
    sp.add_argument("--family-b", default="convnet")
    sp.add_argument("--run-id", default="ensemble")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ensemble)

    sp = sub.add_parser("analyze", help="fit the factorial models from a run store")
    sp.add_argument("--store", required=True)
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("report", help="tables and figures from a run store")
    sp.add_argument("--store", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("list", help="list runs in a store")
    sp.add_argument("--store", required=True)
    sp.add_argument("--dataset")
    sp.add_argument("--family")
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_list)

    sp = sub.add_parser("run", help="execute an experiment config end to end (resumable)")
    sp.add_argument("config")
    sp.add_argument("--output-root")
    sp.add_argument("--repetitions", type=int)
    sp.add_argument("--jobs", type=int)
    sp.add_argument("--offline", action="store_true")
    sp.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or 0
    except KeyboardInterrupt:
        return 130
    except Exception as exc:
        if args.verbose:
            raise
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
