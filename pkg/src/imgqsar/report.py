"""Tables and figures built from a run store only (no retraining).

Every figure is written as a CSV of the plotted values plus a PNG. Panels
whose inputs are missing are skipped and listed in ``index.md``.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
import pandas as pd

from .catalog import CATALOG
from .evaluate import UndefinedCorrelation, error_correlation, pearson, residual_table
from .experiment import RunStore, analyze, arch_observations

log = logging.getLogger(__name__)

# Published band for the RF vs ConvNet prediction correlation; the text and
# the figure disagree, so both are shown next to whatever we measure.
PREDICTION_R2_BANDS = {"text": (0.80, 0.89), "figure": (0.72, 0.84)}


def _plt():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _runs(store: RunStore) -> pd.DataFrame:
    rows = [m for _, m in store.iter_runs() if m.get("status") == "complete"]
    return pd.DataFrame(rows)


def _is_cell_line(ds: str) -> bool:
    return ds in CATALOG and CATALOG[ds].kind == "cell_line"


def _best_conv_per_rep(runs: pd.DataFrame) -> pd.DataFrame:
    conv = runs[runs["family"] == "convnet"]
    if conv.empty:
        return conv
    return conv.loc[conv.groupby(["dataset", "repetition"])["test_rmse"].idxmin()]


def _longest_fp(runs: pd.DataFrame, family: str) -> pd.DataFrame:
    f = runs[runs["family"] == family]
    if f.empty:
        return f
    nb = f["params"].map(lambda p: p["nbits"])
    return f[nb == nb.max()]


def _bar(df: pd.DataFrame, x: str, hue: str, path: Path, ylabel: str = "test RMSE (pIC50)") -> None:
    plt = _plt()
    piv_m = df.pivot(index=x, columns=hue, values="mean")
    piv_s = df.pivot(index=x, columns=hue, values="sd")
    ax = piv_m.plot.bar(yerr=piv_s, figsize=(max(6, 0.8 * len(piv_m) * max(1, len(piv_m.columns)) / 2), 4))
    ax.set_ylabel(ylabel)
    ax.figure.tight_layout()
    ax.figure.savefig(path, dpi=100)
    plt.close(ax.figure)


def _summary(df: pd.DataFrame, keys: list[str]) -> pd.DataFrame:
    g = df.groupby(keys)["test_rmse"]
    return pd.DataFrame({"mean": g.mean(), "sd": g.std(ddof=1).fillna(0.0), "n": g.size()}).reset_index()


def make_report(store: RunStore | str | Path, out_dir: str | Path) -> dict:
    """Write every derivable table/figure to ``out_dir``; return ``{"written": [...], "skipped": {...}}``."""
    store = store if isinstance(store, RunStore) else RunStore(store)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs = _runs(store)
    written, skipped = [], {}

    def guard(name, fn):
        try:
            note = fn()
            if note:
                skipped[name] = note
            else:
                written.append(name)
        except Exception as exc:  # a broken panel must not sink the others
            log.exception("report panel %s failed", name)
            skipped[name] = f"error: {exc}"

    if runs.empty:
        skipped["all"] = "run store has no completed runs"
        _write_index(out, written, skipped, {})
        return {"written": written, "skipped": skipped}

    def architectures():
        obs = arch_observations(runs)
        if obs.empty:
            return "no ConvNet runs"
        s = obs.groupby(["dataset", "model"])["response"].agg(["mean", "std", "size"]).reset_index()
        s.columns = ["dataset", "model", "mean", "sd", "n"]
        base = runs[(runs["family"] == "mean_baseline") & runs["dataset"].isin(s["dataset"])]
        if not base.empty:
            b = _summary(base, ["dataset"]).assign(model="mean_baseline")
            s = pd.concat([s, b[s.columns]], ignore_index=True)
        s["sd"] = s["sd"].fillna(0.0)
        s.to_csv(out / "architectures.csv", index=False)
        _bar(s, "dataset", "model", out / "architectures.png")

    def families(kind_is_cell: bool, tag: str):
        sel = runs[runs["dataset"].map(_is_cell_line) == kind_is_cell]
        if sel.empty:
            return "no data sets of this kind"
        parts = [sel[sel["family"] == "mean_baseline"], _best_conv_per_rep(sel), _longest_fp(sel, "rf"),
                 _longest_fp(sel, "dnn"), sel[sel["family"] == "ensemble"]]
        df = pd.concat([p for p in parts if not p.empty])
        s = _summary(df, ["dataset", "family"])
        s.to_csv(out / f"{tag}_families.csv", index=False)
        _bar(s, "dataset", "family", out / f"{tag}_families.png")
        # bars use the longest fingerprint; every trained length goes in a side table
        fp = sel[sel["family"].isin(["rf", "dnn"])].copy()
        if not fp.empty:
            fp["nbits"] = fp["params"].map(lambda p: p["nbits"])
            _summary(fp, ["dataset", "family", "nbits"]).to_csv(out / f"{tag}_fingerprint_lengths.csv", index=False)

    def residuals():
        rows = []
        for label, df in (("convnet", _best_conv_per_rep(runs)), ("rf", _longest_fp(runs, "rf"))):
            for rid in df.get("run_id", []):
                fam = "convnet" if label == "convnet" else "rf"
                table, summ = residual_table(store.predictions(rid, fam))
                table["family"] = label
                table["run_id"] = rid
                rows.append(table)
        if not rows:
            return "no ConvNet or RF predictions"
        t = pd.concat(rows)
        t.to_csv(out / "residuals.csv", index=False)
        plt = _plt()
        fig, ax = plt.subplots(figsize=(6, 4))
        for fam, g in t.groupby("family"):
            ax.scatter(g["observed"], g["residual"], s=6, alpha=0.5, label=fam)
        ax.axhline(0, color="k", lw=0.8)
        ax.set_xlabel("observed pIC50")
        ax.set_ylabel("residual")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "residuals.png", dpi=100)
        plt.close(fig)

    def observed_predicted():
        conv = _best_conv_per_rep(runs)
        if conv.empty:
            return "no ConvNet runs"
        frames = []
        for rid in conv["run_id"]:
            f = store.predictions(rid, "convnet").to_frame()
            f["family"] = "convnet"
            frames.append(f)
        for rid in _longest_fp(runs, "rf").get("run_id", []):
            f = store.predictions(rid, "rf").to_frame()
            f["family"] = "rf"
            frames.append(f)
        t = pd.concat(frames)
        t.to_csv(out / "observed_predicted.csv", index=False)
        plt = _plt()
        fig, ax = plt.subplots(figsize=(5, 5))
        for fam, g in t.groupby("family"):
            ax.scatter(g["observed"], g["predicted"], s=6, alpha=0.5, label=fam)
        lo, hi = t[["observed", "predicted"]].min().min(), t[["observed", "predicted"]].max().max()
        ax.plot([lo, hi], [lo, hi], "k--", lw=0.8)
        ax.set_xlabel("observed pIC50")
        ax.set_ylabel("predicted pIC50")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "observed_predicted.png", dpi=100)
        plt.close(fig)

    corr_notes = {}

    def correlations():
        conv = _best_conv_per_rep(runs)
        rf = _longest_fp(runs, "rf")
        if conv.empty or rf.empty:
            return "needs both ConvNet and RF runs"
        rows = []
        for _, c in conv.iterrows():
            match = rf[(rf["dataset"] == c["dataset"]) & (rf["repetition"] == c["repetition"])]
            if match.empty:
                continue
            a = store.predictions(match["run_id"].iloc[0], "rf")
            b = store.predictions(c["run_id"], "convnet")
            common = [i for i in a.compound_ids if i in set(b.compound_ids)]
            a, b = _restrict(a, common), _restrict(b, common)
            try:
                r2_pred, r2_err = error_correlation(a, b)
            except UndefinedCorrelation:
                r2_pred, r2_err = np.nan, np.nan
            rows.append({"dataset": c["dataset"], "repetition": c["repetition"],
                         "r2_predictions": r2_pred, "r2_abs_errors": r2_err})
        if not rows:
            return "no matching RF/ConvNet repetitions"
        t = pd.DataFrame(rows)
        t.to_csv(out / "error_correlation.csv", index=False)
        corr_notes["mean_r2_predictions"] = float(t["r2_predictions"].mean())
        corr_notes["mean_r2_abs_errors"] = float(t["r2_abs_errors"].mean())
        plt = _plt()
        fig, axes = plt.subplots(1, 2, figsize=(9, 4))
        for ax, col, title in zip(axes, ["r2_predictions", "r2_abs_errors"], ["predictions", "absolute errors"]):
            t.boxplot(column=col, by="dataset", ax=ax)
            ax.set_title(f"RF vs ConvNet: R2 of {title}")
            ax.set_xlabel("")
        for lo, hi in PREDICTION_R2_BANDS.values():
            axes[0].axhspan(lo, hi, alpha=0.1)
        fig.suptitle("")
        fig.tight_layout()
        fig.savefig(out / "error_correlation.png", dpi=100)
        plt.close(fig)

    def multitask():
        mt = runs[runs["family"] == "multitask"] if "family" in runs else runs.iloc[:0]
        if mt.empty:
            return "no multi-task runs"
        rows = []
        for _, m in mt.iterrows():
            for task, v in (m.get("task_rmse") or {}).items():
                rows.append({"task": task, "repetition": m["repetition"], "test_rmse": v})
        s = pd.DataFrame(rows).groupby("task")["test_rmse"].agg(["mean", "std", "size"]).reset_index()
        s.to_csv(out / "multitask_table.csv", index=False)

    def scramble():
        sc = runs[runs["family"] == "scramble"]
        if sc.empty:
            return "no Y-scramble runs"
        rows = []
        for rid in sc["run_id"]:
            p = store.predictions(rid, "convnet")
            try:
                r2 = pearson(p.observed, p.predicted) ** 2
            except UndefinedCorrelation:
                r2 = 0.0
            rows.append({"run_id": rid, "r2": r2})
        pd.DataFrame(rows).to_csv(out / "scramble_r2.csv", index=False)

    def factorial():
        res = analyze(store)
        if not res:
            return "no factorial observations"
        for name in ("arch", "family"):
            src = store.root / "analysis" / f"{name}_fit.json"
            if src.exists():
                _qq_plot(store.root / "analysis", name, out)
        return None

    guard("architectures", architectures)
    guard("residuals", residuals)
    guard("cell_line_families", lambda: families(True, "cell_line"))
    guard("observed_predicted", observed_predicted)
    guard("target_families", lambda: families(False, "target"))
    guard("error_correlation", correlations)
    guard("multitask_table", multitask)
    guard("scramble_r2", scramble)
    guard("factorial", factorial)
    _write_index(out, written, skipped, corr_notes, store.root / "analysis")
    return {"written": written, "skipped": skipped}


def _restrict(p, ids):
    pos = {c: i for i, c in enumerate(p.compound_ids)}
    idx = [pos[i] for i in ids]
    return type(p)(p.run_id, p.model_family, ids, p.observed[idx], p.predicted[idx])


def _qq_plot(analysis_dir: Path, name: str, out: Path) -> None:
    qq = pd.read_csv(analysis_dir / f"{name}_qq.csv")
    fr = pd.read_csv(analysis_dir / f"{name}_fitted_residual.csv")
    pd.concat([qq.add_prefix("qq_"), fr], axis=1).to_csv(out / f"{name}_diagnostics.csv", index=False)
    plt = _plt()
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    axes[0].scatter(qq["theoretical"], qq["sample"], s=8)
    lim = [qq.min().min(), qq.max().max()]
    axes[0].plot(lim, lim, "k--", lw=0.8)
    axes[0].set_xlabel("normal quantile")
    axes[0].set_ylabel("standardized residual")
    axes[1].scatter(fr["fitted"], fr["residual"], s=8)
    axes[1].axhline(0, color="k", lw=0.8)
    axes[1].set_xlabel("fitted")
    axes[1].set_ylabel("residual")
    fig.tight_layout()
    fig.savefig(out / f"{name}_diagnostics.png", dpi=100)
    plt.close(fig)


def _write_index(out: Path, written, skipped, corr_notes, analysis_dir: Path | None = None) -> None:
    lines = ["# Report", "", "## Written", ""]
    lines += [f"- {w}" for w in written] or ["- (none)"]
    lines += ["", "## Skipped", ""]
    lines += [f"- {k}: {v}" for k, v in skipped.items()] or ["- (none)"]
    if corr_notes:
        lines += ["", "## RF vs ConvNet agreement", "",
                  f"- mean R2 of predictions: {corr_notes['mean_r2_predictions']:.3f}",
                  f"- mean R2 of absolute errors: {corr_notes['mean_r2_abs_errors']:.3f}",
                  "- published range for the prediction R2 differs between text "
                  f"{PREDICTION_R2_BANDS['text']} and figure {PREDICTION_R2_BANDS['figure']}; both shown as bands"]
    if analysis_dir is not None:
        for name in ("arch", "family"):
            fit = analysis_dir / f"{name}_fit.json"
            err = analysis_dir / f"{name}_error.txt"
            if fit.exists():
                d = json.loads(fit.read_text())
                lines += ["", f"## Factorial model {name}", "",
                          f"R2 {d['r2']}, adjusted R2 {d['adjusted_r2']}, F {d['f_statistic']} (p {d['f_pvalue']}), "
                          f"n {d['n']}", "", f"reference levels: {d['reference_levels']}", "",
                          "| term | estimate | std_error | p_value |", "|---|---|---|---|"]
                for term, row in d["coefficients"].items():
                    lines.append(f"| {term} | {_fmt(row['estimate'])} | {_fmt(row['std_error'])} | "
                                 f"{_fmt(row['p_value'])} |")
            elif err.exists():
                lines += ["", f"## Factorial model {name}", "", f"not fitted: {err.read_text().strip()}"]
    (out / "index.md").write_text("\n".join(lines) + "\n")


def _fmt(v):
    return f"{v:.4g}" if isinstance(v, float) else str(v)
