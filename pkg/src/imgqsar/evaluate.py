"""Test-set metrics, the mean-predictor baseline, ensembles, residuals and error correlations."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

FAMILIES = ("convnet", "dnn", "rf", "ensemble", "mean_baseline")


class UndefinedCorrelation(ValueError):
    """Pearson correlation requested for a constant vector."""


@dataclass
class PredictionSet:
    run_id: str
    model_family: str
    compound_ids: list[str]
    observed: np.ndarray
    predicted: np.ndarray

    def __post_init__(self):
        self.observed = np.asarray(self.observed, dtype=float).ravel()
        self.predicted = np.asarray(self.predicted, dtype=float).ravel()
        self.compound_ids = list(self.compound_ids)
        if self.model_family not in FAMILIES:
            raise ValueError(f"unknown model family {self.model_family!r}")
        if not (len(self.compound_ids) == len(self.observed) == len(self.predicted)):
            raise ValueError("compound_ids, observed and predicted must align")
        if len(set(self.compound_ids)) != len(self.compound_ids):
            raise ValueError("compound ids must be unique")

    def __len__(self):
        return len(self.compound_ids)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"run_id": self.run_id, "compound_id": self.compound_ids,
                             "observed": self.observed, "predicted": self.predicted})

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["run_id", "compound_id", "observed", "predicted"])
            for cid, o, p in zip(self.compound_ids, self.observed, self.predicted):
                w.writerow([self.run_id, cid, repr(float(o)), repr(float(p))])

    @classmethod
    def read_csv(cls, path: str | Path, model_family: str) -> "PredictionSet":
        df = pd.read_csv(path, dtype={"compound_id": str, "run_id": str})
        run_id = str(df["run_id"].iloc[0]) if len(df) else Path(path).parent.name
        return cls(run_id, model_family, df["compound_id"].tolist(), df["observed"].to_numpy(),
                   df["predicted"].to_numpy())


@dataclass(frozen=True)
class MetricReport:
    rmse: float
    r2: float
    pearson_r: float
    n: int

    def as_dict(self) -> dict:
        return {"rmse": self.rmse, "r2": self.r2, "pearson_r": self.pearson_r, "n": self.n}


def rmse(pred_set: PredictionSet) -> float:
    if len(pred_set) == 0:
        raise ValueError("RMSE of an empty prediction set")
    return float(np.sqrt(np.mean((pred_set.observed - pred_set.predicted) ** 2)))


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    da, db = a - a.mean(), b - b.mean()
    na, nb = math.sqrt(float(da @ da)), math.sqrt(float(db @ db))
    if na == 0 or nb == 0:
        raise UndefinedCorrelation("correlation undefined for a constant vector")
    return float(np.clip((da @ db) / (na * nb), -1.0, 1.0))


def regression_metrics(pred_set: PredictionSet) -> MetricReport:
    """RMSE, Pearson r and R^2, where R^2 is the squared Pearson correlation."""
    if len(pred_set) < 3:
        raise ValueError("need at least 3 predictions for correlation metrics")
    r = pearson(pred_set.observed, pred_set.predicted)
    return MetricReport(rmse(pred_set), r * r, r, len(pred_set))


def mean_predictor_baseline(train_labels: Sequence[float], test_set: PredictionSet | tuple,
                            run_id: str = "mean_baseline") -> PredictionSet:
    """Predict the training-label mean for every test compound.

    ``test_set`` is a PredictionSet (only ids/observed are used) or an
    ``(ids, observed)`` pair.
    """
    train_labels = np.asarray(train_labels, float)
    if train_labels.size == 0:
        raise ValueError("empty training labels")
    ids, obs = (test_set.compound_ids, test_set.observed) if isinstance(test_set, PredictionSet) else test_set
    return PredictionSet(run_id, "mean_baseline", ids, obs, np.full(len(ids), train_labels.mean()))


def _check_aligned(a: PredictionSet, b: PredictionSet) -> np.ndarray:
    """Index array mapping b's rows onto a's order."""
    if set(a.compound_ids) != set(b.compound_ids):
        diff = sorted(set(a.compound_ids) ^ set(b.compound_ids))
        raise ValueError(f"prediction sets cover different compounds: {diff[:20]}")
    pos = {cid: i for i, cid in enumerate(b.compound_ids)}
    idx = np.array([pos[c] for c in a.compound_ids], dtype=int)
    if not np.allclose(a.observed, b.observed[idx]):
        raise ValueError("observed values differ between prediction sets")
    return idx


def ensemble_average(pred_a: PredictionSet, pred_b: PredictionSet, run_id: str | None = None) -> PredictionSet:
    idx = _check_aligned(pred_a, pred_b)
    return PredictionSet(run_id or f"{pred_a.run_id}+{pred_b.run_id}", "ensemble", pred_a.compound_ids,
                         pred_a.observed, (pred_a.predicted + pred_b.predicted[idx]) / 2.0)


def residual_table(pred_set: PredictionSet, n_bins: int = 5) -> tuple[pd.DataFrame, dict]:
    """Residuals (observed - predicted) plus mean and per-observed-bin variance summaries."""
    if len(pred_set) == 0:
        raise ValueError("empty prediction set")
    res = pred_set.observed - pred_set.predicted
    table = pd.DataFrame({"compound_id": pred_set.compound_ids, "observed": pred_set.observed, "residual": res})
    edges = np.linspace(pred_set.observed.min(), pred_set.observed.max(), n_bins + 1)
    bins = np.clip(np.searchsorted(edges, pred_set.observed, side="right") - 1, 0, n_bins - 1)
    per_bin = []
    for b in range(n_bins):
        r = res[bins == b]
        per_bin.append({"lo": float(edges[b]), "hi": float(edges[b + 1]), "n": int(r.size),
                        "variance": float(r.var()) if r.size else math.nan})
    return table, {"mean": float(res.mean()), "bins": per_bin}


def error_correlation(pred_a: PredictionSet, pred_b: PredictionSet) -> tuple[float, float]:
    """(R^2 between the two prediction vectors, R^2 between their absolute errors)."""
    idx = _check_aligned(pred_a, pred_b)
    pb = pred_b.predicted[idx]
    r_pred = pearson(pred_a.predicted, pb)
    r_err = pearson(np.abs(pred_a.observed - pred_a.predicted), np.abs(pred_a.observed - pb))
    return r_pred ** 2, r_err ** 2
