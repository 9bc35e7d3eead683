"""Fixed-effects factorial linear models with reference-level dummy coding.

Two model shapes are supported:

* ``"arch"``: four main effects (data set, model, batch size, augmentation)
  on top of an intercept that is the mean of the reference cell
  (A2780, AlexNet, batch 4, no augmentation).
* ``"family"``: data set and model family plus their interaction.

The response is whatever run-level performance value the observation table
carries (by default per-run test-set RMSE).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
import scipy.linalg
from scipy import stats

OBSERVATION_COLUMNS = ("dataset", "model", "batch", "augmentation", "repetition", "response")

FORMULAS = {
    "arch": (("dataset",), ("model",), ("batch",), ("augmentation",)),
    "family": (("dataset",), ("model",), ("dataset", "model")),
}

REFERENCE_LEVELS = {
    "arch": {"dataset": "A2780", "model": "AlexNet", "batch": "4", "augmentation": "0"},
    "family": {"dataset": "A2780", "model": "convnet"},
}


class UnknownLevel(ValueError):
    pass


class RankDeficient(np.linalg.LinAlgError):
    def __init__(self, columns: Sequence[str]):
        super().__init__(f"design is rank deficient; collinear columns: {', '.join(columns)}")
        self.columns = list(columns)


@dataclass(frozen=True)
class FactorialObservation:
    dataset: str
    model: str
    batch: int
    augmentation: int
    repetition: int
    response: float


def observations_frame(obs: Sequence[FactorialObservation] | pd.DataFrame) -> pd.DataFrame:
    if isinstance(obs, pd.DataFrame):
        return obs.copy()
    return pd.DataFrame([o.__dict__ for o in obs], columns=list(OBSERVATION_COLUMNS))


def read_observations(path: str | Path) -> pd.DataFrame:
    return pd.read_csv(path, dtype={"dataset": str, "model": str})


def write_observations(obs: pd.DataFrame, path: str | Path) -> None:
    obs.to_csv(path, index=False, columns=[c for c in OBSERVATION_COLUMNS if c in obs.columns])


@dataclass
class DesignMatrix:
    X: np.ndarray
    columns: list[str]
    reference_levels: dict
    levels: dict
    terms: dict = field(default_factory=dict)  # term name -> column indices, in fit order

    @property
    def shape(self):
        return self.X.shape


@dataclass
class FitResult:
    coefficients: pd.DataFrame  # index=column, columns: estimate, std_error, t, p_value
    r2: float
    adjusted_r2: float
    f_statistic: float
    f_pvalue: float
    residuals: np.ndarray
    fitted_values: np.ndarray
    sigma2: float
    df_resid: int
    response: np.ndarray

    def to_json_dict(self) -> dict:
        return {
            "coefficients": {k: {c: _jsonable(v) for c, v in row.items()}
                             for k, row in self.coefficients.to_dict(orient="index").items()},
            "r2": _jsonable(self.r2), "adjusted_r2": _jsonable(self.adjusted_r2),
            "f_statistic": _jsonable(self.f_statistic), "f_pvalue": _jsonable(self.f_pvalue),
            "sigma2": _jsonable(self.sigma2), "df_resid": self.df_resid, "n": int(len(self.residuals)),
        }


def _jsonable(v):
    v = float(v)
    return v if np.isfinite(v) else str(v)


def _levels_for(values: pd.Series, factor: str, reference: str, declared: Sequence | None) -> list[str]:
    observed = [str(v) for v in pd.unique(values.astype(str))]
    if declared is not None:
        declared = [str(d) for d in declared]
        unknown = sorted(set(observed) - set(declared))
        if unknown:
            raise UnknownLevel(f"{factor}: unknown level(s) {unknown}")
        pool = declared
    else:
        pool = sorted(observed, key=_natural_key)
    if reference not in observed:
        raise UnknownLevel(f"{factor}: reference level {reference!r} not present in the data")
    return [reference] + [lv for lv in pool if lv != reference and lv in observed]


def _natural_key(s: str):
    try:
        return (0, float(s), s)
    except ValueError:
        return (1, 0.0, s)


def encode_design(observations, formula: str = "arch", reference: Mapping | None = None,
                  levels: Mapping[str, Sequence] | None = None) -> DesignMatrix:
    """Intercept plus treatment-coded dummies (and interaction products for ``family``)."""
    df = observations_frame(observations)
    terms = FORMULAS[formula]
    ref = dict(REFERENCE_LEVELS[formula])
    ref.update({k: str(v) for k, v in (reference or {}).items()})
    factors = sorted({f for t in terms for f in t}, key=[f for t in terms for f in t].index)
    lv = {f: _levels_for(df[f], f, ref[f], (levels or {}).get(f)) for f in factors}
    values = {f: df[f].astype(str).to_numpy() for f in factors}

    cols = [np.ones(len(df))]
    names = ["Intercept"]
    term_cols = {}
    dummies = {f: {l: (values[f] == l).astype(float) for l in lv[f][1:]} for f in factors}
    for term in terms:
        start = len(names)
        if len(term) == 1:
            (f,) = term
            for l in lv[f][1:]:
                cols.append(dummies[f][l])
                names.append(f"{f}[T.{l}]")
        else:
            f, g = term
            for l in lv[f][1:]:
                for m in lv[g][1:]:
                    cols.append(dummies[f][l] * dummies[g][m])
                    names.append(f"{f}[T.{l}]:{g}[T.{m}]")
        term_cols[":".join(term)] = list(range(start, len(names)))
    return DesignMatrix(np.column_stack(cols), names, {f: ref[f] for f in factors}, lv, term_cols)


def fit_ols(design: DesignMatrix, responses) -> FitResult:
    """Least squares via column-pivoted QR, with t-tests per coefficient and the overall F-test."""
    X = np.asarray(design.X, float)
    y = np.asarray(responses, float).ravel()
    n, p = X.shape
    if n < p:
        raise RankDeficient(design.columns[n:])
    Q, R, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    tol = max(n, p) * np.finfo(float).eps * d[0]
    rank = int((d > tol).sum())
    if rank < p:
        raise RankDeficient([design.columns[j] for j in piv[rank:]])
    beta = np.empty(p)
    beta[piv] = scipy.linalg.solve_triangular(R, Q.T @ y)
    fitted = X @ beta
    resid = y - fitted
    sse = float(resid @ resid)
    sst = float(((y - y.mean()) ** 2).sum())
    df_resid = n - p
    sigma2 = sse / df_resid if df_resid > 0 else np.nan
    Rinv = scipy.linalg.solve_triangular(R, np.eye(p))
    cov_piv = Rinv @ Rinv.T
    var = np.empty(p)
    var[piv] = np.diag(cov_piv)
    with np.errstate(divide="ignore", invalid="ignore"):
        se = np.sqrt(sigma2 * var)
        t = beta / se
        pvals = 2 * stats.t.sf(np.abs(t), df_resid) if df_resid > 0 else np.full(p, np.nan)
        r2 = 1.0 - sse / sst if sst > 0 else np.nan
        adj = 1.0 - (1.0 - r2) * (n - 1) / df_resid if df_resid > 0 else np.nan
        if p > 1 and df_resid > 0:
            f_stat = ((sst - sse) / (p - 1)) / (sse / df_resid)
            f_p = float(stats.f.sf(f_stat, p - 1, df_resid))
        else:
            f_stat, f_p = np.nan, np.nan
    coefs = pd.DataFrame({"estimate": beta, "std_error": se, "t": t, "p_value": pvals}, index=design.columns)
    return FitResult(coefs, float(r2), float(adj), float(f_stat), f_p, resid, fitted, float(sigma2), df_resid, y)


def _sse(X: np.ndarray, y: np.ndarray) -> float:
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    r = y - X @ beta
    return float(r @ r)


def anova_effects(fit: FitResult, design: DesignMatrix) -> pd.DataFrame:
    """Sequential (type I) sums of squares with F-tests, one row per term plus residuals."""
    y = fit.response
    rows = []
    cols = [0]
    prev = _sse(design.X[:, cols], y)
    for term, idx in design.terms.items():
        cols = cols + idx
        cur = _sse(design.X[:, cols], y)
        ss = max(prev - cur, 0.0)
        rows.append({"term": term, "df": len(idx), "sum_sq": ss})
        prev = cur
    resid_ss = float(fit.residuals @ fit.residuals)
    out = pd.DataFrame(rows)
    with np.errstate(divide="ignore", invalid="ignore"):
        out["mean_sq"] = out["sum_sq"] / out["df"]
        mse = resid_ss / fit.df_resid if fit.df_resid > 0 else np.nan
        out["F"] = out["mean_sq"] / mse
        out["p_value"] = stats.f.sf(out["F"], out["df"], fit.df_resid)
    resid_row = pd.DataFrame([{"term": "Residual", "df": fit.df_resid, "sum_sq": resid_ss,
                               "mean_sq": mse, "F": np.nan, "p_value": np.nan}])
    return pd.concat([out, resid_row], ignore_index=True)


def normal_quantiles(n: int) -> np.ndarray:
    i = np.arange(1, n + 1)
    return stats.norm.ppf((i - 0.375) / (n + 0.25))


def diagnostics(fit: FitResult) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Q-Q points (normal quantile vs sorted standardized residual) and fitted-vs-residual points."""
    resid = fit.residuals
    # residual scale at roundoff level means an exact fit, not unit-variance noise
    noise_floor = 1e-10 * max(1.0, float(np.max(np.abs(fit.response)))) if len(resid) else 0.0
    if np.isfinite(fit.sigma2) and np.sqrt(fit.sigma2) > noise_floor:
        std = resid / np.sqrt(fit.sigma2)
    else:
        std = np.zeros_like(resid)
    qq = pd.DataFrame({"theoretical": normal_quantiles(len(std)), "sample": np.sort(std)})
    fr = pd.DataFrame({"fitted": fit.fitted_values, "residual": resid})
    return qq, fr
