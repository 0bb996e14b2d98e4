import json
import logging
import warnings
from dataclasses import dataclass
from importlib.resources import files
from typing import NamedTuple

import numpy as np
import pandas as pd
from scipy.special import expit
from scipy.stats import norm, t

from ..utility.exceptions import (
    DataError,
    DegenerateLabels,
    DegenerateVariance,
    FitDiverged,
    ShapeError,
)
from ..utility.util import read_json
from .entanglement import METRICS

logger = logging.getLogger(__name__)

BEHAVIORS = ("factual", "non_factual", "hallucination")
# Behavior -> judge category holding its percentage.
BEHAVIOR_CATEGORY = {"factual": "factual", "non_factual": "non_factual", "hallucination": "hallucinated"}
DEFAULT_METRICS = {"factual": "m9", "non_factual": "m4", "hallucination": "m3"}
MIN_FIT_SAMPLES = 20

INSUFFICIENT_PAIRS = "INSUFFICIENT_PAIRS"
DEGENERATE_VARIANCE = "DEGENERATE_VARIANCE"


class PearsonResult(NamedTuple):
    r: float
    p_value: float
    n: int


def pearson(xs, ys) -> PearsonResult:
    """
    Pearson product-moment correlation.

    Parameters
    ----------
    xs, ys : array_like
        Equal-length samples, at least two.

    Returns
    -------
    PearsonResult
        r in [-1, 1], the two-sided p-value from the t approximation with
        n - 2 degrees of freedom (nan when n < 3), and n.

    Raises
    ------
    ShapeError
        On a length mismatch or fewer than two pairs.
    DegenerateVariance
        If either sample is constant.
    """
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.ndim != 1 or x.shape != y.shape:
        raise ShapeError(f"pearson needs two equal-length 1-d samples, got {x.shape} and {y.shape}")
    n = x.size
    if n < 2:
        raise ShapeError("pearson needs at least two pairs")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = np.dot(dx, dx), np.dot(dy, dy)
    if sxx <= 0 or syy <= 0:
        raise DegenerateVariance("pearson is undefined for a constant sample")
    r = float(np.clip(np.dot(dx, dy) / np.sqrt(sxx * syy), -1.0, 1.0))

    if n < 3:
        p = float("nan")
    elif abs(r) == 1.0:
        p = 0.0
    else:
        df = n - 2
        tstat = r * np.sqrt(df / (1.0 - r * r))
        p = float(2.0 * t.sf(abs(tstat), df))
    return PearsonResult(r, p, n)


@dataclass(frozen=True)
class RegressionModel:
    """
    Single-metric logistic model of one behavior.

    p(behavior) = sigmoid(intercept + coefficient * metric)

    Parameters
    ----------
    behavior : str
        "factual", "non_factual", or "hallucination".
    metric_id : str
        "m1" ... "m9".
    intercept, coefficient : float
        Fitted or published parameters.
    fit_stats : dict, optional
        std_errs, z_values, p_values (each [intercept, coefficient]),
        test_accuracy, n_iter, n_train and n_test. None for published
        models.
    source : str, optional
        "fit" or "published".
    """

    behavior: str
    metric_id: str
    intercept: float
    coefficient: float
    fit_stats: dict | None = None
    source: str = "fit"

    def __post_init__(self):
        if self.behavior not in BEHAVIORS:
            raise ValueError(f"unknown behavior {self.behavior!r}")
        if self.metric_id not in METRICS:
            raise ValueError(f"unknown metric {self.metric_id!r}")

    def to_dict(self):
        return {
            "behavior": self.behavior,
            "metric_id": self.metric_id,
            "intercept": self.intercept,
            "coefficient": self.coefficient,
            "fit_stats": self.fit_stats,
            "source": self.source,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["behavior"],
            d["metric_id"],
            float(d["intercept"]),
            float(d["coefficient"]),
            d.get("fit_stats"),
            d.get("source", "fit"),
        )


def _split(n, test_fraction, seed):
    perm = np.random.default_rng(seed).permutation(n)
    n_test = int(round(n * test_fraction))
    return perm[n_test:], perm[:n_test]


def fit_logistic(
    metric_values,
    labels,
    split_seed,
    test_fraction=0.2,
    tol=1e-8,
    max_iter=100,
    behavior="factual",
    metric_id="m9",
) -> RegressionModel:
    """
    Fit a one-feature logistic regression by Newton's method (IRLS).

    The data are split at random (``split_seed``) into a training part and a
    held-out part of ``test_fraction``; the model is fitted on the training
    part and its accuracy reported on the held-out part.

    Parameters
    ----------
    metric_values : array_like
        Raw metric values.
    labels : array_like
        0/1 labels.
    split_seed : int
        Seed of the train/test permutation.
    test_fraction : float, optional
        By default 0.2.
    tol : float, optional
        Convergence threshold on the largest Newton step, by default 1e-8.
    max_iter : int, optional
        By default 100.
    behavior, metric_id : str, optional
        Recorded on the model.

    Returns
    -------
    RegressionModel
        With Wald standard errors, z values and two-sided p-values.

    Raises
    ------
    ShapeError
        Fewer than 20 samples, mismatched lengths or labels other than 0/1.
    DegenerateLabels
        Only one class present (overall or in the training part).
    FitDiverged
        No convergence within ``max_iter`` steps (e.g. separable data).
    """
    x = np.asarray(metric_values, dtype=float)
    y = np.asarray(labels, dtype=float)
    if x.ndim != 1 or x.shape != y.shape:
        raise ShapeError(f"values and labels differ in shape: {x.shape} vs {y.shape}")
    if x.size < MIN_FIT_SAMPLES:
        raise ShapeError(f"logistic fit needs at least {MIN_FIT_SAMPLES} samples, got {x.size}")
    if not np.all(np.isin(y, (0.0, 1.0))):
        raise ShapeError("labels must be 0 or 1")
    if not np.all(np.isfinite(x)):
        raise ShapeError("metric values must be finite")
    if np.unique(y).size < 2:
        raise DegenerateLabels(f"{behavior}: all labels are {int(y[0])}")

    train, test = _split(x.size, test_fraction, split_seed)
    if np.unique(y[train]).size < 2:
        raise DegenerateLabels(f"{behavior}: the training split holds a single class")

    X = np.column_stack([np.ones(train.size), x[train]])
    yt = y[train]
    beta = np.zeros(2)
    for n_iter in range(1, max_iter + 1):
        p = expit(X @ beta)
        w = p * (1.0 - p)
        grad = X.T @ (yt - p)
        hess = X.T @ (X * w[:, None])
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError as e:
            raise FitDiverged(f"{behavior}/{metric_id}: singular Hessian at step {n_iter}") from e
        beta = beta + step
        if not np.all(np.isfinite(beta)):
            raise FitDiverged(f"{behavior}/{metric_id}: non-finite coefficients")
        if np.max(np.abs(step)) < tol:
            break
    else:
        raise FitDiverged(f"{behavior}/{metric_id}: no convergence in {max_iter} iterations")

    p = expit(X @ beta)
    hess = X.T @ (X * (p * (1.0 - p))[:, None])
    try:
        cov = np.linalg.inv(hess)
    except np.linalg.LinAlgError as e:
        raise FitDiverged(f"{behavior}/{metric_id}: singular information matrix") from e
    se = np.sqrt(np.diag(cov))
    z = beta / se
    pvals = 2.0 * norm.sf(np.abs(z))

    if test.size:
        pred = expit(beta[0] + beta[1] * x[test]) >= 0.5
        accuracy = float(np.mean(pred == (y[test] == 1.0)))
    else:
        accuracy = None
    fit_stats = {
        "std_errs": [float(v) for v in se],
        "z_values": [float(v) for v in z],
        "p_values": [float(v) for v in pvals],
        "test_accuracy": accuracy,
        "n_iter": n_iter,
        "n_train": int(train.size),
        "n_test": int(test.size),
    }
    logger.debug("Fitted %s on %s in %d iterations: %s", behavior, metric_id, n_iter, beta)
    return RegressionModel(behavior, metric_id, float(beta[0]), float(beta[1]), fit_stats)


_P_LOW = np.finfo(float).tiny
_P_HIGH = np.nextafter(1.0, 0.0)


def predict(model: RegressionModel, m):
    """
    Predicted probability of the model's behavior at metric value(s) ``m``.

    Outputs stay inside the open interval (0, 1) even where the logistic
    function saturates.
    """
    p = np.clip(expit(model.intercept + model.coefficient * np.asarray(m, dtype=float)), _P_LOW, _P_HIGH)
    return float(p) if np.ndim(p) == 0 else p


def _final(score):
    final = score["final"] if isinstance(score, dict) else score.final
    return tuple(final[BEHAVIOR_CATEGORY[b]] for b in BEHAVIORS)


def label_responses(scores) -> dict:
    """
    One-vs-all labels from the final judge means.

    A behavior is labelled 1 when its category has the largest final mean;
    ties go to factual, then non_factual.

    Returns
    -------
    dict
        behavior -> list of 0/1, aligned with ``scores``.
    """
    labels = {b: [] for b in BEHAVIORS}
    for s in scores:
        values = _final(s)
        top = max(range(3), key=lambda i: (values[i], -i))
        for i, b in enumerate(BEHAVIORS):
            labels[b].append(int(i == top))
    return labels


def build_analysis_table(vectors, judgments) -> pd.DataFrame:
    """
    Join entanglement vectors with judged responses by prompt id.

    Parameters
    ----------
    vectors : list of EntanglementVector
        One per prompt.
    judgments : list of dict
        Judgment records with prompt_id, model, family, kind and ``final``.
        Records without ``final`` (unjudged) are left out.

    Returns
    -------
    pd.DataFrame
        One row per judged response: prompt_id, variant, model, family,
        kind, m1..m9, factual, non_factual, hallucination, and label_*.
    """
    by_prompt = {v.prompt_id: v for v in vectors}
    rows = []
    for j in judgments:
        if j.get("final") is None:
            continue
        v = by_prompt.get(j["prompt_id"])
        if v is None:
            raise DataError(f"no entanglement vector for prompt {j['prompt_id']!r}")
        row = {
            "response_id": j["response_id"],
            "prompt_id": j["prompt_id"],
            "variant": v.variant,
            "model": j["model"],
            "family": j["family"],
            "kind": j["kind"],
            **v.values(),
        }
        for b, value in zip(BEHAVIORS, _final(j), strict=True):
            row[b] = value
        rows.append(row)
    columns = ["response_id", "prompt_id", "variant", "model", "family", "kind", *METRICS, *BEHAVIORS]
    df = pd.DataFrame(rows, columns=columns)
    labels = label_responses(
        [{"final": {BEHAVIOR_CATEGORY[b]: r[b] for b in BEHAVIORS}} for r in rows]
    )
    for b in BEHAVIORS:
        df[f"label_{b}"] = np.asarray(labels[b], dtype=int)
    return df.sort_values(["family", "kind", "model", "prompt_id"]).reset_index(drop=True)


class CorrelationReport:
    """
    Pearson r of every metric against every behavior percentage, per model
    family and model kind (base or unlearned).

    Attributes
    ----------
    cells : pd.DataFrame
        Columns family, kind, metric, behavior, r, p_value, n, flag.
    """

    def __init__(self, cells: pd.DataFrame):
        self.cells = cells

    def table(self, behavior="factual") -> pd.DataFrame:
        """Metric rows x (family, kind) columns of r, with an "avg" row."""
        df = self.cells[self.cells["behavior"] == behavior]
        # all-NaN groups stay as columns
        tab = df.set_index(["metric", "family", "kind"])["r"].astype(float).unstack(["family", "kind"])
        tab = tab.reindex(list(METRICS))
        tab.loc["avg"] = tab.mean(axis=0, skipna=True)
        return tab

    def to_dict(self):
        out = {"cells": [], "averages": {}}
        for rec in self.cells.to_dict("records"):
            out["cells"].append({k: (None if isinstance(v, float) and np.isnan(v) else v) for k, v in rec.items()})
        for behavior in BEHAVIORS:
            avg = self.table(behavior).loc["avg"]
            out["averages"][behavior] = {
                f"{fam}:{kind}": (None if np.isnan(r) else float(r)) for (fam, kind), r in avg.items()
            }
        return out

    def to_csv(self, path):
        self.cells.to_csv(path, index=False, lineterminator="\n")


def correlation_report(vectors, judgments, grouping=("family", "kind")) -> CorrelationReport:
    """
    Correlate every metric with every behavior percentage within groups.

    Cells with fewer than two pairs are flagged INSUFFICIENT_PAIRS and cells
    with a constant sample DEGENERATE_VARIANCE; their r is NaN.

    Parameters
    ----------
    vectors : list of EntanglementVector
    judgments : list of dict
        See build_analysis_table.
    grouping : tuple of str, optional
        Columns defining a cell group, by default (family, kind).
    """
    table = build_analysis_table(vectors, judgments)
    grouping = list(grouping)
    rows = []
    for key, g in table.groupby(grouping, sort=True):
        key = key if isinstance(key, tuple) else (key,)
        for m in METRICS:
            for b in BEHAVIORS:
                row = dict(zip(grouping, key, strict=True))
                row.update(metric=m, behavior=b, r=np.nan, p_value=np.nan, n=len(g), flag="")
                try:
                    res = pearson(g[m].to_numpy(), g[b].to_numpy())
                    row.update(r=res.r, p_value=res.p_value)
                except ShapeError:
                    row["flag"] = INSUFFICIENT_PAIRS
                except DegenerateVariance:
                    row["flag"] = DEGENERATE_VARIANCE
                rows.append(row)
    cells = pd.DataFrame(rows, columns=[*grouping, "metric", "behavior", "r", "p_value", "n", "flag"])
    n_flagged = int((cells["flag"] != "").sum())
    if n_flagged:
        logger.info("%d of %d correlation cells are flagged", n_flagged, len(cells))
    return CorrelationReport(cells)


def select_best_metric(values_by_metric: dict, labels, seed, behavior="factual"):
    """
    Fit one model per metric and keep the one with the best held-out accuracy.

    Ties go to the lower metric index. Metrics whose fit fails are skipped.

    Returns
    -------
    tuple
        (RegressionModel, dict metric -> test accuracy).
    """
    best, accuracies = None, {}
    for m in METRICS:
        if m not in values_by_metric:
            continue
        try:
            model = fit_logistic(values_by_metric[m], labels, seed, behavior=behavior, metric_id=m)
        except (FitDiverged, DegenerateLabels) as e:
            logger.info("Skipping %s for %s: %s", m, behavior, e)
            continue
        acc = model.fit_stats["test_accuracy"] or 0.0
        accuracies[m] = acc
        if best is None or acc > accuracies[best.metric_id]:
            best = model
    if best is None:
        raise FitDiverged(f"no metric could be fitted for {behavior}")
    return best, accuracies


def fit_behavior_models(table: pd.DataFrame, metrics=None, seed=0, fit_on="unlearned", select_best=False):
    """
    Fit the three behavior models on a joined analysis table.

    Parameters
    ----------
    table : pd.DataFrame
        Output of build_analysis_table.
    metrics : dict, optional
        behavior -> metric id, by default m9/m4/m3.
    seed : int, optional
        Split seed.
    fit_on : str, optional
        "unlearned" (only unlearned-model responses) or "all".
    select_best : bool, optional
        Pick each behavior's metric by held-out accuracy instead.

    Returns
    -------
    tuple
        (dict behavior -> RegressionModel, list of skipped
        ``{"behavior", "metric_id", "reason"}``).
    """
    metrics = {**DEFAULT_METRICS, **(metrics or {})}
    data = table if fit_on == "all" else table[table["kind"] == "unlearned"]
    models, skipped = {}, []
    for b in BEHAVIORS:
        labels = data[f"label_{b}"].to_numpy()
        try:
            if select_best:
                model, acc = select_best_metric({m: data[m].to_numpy() for m in METRICS}, labels, seed, b)
                model = RegressionModel(
                    model.behavior, model.metric_id, model.intercept, model.coefficient,
                    {**model.fit_stats, "selection_accuracies": acc},
                )
            else:
                model = fit_logistic(data[metrics[b]].to_numpy(), labels, seed, behavior=b, metric_id=metrics[b])
        except (ShapeError, DegenerateLabels, FitDiverged) as e:
            warnings.warn(f"Could not fit the {b} model: {e}", stacklevel=2)
            skipped.append({"behavior": b, "metric_id": metrics[b], "reason": f"{type(e).__name__}: {e}"})
            continue
        models[b] = model
    return models, skipped


class FlaggedPrompt(NamedTuple):
    prompt_id: str
    probability: float


def default_threshold(probabilities) -> float:
    """90th percentile of the predicted probabilities."""
    return float(np.percentile(np.asarray(probabilities, dtype=float), 90))


def risk_filter(vectors, model: RegressionModel, threshold=None) -> list:
    """
    Flag prompts whose predicted probability reaches a threshold.

    Parameters
    ----------
    vectors : list of EntanglementVector
    model : RegressionModel
        Usually the factual model.
    threshold : float, optional
        In (0, 1]. By default the 90th percentile of this run's predicted
        probabilities.

    Returns
    -------
    list of FlaggedPrompt
        Sorted by descending probability, then prompt id.
    """
    if not vectors:
        return []
    probs = predict(model, [getattr(v, model.metric_id) for v in vectors])
    probs = np.atleast_1d(probs)
    if threshold is None:
        threshold = default_threshold(probs)
    if not 0 < threshold <= 1:
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    flagged = [
        FlaggedPrompt(v.prompt_id, float(p)) for v, p in zip(vectors, probs, strict=True) if p >= threshold
    ]
    return sorted(flagged, key=lambda f: (-f.probability, f.prompt_id))


def predict_table(models: dict, vectors) -> pd.DataFrame:
    """
    Predicted probability of every behavior for every prompt.

    Returns
    -------
    pd.DataFrame
        prompt_id, variant, then ``p_<behavior>`` per model given.
    """
    df = pd.DataFrame({"prompt_id": [v.prompt_id for v in vectors], "variant": [v.variant for v in vectors]})
    for b in BEHAVIORS:
        if b in models:
            m = models[b]
            df[f"p_{b}"] = np.atleast_1d(predict(m, [getattr(v, m.metric_id) for v in vectors]))
    return df


def _published(name):
    return files("py_skeb") / "data" / "published" / name


def load_published_models() -> dict:
    """The published behavior models (no fit_stats)."""
    records = json.loads(_published("published_coefficients.json").read_text(encoding="utf-8"))
    return {
        r["behavior"]: RegressionModel(r["behavior"], r["metric_id"], float(r["intercept"]),
                                       float(r["coefficient"]), None, "published")
        for r in records
    }


def load_published_correlations() -> pd.DataFrame:
    """Published base and unlearned correlations per model family and metric."""
    with _published("published_correlations.csv").open("r", encoding="utf-8") as f:
        return pd.read_csv(f)


def load_models(path) -> tuple:
    """Read a models file written by the fit stage."""
    data = read_json(path)
    models = {m["behavior"]: RegressionModel.from_dict(m) for m in data.get("models", [])}
    return models, data.get("skipped", [])
