import logging
from pathlib import Path

import numpy as np
import pandas as pd

from ..components.analytics import (
    BEHAVIOR_CATEGORY,
    BEHAVIORS,
    CorrelationReport,
    load_models,
    load_published_correlations,
    load_published_models,
)
from ..components.entanglement import METRICS
from ..components.judge import JUDGMENT_KEYS
from ..components.prompts import VARIANTS
from ..utility.exceptions import DependencyError
from ..utility.util import read_json, read_jsonl, sha256_file, write_json

logger = logging.getLogger(__name__)

# Input file -> stage producing it.
REPORT_INPUTS = {
    "correlations.json": "correlate",
    "models.json": "fit",
    "scores.jsonl": "score",
    "judgments.jsonl": "judge",
    "predictions.jsonl": "predict",
    "flagged.json": "filter",
}


def _to_csv(df: pd.DataFrame, path):
    df.to_csv(path, index=False, lineterminator="\n")


def _order_variants(df, by):
    df = df.copy()
    df["_v"] = df["variant"].map({v: i for i, v in enumerate(VARIANTS)})
    df = df.sort_values([*by[:-1], "_v"] if by[-1] == "variant" else by).drop(columns="_v")
    return df.reset_index(drop=True)


def correlation_tables(cells: pd.DataFrame) -> pd.DataFrame:
    """Metric rows (plus "avg") by ``family:kind`` columns, one block per behavior."""
    report = CorrelationReport(cells)
    blocks = []
    for b in BEHAVIORS:
        tab = report.table(b)
        tab.columns = [f"{fam}:{kind}" for fam, kind in tab.columns]
        tab = tab.reset_index().rename(columns={"index": "metric"})
        tab.insert(0, "behavior", b)
        blocks.append(tab)
    return pd.concat(blocks, ignore_index=True)


def model_table(models: dict) -> pd.DataFrame:
    """Coefficient rows per behavior: intercept and metric."""
    rows = []
    for b in BEHAVIORS:
        if b not in models:
            continue
        m = models[b]
        stats = m.fit_stats or {}
        for k, (variable, coef) in enumerate((("intercept", m.intercept), (m.metric_id, m.coefficient))):
            rows.append(
                {
                    "behavior": b,
                    "variable": variable,
                    "coef": coef,
                    "std_err": stats["std_errs"][k] if stats else None,
                    "z": stats["z_values"][k] if stats else None,
                    "p_value": stats["p_values"][k] if stats else None,
                    "test_accuracy": stats.get("test_accuracy"),
                    "source": m.source,
                }
            )
    return pd.DataFrame(
        rows, columns=["behavior", "variable", "coef", "std_err", "z", "p_value", "test_accuracy", "source"]
    )


def _judged_frame(judgments) -> pd.DataFrame:
    rows = []
    for j in judgments:
        if j.get("final") is None:
            continue
        row = {k: j[k] for k in ("response_id", "prompt_id", "variant", "model", "family", "kind")}
        row.update({b: j["final"][BEHAVIOR_CATEGORY[b]] for b in BEHAVIORS})
        rows.append(row)
    return pd.DataFrame(
        rows, columns=["response_id", "prompt_id", "variant", "model", "family", "kind", *BEHAVIORS]
    )


def entanglement_by_technique(scores) -> pd.DataFrame:
    """Mean normalized metric per prompt variant."""
    rows = [{"variant": s["variant"], **s["normalized"]} for s in scores]
    df = pd.DataFrame(rows, columns=["variant", *METRICS])
    out = df.groupby("variant", sort=False).agg(n=("m1", "size"), **{m: (m, "mean") for m in METRICS})
    return _order_variants(out.reset_index(), ["variant"])


def technique_effectiveness(judged: pd.DataFrame) -> pd.DataFrame:
    """Mean behavior percentages per model kind and variant."""
    out = judged.groupby(["kind", "variant"], sort=False).agg(
        n=("factual", "size"), **{b: (b, "mean") for b in BEHAVIORS}
    )
    out = out.reset_index()
    h = out["hallucination"].to_numpy(dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(h > 0, out["factual"].to_numpy(dtype=float) / np.where(h > 0, h, 1), np.nan)
    out["factual_to_hallucination"] = ratio
    return _order_variants(out, ["kind", "variant"])


def entanglement_vs_factual(judged: pd.DataFrame, scores) -> pd.DataFrame:
    """One point per judged response: raw and normalized DWIS against factual %."""
    by_prompt = {s["prompt_id"]: s for s in scores}
    df = judged.copy()
    df["m9"] = [by_prompt[p]["m9"] for p in df["prompt_id"]]
    df["m9_normalized"] = [by_prompt[p]["normalized"]["m9"] for p in df["prompt_id"]]
    cols = ["response_id", "prompt_id", "variant", "model", "family", "kind", "m9", "m9_normalized", "factual"]
    return df[cols].sort_values(["model", "prompt_id"]).reset_index(drop=True)


def recall_by_model_technique(judged: pd.DataFrame) -> pd.DataFrame:
    """Mean factual % per model and variant."""
    out = judged.groupby(["family", "kind", "model", "variant"], sort=False).agg(
        n=("factual", "size"), factual=("factual", "mean")
    )
    return _order_variants(out.reset_index(), ["family", "kind", "model", "variant"])


def predicted_by_technique(predictions) -> pd.DataFrame:
    df = pd.DataFrame(predictions)
    cols = [f"p_{b}" for b in BEHAVIORS if f"p_{b}" in df.columns]
    out = df.groupby("variant", sort=False).agg(n=("prompt_id", "size"), **{c: (c, "mean") for c in cols})
    return _order_variants(out.reset_index(), ["variant"])


def published_correlation_table() -> pd.DataFrame:
    """The published correlations with an "avg" row per model family."""
    df = load_published_correlations()
    avg = df.groupby("family", sort=False)[["base", "unlearned"]].mean().reset_index()
    avg.insert(1, "metric", "avg")
    out = pd.concat([df, avg], ignore_index=True)
    out["_f"] = out["family"].map({f: i for i, f in enumerate(df["family"].unique())})
    out["_m"] = out["metric"].map({m: i for i, m in enumerate([*METRICS, "avg"])})
    return out.sort_values(["_f", "_m"]).drop(columns=["_f", "_m"]).reset_index(drop=True)


def build_report(output_dir, replay_published=False) -> dict:
    """
    Write the report bundle into ``<output_dir>/report``.

    Parameters
    ----------
    output_dir : str or Path
        The run directory holding the analytics outputs.
    replay_published : bool, optional
        Also write the published correlation table.

    Returns
    -------
    dict
        The bundle index (file name -> sha256), also written to
        ``bundle.json``.

    Raises
    ------
    DependencyError
        Naming the stage whose output is missing.
    """
    output_dir = Path(output_dir)
    for name, stage in REPORT_INPUTS.items():
        if not (output_dir / name).exists():
            raise DependencyError(stage, f"report needs {name} from stage {stage!r}")
    report_dir = output_dir / "report"
    report_dir.mkdir(parents=True, exist_ok=True)

    correlations = read_json(output_dir / "correlations.json")
    cells = pd.DataFrame(correlations["cells"])
    if cells.empty:
        cells = pd.DataFrame(columns=["family", "kind", "metric", "behavior", "r", "p_value", "n", "flag"])
    cells["r"] = cells["r"].astype(float)
    _to_csv(correlation_tables(cells), report_dir / "correlations.csv")
    write_json(correlations, report_dir / "correlations.json")

    models, skipped = load_models(output_dir / "models.json")
    published = load_published_models()
    for b in BEHAVIORS:
        models.setdefault(b, published[b])
    _to_csv(model_table(models), report_dir / "logistic_models.csv")
    write_json(
        {"models": [models[b].to_dict() for b in BEHAVIORS], "skipped": skipped},
        report_dir / "logistic_models.json",
    )

    scores = read_jsonl(output_dir / "scores.jsonl", METRICS)
    judged = _judged_frame(read_jsonl(output_dir / "judgments.jsonl", JUDGMENT_KEYS))
    _to_csv(entanglement_by_technique(scores), report_dir / "entanglement_by_technique.csv")
    _to_csv(technique_effectiveness(judged), report_dir / "technique_effectiveness.csv")
    _to_csv(entanglement_vs_factual(judged, scores), report_dir / "entanglement_vs_factual.csv")
    _to_csv(recall_by_model_technique(judged), report_dir / "recall_by_model_technique.csv")
    _to_csv(predicted_by_technique(read_jsonl(output_dir / "predictions.jsonl")),
            report_dir / "predicted_by_technique.csv")

    flagged = read_json(output_dir / "flagged.json")
    rows = [{"rank": i + 1, **f, "threshold": flagged["threshold"]} for i, f in enumerate(flagged["flagged"])]
    _to_csv(pd.DataFrame(rows, columns=["rank", "prompt_id", "variant", "probability", "threshold"]),
            report_dir / "flagged_prompts.csv")

    replay_path = report_dir / "published_correlations.csv"
    if replay_published:
        _to_csv(published_correlation_table(), replay_path)
    elif replay_path.exists():
        replay_path.unlink()

    files = sorted(p.name for p in report_dir.iterdir() if p.is_file() and p.name != "bundle.json")
    bundle = {"files": {name: sha256_file(report_dir / name) for name in files}}
    write_json(bundle, report_dir / "bundle.json")
    logger.info("Report bundle with %d files written to %s", len(files), report_dir)
    return bundle
