"""
Pipeline stages.

Every stage is a function ``stage(pipeline)`` that reads its inputs from the
run's output directory (or from the configured input files) and writes its
outputs there. ``STAGES`` lists them in dependency order.
"""

import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

from joblib import Parallel, delayed

from ..components.analytics import (
    BEHAVIORS,
    build_analysis_table,
    correlation_report,
    default_threshold,
    fit_behavior_models,
    load_models,
    load_published_models,
    predict_table,
    risk_filter,
)
from ..components.corpus_graph import (
    Gazetteer,
    build_graph,
    load_graph,
    read_corpus,
    save_graph,
    segment_corpus,
)
from ..components.entanglement import (
    METRICS,
    DwisConfig,
    EntanglementVector,
    normalize_scores,
    score_prompts,
)
from ..components.gateway import CompletionRequest, wrap_instruction
from ..components.judge import (
    ESCALATED,
    JUDGMENT_KEYS,
    RECORD_KEYS,
    RENORMALIZED,
    RESPONSE_KEYS,
    UNJUDGED_EMPTY_RESPONSE,
    UNJUDGED_MALFORMED_VERDICT,
    JudgePanel,
)
from ..components.prompts import (
    ORIG,
    VariantCache,
    annotate_entities,
    check_content_preservation,
    load_base_prompts,
    load_prompts,
    load_templates,
    save_prompts,
    transform_prompts,
)
from ..utility.exceptions import ConfigError, EmptyReferenceSet, UnknownEntity
from ..utility.util import read_json, read_jsonl, write_json, write_jsonl
from .report import build_report

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Stage:
    """
    A pipeline stage.

    Attributes
    ----------
    name : str
        Stage (and subcommand) name.
    func : callable
        ``func(pipeline)``.
    requires : tuple of str
        Stages whose outputs this stage reads.
    outputs : tuple of str
        Files written inside the output directory, the one downstream stages
        read first.
    settings : tuple of (section, key)
        Config values the outputs depend on.
    input_files : tuple of (section, key)
        Configured input files the outputs depend on.
    uses_gateway : bool
        Whether the stage calls language models.
    """

    name: str
    func: object
    requires: tuple = ()
    outputs: tuple = ()
    settings: tuple = ()
    input_files: tuple = ()
    uses_gateway: bool = False


def stage_build_graph(pipe):
    cfg = pipe.cfg
    chapters = segment_corpus(read_corpus(cfg.paths["corpus"]), cfg.paths["marker"])
    gazetteer = Gazetteer.load(cfg.paths["gazetteer"])
    g = build_graph(
        chapters,
        gazetteer,
        n_jobs=cfg.analytics["n_jobs"],
        build_params={"marker": cfg.paths["marker"]},
    )
    save_graph(g, pipe.out("graph.json"))


def stage_transform(pipe):
    cfg = pipe.cfg
    bases = load_base_prompts(cfg.paths["prompts"])
    templates = load_templates(cfg.paths["template_dir"], cfg.transform["techniques"])
    cache = VariantCache(pipe.out("variant_cache.json"))
    records = transform_prompts(
        bases,
        cfg.transform["techniques"],
        pipe.gateway,
        model=cfg.transform["model"],
        templates=templates,
        cache=cache,
    )
    cache.save()
    save_prompts(records, pipe.out("prompts.jsonl"))


def stage_annotate(pipe):
    gazetteer = Gazetteer.load(pipe.cfg.paths["gazetteer"])
    records = [annotate_entities(r, gazetteer) for r in load_prompts(pipe.out("prompts.jsonl"))]
    violations = check_content_preservation(records)
    save_prompts(records, pipe.out("prompts_annotated.jsonl"))
    write_json({"violations": violations}, pipe.out("content_violations.json"))


def _generate_one(gateway, model, record, gen):
    request = CompletionRequest(
        model["name"],
        wrap_instruction(record.text),
        max_new_tokens=gen["max_new_tokens"],
        temperature=gen["temperature"],
        top_p=gen["top_p"],
    )
    response = gateway.complete(request)
    return {
        "response_id": f"{record.id}@{model['name']}",
        "prompt_id": record.id,
        "base_id": record.base_id,
        "variant": record.variant,
        "model": model["name"],
        "family": model["family"],
        "kind": model["kind"],
        "request_hash": response.request_hash,
        "text": response.text,
        "empty": response.empty,
    }


def stage_generate(pipe):
    gen = pipe.cfg.generate
    records = load_prompts(pipe.out("prompts_annotated.jsonl"))
    tasks = [(m, r) for m in gen["models"] for r in records]
    gateway = pipe.gateway
    n_jobs = getattr(gateway, "max_inflight", 1)
    if n_jobs == 1:
        responses = [_generate_one(gateway, m, r, gen) for m, r in tasks]
    else:
        responses = Parallel(n_jobs=n_jobs, prefer="threads")(
            delayed(_generate_one)(gateway, m, r, gen) for m, r in tasks
        )
    n_empty = sum(r["empty"] for r in responses)
    if n_empty:
        logger.warning("%d of %d responses are empty", n_empty, len(responses))
    write_jsonl(responses, pipe.out("responses.jsonl"))


def stage_judge(pipe):
    cfg = pipe.cfg
    responses = read_jsonl(pipe.out("responses.jsonl"), RESPONSE_KEYS)
    panel = JudgePanel(cfg.judge["judges"], cfg.judge["tiebreak"], pipe.gateway)
    judged = [r for r in responses if r["text"].strip()]
    scores = {s.response_id: s for s in panel.judge_all([(r["response_id"], r["text"]) for r in judged])}

    records = []
    for r in responses:
        rec = {k: r[k] for k in RECORD_KEYS}
        score = scores.get(r["response_id"])
        if score is None:
            flag = UNJUDGED_MALFORMED_VERDICT if r["response_id"] in panel.unjudged else UNJUDGED_EMPTY_RESPONSE
            rec.update(verdicts=[], means=None, final=None, escalated=False, flags=[flag])
        else:
            flags = []
            if score.escalated:
                flags.append(ESCALATED)
            if any(v.renormalized for v in score.verdicts):
                flags.append(RENORMALIZED)
            rec.update({**score.to_dict(), "flags": flags})
        records.append(rec)
    write_jsonl(records, pipe.out("judgments.jsonl"))
    JudgePanel.get_audit_df(panel).to_csv(pipe.out("judge_audit.csv"), index=False, lineterminator="\n")
    if scores:
        rate = sum(s.escalated for s in scores.values()) / len(scores)
        logger.info("Judged %d responses; escalation rate %.1f%%", len(scores), 100 * rate)


def resolve_refs(cfg, graph):
    """
    Reference node ids for DWIS.

    Taken from ``[dwis] refs`` and ``refs_file`` (ids or entity names). When
    neither is given, the target entities declared on the base prompts are
    used.
    """
    items = list(cfg.dwis["refs"])
    if cfg.dwis["refs_file"] is not None:
        path = Path(cfg.dwis["refs_file"])
        if path.suffix == ".json":
            items += list(read_json(path))
        else:
            items += [s.strip() for s in path.read_text(encoding="utf-8").splitlines() if s.strip()]

    by_name = {}
    for e in graph.entities.values():
        for alias in e.aliases:
            by_name.setdefault(alias.casefold(), e.id)
    refs = set()
    for item in items:
        if isinstance(item, int) or (isinstance(item, str) and item.isdigit()):
            refs.add(int(item))
        elif str(item).casefold() in by_name:
            refs.add(by_name[str(item).casefold()])
        else:
            raise UnknownEntity(f"reference {item!r} is not an entity of the graph")

    if not refs and not items:
        for r in read_jsonl(Path(cfg.paths["prompts"])) if cfg.paths["prompts"] else []:
            refs.update(r.get("target_entities") or ())
        if refs:
            logger.info("Using base-prompt target entities as DWIS references: %s", sorted(refs))
    if not refs:
        raise EmptyReferenceSet("no DWIS reference nodes configured")
    return frozenset(refs)


def stage_score(pipe):
    cfg = pipe.cfg
    g = load_graph(pipe.out("graph.json"))
    records = load_prompts(pipe.out("prompts_annotated.jsonl"))
    dwis_cfg = DwisConfig(resolve_refs(cfg, g), cfg.dwis["delta"])
    vectors = normalize_scores(score_prompts(g, records, dwis_cfg, n_jobs=cfg.analytics["n_jobs"]))
    write_jsonl((v.to_dict() for v in vectors), pipe.out("scores.jsonl"))


def load_vectors(path):
    return [EntanglementVector.from_dict(d) for d in read_jsonl(path, METRICS)]


def load_judgments(path):
    return read_jsonl(path, JUDGMENT_KEYS)


def stage_correlate(pipe):
    vectors = load_vectors(pipe.out("scores.jsonl"))
    report = correlation_report(vectors, load_judgments(pipe.out("judgments.jsonl")))
    write_json(report.to_dict(), pipe.out("correlations.json"))
    report.to_csv(pipe.out("correlations.csv"))


def stage_fit(pipe):
    a = pipe.cfg.analytics
    if a["model_source"] == "published":
        models, skipped = load_published_models(), []
    else:
        table = build_analysis_table(
            load_vectors(pipe.out("scores.jsonl")), load_judgments(pipe.out("judgments.jsonl"))
        )
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            models, skipped = fit_behavior_models(
                table, a["metrics"], a["seed"], a["fit_on"], a["select_best"]
            )
        for w in caught:
            logger.warning("%s", w.message)
    write_json(
        {"models": [models[b].to_dict() for b in BEHAVIORS if b in models], "skipped": skipped},
        pipe.out("models.json"),
    )


def resolve_models(pipe):
    """Fitted models, with published ones standing in for skipped fits."""
    models, skipped = load_models(pipe.out("models.json"))
    published = None
    for b in BEHAVIORS:
        if b not in models:
            published = published or load_published_models()
            logger.warning("No fitted %s model; using the published coefficients", b)
            models[b] = published[b]
    return models, skipped


def stage_predict(pipe):
    models, _ = resolve_models(pipe)
    table = predict_table(models, load_vectors(pipe.out("scores.jsonl")))
    write_jsonl(table.to_dict("records"), pipe.out("predictions.jsonl"))


def stage_filter(pipe):
    models, _ = resolve_models(pipe)
    model = models["factual"]
    vectors = load_vectors(pipe.out("scores.jsonl"))
    probs = [p["p_factual"] for p in read_jsonl(pipe.out("predictions.jsonl"))]
    threshold = pipe.cfg.analytics["threshold"]
    source = "config"
    if threshold is None:
        threshold = default_threshold(probs) if probs else 1.0
        source = "percentile_90"
    flagged = risk_filter(vectors, model, threshold)
    variants = {v.prompt_id: v.variant for v in vectors}
    write_json(
        {
            "threshold": threshold,
            "threshold_source": source,
            "model": model.to_dict(),
            "n_prompts": len(vectors),
            "flagged": [
                {"prompt_id": f.prompt_id, "variant": variants[f.prompt_id], "probability": f.probability}
                for f in flagged
            ],
        },
        pipe.out("flagged.json"),
    )
    logger.info("Flagged %d of %d prompts at threshold %.4f", len(flagged), len(vectors), threshold)


def stage_report(pipe):
    build_report(pipe.output_dir, replay_published=pipe.cfg.analytics["replay_published"])


REPORT_FILES = (
    "correlations.csv",
    "correlations.json",
    "logistic_models.csv",
    "logistic_models.json",
    "entanglement_by_technique.csv",
    "technique_effectiveness.csv",
    "entanglement_vs_factual.csv",
    "recall_by_model_technique.csv",
    "predicted_by_technique.csv",
    "flagged_prompts.csv",
    "bundle.json",
)

STAGES = (
    Stage(
        "build-graph",
        stage_build_graph,
        outputs=("graph.json",),
        settings=(("paths", "marker"),),
        input_files=(("paths", "corpus"), ("paths", "gazetteer")),
    ),
    Stage(
        "transform",
        stage_transform,
        outputs=("prompts.jsonl",),
        settings=(("transform", "model"), ("transform", "techniques")),
        input_files=(("paths", "prompts"),),
        uses_gateway=True,
    ),
    Stage(
        "annotate",
        stage_annotate,
        requires=("transform",),
        outputs=("prompts_annotated.jsonl", "content_violations.json"),
        input_files=(("paths", "gazetteer"),),
    ),
    Stage(
        "generate",
        stage_generate,
        requires=("annotate",),
        outputs=("responses.jsonl",),
        settings=(("generate", "models"), ("generate", "max_new_tokens"),
                  ("generate", "temperature"), ("generate", "top_p")),
        uses_gateway=True,
    ),
    Stage(
        "judge",
        stage_judge,
        requires=("generate",),
        outputs=("judgments.jsonl", "judge_audit.csv"),
        settings=(("judge", "judges"), ("judge", "tiebreak")),
        uses_gateway=True,
    ),
    Stage(
        "score",
        stage_score,
        requires=("build-graph", "annotate"),
        outputs=("scores.jsonl",),
        settings=(("dwis", "refs"), ("dwis", "delta")),
        input_files=(("dwis", "refs_file"), ("paths", "prompts")),
    ),
    Stage(
        "correlate",
        stage_correlate,
        requires=("score", "judge"),
        outputs=("correlations.json", "correlations.csv"),
    ),
    Stage(
        "fit",
        stage_fit,
        requires=("score", "judge"),
        outputs=("models.json",),
        settings=(("analytics", "seed"), ("analytics", "fit_on"), ("analytics", "metrics"),
                  ("analytics", "select_best"), ("analytics", "model_source")),
    ),
    Stage(
        "predict",
        stage_predict,
        requires=("fit", "score"),
        outputs=("predictions.jsonl",),
    ),
    Stage(
        "filter",
        stage_filter,
        requires=("predict",),
        outputs=("flagged.json",),
        settings=(("analytics", "threshold"),),
    ),
    Stage(
        "report",
        stage_report,
        requires=("correlate", "fit", "predict", "filter", "judge"),
        outputs=tuple(f"report/{f}" for f in REPORT_FILES),
        settings=(("analytics", "replay_published"),),
    ),
)
STAGE_NAMES = tuple(s.name for s in STAGES)


def get_stage(name) -> Stage:
    for s in STAGES:
        if s.name == name:
            return s
    raise ConfigError(f"unknown stage {name!r}; expected one of {', '.join(STAGE_NAMES)}")
