"""
Command-line entry point: ``skeb <stage> [options]`` or ``skeb run``.

Every subcommand runs its pipeline stage inside the run directory
(``[paths] output_dir``). Input flags of a stage (``--graph``, ``--scores``,
...) copy the given file into the run directory first; ``--out`` copies the
stage's main output to the given path afterwards. Flags override the config
file.

Exit codes: 0 success, 2 config error, 3 dependency error, 4 gateway
error, 5 data error.
"""

import argparse
import logging
import shutil
import sys
from collections.abc import Sequence
from pathlib import Path

from .models.skeb_pipeline import SKeBPipeline
from .models.stages import STAGE_NAMES
from .utility.config import RunConfig
from .utility.exceptions import SKeBError

logger = logging.getLogger("py_skeb")

# Stage -> main output copied by --out.
MAIN_OUTPUT = {
    "build-graph": "graph.json",
    "transform": "prompts.jsonl",
    "annotate": "prompts_annotated.jsonl",
    "generate": "responses.jsonl",
    "judge": "judgments.jsonl",
    "score": "scores.jsonl",
    "correlate": "correlations.json",
    "fit": "models.json",
    "predict": "predictions.jsonl",
    "filter": "flagged.json",
    "report": "report",
}

# Stage -> {input flag: file name inside the run directory}.
STAGE_IMPORTS = {
    "annotate": {"prompts": "prompts.jsonl"},
    "generate": {"prompts": "prompts_annotated.jsonl"},
    "judge": {"responses": "responses.jsonl"},
    "score": {"graph": "graph.json", "prompts": "prompts_annotated.jsonl"},
    "correlate": {"scores": "scores.jsonl", "judgments": "judgments.jsonl"},
    "fit": {"scores": "scores.jsonl", "judgments": "judgments.jsonl"},
    "predict": {"scores": "scores.jsonl", "models": "models.json"},
    "filter": {"predictions": "predictions.jsonl", "scores": "scores.jsonl", "models": "models.json"},
}


def _csv(value: str) -> list:
    return [v.strip() for v in value.split(",") if v.strip()]


def _abspath(value: str) -> str:
    return str(Path(value).resolve())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skeb",
        description="Knowledge-entanglement evaluation of unlearned language models.",
    )
    parser.add_argument("--config", type=Path, help="TOML run configuration.")
    parser.add_argument("--mock-gateway", type=_abspath, help="Fixture file for offline runs.")
    parser.add_argument("--out-dir", type=_abspath, help="Run directory (overrides [paths] output_dir).")
    parser.add_argument("--force", action="store_true", help="Re-run stages with unchanged inputs.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("build-graph", help="Build the domain graph from a corpus.")
    p.add_argument("--corpus", type=_abspath)
    p.add_argument("--gazetteer", type=_abspath)
    p.add_argument("--marker", help="Chapter heading pattern.")

    p = sub.add_parser("transform", help="Generate persuasive prompt variants.")
    p.add_argument("--prompts", type=_abspath, help="Base prompts (JSONL).")
    p.add_argument("--techniques", type=_csv, help="Comma list of emo, logic, auth.")
    p.add_argument("--model", help="Rewriting model.")

    p = sub.add_parser("annotate", help="Annotate prompts with mentioned entities.")
    p.add_argument("--prompts", type=_abspath)
    p.add_argument("--gazetteer", type=_abspath)

    p = sub.add_parser("generate", help="Query the evaluated models.")
    p.add_argument("--prompts", type=_abspath)
    p.add_argument("--max-new-tokens", type=int)

    p = sub.add_parser("judge", help="Score responses with the judge ensemble.")
    p.add_argument("--responses", type=_abspath)
    p.add_argument("--judges", type=_csv, help="Comma list of three judge models.")
    p.add_argument("--tiebreak", help="Tie-break judge model.")

    p = sub.add_parser("score", help="Compute entanglement metrics per prompt.")
    p.add_argument("--graph", type=_abspath)
    p.add_argument("--prompts", type=_abspath)
    p.add_argument("--refs", help="Comma list of reference entity ids/names, or a file.")
    p.add_argument("--delta", type=float, help="DWIS decay in (0, 1).")

    for name, help_ in (("correlate", "Correlate metrics with behaviors."), ("fit", "Fit behavior models.")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--scores", type=_abspath)
        p.add_argument("--judgments", type=_abspath)
        if name == "fit":
            p.add_argument("--seed", type=int)
            p.add_argument("--fit-on", choices=("unlearned", "all"))
            p.add_argument("--metric", action="append", metavar="BEHAVIOR=MK",
                           help="e.g. factual=m9; repeatable.")
            p.add_argument("--select-best", action="store_true", default=None)
            p.add_argument("--published", action="store_true", help="Use the published coefficients.")

    p = sub.add_parser("predict", help="Predict behavior probabilities per prompt.")
    p.add_argument("--scores", type=_abspath)
    p.add_argument("--models", type=_abspath)

    p = sub.add_parser("filter", help="Flag high-risk prompts.")
    p.add_argument("--predictions", type=_abspath)
    p.add_argument("--scores", type=_abspath)
    p.add_argument("--models", type=_abspath)
    p.add_argument("--threshold", type=float)

    p = sub.add_parser("report", help="Write the report bundle.")
    p.add_argument("--replay-published", action="store_true", default=None)

    p = sub.add_parser("run", help="Run the whole pipeline (or --stages).")
    p.add_argument("--stages", type=_csv, help=f"Comma list out of {', '.join(STAGE_NAMES)}.")
    p.add_argument("--replay-published", action="store_true", default=None)

    for name, parser_ in sub.choices.items():
        if name != "run":
            parser_.add_argument("--out", type=_abspath, help="Copy the main output here.")
    return parser


def _refs_override(value: str) -> dict:
    if Path(value).is_file():
        return {"refs_file": _abspath(value)}
    return {"refs": [int(v) if v.isdigit() else v for v in _csv(value)]}


def overrides_from_args(args) -> dict:
    """Turn command-line flags into config overrides."""
    o = {}

    def put(section, key, value):
        if value is not None:
            o.setdefault(section, {})[key] = value

    get = lambda name: getattr(args, name, None)  # noqa: E731
    put("paths", "output_dir", get("out_dir"))
    put("gateway", "mock_fixtures", get("mock_gateway"))
    if args.command == "build-graph":
        put("paths", "corpus", get("corpus"))
        put("paths", "marker", get("marker"))
    if args.command in ("build-graph", "annotate"):
        put("paths", "gazetteer", get("gazetteer"))
    if args.command == "transform":
        put("paths", "prompts", get("prompts"))
        put("transform", "techniques", get("techniques"))
        put("transform", "model", get("model"))
    put("generate", "max_new_tokens", get("max_new_tokens"))
    put("judge", "judges", get("judges"))
    put("judge", "tiebreak", get("tiebreak"))
    if get("refs") is not None:
        o.setdefault("dwis", {}).update(_refs_override(args.refs))
    put("dwis", "delta", get("delta"))
    put("analytics", "seed", get("seed"))
    put("analytics", "fit_on", get("fit_on"))
    put("analytics", "select_best", get("select_best"))
    put("analytics", "threshold", get("threshold"))
    put("analytics", "replay_published", get("replay_published"))
    if get("published"):
        put("analytics", "model_source", "published")
    if get("metric"):
        metrics = dict(m.split("=", 1) for m in args.metric)
        put("analytics", "metrics", metrics)
    return o


def _import_inputs(args, pipe):
    for flag, name in STAGE_IMPORTS.get(args.command, {}).items():
        src = getattr(args, flag, None)
        if src is None:
            continue
        dst = pipe.out(name)
        if Path(src) != dst.resolve():
            shutil.copyfile(src, dst)
            logger.info("Imported %s as %s", src, dst)


def _export_output(args, pipe):
    dst = getattr(args, "out", None)
    if dst is None:
        return
    src = pipe.out(MAIN_OUTPUT[args.command])
    if src.is_dir():
        shutil.copytree(src, dst, dirs_exist_ok=True)
    else:
        Path(dst).parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(src, dst)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        overrides = overrides_from_args(args)
        if args.config is not None:
            cfg = RunConfig.from_toml(args.config, overrides=overrides)
        else:
            cfg = RunConfig(overrides=overrides, base_dir=Path.cwd())
        pipe = SKeBPipeline(cfg)
        stages = args.stages if args.command == "run" else [args.command]
        _import_inputs(args, pipe)
        manifest = pipe.run(stages, force=args.force)
        _export_output(args, pipe)
    except SKeBError as e:
        stage = getattr(e, "failed_stage", None)
        prefix = f"[{stage}] " if stage else ""
        print(f"skeb: {prefix}{type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code

    for rec in manifest.get("last_run", []):
        print(f"{rec['stage']:<12} {rec['status']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
