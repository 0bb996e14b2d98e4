import logging
from pathlib import Path

from ..components.gateway import LLMGateway, MockGateway
from ..components.prompts import load_templates
from ..utility.exceptions import DataError, DependencyError, SKeBError
from ..utility.util import TimeRecorder, read_json, sha256_file, sha256_obj, write_json
from .stages import STAGE_NAMES, STAGES, get_stage

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
GATEWAY_LOG = "gateway_log.jsonl"


class SKeBPipeline:
    """
    The SKeB evaluation pipeline.

    Stages run in dependency order (build-graph, transform, annotate,
    generate, judge, score, correlate, fit, predict, filter, report). Each
    stage records in ``manifest.json`` the hash of its inputs (upstream
    outputs, configured input files and the config values it reads), the
    hashes of its outputs and its run time. A stage whose inputs and outputs
    are unchanged is skipped.

    Parameters
    ----------
    config : RunConfig
        The run configuration.
    gateway : LLMGateway or MockGateway, optional
        Client for the language-model stages. Built from the config when
        first needed otherwise.
    mock_fixtures : str or Path, optional
        Fixture file for an offline MockGateway. Overrides
        ``[gateway] mock_fixtures``.

    Attributes
    ----------
    output_dir : Path
        The run directory.
    manifest : dict
        ``{"stages": {name: {"input_hash", "outputs", "elapsed_s",
        "status"}}, "last_run": [...]}``.
    """

    def __init__(self, config, gateway=None, mock_fixtures=None):
        self.cfg = config
        self.output_dir = Path(config.output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.mock_fixtures = mock_fixtures or config.gateway["mock_fixtures"]
        self._gateway = gateway
        self._own_gateway = gateway is None
        self.time_recorder = TimeRecorder()
        self.manifest_path = self.output_dir / MANIFEST
        if self.manifest_path.exists():
            self.manifest = read_json(self.manifest_path)
        else:
            self.manifest = {"stages": {}}

    def out(self, name) -> Path:
        return self.output_dir / name

    @property
    def gateway(self):
        if self._gateway is None:
            log_path = self.out(GATEWAY_LOG)
            if self.mock_fixtures is not None:
                logger.info("Using the mock gateway with fixtures %s", self.mock_fixtures)
                self._gateway = MockGateway.from_fixtures(self.mock_fixtures, log_path=log_path)
            else:
                self._gateway = LLMGateway.from_settings(self.cfg.gateway, log_path=log_path)
        return self._gateway

    def close(self):
        if self._gateway is not None and self._own_gateway:
            self._gateway.close()
            self._gateway = None

    def outputs_present(self, stage) -> bool:
        # the first output is the one downstream stages read
        return self.out(stage.outputs[0]).exists()

    def plan(self, stages=None) -> list:
        """
        Order the requested stages and check their dependencies.

        Raises
        ------
        DependencyError
            If a required stage is neither requested nor has its outputs on
            disk.
        """
        requested = set(STAGE_NAMES if not stages else stages)
        for name in requested:
            get_stage(name)
        ordered = [s for s in STAGES if s.name in requested]
        for s in ordered:
            for dep in s.requires:
                if dep not in requested and not self.outputs_present(get_stage(dep)):
                    raise DependencyError(dep, f"stage {s.name!r} needs the outputs of stage {dep!r}")
        return ordered

    def _upstream(self, stage):
        seen, todo = [], list(stage.requires)
        while todo:
            name = todo.pop()
            if name not in seen:
                seen.append(name)
                todo.extend(get_stage(name).requires)
        return sorted(seen)

    def input_hash(self, stage) -> str:
        """Hash of everything the stage's outputs depend on."""
        settings = self.cfg.settings
        files = {}
        for section, key in stage.input_files:
            path = settings[section][key]
            files[f"{section}.{key}"] = sha256_file(path) if path and Path(path).is_file() else None
        if stage.uses_gateway and self.mock_fixtures is not None:
            files["gateway.mock_fixtures"] = sha256_file(self.mock_fixtures)
        upstream = {}
        for name in self._upstream(stage):
            for f in get_stage(name).outputs:
                upstream[f] = sha256_file(self.out(f)) if self.out(f).exists() else None
        inputs = {
            "stage": stage.name,
            "settings": {f"{s}.{k}": settings[s][k] for s, k in stage.settings},
            "files": files,
            "upstream": upstream,
        }
        if stage.name == "transform":
            templates = load_templates(settings["paths"]["template_dir"], self.cfg.transform["techniques"])
            inputs["templates"] = {t: h for t, (_, h) in templates.items()}
        return sha256_obj(inputs)

    def is_fresh(self, stage, input_hash) -> bool:
        rec = self.manifest["stages"].get(stage.name)
        if rec is None or rec.get("input_hash") != input_hash:
            return False
        for f, h in rec.get("outputs", {}).items():
            if not self.out(f).exists() or sha256_file(self.out(f)) != h:
                return False
        return set(rec.get("outputs", {})) >= set(stage.outputs)

    def run(self, stages=None, force=False) -> dict:
        """
        Run stages in dependency order.

        Parameters
        ----------
        stages : list of str, optional
            Stage names; all stages by default.
        force : bool, optional
            Re-run stages even when their inputs are unchanged.

        Returns
        -------
        dict
            The run manifest.
        """
        ordered = self.plan(stages)
        self.cfg.validate([s.name for s in ordered])
        last_run = []
        try:
            for stage in ordered:
                h = self.input_hash(stage)
                if not force and self.is_fresh(stage, h):
                    logger.info("[%s] inputs unchanged; skipped", stage.name)
                    self.manifest["stages"][stage.name]["status"] = "skipped"
                    last_run.append({"stage": stage.name, "status": "skipped"})
                    continue

                logger.info("[%s] running", stage.name)
                self.time_recorder.lap()
                try:
                    stage.func(self)
                except SKeBError as e:
                    e.failed_stage = stage.name
                    e.add_note(f"stage: {stage.name}")
                    logger.error("[%s] failed: %s", stage.name, e)
                    raise
                except Exception as e:
                    err = DataError(f"{type(e).__name__}: {e}")
                    err.failed_stage = stage.name
                    err.add_note(f"stage: {stage.name}")
                    logger.exception("[%s] failed", stage.name)
                    raise err from e
                elapsed = self.time_recorder.lap()
                self.manifest["stages"][stage.name] = {
                    "input_hash": h,
                    "outputs": {f: sha256_file(self.out(f)) for f in stage.outputs},
                    "elapsed_s": round(elapsed, 3),
                    "status": "ran",
                }
                last_run.append({"stage": stage.name, "status": "ran"})
                self.manifest["last_run"] = last_run
                write_json(self.manifest, self.manifest_path)
                logger.info("[%s] done in %s", stage.name, self.time_recorder.sec2str(elapsed))
        finally:
            self.manifest["last_run"] = last_run
            write_json(self.manifest, self.manifest_path)
            self.close()
        return self.manifest


def run_pipeline(config, stages=None, gateway=None, mock_fixtures=None, force=False) -> dict:
    """Run the given stages (all by default) and return the run manifest."""
    return SKeBPipeline(config, gateway=gateway, mock_fixtures=mock_fixtures).run(stages, force)
