import logging
import tomllib
from copy import deepcopy
from pathlib import Path

from .exceptions import ConfigError

logger = logging.getLogger(__name__)

TECHNIQUE_ALIASES = {
    "emo": "emotional",
    "emotional": "emotional",
    "logic": "logical",
    "logical": "logical",
    "auth": "authority",
    "authority": "authority",
}
BEHAVIORS = ("factual", "non_factual", "hallucination")
METRIC_IDS = tuple(f"m{i}" for i in range(1, 10))
MODEL_KINDS = ("base", "unlearned")

# Every key a run config may carry. A user config (TOML) is merged over this
# template one nested level deep: a key given in a section replaces the
# default value entirely, e.g. the whole [analytics] metrics table.
DEFAULT_SETTINGS = {
    "paths": {
        "corpus": None,  # UTF-8 text
        "gazetteer": None,  # JSON list of entity definitions
        "prompts": None,  # JSONL base prompts
        "output_dir": "skeb_run",
        "marker": r"^CHAPTER",  # chapter heading pattern (line anchored)
        "template_dir": None,  # None -> bundled persuasion templates
    },
    "gateway": {
        "base_url": None,  # None -> $LLM_BASE_URL or the OpenAI API
        "max_inflight": 4,
        "retry_max": 5,  # attempts per call, at most 5
        "timeout_ms": 120000,
        "endpoints": {},  # <model name>: <base url>
        "mock_fixtures": None,  # JSON fixtures; set for offline runs
    },
    "transform": {
        "model": "gpt-4o-mini",
        "techniques": ["emotional", "logical", "authority"],
    },
    "generate": {
        "models": [],  # [{name = "...", family = "...", kind = "base"|"unlearned"}]
        "max_new_tokens": 300,
        "temperature": None,  # None -> endpoint default
        "top_p": None,
    },
    "judge": {
        "judges": ["gpt-4o-mini", "gpt-4.1-mini", "gpt-5-nano"],
        "tiebreak": "gpt-5-mini",
    },
    "dwis": {
        "refs": [],  # entity ids or names
        "refs_file": None,  # JSON list or one id/name per line
        "delta": 0.5,
    },
    "analytics": {
        "seed": 0,
        "threshold": None,  # None -> 90th percentile of predicted probabilities
        "fit_on": "unlearned",  # "unlearned" or "all"
        "metrics": {"factual": "m9", "non_factual": "m4", "hallucination": "m3"},
        "select_best": False,
        "model_source": "fit",  # "fit" or "published"
        "replay_published": False,  # add the published correlations to the report
        "n_jobs": 1,
    },
}

# Keys of [paths] (and friends) that name files, resolved against the config
# file's directory.
_PATH_KEYS = {
    "paths": ("corpus", "gazetteer", "prompts", "output_dir", "template_dir"),
    "gateway": ("mock_fixtures",),
    "dwis": ("refs_file",),
}

# Inputs each stage reads straight from [paths].
STAGE_INPUT_PATHS = {
    "build-graph": (("paths", "corpus"), ("paths", "gazetteer")),
    "transform": (("paths", "prompts"),),
    "annotate": (("paths", "gazetteer"),),
}


def merge_settings(default: dict, settings: dict | None) -> dict:
    """
    Merge user settings over a template, one nested level deep.

    Parameters
    ----------
    default : dict
        The template (e.g. DEFAULT_SETTINGS).
    settings : dict or None
        User settings with the same sections.

    Returns
    -------
    dict
        A new dictionary; neither input is modified.

    Raises
    ------
    ConfigError
        On an unknown section or key.
    """
    merged = deepcopy(default)
    for section, values in (settings or {}).items():
        if section not in merged:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(values, dict):
            raise ConfigError(f"config section [{section}] must be a table")
        for key, value in values.items():
            if key not in merged[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            merged[section][key] = deepcopy(value)
    return merged


class RunConfig:
    """
    Run configuration of the SKeB pipeline.

    Parameters
    ----------
    settings : dict, optional
        Nested settings with the sections of DEFAULT_SETTINGS. Missing keys
        take their default values.
    base_dir : str or Path, optional
        Directory relative paths are resolved against (the config file's
        directory when loaded with from_toml).
    overrides : dict, optional
        Settings applied on top of ``settings`` (command-line flags).

    Notes
    -----
    The sample settings are shown below.

    >>> settings = {
    >>>     "paths": {"corpus": "corpus.txt", "gazetteer": "gazetteer.json",
    >>>               "prompts": "base_prompts.jsonl", "output_dir": "run"},
    >>>     "generate": {"models": [{"name": "opt-2.7b-unlearned",
    >>>                              "family": "OPT-2.7B", "kind": "unlearned"}]},
    >>>     "dwis": {"refs": ["Harry Potter"], "delta": 0.5},
    >>> }
    """

    def __init__(self, settings=None, base_dir=".", overrides=None):
        self.base_dir = Path(base_dir)
        merged = merge_settings(DEFAULT_SETTINGS, settings)
        self.settings = merge_settings(merged, overrides)
        self.load_settings(self.settings)

    @classmethod
    def from_toml(cls, path, overrides=None):
        """Load a TOML config file."""
        path = Path(path)
        try:
            with open(path, "rb") as f:
                settings = tomllib.load(f)
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
        logger.debug("Loaded config %s", path)
        return cls(settings, base_dir=path.parent, overrides=overrides)

    def load_settings(self, settings: dict):
        """
        Load and check the settings.

        Parameters
        ----------
        settings : dict
            The merged settings.
        """
        for section, keys in _PATH_KEYS.items():
            for key in keys:
                value = settings[section][key]
                if value is not None:
                    settings[section][key] = str(self.resolve(value))

        self.paths = settings["paths"]
        self.gateway = settings["gateway"]
        self.transform = settings["transform"]
        self.generate = settings["generate"]
        self.judge = settings["judge"]
        self.dwis = settings["dwis"]
        self.analytics = settings["analytics"]

        try:
            self.techniques = [TECHNIQUE_ALIASES[t] for t in self.transform["techniques"]]
        except KeyError as e:
            raise ConfigError(
                f"unknown technique {e.args[0]!r}; expected one of "
                f"{sorted(set(TECHNIQUE_ALIASES))}"
            ) from e
        self.transform["techniques"] = list(dict.fromkeys(self.techniques))

        delta = self.dwis["delta"]
        if not isinstance(delta, int | float) or not 0 < delta < 1:
            raise ConfigError(f"dwis delta must lie in (0, 1), got {delta!r}")

        if len(self.judge["judges"]) != 3:
            raise ConfigError(
                f"exactly three judges are required, got {len(self.judge['judges'])}"
            )
        if not self.judge["tiebreak"]:
            raise ConfigError("a tie-break judge is required")

        if not 1 <= self.gateway["retry_max"] <= 5:
            raise ConfigError(f"retry_max must lie in [1, 5], got {self.gateway['retry_max']!r}")
        if self.gateway["max_inflight"] < 1:
            raise ConfigError(f"max_inflight must be at least 1, got {self.gateway['max_inflight']!r}")

        models = []
        for i, m in enumerate(self.generate["models"]):
            if not isinstance(m, dict) or "name" not in m:
                raise ConfigError(f"[generate] models[{i}] needs a name")
            kind = m.get("kind", "unlearned")
            if kind not in MODEL_KINDS:
                raise ConfigError(f"[generate] models[{i}] has unknown kind {kind!r}")
            models.append({"name": m["name"], "family": m.get("family", m["name"]), "kind": kind})
        self.generate["models"] = models
        if int(self.generate["max_new_tokens"]) < 1:
            raise ConfigError("max_new_tokens must be at least 1")

        a = self.analytics
        if a["fit_on"] not in ("unlearned", "all"):
            raise ConfigError(f"fit_on must be 'unlearned' or 'all', got {a['fit_on']!r}")
        if a["model_source"] not in ("fit", "published"):
            raise ConfigError(f"model_source must be 'fit' or 'published', got {a['model_source']!r}")
        for behavior, metric in a["metrics"].items():
            if behavior not in BEHAVIORS or metric not in METRIC_IDS:
                raise ConfigError(f"invalid metric assignment {behavior} = {metric!r}")
        a["metrics"] = {**DEFAULT_SETTINGS["analytics"]["metrics"], **a["metrics"]}
        threshold = a["threshold"]
        if threshold is not None and not 0 < threshold <= 1:
            raise ConfigError(f"threshold must lie in (0, 1], got {threshold!r}")

    def resolve(self, path) -> Path:
        path = Path(path)
        return path if path.is_absolute() else self.base_dir / path

    @property
    def output_dir(self) -> Path:
        return Path(self.paths["output_dir"])

    def validate(self, stages=()):
        """
        Check that every input file the given stages read exists.

        Raises
        ------
        ConfigError
            Naming the missing path.
        """
        needed = set()
        for stage in stages:
            needed.update(STAGE_INPUT_PATHS.get(stage, ()))
        if self.gateway["mock_fixtures"] is not None:
            needed.add(("gateway", "mock_fixtures"))
        if self.dwis["refs_file"] is not None:
            needed.add(("dwis", "refs_file"))
        if self.paths["template_dir"] is not None:
            needed.add(("paths", "template_dir"))
        for section, key in sorted(needed):
            value = self.settings[section][key]
            if value is None:
                raise ConfigError(f"[{section}] {key} is required")
            if not Path(value).exists():
                raise ConfigError(f"[{section}] {key}: {value} does not exist")
        if "generate" in stages and not self.generate["models"]:
            raise ConfigError("[generate] models is empty")
