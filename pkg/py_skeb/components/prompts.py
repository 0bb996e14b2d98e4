import logging
import threading
from dataclasses import dataclass, field, replace
from importlib.resources import files
from pathlib import Path

from joblib import Parallel, delayed

from ..utility.config import TECHNIQUE_ALIASES
from ..utility.exceptions import DuplicateId, EmptyTransform, FormatError
from ..utility.util import iter_jsonl, read_json, sha256_text, write_json, write_jsonl
from .corpus_graph import extract_entities
from .gateway import DEFAULT_MAX_NEW_TOKENS, CompletionRequest

logger = logging.getLogger(__name__)

ORIG = "orig"
TECHNIQUES = ("emotional", "logical", "authority")
VARIANTS = (ORIG, *TECHNIQUES)


@dataclass(frozen=True)
class PromptRecord:
    """
    A base prompt or one of its persuasive variants.

    Parameters
    ----------
    id : str
        Unique id. Variants use ``<base_id>::<technique>``.
    base_id : str
        Id of the base prompt (equal to ``id`` for originals).
    variant : str
        "orig", "emotional", "logical", or "authority".
    text : str
        Prompt text.
    entities : frozenset, optional
        Ids of the gazetteer entities the text mentions. Filled in by
        annotate_entities.
    target_entities : frozenset, optional
        Entities the base prompt asks about, when declared. Variants inherit
        it from their base.
    provenance : dict, optional
        For variants: template hash and rewriting model.
    """

    id: str
    base_id: str
    variant: str
    text: str
    entities: frozenset = frozenset()
    target_entities: frozenset | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant == ORIG and self.base_id != self.id:
            raise ValueError(f"original prompt {self.id!r} must be its own base")
        object.__setattr__(self, "entities", frozenset(self.entities))
        if self.target_entities is not None:
            object.__setattr__(self, "target_entities", frozenset(self.target_entities))

    def to_dict(self):
        d = {
            "id": self.id,
            "base_id": self.base_id,
            "variant": self.variant,
            "text": self.text,
            "entities": sorted(self.entities),
        }
        if self.target_entities is not None:
            d["target_entities"] = sorted(self.target_entities)
        if self.provenance:
            d["provenance"] = dict(self.provenance)
        return d

    @classmethod
    def from_dict(cls, d):
        targets = d.get("target_entities")
        return cls(
            id=str(d["id"]),
            base_id=str(d.get("base_id", d["id"])),
            variant=d.get("variant", ORIG),
            text=d["text"],
            entities=frozenset(d.get("entities", ())),
            target_entities=None if targets is None else frozenset(targets),
            provenance=d.get("provenance", {}),
        )


def canonical_technique(name: str) -> str:
    """Map a technique name or alias (emo, logic, auth) to its full name."""
    if name == ORIG:
        raise ValueError("the original prompt is the identity transform and is never generated")
    try:
        return TECHNIQUE_ALIASES[name]
    except KeyError as e:
        raise ValueError(f"unknown technique {name!r}") from e


def load_prompts(path) -> list:
    """
    Read prompt records from JSONL.

    Raises
    ------
    DuplicateId
        If two lines share an id.
    FormatError
        On a malformed line, with its line number.
    """
    records, seen = [], {}
    for lineno, obj in iter_jsonl(path):
        try:
            rec = PromptRecord.from_dict(obj)
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"invalid prompt record: {e}", path=str(path), line=lineno) from e
        if rec.id in seen:
            raise DuplicateId(f"{path}:{lineno}: id {rec.id!r} already used on line {seen[rec.id]}")
        seen[rec.id] = lineno
        records.append(rec)
    return records


def load_base_prompts(path) -> list:
    """
    Read base prompts from JSONL lines ``{"id", "text"[, "target_entities"]}``.

    Every record gets variant "orig" and ``base_id == id``.
    """
    records = []
    for rec in load_prompts(path):
        if not rec.text.strip():
            raise FormatError(f"prompt {rec.id!r} has empty text", path=str(path))
        records.append(replace(rec, base_id=rec.id, variant=ORIG, provenance={}))
    logger.info("Loaded %d base prompts from %s", len(records), path)
    return records


def save_prompts(records, path):
    write_jsonl((r.to_dict() for r in records), path)


def load_templates(template_dir=None, techniques=TECHNIQUES) -> dict:
    """
    Read the persuasion instruction templates.

    Parameters
    ----------
    template_dir : str or Path, optional
        Directory with ``<technique>.txt`` files. By default the bundled
        templates.
    techniques : iterable of str, optional
        Techniques to load.

    Returns
    -------
    dict
        technique -> (template text, sha256 of the text).
    """
    root = Path(template_dir) if template_dir is not None else files("py_skeb") / "data" / "templates"
    templates = {}
    for t in techniques:
        text = (root / f"{t}.txt").read_text(encoding="utf-8")
        if "{prompt}" not in text:
            raise FormatError(f"template for {t} has no {{prompt}} placeholder", path=str(root / f"{t}.txt"))
        templates[t] = (text, sha256_text(text))
    return templates


class VariantCache:
    """
    Persistent cache of generated variant texts.

    Keys are ``<base_id>|<technique>|<template hash>`` so that editing a
    template invalidates only that technique's variants.
    """

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        self.entries = {}
        if self.path is not None and self.path.exists():
            self.entries = read_json(self.path)

    @staticmethod
    def key(base_id, technique, template_hash):
        return f"{base_id}|{technique}|{template_hash}"

    def get(self, key):
        with self._lock:
            return self.entries.get(key)

    def put(self, key, text):
        with self._lock:
            self.entries[key] = text

    def save(self):
        if self.path is not None:
            with self._lock:
                write_json(self.entries, self.path)


def transform_prompt(
    base: PromptRecord,
    technique: str,
    gateway,
    model="gpt-4o-mini",
    templates=None,
    cache=None,
) -> PromptRecord:
    """
    Rewrite a base prompt with one persuasion technique.

    Parameters
    ----------
    base : PromptRecord
        An original prompt.
    technique : str
        "emotional", "logical", "authority" (or emo, logic, auth).
    gateway : LLMGateway or MockGateway
        Client used for the rewriting call.
    model : str, optional
        Rewriting model.
    templates : dict, optional
        Output of load_templates; bundled templates by default.
    cache : VariantCache, optional
        Reused when it already holds the variant.

    Returns
    -------
    PromptRecord
        Variant ``<base_id>::<technique>`` carrying the base's target
        entities. Entities are not annotated.

    Raises
    ------
    EmptyTransform
        If the rewrite is empty.
    GatewayError
        If the call fails after retries.
    """
    technique = canonical_technique(technique)
    if templates is None:
        templates = load_templates(techniques=(technique,))
    template, template_hash = templates[technique]
    key = VariantCache.key(base.id, technique, template_hash)

    text = cache.get(key) if cache is not None else None
    if text is None:
        request = CompletionRequest(
            model=model,
            messages=[{"role": "user", "content": template.replace("{prompt}", base.text)}],
            max_new_tokens=DEFAULT_MAX_NEW_TOKENS,
        )
        text = gateway.complete(request).text.strip()
        if not text:
            raise EmptyTransform(f"{model} returned an empty {technique} rewrite of {base.id!r}")
        if cache is not None:
            cache.put(key, text)

    return PromptRecord(
        id=f"{base.id}::{technique}",
        base_id=base.id,
        variant=technique,
        text=text,
        target_entities=base.target_entities,
        provenance={"technique": technique, "template_sha256": template_hash, "model": model},
    )


def transform_prompts(
    bases, techniques, gateway, model="gpt-4o-mini", templates=None, cache=None, n_jobs=None
) -> list:
    """
    Generate the originals plus every requested variant.

    Returns
    -------
    list of PromptRecord
        Each base followed by its variants in ``techniques`` order.
    """
    techniques = list(dict.fromkeys(canonical_technique(t) for t in techniques))
    if templates is None:
        templates = load_templates(techniques=techniques)
    tasks = [(b, t) for b in bases for t in techniques]
    if n_jobs is None:
        n_jobs = getattr(gateway, "max_inflight", 1)
    if n_jobs == 1:
        variants = [transform_prompt(b, t, gateway, model, templates, cache) for b, t in tasks]
    else:
        variants = Parallel(n_jobs=n_jobs, prefer="threads")(
            delayed(transform_prompt)(b, t, gateway, model, templates, cache) for b, t in tasks
        )
    out, i = [], 0
    for b in bases:
        out.append(b)
        out.extend(variants[i : i + len(techniques)])
        i += len(techniques)
    logger.info("Generated %d variants for %d base prompts", len(variants), len(bases))
    return out


def annotate_entities(record: PromptRecord, gazetteer) -> PromptRecord:
    """Set ``entities`` to the gazetteer entities mentioned in the text."""
    ids = frozenset(eid for eid, _ in extract_entities(record.text, gazetteer))
    return replace(record, entities=ids)


def check_content_preservation(records) -> list:
    """
    Check that variants keep what their base asks about.

    A variant violates the contract if it does not mention every declared
    target entity of its base, or if its base is missing.

    Returns
    -------
    list of dict
        ``{"prompt_id", "base_id", "variant", "problem", "missing"}`` per
        violation, in record order.
    """
    bases = {r.id: r for r in records if r.variant == ORIG}
    violations = []
    seen_variants = set()
    for r in records:
        if r.variant == ORIG:
            continue
        problem, missing = None, []
        if r.base_id not in bases:
            problem = "missing_base"
        elif (r.base_id, r.variant) in seen_variants:
            problem = "duplicate_variant"
        else:
            targets = bases[r.base_id].target_entities
            if targets is not None:
                missing = sorted(targets - r.entities)
                if missing:
                    problem = "missing_targets"
        seen_variants.add((r.base_id, r.variant))
        if problem is not None:
            violations.append(
                {"prompt_id": r.id, "base_id": r.base_id, "variant": r.variant, "problem": problem, "missing": missing}
            )
    for v in violations:
        logger.warning("Content preservation: %s %s %s", v["prompt_id"], v["problem"], v["missing"])
    return violations
