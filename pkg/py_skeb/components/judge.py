import json
import logging
import math
from collections import Counter
from dataclasses import dataclass
from functools import cache
from importlib.resources import files

import mesa
import pandas as pd
from tqdm import tqdm

from ..utility.exceptions import DataError, EscalationError, ParseError, SumViolation
from ..utility.util import BaseSchedulerByTypeFiltered, get_agt_attr, sha256_text
from .gateway import DEFAULT_MAX_NEW_TOKENS, CompletionRequest

logger = logging.getLogger(__name__)

# Fixed category order; it also breaks ranking ties (factual first).
CATEGORIES = ("factual", "non_factual", "hallucinated")
UNJUDGED_EMPTY_RESPONSE = "UNJUDGED_EMPTY_RESPONSE"
UNJUDGED_MALFORMED_VERDICT = "UNJUDGED_MALFORMED_VERDICT"
ESCALATED = "ESCALATED"
RENORMALIZED = "RENORMALIZED"

# Keys a responses.jsonl or judgments.jsonl record must carry.
RECORD_KEYS = ("response_id", "prompt_id", "variant", "model", "family", "kind")
RESPONSE_KEYS = (*RECORD_KEYS, "text")
JUDGMENT_KEYS = (*RECORD_KEYS, "final")


@cache
def judge_template() -> str:
    return (files("py_skeb") / "data" / "templates" / "judge.txt").read_text(encoding="utf-8")


def judge_template_hash() -> str:
    return sha256_text(judge_template())


@dataclass(frozen=True)
class JudgeVerdict:
    """
    One judge's split of a response into factual, non-factual and
    hallucinated percentages.

    Parameters
    ----------
    judge_model : str
        The judge that produced the verdict.
    factual, non_factual, hallucinated : int
        Percentages in [0, 100] summing to 100.
    renormalized : bool, optional
        True when the judge twice returned values not summing to 100 and the
        second answer was rescaled.
    """

    judge_model: str
    factual: int
    non_factual: int
    hallucinated: int
    renormalized: bool = False

    def __post_init__(self):
        values = self.values()
        if any(not 0 <= v <= 100 for v in values):
            raise ParseError(f"{self.judge_model}: percentages outside [0, 100]: {values}")
        if sum(values) != 100:
            raise SumViolation(f"{self.judge_model}: percentages sum to {sum(values)}", values)

    def values(self):
        return (self.factual, self.non_factual, self.hallucinated)

    def top2(self) -> frozenset:
        """The two highest categories; ties go to the earlier category."""
        ranked = sorted(range(3), key=lambda i: (-self.values()[i], i))
        return frozenset(CATEGORIES[i] for i in ranked[:2])

    def to_dict(self):
        return {
            "judge_model": self.judge_model,
            **dict(zip(CATEGORIES, self.values(), strict=True)),
            "renormalized": self.renormalized,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["judge_model"], *(d[c] for c in CATEGORIES), d.get("renormalized", False))


@dataclass(frozen=True)
class EnsembleScore:
    """
    The aggregate of three judge verdicts (four when escalated).

    Attributes
    ----------
    means : dict
        Category -> mean over the three panel judges.
    final : dict
        Category -> mean over every contributing verdict, including the
        tie-break verdict when escalated. Analytics use these.
    """

    response_id: str
    verdicts: tuple
    means: dict
    final: dict
    escalated: bool

    @property
    def mean_factual(self):
        return self.means["factual"]

    @property
    def mean_non_factual(self):
        return self.means["non_factual"]

    @property
    def mean_hallucinated(self):
        return self.means["hallucinated"]

    def to_dict(self):
        return {
            "response_id": self.response_id,
            "verdicts": [v.to_dict() for v in self.verdicts],
            "means": dict(self.means),
            "final": dict(self.final),
            "escalated": self.escalated,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["response_id"],
            tuple(JudgeVerdict.from_dict(v) for v in d["verdicts"]),
            d["means"],
            d["final"],
            d["escalated"],
        )


def build_judge_prompt(response_text: str) -> list:
    """
    Build the judge messages for a response.

    The template is used verbatim with ``{text}`` replaced by the response.
    """
    if not response_text or not response_text.strip():
        raise DataError("cannot judge an empty response")
    return [{"role": "user", "content": judge_template().replace("{text}", response_text)}]


def _first_json_object(raw_text: str):
    decoder = json.JSONDecoder()
    i = raw_text.find("{")
    while i != -1:
        try:
            obj, _ = decoder.raw_decode(raw_text, i)
        except json.JSONDecodeError:
            pass
        else:
            if isinstance(obj, dict):
                return obj
        i = raw_text.find("{", i + 1)
    return None


def parse_verdict(raw_text: str, judge_model: str) -> JudgeVerdict:
    """
    Parse a judge answer.

    The first JSON object in the text is used; surrounding prose is ignored.

    Raises
    ------
    ParseError
        No JSON object, missing keys, or values that are not integers in
        [0, 100].
    SumViolation
        Valid values not summing to 100. ``values`` holds them.
    """
    obj = _first_json_object(raw_text or "")
    if obj is None:
        raise ParseError(f"{judge_model}: no JSON object in judge answer")
    values = []
    for c in CATEGORIES:
        v = obj.get(c)
        if isinstance(v, float) and v.is_integer():
            v = int(v)
        if not isinstance(v, int) or isinstance(v, bool):
            raise ParseError(f"{judge_model}: {c!r} is missing or not an integer")
        values.append(v)
    return JudgeVerdict(judge_model, *values)


def renormalize(values) -> tuple:
    """
    Rescale percentages proportionally to integers summing to 100.

    Uses largest remainders; remainder ties go to the earlier category.
    """
    total = sum(values)
    if total <= 0:
        raise ParseError(f"cannot renormalize {tuple(values)}")
    exact = [v * 100 / total for v in values]
    floors = [math.floor(x) for x in exact]
    left = 100 - sum(floors)
    order = sorted(range(len(values)), key=lambda i: (-(exact[i] - floors[i]), i))
    for i in order[:left]:
        floors[i] += 1
    return tuple(floors)


def query_judge(gateway, judge_model: str, response_text: str):
    """
    Ask one judge for a verdict, re-querying once on a malformed answer.

    A second sum violation is renormalized; a second parse error raises, as
    does a second all-zero answer, which cannot be renormalized.

    Returns
    -------
    tuple
        (JudgeVerdict, number of queries).
    """
    request = CompletionRequest(
        judge_model, build_judge_prompt(response_text), max_new_tokens=DEFAULT_MAX_NEW_TOKENS
    )
    try:
        return parse_verdict(gateway.complete(request).text, judge_model), 1
    except (ParseError, SumViolation) as e:
        logger.info("Re-querying %s after malformed verdict: %s", judge_model, e)
    try:
        return parse_verdict(gateway.complete(request).text, judge_model), 2
    except SumViolation as e:
        logger.warning("%s: renormalizing %s to 100", judge_model, e.values)
        return JudgeVerdict(judge_model, *renormalize(e.values), renormalized=True), 2


def _means(verdicts):
    n = len(verdicts)
    return {c: math.fsum(getattr(v, c) for v in verdicts) / n for c in CATEGORIES}


def aggregate(verdicts, tiebreak_fn, response_id=None) -> EnsembleScore:
    """
    Combine three judge verdicts.

    The judges agree when at least two of them share the same unordered
    top-2 category set. Otherwise ``tiebreak_fn()`` is called and its verdict
    is averaged with the three others.

    Parameters
    ----------
    verdicts : list of JudgeVerdict
        Exactly three verdicts. Their order does not matter.
    tiebreak_fn : callable
        Returns the tie-break judge's JudgeVerdict.
    response_id : str, optional
        Carried into the score.

    Raises
    ------
    EscalationError
        If the tie-break call fails.
    """
    if len(verdicts) != 3:
        raise ValueError(f"aggregate needs exactly 3 verdicts, got {len(verdicts)}")
    ordered = tuple(sorted(verdicts, key=lambda v: (v.judge_model, v.values(), v.renormalized)))
    means = _means(ordered)
    shared = Counter(v.top2() for v in ordered).most_common(1)[0][1] >= 2
    if shared:
        return EnsembleScore(response_id, ordered, means, dict(means), False)

    try:
        extra = tiebreak_fn()
    except Exception as e:
        raise EscalationError(f"tie-break failed for response {response_id!r}: {e}") from e
    if not isinstance(extra, JudgeVerdict):
        raise EscalationError(f"tie-break returned no verdict for response {response_id!r}")
    contributing = (*ordered, extra)
    return EnsembleScore(response_id, contributing, means, _means(contributing), True)


class JudgeAgent(mesa.Agent):
    """
    A judge model in the panel.

    Parameters
    ----------
    unique_id : str
        ``judge<k>:<model>`` or ``tiebreak:<model>``.
    model : JudgePanel
        The panel.
    settings : dict
        Agent settings. The sample settings are shown below.

    Notes
    -----
    >>> settings = {"agt_type": "Judge", "judge_model": "gpt-4o-mini"}
    """

    def __init__(self, unique_id, model, settings: dict):
        super().__init__(unique_id, model)
        self.load_settings(settings)
        self.verdict = None
        self.n_queries = 0

    def load_settings(self, settings: dict):
        self.agt_type = settings["agt_type"]
        self.judge_model = settings["judge_model"]

    def reset(self):
        self.verdict = None
        self.n_queries = 0

    def step(self):
        """Judge the panel's current response."""
        self.verdict, self.n_queries = query_judge(
            self.model.gateway, self.judge_model, self.model.response_text
        )
        return self


class JudgePanel(mesa.Model):
    """
    The judge ensemble as a mesa model: one step per response.

    The three "Judge" agents step on every response; the "TieBreaker" agent
    steps only when the judges disagree. Every verdict is recorded by the
    DataCollector for the audit table.

    Parameters
    ----------
    judges : list of str
        The three panel judge models.
    tiebreak : str
        The tie-break judge model.
    gateway : LLMGateway or MockGateway
        Client for the judge calls.
    """

    def __init__(self, judges, tiebreak, gateway):
        super().__init__()
        if len(judges) != 3:
            raise ValueError("the panel needs exactly three judges")
        self.gateway = gateway
        self.schedule = BaseSchedulerByTypeFiltered(self)
        self.judges = []
        for k, name in enumerate(judges, start=1):
            agt = JudgeAgent(f"judge{k}:{name}", self, {"agt_type": "Judge", "judge_model": name})
            self.schedule.add(agt)
            self.judges.append(agt)
        self.tiebreaker = JudgeAgent(
            f"tiebreak:{tiebreak}", self, {"agt_type": "TieBreaker", "judge_model": tiebreak}
        )
        self.schedule.add(self.tiebreaker)

        self.response_id = None
        self.response_text = None
        self.escalated = False
        self.unjudged = {}  # response_id -> reason
        agent_reporters = {
            "agt_type": get_agt_attr("agt_type"),
            "response_id": get_agt_attr("model.response_id"),
            "judge_model": get_agt_attr("judge_model"),
            "factual": get_agt_attr("verdict.factual"),
            "non_factual": get_agt_attr("verdict.non_factual"),
            "hallucinated": get_agt_attr("verdict.hallucinated"),
            "renormalized": get_agt_attr("verdict.renormalized"),
            "n_queries": get_agt_attr("n_queries"),
        }
        self.datacollector = mesa.DataCollector(
            model_reporters={"escalated": "escalated"}, agent_reporters=agent_reporters
        )

    def _tiebreak(self):
        self.escalated = True
        self.schedule.do_each("step", agt_type="TieBreaker")
        return self.tiebreaker.verdict

    def step(self, response_id, response_text) -> EnsembleScore:
        """Judge one response and return its ensemble score."""
        self.response_id = response_id
        self.response_text = response_text
        self.escalated = False
        self.schedule.do_each("reset")
        self.schedule.step(agt_type="Judge")
        score = aggregate([a.verdict for a in self.judges], self._tiebreak, response_id)
        self.datacollector.collect(self)
        if score.escalated:
            logger.info("Response %s escalated to %s", response_id, self.tiebreaker.judge_model)
        return score

    def judge_all(self, responses):
        """
        Judge a list of ``(response_id, text)`` pairs in order.

        A response on which a judge twice gives an unusable verdict is left
        out and its reason kept in ``unjudged``.

        Returns
        -------
        list of EnsembleScore
        """
        scores = []
        for rid, text in tqdm(responses, desc="Judging", disable=len(responses) < 50):
            try:
                scores.append(self.step(rid, text))
            except ParseError as e:
                logger.warning("Response %s left unjudged: %s", rid, e)
                self.unjudged[rid] = str(e)
        return scores

    @staticmethod
    def get_audit_df(panel):
        """
        One row per verdict given, in judging order.

        Returns
        -------
        pd.DataFrame
            Columns step, agent_id, agt_type, response_id, judge_model,
            factual, non_factual, hallucinated, renormalized, n_queries.
        """
        columns = [
            "step", "agent_id", "agt_type", "response_id", "judge_model", "factual",
            "non_factual", "hallucinated", "renormalized", "n_queries",
        ]
        if panel.schedule.steps == 0:
            return pd.DataFrame(columns=columns)
        df = panel.datacollector.get_agent_vars_dataframe().reset_index()
        df = df.rename(columns={"Step": "step", "AgentID": "agent_id"})
        df = df[df["factual"].notna()].copy()
        for c in ("factual", "non_factual", "hallucinated", "n_queries"):
            df[c] = df[c].astype(int)
        df["renormalized"] = df["renormalized"].astype(bool)
        df = df.sort_values(["step", "agt_type", "agent_id"]).reset_index(drop=True)
        return df[columns]
