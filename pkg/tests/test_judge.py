import itertools
import math

import pytest

from py_skeb.components.judge import (
    CATEGORIES,
    JudgePanel,
    JudgeVerdict,
    aggregate,
    build_judge_prompt,
    judge_template_hash,
    parse_verdict,
    query_judge,
    renormalize,
)
from py_skeb.utility.exceptions import DataError, EscalationError, ParseError, SumViolation

# One verdict per unordered top-2 set.
BY_TOP2 = {
    frozenset({"factual", "non_factual"}): (50, 40, 10),
    frozenset({"factual", "hallucinated"}): (50, 10, 40),
    frozenset({"non_factual", "hallucinated"}): (10, 50, 40),
}
TIEBREAK = JudgeVerdict("tb", 20, 70, 10)


def test_judge_prompt():
    messages = build_judge_prompt("Harry played Seeker.")
    content = messages[0]["content"]
    assert "---\nHarry played Seeker.\n---" in content
    assert content.startswith("You are an evaluator.")
    assert "The three values must sum to 100." in content
    with pytest.raises(DataError):
        build_judge_prompt("  ")
    assert judge_template_hash() == judge_template_hash()


def test_parse_plain():
    v = parse_verdict('{"factual":80,"non_factual":15,"hallucinated":5}', "j")
    assert v.values() == (80, 15, 5)
    assert v.judge_model == "j"


def test_parse_with_prose():
    raw = 'Let me think {not json}. Result:\n{"factual": 60, "non_factual": 30, "hallucinated": 10}\nDone.'
    assert parse_verdict(raw, "j").values() == (60, 30, 10)


def test_parse_errors():
    with pytest.raises(SumViolation) as info:
        parse_verdict('{"factual":80,"non_factual":14,"hallucinated":5}', "j")
    assert info.value.values == (80, 14, 5)
    with pytest.raises(ParseError):
        parse_verdict("no json at all", "j")
    with pytest.raises(ParseError):
        parse_verdict('{"factual":80,"non_factual":20}', "j")
    with pytest.raises(ParseError):
        parse_verdict('{"factual":120,"non_factual":-10,"hallucinated":-10}', "j")


def test_renormalize():
    assert renormalize((10, 20, 80)) == (9, 18, 73)
    assert renormalize((1, 1, 1)) == (34, 33, 33)
    assert sum(renormalize((3, 7, 90))) == 100


def test_top2_tie_goes_to_earlier_category():
    assert JudgeVerdict("j", 40, 20, 40).top2() == frozenset({"factual", "hallucinated"})
    assert JudgeVerdict("j", 34, 33, 33).top2() == frozenset({"factual", "non_factual"})


def test_identical_verdicts():
    vs = [JudgeVerdict(f"j{i}", 80, 15, 5) for i in range(3)]
    score = aggregate(vs, lambda: pytest.fail("tie-break must not run"), "r")
    assert not score.escalated
    assert score.final == {"factual": 80.0, "non_factual": 15.0, "hallucinated": 5.0}


@pytest.mark.parametrize("sets", list(itertools.product(BY_TOP2, repeat=3)))
def test_escalation_over_all_top2_combinations(sets):
    verdicts = [JudgeVerdict(f"j{i}", *BY_TOP2[s]) for i, s in enumerate(sets)]
    calls = []

    def tiebreak():
        calls.append(1)
        return TIEBREAK

    score = aggregate(verdicts, tiebreak)
    expected = len(set(sets)) == 3
    assert score.escalated == expected
    assert len(calls) == int(expected)
    assert len(score.verdicts) == (4 if expected else 3)
    assert math.fsum(score.final.values()) == pytest.approx(100.0, abs=1e-9)
    assert math.fsum(score.means.values()) == pytest.approx(100.0, abs=1e-9)


def test_escalated_final_averages_four():
    verdicts = [JudgeVerdict(f"j{i}", *v) for i, v in enumerate(BY_TOP2.values())]
    score = aggregate(verdicts, lambda: TIEBREAK)
    assert score.final["non_factual"] == pytest.approx((40 + 10 + 50 + 70) / 4)
    assert score.means["non_factual"] == pytest.approx((40 + 10 + 50) / 3)


def test_permutation_invariance():
    verdicts = [JudgeVerdict("a", 50, 40, 10), JudgeVerdict("b", 10, 50, 40), JudgeVerdict("c", 50, 10, 40)]
    scores = [aggregate(list(p), lambda: TIEBREAK) for p in itertools.permutations(verdicts)]
    assert all(s == scores[0] for s in scores)


def test_tiebreak_failure():
    verdicts = [JudgeVerdict(f"j{i}", *v) for i, v in enumerate(BY_TOP2.values())]

    def broken():
        raise RuntimeError("endpoint down")

    with pytest.raises(EscalationError):
        aggregate(verdicts, broken)


def test_aggregate_needs_three():
    with pytest.raises(ValueError):
        aggregate([JudgeVerdict("a", 100, 0, 0)], lambda: TIEBREAK)


def test_query_renormalizes_after_second_violation(judge_gateway):
    gw = judge_gateway({("j", "Seeker"): '{"factual": 10, "non_factual": 20, "hallucinated": 80}'})
    verdict, n = query_judge(gw, "j", "Harry played Seeker.")
    assert n == 2
    assert verdict.renormalized
    assert verdict.values() == (9, 18, 73)


def test_query_second_parse_error_raises(judge_gateway):
    gw = judge_gateway({("j", "Seeker"): "I cannot judge this."})
    with pytest.raises(ParseError):
        query_judge(gw, "j", "Harry played Seeker.")
    assert len(gw.log.records) == 2


def test_query_all_zero_twice_raises(judge_gateway):
    gw = judge_gateway({("j", "Seeker"): '{"factual": 0, "non_factual": 0, "hallucinated": 0}'})
    with pytest.raises(ParseError):
        query_judge(gw, "j", "Harry played Seeker.")
    assert len(gw.log.records) == 2


def test_panel_keeps_going_after_unusable_verdicts(judge_gateway):
    gw = judge_gateway(
        {
            ("*", "Seeker"): '{"factual": 80, "non_factual": 15, "hallucinated": 5}',
            ("*", "blank"): '{"factual": 0, "non_factual": 0, "hallucinated": 0}',
        }
    )
    panel = JudgePanel(["a", "b", "c"], "t", gw)
    scores = panel.judge_all(
        [("r1", "Harry played Seeker."), ("r2", "A blank answer."), ("r3", "Ron played Seeker too.")]
    )
    assert [s.response_id for s in scores] == ["r1", "r3"]
    assert list(panel.unjudged) == ["r2"]
    audit = JudgePanel.get_audit_df(panel)
    assert set(audit["response_id"]) == {"r1", "r3"}
    assert len(audit) == 6


def test_panel_agreement_and_escalation(judge_gateway):
    gw = judge_gateway(
        {
            ("*", "Seeker"): '{"factual": 80, "non_factual": 15, "hallucinated": 5}',
            ("a", "disagree"): '{"factual": 50, "non_factual": 40, "hallucinated": 10}',
            ("b", "disagree"): '{"factual": 10, "non_factual": 50, "hallucinated": 40}',
            ("c", "disagree"): '{"factual": 50, "non_factual": 10, "hallucinated": 40}',
            ("t", "disagree"): '{"factual": 20, "non_factual": 70, "hallucinated": 10}',
        }
    )
    panel = JudgePanel(["a", "b", "c"], "t", gw)
    scores = panel.judge_all([("r1", "Harry played Seeker."), ("r2", "People disagree about it.")])
    assert [s.response_id for s in scores] == ["r1", "r2"]
    assert not scores[0].escalated
    assert scores[1].escalated
    assert scores[1].final["non_factual"] == pytest.approx(42.5)

    audit = JudgePanel.get_audit_df(panel)
    assert len(audit) == 3 + 4
    assert list(audit[audit["response_id"] == "r2"]["judge_model"]) == ["a", "b", "c", "t"]
    assert set(audit["agt_type"]) == {"Judge", "TieBreaker"}


def test_panel_allows_repeated_judge_model(judge_gateway):
    gw = judge_gateway({("*", "Seeker"): '{"factual": 80, "non_factual": 15, "hallucinated": 5}'})
    panel = JudgePanel(["a", "a", "b"], "t", gw)
    assert panel.step("r", "Harry played Seeker.").final["factual"] == 80.0


def test_empty_audit(judge_gateway):
    panel = JudgePanel(["a", "b", "c"], "t", judge_gateway({}))
    audit = JudgePanel.get_audit_df(panel)
    assert audit.empty
    assert "judge_model" in audit.columns


def test_verdict_dict_round_trip():
    v = JudgeVerdict("j", 9, 18, 73, renormalized=True)
    assert JudgeVerdict.from_dict(v.to_dict()) == v
    assert set(v.to_dict()) == {"judge_model", *CATEGORIES, "renormalized"}
