from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgvqa.metrics import (
    EmptyInput,
    MetricReport,
    PredictionRecord,
    UnknownCategory,
    answer_scope,
    format_report,
    make_record,
    plausibility_from_graphs,
    report_row,
    round_half_up,
    score,
    total_variation,
)
from sgvqa.program import parse_program_text

from conftest import make_graph, obj

YN = frozenset({"yes", "no"})


def rec(qid, pred, gold, group=("query", "color", "cup"), scope=frozenset({"a", "b", "c"}), binary=False,
        subject=None):
    return PredictionRecord(qid, pred, gold, group, scope, binary, subject)


def test_perfect_predictions():
    records = [rec(f"q{i}", g, g) for i, g in enumerate("aabbc")] + [rec("y", "yes", "yes", scope=YN, binary=True)]
    r = score(records)
    assert (r.accuracy, r.validity, r.distribution) == (100.0, 100.0, 0.0)
    assert report_row(r) == "100.00 100.00 100.00 100.00 0.00 100.00"


def test_hand_computed_total_variation():
    records = [rec("1", "a", "a"), rec("2", "a", "a"), rec("3", "a", "b"), rec("4", "a", "b")]
    # gold {a: 0.5, b: 0.5}, predicted {a: 1.0} -> 0.5 * (0.5 + 0.5) * 100
    assert score(records).distribution == pytest.approx(50.0)


def test_scope_rule(ontology):
    p = parse_program_text("Select: cup\nQuery material: [0]")
    r = make_record("q", p, "red", "glass", ontology)
    assert score([r]).validity == 0.0
    assert score([make_record("q", p, "metal", "glass", ontology)]).validity == 100.0


def test_answer_scope_examples(ontology):
    assert answer_scope(parse_program_text("Select: bird\nExist: [0]"), ontology) == YN
    assert answer_scope(parse_program_text("Select: cup\nChoose color: red, blue, [0]"), ontology) == {"red", "blue"}
    colors = set(ontology.attribute_categories["color"])
    assert answer_scope(parse_program_text("Select: cup\nQuery color: [0]"), ontology) == colors
    assert answer_scope(parse_program_text("Select: cup\nQuery name: [0]"), ontology) == set(ontology.classes)
    both = parse_program_text("Select: cup\nSelect: box\nCommon: [0, 1]")
    assert set(ontology.attribute_categories) <= answer_scope(both, ontology)
    with pytest.raises(UnknownCategory):
        answer_scope(parse_program_text("Select: cup\nQuery smell: [0]"), ontology)


def test_binary_open_split(ontology):
    choose = make_record("1", parse_program_text("Select: cup\nChoose color: red, blue, [0]"), "red", "red", ontology)
    verify = make_record("2", parse_program_text("Select: cup\nVerify color: red, [0]"), "no", "yes", ontology)
    query = make_record("3", parse_program_text("Select: cup\nQuery color: [0]"), "red", "red", ontology)
    assert choose.binary and verify.binary and not query.binary
    r = score([choose, verify, query])
    assert (r.binary, r.open, r.binary_count, r.open_count) == (50.0, 100.0, 2, 1)


def test_group_key(ontology):
    r = make_record("q", parse_program_text("Select: cup\nQuery color: [0]"), "red", "red", ontology)
    assert r.group == ("query", "color", "cup")
    assert r.subject == ("cup", "color")


def test_plausibility_table(ontology):
    g = make_graph([obj("a", "cup", (0.1, 0.1, 0.1, 0.1), color="red", material="glass")])
    table = plausibility_from_graphs([g])
    assert ("cup", "material", "glass") in table and ("cup", "hposition", "left") in table
    p = parse_program_text("Select: cup\nQuery material: [0]")
    assert score([make_record("q", p, "glass", "glass", ontology)], table).plausibility == 100.0
    assert score([make_record("q", p, "wood", "glass", ontology)], table).plausibility == 0.0
    yes = make_record("q", parse_program_text("Select: cup\nExist: [0]"), "no", "yes", ontology)
    assert score([yes], table).plausibility == 100.0


def test_empty_records():
    with pytest.raises(EmptyInput):
        score([])


def test_format_report():
    r = MetricReport(58.5, 70.125, 47.0, 96.87, 87.94, 2.725, 10, 5, 5)
    text = format_report(r)
    header, row = text.splitlines()
    assert header.split() == ["Binary", "Open", "Validity", "Plausibility", "Distribution", "↓", "Accuracy"]
    assert row.split() == ["70.13", "47.00", "96.87", "87.94", "2.73", "58.50"]


def test_round_half_up():
    assert round_half_up(2.725) == "2.73"
    assert round_half_up(0.125) == "0.13"
    assert round_half_up(1.004) == "1.00"


answers = st.sampled_from(["a", "b", "c", "d"])
records_st = st.lists(st.tuples(answers, answers, st.sampled_from(["g1", "g2", "g3"]), st.booleans()),
                      min_size=1, max_size=40)


def _build(rows):
    return [rec(str(i), p, g, group=("query", "color", grp), scope=frozenset("abc"), binary=b)
            for i, (p, g, grp, b) in enumerate(rows)]


@settings(max_examples=200, deadline=None)
@given(records_st, st.randoms(use_true_random=False))
def test_metric_invariants(rows, rnd):
    records = _build(rows)
    r = score(records)
    for v in (r.accuracy, r.binary, r.open, r.validity, r.plausibility):
        assert 0.0 <= v <= 100.0
    assert 0.0 <= r.distribution <= 100.0
    assert r.binary_count + r.open_count == len(records)
    weighted = (r.binary_count * r.binary + r.open_count * r.open) / len(records)
    assert weighted == pytest.approx(r.accuracy, abs=1e-9)
    for x in records:
        if x.predicted == x.gold and x.gold in x.scope:
            assert x.predicted in x.scope
    shuffled = list(records)
    rnd.shuffle(shuffled)
    assert score(shuffled) == r


@settings(max_examples=200, deadline=None)
@given(st.lists(answers, min_size=1, max_size=20), st.lists(answers, min_size=1, max_size=20))
def test_total_variation_properties(a, b):
    p, q = Counter(a), Counter(b)
    d = total_variation(p, q)
    assert d == pytest.approx(total_variation(q, p))
    assert 0.0 <= d <= 1.0 + 1e-12
    fa = {k: p[k] / len(a) for k in p}
    fb = {k: q[k] / len(b) for k in q}
    equal = all(np.isclose(fa.get(k, 0), fb.get(k, 0)) for k in set(fa) | set(fb))
    assert (d < 1e-12) == equal
