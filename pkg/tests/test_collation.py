from __future__ import annotations

import random
from datetime import date, timedelta

import pytest

from conftest import make_extraction, make_instance
from oncoextract.collation import (
    CollatorChain,
    ConditionalSet,
    DedupByRoot,
    DependencyError,
    InferEndFromLast,
    MergeWithinWindow,
    PreferLatest,
    RuleError,
    build_chain,
    collate,
    parse_rule,
    resolve_rule,
    serialize_rule,
    topo_order,
)
from oncoextract.schema import Kind


class TestParseRule:
    def test_prefer_latest(self):
        assert parse_rule("prefer_latest: result_date") == PreferLatest("result_date")

    def test_dedup_both_spellings(self):
        assert parse_rule("deduplicate_by_root: biomarker_tested") == DedupByRoot("biomarker_tested")
        assert parse_rule("dedupe_by_root: biomarker_tested") == DedupByRoot("biomarker_tested")

    def test_merge_window(self):
        rule = parse_rule("merge_if_medication_and_start_date<=7d")
        assert rule == MergeWithinWindow("medication", "start_date", 7)

    def test_merge_window_compact_s3_spelling(self):
        assert parse_rule("merge_if_name_and_start<=7d") == MergeWithinWindow("name", "start", 7)

    def test_infer(self):
        rule = parse_rule("infer_end_date_from_last_administration")
        assert rule == InferEndFromLast(
            source_attribute="last_administration", target_attribute="end_date",
        )

    def test_conditional_set(self):
        rule = parse_rule("set_status_discontinued_if_end_date<today-28d")
        assert isinstance(rule, ConditionalSet)
        assert rule.condition.comparator == "<"
        assert rule.condition.days_before_today == 28

    def test_unknown_shape(self):
        with pytest.raises(RuleError, match="unknown rule shape"):
            parse_rule("frobnicate: x")

    def test_whitespace_insensitive(self):
        assert parse_rule("prefer_latest :  result_date") == PreferLatest("result_date")
        assert parse_rule("merge_if_name_and_start <= 7d") == parse_rule("merge_if_name_and_start<=7d")

    def test_round_trip(self):
        for text in (
            "deduplicate_by_root: biomarker_tested",
            "prefer_latest: result_date",
            "merge_if_medication_and_start_date<=7d",
            "infer_end_date_from_last_administration",
            "set_status_discontinued_if_end_date<today-28d",
        ):
            rule = parse_rule(text)
            assert parse_rule(serialize_rule(rule)) == rule


class TestResolveRule:
    def test_name_and_prefix_tokens(self, registry):
        spec = registry.get("Medication")
        rule = resolve_rule(parse_rule("merge_if_name_and_start<=7d"), spec)
        assert rule == MergeWithinWindow("medication", "start_date", 7)

    def test_conditional_value_canonicalized(self, registry):
        spec = registry.get("Medication")
        rule = resolve_rule(parse_rule("set_status_discontinued_if_end_date<today-28d"), spec)
        assert rule.target_attribute == "status"
        assert rule.value == "Discontinued"

    def test_unknown_attribute(self, registry):
        spec = registry.get("Biomarker")
        with pytest.raises(RuleError, match="unknown attribute"):
            resolve_rule(parse_rule("prefer_latest: nope"), spec)

    def test_infer_source_may_be_conceptual(self, registry):
        spec = registry.get("Medication")
        rule = resolve_rule(parse_rule("infer_end_date_from_last_administration"), spec)
        assert rule.target_attribute == "end_date"
        assert rule.source_attribute == "last_administration"


def run_chain(registry, entity, rules, inputs, run_date=None, audit=None):
    chain = build_chain(registry, entity, rules, run_date=run_date)
    return collate(chain, inputs, registry, audit=audit)


class TestCollateRules:
    def test_merge_within_window_earliest_start(self, registry):
        inputs = [
            make_extraction(registry, "Medication", medication="Nivolumab", start_date="2019-03-01"),
            make_extraction(registry, "Medication", medication="Nivolumab", start_date="2019-03-04"),
        ]
        out = run_chain(registry, "Medication", ["merge_if_name_and_start<=7d"], inputs)
        assert len(out) == 1
        assert str(out[0].get("start_date")) == "2019-03-01"

    def test_merge_leaves_eight_days_apart_distinct(self, registry):
        inputs = [
            make_extraction(registry, "Medication", medication="Nivolumab", start_date="2019-03-01"),
            make_extraction(registry, "Medication", medication="Nivolumab", start_date="2019-03-09"),
        ]
        out = run_chain(registry, "Medication", ["merge_if_name_and_start<=7d"], inputs)
        assert len(out) == 2

    def test_merge_is_transitive_over_chain(self, registry):
        inputs = [
            make_extraction(registry, "Medication", medication="Nivolumab", start_date="2019-03-01"),
            make_extraction(registry, "Medication", medication="Nivolumab", start_date="2019-03-06"),
            make_extraction(registry, "Medication", medication="Nivolumab", start_date="2019-03-11"),
        ]
        out = run_chain(registry, "Medication", ["merge_if_name_and_start<=7d"], inputs)
        assert len(out) == 1
        assert str(out[0].get("start_date")) == "2019-03-01"

    def test_merge_canonicalizes_key_case(self, registry):
        inputs = [
            make_extraction(registry, "Medication", medication="Trastuzumab", start_date="2019-03-01"),
            make_extraction(registry, "Medication", medication="trastuzumab", start_date="2019-03-02"),
        ]
        out = run_chain(registry, "Medication", ["merge_if_name_and_start<=7d"], inputs)
        assert len(out) == 1

    def test_merge_takes_latest_end_date(self, registry):
        inputs = [
            make_extraction(registry, "Medication", medication="Nivolumab",
                            start_date="2019-03-01", end_date="2019-05-01"),
            make_extraction(registry, "Medication", medication="Nivolumab",
                            start_date="2019-03-04", end_date="2019-06-15"),
        ]
        out = run_chain(registry, "Medication", ["merge_if_name_and_start<=7d"], inputs)
        assert str(out[0].get("end_date")) == "2019-06-15"

    def test_prefer_latest_keeps_most_recent(self, registry):
        inputs = [
            make_extraction(registry, "Biomarker", biomarker_tested="BRAF", result_date="2020-01-01"),
            make_extraction(registry, "Biomarker", biomarker_tested="BRAF", result_date="2020-06-01"),
        ]
        out = run_chain(registry, "Biomarker", ["prefer_latest: result_date"], inputs)
        assert len(out) == 1
        assert str(out[0].get("result_date")) == "2020-06-01"

    def test_dedup_by_root_merges_identical_date_rows(self, registry):
        inputs = [
            make_extraction(registry, "Biomarker", biomarker_tested="BRAF",
                            result_date="2020-01-01", interpretation="Positive"),
            make_extraction(registry, "Biomarker", biomarker_tested="braf",
                            result_date="2020-01-01"),
            make_extraction(registry, "Biomarker", biomarker_tested="BRAF",
                            result_date="2020-06-01"),
        ]
        out = run_chain(registry, "Biomarker", ["deduplicate_by_root: biomarker_tested"], inputs)
        assert len(out) == 2
        merged = [i for i in out if str(i.get("result_date")) == "2020-01-01"][0]
        assert merged.get("interpretation").value == "Positive"

    def test_infer_end_from_merged_administrations(self, registry):
        inputs = [
            make_extraction(registry, "Medication", medication="Nivolumab", start_date="2019-03-01"),
            make_extraction(registry, "Medication", medication="Nivolumab", start_date="2019-03-04"),
        ]
        out = run_chain(
            registry, "Medication",
            ["merge_if_name_and_start<=7d", "infer_end_date_from_last_administration"],
            inputs,
        )
        assert len(out) == 1
        assert str(out[0].get("end_date")) == "2019-03-04"

    def test_infer_leaves_existing_end_alone(self, registry):
        inputs = [
            make_extraction(registry, "Medication", medication="Nivolumab",
                            start_date="2019-03-01", end_date="2019-09-01"),
        ]
        out = run_chain(
            registry, "Medication", ["infer_end_date_from_last_administration"], inputs,
        )
        assert str(out[0].get("end_date")) == "2019-09-01"

    def test_conditional_set_discontinued(self, registry):
        inputs = [
            make_extraction(registry, "Medication", medication="Nivolumab",
                            start_date="2019-03-01", end_date="2019-04-01", status="Active"),
            make_extraction(registry, "Medication", medication="Ipilimumab",
                            start_date="2020-05-20", end_date="2020-06-01", status="Active"),
        ]
        out = run_chain(
            registry, "Medication",
            ["set_status_discontinued_if_end_date<today-28d"],
            inputs, run_date=date(2020, 6, 15),
        )
        by_drug = {i.get("medication").value: i for i in out}
        assert by_drug["Nivolumab"].get("status").value == "Discontinued"
        assert by_drug["Ipilimumab"].get("status").value == "Active"  # 14d ago only

    def test_conditional_set_requires_run_date(self, registry):
        inputs = [make_extraction(registry, "Medication", medication="X", end_date="2019-01-01")]
        with pytest.raises(RuleError, match="run_date"):
            run_chain(registry, "Medication",
                      ["set_status_discontinued_if_end_date<today-28d"], inputs)

    def test_missing_dependency_policies(self, registry):
        inputs = [make_extraction(registry, "Medication", medication="X")]
        chain = build_chain(registry, "Medication", [], on_missing_dependency="error")
        with pytest.raises(DependencyError):
            collate(chain, inputs, registry)
        audit = []
        chain = build_chain(registry, "Medication", [], on_missing_dependency="warn")
        out = collate(chain, inputs, registry, audit=audit)
        assert len(out) == 1
        assert any(e.get("action") == "missing_dependency" for e in audit)

    def test_audit_records_conflicts(self, registry):
        audit = []
        inputs = [
            make_extraction(registry, "Biomarker", biomarker_tested="BRAF",
                            result_date="2020-01-01", interpretation="Positive"),
            make_extraction(registry, "Biomarker", biomarker_tested="BRAF",
                            result_date="2020-01-01", interpretation="Negative"),
        ]
        out = run_chain(registry, "Biomarker",
                        ["deduplicate_by_root: biomarker_tested"], inputs, audit=audit)
        assert len(out) == 1
        assert any(e.get("action") == "conflict_resolved" for e in audit)


DRUGS = ["Nivolumab", "Ipilimumab", "Pembrolizumab", "Vemurafenib", None]
RULESETS = [
    [],
    ["deduplicate_by_root: medication"],
    ["merge_if_name_and_start<=7d"],
    ["prefer_latest: start_date"],
    ["merge_if_name_and_start<=7d", "infer_end_date_from_last_administration"],
    ["deduplicate_by_root: medication", "prefer_latest: start_date"],
    ["merge_if_name_and_start<=7d", "set_status_discontinued_if_end_date<today-28d"],
]


def random_medication(rng, registry):
    raw = {"medication": rng.choice(DRUGS)}
    if rng.random() < 0.9:
        raw["start_date"] = (date(2019, 1, 1) + timedelta(days=rng.randrange(60))).isoformat()
    if rng.random() < 0.4:
        raw["end_date"] = (date(2019, 6, 1) + timedelta(days=rng.randrange(400))).isoformat()
    if rng.random() < 0.5:
        raw["status"] = rng.choice(["Active", "Completed"])
    if rng.random() < 0.3:
        raw["route"] = "Intravenous"
    return make_extraction(registry, "Medication", **raw)


def as_json(instances):
    return [inst.to_json() for inst in instances]


class TestCollationProperties:
    def test_idempotence_and_permutation_invariance_500_fixtures(self, registry):
        rng = random.Random(20240811)
        for case in range(500):
            rules = RULESETS[case % len(RULESETS)]
            inputs = [random_medication(rng, registry) for _ in range(rng.randrange(0, 9))]
            chain = build_chain(registry, "Medication", rules, run_date=date(2020, 7, 1))
            first = collate(chain, inputs, registry)
            again = collate(chain, first, registry)
            assert as_json(again) == as_json(first), f"not idempotent (case {case})"
            shuffled = list(inputs)
            rng.shuffle(shuffled)
            permuted = collate(chain, shuffled, registry)
            assert as_json(permuted) == as_json(first), f"order-dependent (case {case})"

    def test_dedup_postcondition(self, registry):
        rng = random.Random(99)
        chain = build_chain(registry, "Medication", ["deduplicate_by_root: medication"])
        for _ in range(100):
            inputs = [random_medication(rng, registry) for _ in range(rng.randrange(0, 10))]
            out = collate(chain, inputs, registry)
            seen = set()
            for inst in out:
                root = inst.get("medication")
                key = (
                    None if root is None else root.value.lower(),
                    tuple(
                        str(inst.get(a.name)) for a in registry.get("Medication").attributes
                        if a.kind is Kind.DATE
                    ),
                )
                if key[0] is not None:
                    assert key not in seen
                    seen.add(key)

    def test_merge_window_postcondition(self, registry):
        rng = random.Random(42)
        chain = build_chain(registry, "Medication", ["merge_if_name_and_start<=7d"])
        for _ in range(100):
            inputs = [random_medication(rng, registry) for _ in range(rng.randrange(0, 10))]
            out = collate(chain, inputs, registry)
            for i, a in enumerate(out):
                for b in out[i + 1:]:
                    ka, kb = a.get("medication"), b.get("medication")
                    da, db = a.get("start_date"), b.get("start_date")
                    if None in (ka, kb, da, db):
                        continue
                    if ka.value.lower() == kb.value.lower():
                        assert abs((da.value - db.value).days) > 7


class TestTopoOrder:
    def test_medication_after_diagnosis(self):
        assert topo_order({"Medication": ["Diagnosis"], "Diagnosis": []}) == [
            "Diagnosis", "Medication",
        ]

    def test_lexicographic_without_edges(self):
        assert topo_order({"B": [], "A": []}) == ["A", "B"]

    def test_cycle_reported(self):
        with pytest.raises(DependencyError, match="cycle"):
            topo_order({"A": ["B"], "B": ["A"]})

    def test_every_entity_after_dependencies(self):
        edges = {"A": ["B", "C"], "B": ["C"], "C": [], "D": ["A"]}
        order = topo_order(edges)
        position = {name: i for i, name in enumerate(order)}
        for node, deps in edges.items():
            for dep in deps:
                assert position[dep] < position[node]
