"""Deterministic collation: dedup, merge, conflict resolution, dependencies.

Rules are declared as compact strings and applied strictly in listed order::

    deduplicate_by_root: biomarker_tested
    prefer_latest: result_date
    merge_if_name_and_start<=7d
    infer_end_date_from_last_administration
    set_status_discontinued_if_end_date<today-28d

Attribute tokens resolve against the target entity at chain-build time:
exact names, the aliases ``name``/``root`` for the entity's anchor
attribute, and unique underscore-prefix matches (``start`` -> ``start_date``).
Collation is a pure function of its inputs: instances are order-normalized
first, so input permutations cannot change the output.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from datetime import date, timedelta
from typing import Any, Iterable, Mapping, Optional, Sequence, Union

from .schema import (
    EntityInstance,
    EntityTypeSpec,
    Kind,
    Provenance,
    SchemaRegistry,
    SchemaViolation,
    TypedValue,
    canonical_value,
    validate_instance,
    validate_value,
)
from .synthesis import PartialExtraction


class RuleError(ValueError):
    pass


class DependencyError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Rule grammar
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DedupByRoot:
    attribute: str

    def text(self) -> str:
        return f"deduplicate_by_root: {self.attribute}"


@dataclass(frozen=True)
class PreferLatest:
    date_attribute: str

    def text(self) -> str:
        return f"prefer_latest: {self.date_attribute}"


@dataclass(frozen=True)
class MergeWithinWindow:
    key_attribute: str
    date_attribute: str
    window_days: int

    def __post_init__(self) -> None:
        if self.window_days < 0:
            raise RuleError("window_days must be >= 0")

    def text(self) -> str:
        return f"merge_if_{self.key_attribute}_and_{self.date_attribute}<={self.window_days}d"


@dataclass(frozen=True)
class InferEndFromLast:
    source_attribute: str
    target_attribute: str

    def text(self) -> str:
        return f"infer_{self.target_attribute}_from_{self.source_attribute}"


@dataclass(frozen=True)
class SetCondition:
    attribute: str
    comparator: str  # < | <= | > | >=
    days_before_today: int


@dataclass(frozen=True)
class ConditionalSet:
    target_attribute: str
    value: str
    condition: SetCondition

    def text(self) -> str:
        cond = self.condition
        return (
            f"set_{self.target_attribute}_{self.value}_if_"
            f"{cond.attribute}{cond.comparator}today-{cond.days_before_today}d"
        )


CollationRule = Union[DedupByRoot, PreferLatest, MergeWithinWindow, InferEndFromLast, ConditionalSet]

_MERGE_RE = re.compile(r"^merge_if_(.+?)_and_(.+?)<=(\d+)d$")
_SET_RE = re.compile(r"^set_(.+?)_if_(.+?)(<=|>=|<|>)today-(\d+)d$")
_INFER_RE = re.compile(r"^infer_(.+?)_from_(.+)$")


def parse_rule(text: str) -> CollationRule:
    """Parse one rule string; whitespace-insensitive; see the module grammar."""
    compact = re.sub(r"\s+", "", text)
    if not compact:
        raise RuleError("empty rule")
    for prefix in ("deduplicate_by_root:", "dedupe_by_root:"):
        if compact.startswith(prefix):
            attr = compact[len(prefix):]
            if not attr:
                raise RuleError(f"missing attribute in rule {text!r}")
            return DedupByRoot(attribute=attr)
    if compact.startswith("prefer_latest:"):
        attr = compact[len("prefer_latest:"):]
        if not attr:
            raise RuleError(f"missing attribute in rule {text!r}")
        return PreferLatest(date_attribute=attr)
    match = _MERGE_RE.match(compact)
    if match:
        return MergeWithinWindow(
            key_attribute=match.group(1),
            date_attribute=match.group(2),
            window_days=int(match.group(3)),
        )
    match = _SET_RE.match(compact)
    if match:
        target_and_value = match.group(1)
        if "_" not in target_and_value:
            raise RuleError(f"cannot split target/value in rule {text!r}")
        target, value = target_and_value.rsplit("_", 1)
        return ConditionalSet(
            target_attribute=target,
            value=value,
            condition=SetCondition(
                attribute=match.group(2),
                comparator=match.group(3),
                days_before_today=int(match.group(4)),
            ),
        )
    match = _INFER_RE.match(compact)
    if match:
        return InferEndFromLast(target_attribute=match.group(1), source_attribute=match.group(2))
    raise RuleError(f"unknown rule shape: {text!r}")


def serialize_rule(rule: CollationRule) -> str:
    return rule.text()


def _resolve_attribute(spec: EntityTypeSpec, token: str, rule_text: str) -> str:
    if spec.has_attribute(token):
        return token
    if token in ("name", "root"):
        return spec.anchor_attribute
    prefixed = [a for a in spec.attribute_names if a.startswith(token + "_")]
    if len(prefixed) == 1:
        return prefixed[0]
    raise RuleError(
        f"unknown attribute {token!r} on entity {spec.name!r} in rule {rule_text!r}"
    )


def resolve_rule(rule: CollationRule, spec: EntityTypeSpec) -> CollationRule:
    """Bind a parsed rule's attribute tokens to the entity's real attributes."""
    text = rule.text()
    if isinstance(rule, DedupByRoot):
        return DedupByRoot(_resolve_attribute(spec, rule.attribute, text))
    if isinstance(rule, PreferLatest):
        return PreferLatest(_resolve_attribute(spec, rule.date_attribute, text))
    if isinstance(rule, MergeWithinWindow):
        return MergeWithinWindow(
            key_attribute=_resolve_attribute(spec, rule.key_attribute, text),
            date_attribute=_resolve_attribute(spec, rule.date_attribute, text),
            window_days=rule.window_days,
        )
    if isinstance(rule, InferEndFromLast):
        target = _resolve_attribute(spec, rule.target_attribute, text)
        # The source may name a concept with no schema attribute (e.g. an
        # administration event); the latest observed date then stands in.
        try:
            source = _resolve_attribute(spec, rule.source_attribute, text)
        except RuleError:
            source = rule.source_attribute
        return InferEndFromLast(source_attribute=source, target_attribute=target)
    if isinstance(rule, ConditionalSet):
        combined = f"{rule.target_attribute}_{rule.value}"
        parts = combined.split("_")
        target = value = None
        for split in range(len(parts) - 1, 0, -1):
            candidate = "_".join(parts[:split])
            try:
                target = _resolve_attribute(spec, candidate, text)
            except RuleError:
                continue
            value = "_".join(parts[split:])
            break
        if target is None or not value:
            raise RuleError(f"cannot resolve target attribute in rule {text!r}")
        typed = validate_value(spec.attribute(target), value)
        return ConditionalSet(
            target_attribute=target,
            value=str(typed.to_json()),
            condition=SetCondition(
                attribute=_resolve_attribute(spec, rule.condition.attribute, text),
                comparator=rule.condition.comparator,
                days_before_today=rule.condition.days_before_today,
            ),
        )
    raise RuleError(f"unsupported rule {rule!r}")


# ---------------------------------------------------------------------------
# Chains
# ---------------------------------------------------------------------------

@dataclass
class CollatorChain:
    spec: EntityTypeSpec
    rules: tuple[CollationRule, ...]
    dependencies: Mapping[str, Sequence[EntityInstance]] = field(default_factory=dict)
    document_dates: Mapping[str, Optional[date]] = field(default_factory=dict)
    run_date: Optional[date] = None
    on_missing_dependency: str = "warn"  # warn | error


def build_chain(
    registry: SchemaRegistry,
    entity_type: str,
    rule_texts: Sequence[str],
    dependencies: Optional[Mapping[str, Sequence[EntityInstance]]] = None,
    document_dates: Optional[Mapping[str, Optional[date]]] = None,
    run_date: Optional[date] = None,
    on_missing_dependency: str = "warn",
) -> CollatorChain:
    spec = registry.get(entity_type)
    rules = tuple(resolve_rule(parse_rule(t), spec) for t in rule_texts)
    return CollatorChain(
        spec=spec,
        rules=rules,
        dependencies=dependencies or {},
        document_dates=document_dates or {},
        run_date=run_date,
        on_missing_dependency=on_missing_dependency,
    )


# ---------------------------------------------------------------------------
# Collation
# ---------------------------------------------------------------------------

@dataclass
class _WorkItem:
    instance: EntityInstance
    merged_from: list[EntityInstance]


def _canonical_or_none(spec: EntityTypeSpec, value: Optional[TypedValue], attr: str) -> Optional[str]:
    if value is None:
        return None
    return canonical_value(attr, str(value.to_json()))


def _sort_key(spec: EntityTypeSpec, inst: EntityInstance) -> tuple:
    anchor = spec.anchor_attribute
    anchor_value = _canonical_or_none(spec, inst.get(anchor), anchor)
    dates = [
        v.value for v in inst.non_null().values() if v.kind is Kind.DATE
    ]
    earliest = min(dates) if dates else None
    return (
        anchor_value is None,
        anchor_value or "",
        earliest is None,
        earliest.isoformat() if earliest else "",
        json.dumps({k: v.to_json() for k, v in sorted(inst.non_null().items())}),
        inst.instance_id,
    )


def _normalize_input(
    spec: EntityTypeSpec,
    registry: SchemaRegistry,
    item: Union[PartialExtraction, EntityInstance],
) -> EntityInstance:
    if isinstance(item, PartialExtraction):
        attributes = {name: item.attributes.get(name) for name in spec.attribute_names}
        inst = EntityInstance(
            entity_type=spec.name,
            attributes=attributes,
            provenance=tuple(sorted(set(item.provenance), key=lambda p: (
                p.document_id, p.chunk_index, p.char_start, p.char_end))),
        )
    else:
        attributes = {name: item.attributes.get(name) for name in spec.attribute_names}
        inst = EntityInstance(
            entity_type=spec.name,
            attributes=attributes,
            provenance=item.provenance,
            instance_id=item.instance_id,
        )
    return validate_instance(registry, inst)


def _source_rank(chain: CollatorChain, item: _WorkItem) -> tuple:
    # Later source-document date wins attribute conflicts; document ids and
    # content break remaining ties so the result is input-order independent.
    dates = [
        chain.document_dates.get(p.document_id)
        for p in item.instance.provenance
    ]
    known = [d for d in dates if d is not None]
    best = max(known) if known else None
    doc_ids = tuple(sorted({p.document_id for p in item.instance.provenance}))
    return (
        best is not None,
        best.isoformat() if best else "",
        doc_ids,
        _sort_key(chain.spec, item.instance),
    )


def _merge_items(
    chain: CollatorChain,
    members: list[_WorkItem],
    audit: Optional[list],
    rule_name: str,
    overrides: Optional[dict[str, Optional[TypedValue]]] = None,
) -> _WorkItem:
    if len(members) == 1 and not overrides:
        return members[0]
    ranked = sorted(members, key=lambda m: _source_rank(chain, m))
    attributes: dict[str, Optional[TypedValue]] = {}
    for name in chain.spec.attribute_names:
        chosen: Optional[TypedValue] = None
        discarded: list[str] = []
        for item in ranked:  # ascending rank; later documents overwrite
            value = item.instance.get(name)
            if value is None:
                continue
            if chosen is not None and chosen != value:
                discarded.append(str(chosen.to_json()))
            chosen = value
        attributes[name] = chosen
        if discarded and audit is not None:
            audit.append({
                "rule": rule_name,
                "action": "conflict_resolved",
                "attribute": name,
                "kept": str(chosen.to_json()) if chosen else None,
                "discarded": discarded,
            })
    if overrides:
        attributes.update(overrides)
    provenance = tuple(sorted(
        {p for m in members for p in m.instance.provenance},
        key=lambda p: (p.document_id, p.chunk_index, p.char_start, p.char_end),
    ))
    merged = EntityInstance(
        entity_type=chain.spec.name, attributes=attributes, provenance=provenance
    )
    merged_from = [src for m in members for src in m.merged_from]
    if audit is not None and len(members) > 1:
        audit.append({
            "rule": rule_name,
            "action": "merged",
            "kept": merged.instance_id,
            "merged": sorted(m.instance.instance_id for m in members),
        })
    return _WorkItem(instance=merged, merged_from=merged_from)


def _date_group_key(spec: EntityTypeSpec, inst: EntityInstance) -> tuple:
    values = []
    for attr in spec.attributes:
        if attr.kind is Kind.DATE:
            value = inst.get(attr.name)
            values.append(None if value is None else value.value.isoformat())
    return tuple(values)


def _apply_dedup(chain: CollatorChain, items: list[_WorkItem], rule: DedupByRoot, audit) -> list[_WorkItem]:
    groups: dict[tuple, list[_WorkItem]] = {}
    for item in items:
        root = _canonical_or_none(chain.spec, item.instance.get(rule.attribute), rule.attribute)
        key = (root, _date_group_key(chain.spec, item.instance))
        groups.setdefault(key, []).append(item)
    return [
        _merge_items(chain, members, audit, rule.text())
        for _, members in sorted(groups.items(), key=lambda kv: str(kv[0]))
    ]


def _apply_prefer_latest(chain: CollatorChain, items: list[_WorkItem], rule: PreferLatest, audit) -> list[_WorkItem]:
    anchor = chain.spec.anchor_attribute
    groups: dict[str, list[_WorkItem]] = {}
    for item in items:
        root = _canonical_or_none(chain.spec, item.instance.get(anchor), anchor)
        key = root if root is not None else f"\x00{item.instance.instance_id}"
        groups.setdefault(key, []).append(item)
    kept: list[_WorkItem] = []
    for _, members in sorted(groups.items()):
        dated = [m for m in members if m.instance.get(rule.date_attribute) is not None]
        if not dated:
            kept.extend(members)
            continue
        winner = max(dated, key=lambda m: (
            m.instance.get(rule.date_attribute).value,  # type: ignore[union-attr]
            _source_rank(chain, m),
        ))
        if audit is not None and len(members) > 1:
            audit.append({
                "rule": rule.text(),
                "action": "kept_latest",
                "kept": winner.instance.instance_id,
                "discarded": sorted(
                    m.instance.instance_id for m in members if m is not winner
                ),
            })
        kept.append(winner)
    return kept


def _apply_merge_window(chain: CollatorChain, items: list[_WorkItem], rule: MergeWithinWindow, audit) -> list[_WorkItem]:
    groups: dict[str, list[_WorkItem]] = {}
    passthrough: list[_WorkItem] = []
    for item in items:
        key = _canonical_or_none(chain.spec, item.instance.get(rule.key_attribute), rule.key_attribute)
        has_date = item.instance.get(rule.date_attribute) is not None
        if key is None or not has_date:
            passthrough.append(item)
            continue
        groups.setdefault(key, []).append(item)
    merged: list[_WorkItem] = []
    for _, members in sorted(groups.items()):
        members.sort(key=lambda m: (
            m.instance.get(rule.date_attribute).value,  # type: ignore[union-attr]
            _sort_key(chain.spec, m.instance),
        ))
        component: list[_WorkItem] = []
        window = timedelta(days=rule.window_days)

        def flush() -> None:
            if not component:
                return
            overrides: dict[str, Optional[TypedValue]] = {}
            dates = [m.instance.get(rule.date_attribute).value for m in component]  # type: ignore[union-attr]
            overrides[rule.date_attribute] = TypedValue(Kind.DATE, min(dates))
            if chain.spec.has_attribute("end_date") and rule.date_attribute != "end_date":
                ends = [
                    m.instance.get("end_date").value  # type: ignore[union-attr]
                    for m in component
                    if m.instance.get("end_date") is not None
                ]
                if ends:
                    overrides["end_date"] = TypedValue(Kind.DATE, max(ends))
            merged.append(_merge_items(chain, component, audit, rule.text(), overrides))

        for item in members:
            if not component:
                component.append(item)
                continue
            previous = component[-1].instance.get(rule.date_attribute).value  # type: ignore[union-attr]
            current = item.instance.get(rule.date_attribute).value  # type: ignore[union-attr]
            if current - previous <= window:
                component.append(item)
            else:
                flush()
                component = [item]
        flush()
    return merged + passthrough


def _apply_infer_end(chain: CollatorChain, items: list[_WorkItem], rule: InferEndFromLast, audit) -> list[_WorkItem]:
    target_spec = chain.spec.attribute(rule.target_attribute)
    results: list[_WorkItem] = []
    for item in items:
        if item.instance.get(rule.target_attribute) is not None:
            results.append(item)
            continue
        candidates: list[date] = []
        for source in item.merged_from:
            if chain.spec.has_attribute(rule.source_attribute):
                value = source.attributes.get(rule.source_attribute)
                if value is not None and value.kind is Kind.DATE:
                    candidates.append(value.value)  # type: ignore[arg-type]
            else:
                for name, value in source.attributes.items():
                    if name == rule.target_attribute or value is None:
                        continue
                    if value.kind is Kind.DATE:
                        candidates.append(value.value)  # type: ignore[arg-type]
        if not candidates:
            results.append(item)
            continue
        inferred = max(candidates)
        attributes = dict(item.instance.attributes)
        attributes[rule.target_attribute] = TypedValue(target_spec.kind, inferred)
        updated = EntityInstance(
            entity_type=item.instance.entity_type,
            attributes=attributes,
            provenance=item.instance.provenance,
        )
        if audit is not None:
            audit.append({
                "rule": rule.text(),
                "action": "inferred",
                "attribute": rule.target_attribute,
                "value": inferred.isoformat(),
                "instance": updated.instance_id,
            })
        results.append(_WorkItem(instance=updated, merged_from=item.merged_from))
    return results


def _compare(lhs: date, comparator: str, rhs: date) -> bool:
    if comparator == "<":
        return lhs < rhs
    if comparator == "<=":
        return lhs <= rhs
    if comparator == ">":
        return lhs > rhs
    if comparator == ">=":
        return lhs >= rhs
    raise RuleError(f"unknown comparator {comparator!r}")


def _apply_conditional_set(chain: CollatorChain, items: list[_WorkItem], rule: ConditionalSet, audit) -> list[_WorkItem]:
    if chain.run_date is None:
        raise RuleError(f"rule {rule.text()!r} requires a run_date on the chain")
    reference = chain.run_date - timedelta(days=rule.condition.days_before_today)
    target_spec = chain.spec.attribute(rule.target_attribute)
    new_value = validate_value(target_spec, rule.value)
    results: list[_WorkItem] = []
    for item in items:
        cond_value = item.instance.get(rule.condition.attribute)
        if (
            cond_value is None
            or cond_value.kind is not Kind.DATE
            or not _compare(cond_value.value, rule.condition.comparator, reference)  # type: ignore[arg-type]
        ):
            results.append(item)
            continue
        if item.instance.get(rule.target_attribute) == new_value:
            results.append(item)
            continue
        attributes = dict(item.instance.attributes)
        attributes[rule.target_attribute] = new_value
        updated = EntityInstance(
            entity_type=item.instance.entity_type,
            attributes=attributes,
            provenance=item.instance.provenance,
        )
        if audit is not None:
            audit.append({
                "rule": rule.text(),
                "action": "set",
                "attribute": rule.target_attribute,
                "value": str(new_value.to_json()),
                "instance": updated.instance_id,
            })
        results.append(_WorkItem(instance=updated, merged_from=item.merged_from))
    return results


def collate(
    chain: CollatorChain,
    inputs: Sequence[Union[PartialExtraction, EntityInstance]],
    registry: SchemaRegistry,
    audit: Optional[list] = None,
) -> list[EntityInstance]:
    """Apply the chain's rules in order and return validated, sorted instances."""
    for dependency in chain.spec.depends_on:
        resolved = registry.resolve_name(dependency) or dependency
        if resolved not in chain.dependencies:
            message = f"entity {chain.spec.name!r} requires {resolved!r} instances"
            if chain.on_missing_dependency == "error":
                raise DependencyError(message)
            if audit is not None:
                audit.append({"action": "missing_dependency", "detail": message})
    items = [
        _WorkItem(instance=inst, merged_from=[inst])
        for inst in (_normalize_input(chain.spec, registry, item) for item in inputs)
    ]
    items.sort(key=lambda m: _sort_key(chain.spec, m.instance))
    for rule in chain.rules:
        if isinstance(rule, DedupByRoot):
            items = _apply_dedup(chain, items, rule, audit)
        elif isinstance(rule, PreferLatest):
            items = _apply_prefer_latest(chain, items, rule, audit)
        elif isinstance(rule, MergeWithinWindow):
            items = _apply_merge_window(chain, items, rule, audit)
        elif isinstance(rule, InferEndFromLast):
            items = _apply_infer_end(chain, items, rule, audit)
        elif isinstance(rule, ConditionalSet):
            items = _apply_conditional_set(chain, items, rule, audit)
        else:
            raise RuleError(f"unsupported rule {rule!r}")
        items.sort(key=lambda m: _sort_key(chain.spec, m.instance))
    return [validate_instance(registry, item.instance) for item in items]


# ---------------------------------------------------------------------------
# Dependency ordering
# ---------------------------------------------------------------------------

def topo_order(edges: Mapping[str, Iterable[str]]) -> list[str]:
    """Order entities so each appears after everything it depends on.

    Deterministic: independent entities come out lexicographically. A cycle
    raises :class:`DependencyError` naming its members.
    """
    nodes = sorted(set(edges) | {d for deps in edges.values() for d in deps})
    remaining = {node: {d for d in edges.get(node, ()) if d in nodes} for node in nodes}
    ordered: list[str] = []
    while remaining:
        ready = sorted(node for node, deps in remaining.items() if not deps)
        if not ready:
            cycle = sorted(remaining)
            raise DependencyError("dependency cycle among: " + ", ".join(cycle))
        for node in ready:
            ordered.append(node)
            del remaining[node]
        for deps in remaining.values():
            deps.difference_update(ready)
    return ordered
