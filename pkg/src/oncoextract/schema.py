"""Typed entity/attribute data model, registry loading, and validation.

Public API
----------
- ``Kind`` / ``AttributeType`` / ``AttributeSpec`` — attribute typing.
- ``RootAlignment`` / ``WeightedAlignment`` — per-entity alignment config.
- ``EntityTypeSpec`` / ``SchemaRegistry`` — the entity universe.
- ``TypedValue`` / ``EntityInstance`` / ``PatientRecord`` — extracted data.
- ``load_schema`` / ``serialize_schema`` / ``default_registry``.
- ``validate_value`` / ``validate_instance`` — strong-typing gates.
- ``canonical_text`` / ``canonical_value`` — equality normalization.

The registry is immutable after load and safe to share across workers;
all validation functions are pure.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from datetime import date
from enum import Enum
from importlib import resources
from typing import Any, Iterable, Mapping, Optional, Union

from .dates import DateParseError, normalize_date, parse_full_date

_WEIGHT_SUM_TOL = 1e-9
_WS_RE = re.compile(r"\s+")


class SchemaError(ValueError):
    """A schema definition violates its own invariants."""


class SchemaViolation(ValueError):
    """A value or instance violates the declared schema; callers must reject."""


def canonical_text(text: str) -> str:
    """Trim, lowercase, and collapse internal whitespace."""
    return _WS_RE.sub(" ", text.strip()).lower()


def canonical_value(attribute_name: str, text: str) -> str:
    """Canonical form used for equality; stage values also drop internal spaces."""
    canon = canonical_text(text)
    if attribute_name == "stage_value":
        canon = canon.replace(" ", "")
    return canon


class Kind(str, Enum):
    DATE = "Date"
    INTEGER = "Integer"
    DECIMAL = "Decimal"
    CATEGORICAL = "Categorical"
    TEXT = "Text"
    BOOLEAN = "Boolean"


@dataclass(frozen=True)
class AttributeType:
    kind: Kind
    values: Optional[tuple[str, ...]] = None

    def __post_init__(self) -> None:
        if self.kind is Kind.CATEGORICAL:
            if not self.values:
                raise SchemaError("categorical type requires a non-empty value set")
        elif self.values is not None:
            raise SchemaError(f"{self.kind.value} type must not carry a value set")


@dataclass(frozen=True)
class AttributeSpec:
    name: str
    type: AttributeType
    required: bool = False
    weight: Optional[float] = None

    @property
    def kind(self) -> Kind:
        return self.type.kind

    @property
    def value_set(self) -> Optional[tuple[str, ...]]:
        return self.type.values


@dataclass(frozen=True)
class RootAlignment:
    root_attribute: str


@dataclass(frozen=True)
class WeightedAlignment:
    threshold: float
    weights: tuple[tuple[str, float], ...]

    def __post_init__(self) -> None:
        if not 0.0 < self.threshold <= 1.0:
            raise SchemaError(f"weighted threshold must be in (0, 1], got {self.threshold}")
        total = sum(w for _, w in self.weights)
        if abs(total - 1.0) > _WEIGHT_SUM_TOL:
            raise SchemaError(f"weights must sum to 1, got {total}")

    @property
    def driver(self) -> str:
        best_name, best_weight = self.weights[0]
        for name, weight in self.weights[1:]:
            if weight > best_weight:
                best_name, best_weight = name, weight
        return best_name

    def weight_of(self, attribute_name: str) -> float:
        for name, weight in self.weights:
            if name == attribute_name:
                return weight
        return 0.0


AlignmentScheme = Union[RootAlignment, WeightedAlignment]


@dataclass(frozen=True)
class EntityTypeSpec:
    name: str
    attributes: tuple[AttributeSpec, ...]
    alignment: AlignmentScheme
    depends_on: tuple[str, ...] = ()
    aliases: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.attributes:
            raise SchemaError(f"entity {self.name!r} has no attributes")
        seen: set[str] = set()
        for spec in self.attributes:
            if spec.name in seen:
                raise SchemaError(f"duplicate attribute {spec.name!r} in entity {self.name!r}")
            seen.add(spec.name)
        if isinstance(self.alignment, RootAlignment):
            if self.alignment.root_attribute not in seen:
                raise SchemaError(
                    f"root attribute {self.alignment.root_attribute!r} "
                    f"not defined on entity {self.name!r}"
                )
        else:
            for name, _ in self.alignment.weights:
                if name not in seen:
                    raise SchemaError(
                        f"weighted attribute {name!r} not defined on entity {self.name!r}"
                    )

    def attribute(self, name: str) -> AttributeSpec:
        for spec in self.attributes:
            if spec.name == name:
                return spec
        raise SchemaViolation(f"unknown attribute {name!r} on entity {self.name!r}")

    def has_attribute(self, name: str) -> bool:
        return any(spec.name == name for spec in self.attributes)

    @property
    def attribute_names(self) -> tuple[str, ...]:
        return tuple(spec.name for spec in self.attributes)

    @property
    def anchor_attribute(self) -> str:
        """Root attribute for root alignment, highest-weighted for weighted."""
        if isinstance(self.alignment, RootAlignment):
            return self.alignment.root_attribute
        return self.alignment.driver


class SchemaRegistry:
    """Immutable lookup of entity specs, resolvable by name or alias."""

    def __init__(self, entities: Iterable[EntityTypeSpec]):
        self._entities: dict[str, EntityTypeSpec] = {}
        self._by_alias: dict[str, str] = {}
        for spec in entities:
            if spec.name in self._entities:
                raise SchemaError(f"duplicate entity name {spec.name!r}")
            self._entities[spec.name] = spec
        if not self._entities:
            raise SchemaError("no entities defined")
        for spec in self._entities.values():
            for alias in (spec.name, *spec.aliases):
                key = canonical_text(alias).replace(" ", "")
                other = self._by_alias.get(key)
                if other is not None and other != spec.name:
                    raise SchemaError(f"alias {alias!r} is claimed by {other!r} and {spec.name!r}")
                self._by_alias[key] = spec.name
        for spec in self._entities.values():
            for dep in spec.depends_on:
                if self.resolve_name(dep) is None:
                    raise SchemaError(
                        f"entity {spec.name!r} depends on unregistered entity {dep!r}"
                    )
        self._check_acyclic()

    def _check_acyclic(self) -> None:
        state: dict[str, int] = {}  # 0 visiting, 1 done

        def visit(name: str, trail: list[str]) -> None:
            mark = state.get(name)
            if mark == 1:
                return
            if mark == 0:
                cycle = trail[trail.index(name):] + [name]
                raise SchemaError("dependency cycle: " + " -> ".join(cycle))
            state[name] = 0
            trail.append(name)
            for dep in self._entities[name].depends_on:
                visit(self.resolve_name(dep) or dep, trail)
            trail.pop()
            state[name] = 1

        for name in self._entities:
            visit(name, [])

    def resolve_name(self, name: str) -> Optional[str]:
        return self._by_alias.get(canonical_text(name).replace(" ", ""))

    def get(self, name: str) -> EntityTypeSpec:
        resolved = self.resolve_name(name)
        if resolved is None:
            raise SchemaViolation(f"unknown entity type {name!r}")
        return self._entities[resolved]

    def __contains__(self, name: str) -> bool:
        return self.resolve_name(name) is not None

    @property
    def entity_names(self) -> tuple[str, ...]:
        return tuple(self._entities)

    @property
    def entities(self) -> tuple[EntityTypeSpec, ...]:
        return tuple(self._entities.values())

    def dependency_edges(self) -> dict[str, tuple[str, ...]]:
        return {
            spec.name: tuple(self.resolve_name(d) or d for d in spec.depends_on)
            for spec in self._entities.values()
        }


# ---------------------------------------------------------------------------
# Typed values and instances
# ---------------------------------------------------------------------------

Scalar = Union[str, int, float, bool]


@dataclass(frozen=True)
class TypedValue:
    kind: Kind
    value: Union[date, int, float, str, bool]

    def to_json(self) -> Scalar:
        if self.kind is Kind.DATE:
            return self.value.isoformat()  # type: ignore[union-attr]
        return self.value  # type: ignore[return-value]

    def __str__(self) -> str:
        return str(self.to_json())


@dataclass(frozen=True)
class Provenance:
    document_id: str
    chunk_index: int
    char_start: int
    char_end: int

    def to_json(self) -> dict[str, Any]:
        return {
            "document_id": self.document_id,
            "chunk_index": self.chunk_index,
            "char_start": self.char_start,
            "char_end": self.char_end,
        }


@dataclass
class EntityInstance:
    entity_type: str
    attributes: dict[str, Optional[TypedValue]]
    provenance: tuple[Provenance, ...] = ()
    instance_id: str = ""

    def __post_init__(self) -> None:
        if not self.instance_id:
            self.instance_id = make_instance_id(
                self.entity_type, self.attributes, self.provenance
            )

    def get(self, name: str) -> Optional[TypedValue]:
        return self.attributes.get(name)

    def non_null(self) -> dict[str, TypedValue]:
        return {k: v for k, v in self.attributes.items() if v is not None}

    def to_json(self) -> dict[str, Any]:
        return {
            "instance_id": self.instance_id,
            "entity_type": self.entity_type,
            "attributes": {k: v.to_json() for k, v in sorted(self.non_null().items())},
            "provenance": [p.to_json() for p in self.provenance],
        }


@dataclass
class PatientRecord:
    patient_id: str
    instances: list[EntityInstance] = field(default_factory=list)

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for inst in self.instances:
            if inst.instance_id in seen:
                raise SchemaViolation(f"duplicate instance_id {inst.instance_id!r}")
            seen.add(inst.instance_id)

    def by_entity(self) -> dict[str, list[EntityInstance]]:
        grouped: dict[str, list[EntityInstance]] = {}
        for inst in self.instances:
            grouped.setdefault(inst.entity_type, []).append(inst)
        return grouped

    def to_json(self) -> dict[str, Any]:
        return {
            "patient_id": self.patient_id,
            "instances": [inst.to_json() for inst in self.instances],
        }


def make_instance_id(
    entity_type: str,
    attributes: Mapping[str, Optional[TypedValue]],
    provenance: tuple[Provenance, ...],
) -> str:
    payload = json.dumps(
        {
            "entity": entity_type,
            "attributes": {k: None if v is None else v.to_json() for k, v in sorted(attributes.items())},
            "provenance": [p.to_json() for p in provenance],
        },
        sort_keys=True,
    )
    return hashlib.blake2b(payload.encode("utf-8"), digest_size=8).hexdigest()


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

_TRUE_WORDS = {"true", "yes"}
_FALSE_WORDS = {"false", "no"}


def validate_value(spec: AttributeSpec, raw: Scalar) -> TypedValue:
    """Coerce *raw* into a :class:`TypedValue` of *spec*'s kind or reject it.

    Categorical output is the canonical value-set member; date input accepts
    any full-date format understood by :func:`normalize_date`.
    """
    kind = spec.kind
    if kind is Kind.DATE:
        if not isinstance(raw, str):
            raise SchemaViolation(f"{spec.name}: expected a date string, got {raw!r}")
        try:
            return TypedValue(kind, parse_full_date(raw))
        except DateParseError as exc:
            raise SchemaViolation(f"{spec.name}: {exc}") from exc
    if kind is Kind.INTEGER:
        if isinstance(raw, bool):
            raise SchemaViolation(f"{spec.name}: boolean is not an integer")
        if isinstance(raw, int):
            return TypedValue(kind, raw)
        if isinstance(raw, float):
            if raw.is_integer():
                return TypedValue(kind, int(raw))
            raise SchemaViolation(f"{spec.name}: {raw!r} is not an integer")
        try:
            return TypedValue(kind, int(str(raw).strip(), 10))
        except ValueError as exc:
            raise SchemaViolation(f"{spec.name}: unparseable integer {raw!r}") from exc
    if kind is Kind.DECIMAL:
        if isinstance(raw, bool):
            raise SchemaViolation(f"{spec.name}: boolean is not a number")
        try:
            value = float(raw if isinstance(raw, (int, float)) else str(raw).strip())
        except ValueError as exc:
            raise SchemaViolation(f"{spec.name}: unparseable number {raw!r}") from exc
        if value != value or value in (float("inf"), float("-inf")):
            raise SchemaViolation(f"{spec.name}: non-finite number {raw!r}")
        return TypedValue(kind, value)
    if kind is Kind.BOOLEAN:
        if isinstance(raw, bool):
            return TypedValue(kind, raw)
        word = canonical_text(str(raw))
        if word in _TRUE_WORDS:
            return TypedValue(kind, True)
        if word in _FALSE_WORDS:
            return TypedValue(kind, False)
        raise SchemaViolation(f"{spec.name}: unparseable boolean {raw!r}")
    if kind is Kind.CATEGORICAL:
        if not isinstance(raw, str):
            raise SchemaViolation(f"{spec.name}: expected a string, got {raw!r}")
        canon = canonical_value(spec.name, raw)
        assert spec.value_set is not None
        for member in spec.value_set:
            if canonical_value(spec.name, member) == canon:
                return TypedValue(kind, member)
        raise SchemaViolation(
            f"{spec.name}: {raw!r} not in value set {list(spec.value_set)}"
        )
    if kind is Kind.TEXT:
        if not isinstance(raw, str):
            raise SchemaViolation(f"{spec.name}: expected a string, got {raw!r}")
        return TypedValue(kind, raw.strip())
    raise SchemaViolation(f"{spec.name}: unsupported kind {kind}")


def validate_instance(registry: SchemaRegistry, inst: EntityInstance) -> EntityInstance:
    """Check *inst* against the registry; unknown keys or type mismatches reject."""
    spec = registry.get(inst.entity_type)
    for name, value in inst.attributes.items():
        if not spec.has_attribute(name):
            raise SchemaViolation(f"unknown attribute {name!r} on entity {spec.name!r}")
        if value is None:
            continue
        attr = spec.attribute(name)
        if value.kind is not attr.kind:
            raise SchemaViolation(
                f"{spec.name}.{name}: expected {attr.kind.value}, got {value.kind.value}"
            )
        if attr.kind is Kind.CATEGORICAL:
            assert attr.value_set is not None
            if value.value not in attr.value_set:
                raise SchemaViolation(
                    f"{spec.name}.{name}: {value.value!r} not in value set"
                )
    if inst.entity_type != spec.name:
        inst = EntityInstance(
            entity_type=spec.name,
            attributes=inst.attributes,
            provenance=inst.provenance,
            instance_id=inst.instance_id,
        )
    return inst


# ---------------------------------------------------------------------------
# Schema file format
# ---------------------------------------------------------------------------

_ENTITY_KEYS = {"name", "alignment", "depends_on", "attributes", "aliases"}
_ATTRIBUTE_KEYS = {"name", "type", "values", "required"}


def _parse_attribute(raw: Mapping[str, Any], entity: str) -> AttributeSpec:
    unknown = set(raw) - _ATTRIBUTE_KEYS
    if unknown:
        raise SchemaError(f"unknown attribute keys {sorted(unknown)} in entity {entity!r}")
    try:
        kind = Kind(raw["type"])
    except (KeyError, ValueError) as exc:
        raise SchemaError(f"bad attribute type in entity {entity!r}: {raw.get('type')!r}") from exc
    values = raw.get("values")
    if values is not None:
        values = tuple(str(v) for v in values)
    return AttributeSpec(
        name=str(raw["name"]),
        type=AttributeType(kind=kind, values=values),
        required=bool(raw.get("required", False)),
    )


def _parse_alignment(raw: Mapping[str, Any], entity: str) -> AlignmentScheme:
    scheme = raw.get("scheme")
    if scheme == "root":
        return RootAlignment(root_attribute=str(raw["root"]))
    if scheme == "weighted":
        weights = raw.get("weights")
        if not isinstance(weights, Mapping) or not weights:
            raise SchemaError(f"weighted alignment for {entity!r} requires weights")
        return WeightedAlignment(
            threshold=float(raw.get("threshold", 0.9)),
            weights=tuple((str(k), float(v)) for k, v in weights.items()),
        )
    raise SchemaError(f"unknown alignment scheme {scheme!r} for entity {entity!r}")


def load_schema(source: Union[str, Mapping[str, Any]]) -> SchemaRegistry:
    """Parse a schema definition document into a validated registry."""
    if isinstance(source, str):
        try:
            doc = json.loads(source)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"schema document is not valid JSON: {exc}") from exc
    else:
        doc = source
    if not isinstance(doc, Mapping) or "entities" not in doc:
        raise SchemaError("schema document must be an object with an 'entities' list")
    raw_entities = doc["entities"]
    if not raw_entities:
        raise SchemaError("no entities")
    entities = []
    for raw in raw_entities:
        unknown = set(raw) - _ENTITY_KEYS
        if unknown:
            raise SchemaError(f"unknown entity keys {sorted(unknown)} in {raw.get('name')!r}")
        name = str(raw["name"])
        attributes = tuple(_parse_attribute(a, name) for a in raw.get("attributes", []))
        alignment = _parse_alignment(raw.get("alignment", {}), name)
        if isinstance(alignment, WeightedAlignment):
            weight_map = dict(alignment.weights)
            attributes = tuple(
                AttributeSpec(a.name, a.type, a.required, weight_map.get(a.name))
                for a in attributes
            )
        entities.append(
            EntityTypeSpec(
                name=name,
                attributes=attributes,
                alignment=alignment,
                depends_on=tuple(str(d) for d in raw.get("depends_on", [])),
                aliases=tuple(str(a) for a in raw.get("aliases", [])),
            )
        )
    return SchemaRegistry(entities)


def serialize_schema(registry: SchemaRegistry) -> str:
    """Inverse of :func:`load_schema`; load(serialize(r)) == load-equivalent r."""
    entities = []
    for spec in registry.entities:
        if isinstance(spec.alignment, RootAlignment):
            alignment: dict[str, Any] = {"scheme": "root", "root": spec.alignment.root_attribute}
        else:
            alignment = {
                "scheme": "weighted",
                "threshold": spec.alignment.threshold,
                "weights": dict(spec.alignment.weights),
            }
        attributes = []
        for attr in spec.attributes:
            raw: dict[str, Any] = {"name": attr.name, "type": attr.kind.value}
            if attr.value_set is not None:
                raw["values"] = list(attr.value_set)
            if attr.required:
                raw["required"] = True
            attributes.append(raw)
        entry: dict[str, Any] = {"name": spec.name, "alignment": alignment, "attributes": attributes}
        if spec.depends_on:
            entry["depends_on"] = list(spec.depends_on)
        if spec.aliases:
            entry["aliases"] = list(spec.aliases)
        entities.append(entry)
    return json.dumps({"entities": entities}, indent=2, sort_keys=True)


_default_registry: Optional[SchemaRegistry] = None


def default_registry() -> SchemaRegistry:
    """The bundled default registry (16 oncology entities)."""
    global _default_registry
    if _default_registry is None:
        text = resources.files("oncoextract.data").joinpath("default_schema.json").read_text("utf-8")
        _default_registry = load_schema(text)
    return _default_registry


# ---------------------------------------------------------------------------
# Record (de)serialization — the on-disk patient record format
# ---------------------------------------------------------------------------

def record_to_json(record: PatientRecord) -> str:
    return json.dumps(record.to_json(), indent=2, sort_keys=True) + "\n"


def instance_from_json(
    registry: SchemaRegistry, raw: Mapping[str, Any]
) -> EntityInstance:
    spec = registry.get(str(raw["entity_type"]))
    attributes: dict[str, Optional[TypedValue]] = {}
    for name, value in raw.get("attributes", {}).items():
        if not spec.has_attribute(name):
            raise SchemaViolation(f"unknown attribute {name!r} on entity {spec.name!r}")
        attributes[name] = None if value is None else validate_value(spec.attribute(name), value)
    provenance = tuple(
        Provenance(
            document_id=str(p["document_id"]),
            chunk_index=int(p["chunk_index"]),
            char_start=int(p["char_start"]),
            char_end=int(p["char_end"]),
        )
        for p in raw.get("provenance", [])
    )
    return EntityInstance(
        entity_type=spec.name,
        attributes=attributes,
        provenance=provenance,
        instance_id=str(raw.get("instance_id", "")),
    )


def record_from_json(registry: SchemaRegistry, text: str) -> PatientRecord:
    raw = json.loads(text)
    instances = [instance_from_json(registry, r) for r in raw.get("instances", [])]
    return PatientRecord(patient_id=str(raw["patient_id"]), instances=instances)
