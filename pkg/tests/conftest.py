from __future__ import annotations

import pytest

from oncoextract.schema import (
    EntityInstance,
    Provenance,
    SchemaRegistry,
    default_registry,
    validate_value,
)
from oncoextract.synthesis import PartialExtraction


@pytest.fixture(scope="session")
def registry() -> SchemaRegistry:
    return default_registry()


def typed_attributes(registry: SchemaRegistry, entity_type: str, raw: dict):
    spec = registry.get(entity_type)
    return {
        name: None if value is None else validate_value(spec.attribute(name), value)
        for name, value in raw.items()
    }


def make_instance(
    registry: SchemaRegistry,
    entity_type: str,
    provenance: tuple[Provenance, ...] = (),
    **raw,
) -> EntityInstance:
    return EntityInstance(
        entity_type=registry.get(entity_type).name,
        attributes=typed_attributes(registry, entity_type, raw),
        provenance=provenance,
    )


def make_extraction(
    registry: SchemaRegistry,
    entity_type: str,
    provenance: tuple[Provenance, ...] = (),
    **raw,
) -> PartialExtraction:
    return PartialExtraction(
        entity_type=registry.get(entity_type).name,
        attributes=typed_attributes(registry, entity_type, raw),
        provenance=provenance,
    )
