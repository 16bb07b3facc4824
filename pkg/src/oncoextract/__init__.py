"""Entity-extraction pipeline engine and evaluation harness."""

__version__ = "0.1.0"

from .schema import (  # noqa: F401
    AttributeSpec,
    AttributeType,
    EntityInstance,
    EntityTypeSpec,
    Kind,
    PatientRecord,
    Provenance,
    RootAlignment,
    SchemaError,
    SchemaRegistry,
    SchemaViolation,
    TypedValue,
    WeightedAlignment,
    default_registry,
    load_schema,
    validate_instance,
    validate_value,
)
