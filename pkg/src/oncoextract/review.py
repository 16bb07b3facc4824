"""Append-only adjudication decision log with derived tallies.

Every acknowledged decision is one fsync'd JSON line; replaying the log
reproduces the tallies exactly. Later decisions for the same instance
supersede earlier ones, but every event stays in the log for audit.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Mapping, Optional

from .evaluation import AdjudicationRates, AdjudicationTally, acceptance_and_missing
from .schema import (
    EntityInstance,
    SchemaRegistry,
    SchemaViolation,
    instance_from_json,
    validate_instance,
)

ACTIONS = ("approve", "edit", "add")


class StoreError(RuntimeError):
    pass


@dataclass(frozen=True)
class Decision:
    patient_id: str
    action: str
    entity_type: str
    instance_id: Optional[str] = None          # null for add
    edited_attributes: Optional[dict[str, Any]] = None
    new_instance: Optional[EntityInstance] = None
    reviewer: str = ""
    timestamp: str = ""

    def __post_init__(self) -> None:
        if self.action not in ACTIONS:
            raise StoreError(f"unknown action {self.action!r}")
        if self.action == "edit" and not self.edited_attributes:
            raise StoreError("edit decisions carry edited_attributes")
        if self.action == "add" and self.new_instance is None:
            raise StoreError("add decisions carry new_instance")
        if self.action == "approve" and (self.edited_attributes or self.new_instance):
            raise StoreError("approve decisions carry no payload")
        if self.action != "add" and not self.instance_id:
            raise StoreError(f"{self.action} decisions reference an instance_id")

    def to_json(self) -> dict[str, Any]:
        payload: dict[str, Any] = {
            "type": "decision",
            "patient_id": self.patient_id,
            "action": self.action,
            "entity_type": self.entity_type,
            "instance_id": self.instance_id,
            "reviewer": self.reviewer,
            "timestamp": self.timestamp,
        }
        if self.edited_attributes is not None:
            payload["edited_attributes"] = self.edited_attributes
        if self.new_instance is not None:
            payload["new_instance"] = self.new_instance.to_json()
        return payload


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


class ReviewStore:
    """Line-delimited decision log plus in-memory derived state."""

    def __init__(self, path: Path | str, registry: SchemaRegistry):
        self.path = Path(path)
        self.registry = registry
        self.events: list[dict[str, Any]] = []
        # terminal decision per decision key; insertion order is log order
        self._terminal: dict[str, dict[str, Any]] = {}
        self._complete: dict[str, bool] = {}
        if self.path.exists():
            self._replay()

    # -- persistence ---------------------------------------------------------

    def _replay(self) -> None:
        text = self.path.read_text("utf-8")
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                event = json.loads(line)
            except json.JSONDecodeError as exc:
                raise StoreError(
                    f"corrupt store {self.path} at line {lineno}: {exc}"
                ) from exc
            self._apply(event)

    def _append(self, event: Mapping[str, Any]) -> None:
        line = json.dumps(event, sort_keys=True)
        with open(self.path, "a", encoding="utf-8") as handle:
            handle.write(line + "\n")
            handle.flush()
            os.fsync(handle.fileno())  # acknowledged == durable
        self._apply(dict(event))

    def _apply(self, event: dict[str, Any]) -> None:
        self.events.append(event)
        kind = event.get("type")
        if kind == "decision":
            key = self._decision_key(event)
            self._terminal.pop(key, None)
            self._terminal[key] = event
        elif kind == "complete":
            self._complete[str(event["patient_id"])] = bool(event.get("complete", True))
        else:
            raise StoreError(f"unknown event type {kind!r}")

    @staticmethod
    def _decision_key(event: Mapping[str, Any]) -> str:
        if event["action"] == "add":
            added = event.get("new_instance", {}).get("instance_id", "")
            return f"{event['patient_id']}:add:{added}"
        return f"{event['patient_id']}:{event['instance_id']}"

    # -- API -----------------------------------------------------------------

    def record_decision(self, decision: Decision) -> AdjudicationRates:
        if decision.new_instance is not None:
            validate_instance(self.registry, decision.new_instance)
        if not decision.timestamp:
            decision = Decision(
                patient_id=decision.patient_id,
                action=decision.action,
                entity_type=decision.entity_type,
                instance_id=decision.instance_id,
                edited_attributes=decision.edited_attributes,
                new_instance=decision.new_instance,
                reviewer=decision.reviewer,
                timestamp=_now(),
            )
        self._append(decision.to_json())
        return self.rates()

    def set_complete(self, patient_id: str, complete: bool, reviewer: str = "") -> None:
        self._append({
            "type": "complete",
            "patient_id": patient_id,
            "complete": complete,
            "reviewer": reviewer,
            "timestamp": _now(),
        })

    def is_complete(self, patient_id: str) -> bool:
        return self._complete.get(patient_id, False)

    def decision_state(self, patient_id: str, instance_id: str) -> Optional[str]:
        event = self._terminal.get(f"{patient_id}:{instance_id}")
        return None if event is None else str(event["action"])

    def added_instances(self, patient_id: str) -> list[dict[str, Any]]:
        return [
            event["new_instance"]
            for key, event in self._terminal.items()
            if event["action"] == "add" and event["patient_id"] == patient_id
        ]

    def edited_attributes(self, patient_id: str, instance_id: str) -> Optional[dict[str, Any]]:
        event = self._terminal.get(f"{patient_id}:{instance_id}")
        if event is None or event["action"] != "edit":
            return None
        return event.get("edited_attributes")

    def tallies(self) -> list[AdjudicationTally]:
        counts: dict[tuple[str, str], list[int]] = {}
        for event in self._terminal.values():
            key = (str(event["patient_id"]), str(event["entity_type"]))
            bucket = counts.setdefault(key, [0, 0, 0])
            if event["action"] == "approve":
                bucket[0] += 1
            elif event["action"] == "edit":
                bucket[1] += 1
            else:
                bucket[2] += 1
        return [
            AdjudicationTally(
                patient_id=patient,
                entity_type=entity,
                n_correct=correct,
                n_incorrect=incorrect,
                n_missing=missing,
            )
            for (patient, entity), (correct, incorrect, missing) in sorted(counts.items())
        ]

    def rates(self) -> AdjudicationRates:
        return acceptance_and_missing(self.tallies())

    def rates_by_entity(self) -> dict[str, AdjudicationRates]:
        grouped: dict[str, list[AdjudicationTally]] = {}
        for tally in self.tallies():
            grouped.setdefault(tally.entity_type, []).append(tally)
        return {
            entity: acceptance_and_missing(tallies)
            for entity, tallies in sorted(grouped.items())
        }


def decision_from_json(
    registry: SchemaRegistry, raw: Mapping[str, Any], entity_type: str = ""
) -> Decision:
    new_instance = None
    if raw.get("new_instance") is not None:
        new_instance = instance_from_json(registry, raw["new_instance"])
    resolved_entity = raw.get("entity_type") or entity_type
    if not resolved_entity and new_instance is not None:
        resolved_entity = new_instance.entity_type
    if not resolved_entity:
        raise StoreError("decision needs an entity_type")
    return Decision(
        patient_id=str(raw["patient_id"]),
        action=str(raw["action"]).lower(),
        entity_type=registry.get(str(resolved_entity)).name,
        instance_id=raw.get("instance_id"),
        edited_attributes=raw.get("edited_attributes"),
        new_instance=new_instance,
        reviewer=str(raw.get("reviewer", "")),
        timestamp=str(raw.get("timestamp", "")),
    )
