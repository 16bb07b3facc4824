"""Review/adjudication HTTP service.

Serves pipeline outputs for human review: patients ranked by disagreement,
per-entity instance lists with their attribute schemas, source documents
with provenance-derived highlight spans, decision recording, and a live
dashboard. Responses never reveal whether an instance came from the
pipeline or from seeded reference data (blinded review).
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Optional

from fastapi import FastAPI, HTTPException
from fastapi.responses import FileResponse
from fastapi.staticfiles import StaticFiles

from .corpus import ingest_corpus, list_patients
from .evaluation import MatchPolicy, disagreement_score
from .review import Decision, ReviewStore, StoreError, decision_from_json
from .schema import (
    EntityInstance,
    PatientRecord,
    RootAlignment,
    SchemaRegistry,
    SchemaViolation,
    record_from_json,
)

log = logging.getLogger(__name__)


def _load_records(directory: Path, registry: SchemaRegistry) -> dict[str, PatientRecord]:
    records: dict[str, PatientRecord] = {}
    if not directory.is_dir():
        return records
    for path in sorted(directory.glob("*.json")):
        record = record_from_json(registry, path.read_text("utf-8"))
        records[record.patient_id] = record
    return records


def _entity_schema(registry: SchemaRegistry, entity_type: str) -> list[dict[str, Any]]:
    spec = registry.get(entity_type)
    fields = []
    for attr in spec.attributes:
        fields.append({
            "name": attr.name,
            "kind": attr.kind.value,
            "values": list(attr.value_set) if attr.value_set else None,
            "required": attr.required,
        })
    return fields


def create_app(
    output_dir: Path | str,
    corpus_root: Path | str,
    store_path: Path | str,
    registry: SchemaRegistry,
    gt_dir: Optional[Path | str] = None,
    ui_dir: Optional[Path | str] = None,
    date_tolerance_days: int = 7,
) -> FastAPI:
    output_dir = Path(output_dir)
    corpus_root = Path(corpus_root)
    records = _load_records(output_dir, registry)
    gt_records = _load_records(Path(gt_dir), registry) if gt_dir else {}
    store = ReviewStore(store_path, registry)  # corrupt stores refuse to start
    policy = MatchPolicy(date_tolerance_days=date_tolerance_days)

    ds_scores: dict[str, int] = {}
    for patient_id, record in records.items():
        gt = gt_records.get(patient_id)
        ds_scores[patient_id] = (
            disagreement_score(gt, record, registry, policy) if gt else 0
        )

    app = FastAPI(title="oncoextract review")

    def _record(patient_id: str) -> PatientRecord:
        record = records.get(patient_id)
        if record is None:
            raise HTTPException(status_code=404, detail=f"unknown patient {patient_id!r}")
        return record

    @app.get("/api/patients")
    def patients() -> list[dict[str, Any]]:
        listing = []
        for patient_id in sorted(records, key=lambda p: (-ds_scores.get(p, 0), p)):
            record = records[patient_id]
            counts: dict[str, int] = {}
            for inst in record.instances:
                counts[inst.entity_type] = counts.get(inst.entity_type, 0) + 1
            listing.append({
                "patient_id": patient_id,
                "ds_score": ds_scores.get(patient_id, 0),
                "entity_counts": dict(sorted(counts.items())),
                "complete": store.is_complete(patient_id),
            })
        return listing

    @app.get("/api/patients/{patient_id}/entities")
    def entities(patient_id: str) -> dict[str, Any]:
        record = _record(patient_id)
        grouped: dict[str, dict[str, Any]] = {}
        for inst in record.instances:
            bucket = grouped.setdefault(inst.entity_type, {
                "schema": _entity_schema(registry, inst.entity_type),
                "instances": [],
            })
            payload = inst.to_json()
            payload["decision"] = store.decision_state(patient_id, inst.instance_id)
            payload["edited_attributes"] = store.edited_attributes(patient_id, inst.instance_id)
            payload["reviewer_added"] = False
            bucket["instances"].append(payload)
        for added in store.added_instances(patient_id):
            entity_type = str(added["entity_type"])
            bucket = grouped.setdefault(entity_type, {
                "schema": _entity_schema(registry, entity_type),
                "instances": [],
            })
            payload = dict(added)
            payload["decision"] = "add"
            payload["reviewer_added"] = True
            bucket["instances"].append(payload)
        return {"patient_id": patient_id, "entities": dict(sorted(grouped.items()))}

    @app.get("/api/patients/{patient_id}/documents/{document_id}")
    def document(patient_id: str, document_id: str) -> dict[str, Any]:
        record = _record(patient_id)
        try:
            corpus = ingest_corpus(corpus_root, patient_id)
            doc = corpus.document(document_id)
        except Exception as exc:
            raise HTTPException(status_code=404, detail=str(exc)) from exc
        highlights = []
        for inst in record.instances:
            for span in inst.provenance:
                if span.document_id == document_id:
                    highlights.append({
                        "instance_id": inst.instance_id,
                        "char_start": span.char_start,
                        "char_end": span.char_end,
                    })
        highlights.sort(key=lambda h: (h["char_start"], h["char_end"], h["instance_id"]))
        return {"document_id": document_id, "text": doc.text, "highlights": highlights}

    @app.post("/api/decisions")
    def post_decision(payload: dict[str, Any]) -> dict[str, Any]:
        patient_id = str(payload.get("patient_id", ""))
        record = _record(patient_id)
        instance_id = payload.get("instance_id")
        entity_type = ""
        if payload.get("action") in ("approve", "edit"):
            target = next(
                (i for i in record.instances if i.instance_id == instance_id), None
            )
            if target is None:
                raise HTTPException(status_code=404, detail=f"unknown instance {instance_id!r}")
            entity_type = target.entity_type
            if payload.get("action") == "edit":
                spec = registry.get(entity_type)
                from .schema import validate_value
                for name, value in (payload.get("edited_attributes") or {}).items():
                    if not spec.has_attribute(name):
                        raise HTTPException(status_code=400, detail=f"unknown attribute {name!r}")
                    if value is not None:
                        try:
                            validate_value(spec.attribute(name), value)
                        except SchemaViolation as exc:
                            raise HTTPException(status_code=400, detail=str(exc)) from exc
        try:
            decision = decision_from_json(registry, payload, entity_type)
            store.record_decision(decision)
        except (StoreError, SchemaViolation) as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        return {"ok": True, "dashboard": _dashboard_payload()}

    def _dashboard_payload() -> dict[str, Any]:
        # Headline names mirror the review workflow: approvals over all
        # reviewed items; the *_over_extracted pair sums to 1 by definition.
        def rename(payload: dict[str, Any]) -> dict[str, Any]:
            payload["approved_rate"] = payload.pop("acceptance_score")
            return payload

        payload = rename(store.rates().to_json())
        payload["per_entity"] = {
            entity: rename(r.to_json())
            for entity, r in store.rates_by_entity().items()
        }
        return payload

    @app.get("/api/dashboard")
    def dashboard() -> dict[str, Any]:
        return _dashboard_payload()

    @app.get("/api/patients/{patient_id}/complete")
    def get_complete(patient_id: str) -> dict[str, Any]:
        _record(patient_id)
        return {"patient_id": patient_id, "complete": store.is_complete(patient_id)}

    @app.post("/api/patients/{patient_id}/complete")
    def post_complete(patient_id: str, payload: Optional[dict[str, Any]] = None) -> dict[str, Any]:
        _record(patient_id)
        complete = True if payload is None else bool(payload.get("complete", True))
        store.set_complete(patient_id, complete, str((payload or {}).get("reviewer", "")))
        return {"patient_id": patient_id, "complete": store.is_complete(patient_id)}

    if ui_dir and Path(ui_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app
