from __future__ import annotations

import json
from pathlib import Path

import pytest
from fastapi.testclient import TestClient

from conftest import make_instance
from oncoextract.review import Decision, ReviewStore, StoreError, decision_from_json
from oncoextract.schema import (
    PatientRecord,
    Provenance,
    record_to_json,
)
from oncoextract.server import create_app


class TestDecision:
    def test_approve_cannot_carry_payload(self):
        with pytest.raises(StoreError):
            Decision(patient_id="p1", action="approve", entity_type="Biomarker",
                     instance_id="i1", edited_attributes={"x": 1})

    def test_edit_requires_attributes(self):
        with pytest.raises(StoreError):
            Decision(patient_id="p1", action="edit", entity_type="Biomarker",
                     instance_id="i1")

    def test_add_requires_instance(self):
        with pytest.raises(StoreError):
            Decision(patient_id="p1", action="add", entity_type="Biomarker")


class TestReviewStore:
    def test_replay_reproduces_tallies(self, registry, tmp_path):
        path = tmp_path / "store.jsonl"
        store = ReviewStore(path, registry)
        store.record_decision(Decision(
            patient_id="p1", action="approve", entity_type="Biomarker", instance_id="i1",
        ))
        store.record_decision(Decision(
            patient_id="p1", action="edit", entity_type="Biomarker", instance_id="i2",
            edited_attributes={"interpretation": "Negative"},
        ))
        added = make_instance(registry, "Medication", medication="Nivolumab")
        store.record_decision(Decision(
            patient_id="p1", action="add", entity_type="Medication", new_instance=added,
        ))
        replayed = ReviewStore(path, registry)
        assert [
            (t.patient_id, t.entity_type, t.n_correct, t.n_incorrect, t.n_missing)
            for t in replayed.tallies()
        ] == [
            ("p1", "Biomarker", 1, 1, 0),
            ("p1", "Medication", 0, 0, 1),
        ]

    def test_supersession_counts_once(self, registry, tmp_path):
        store = ReviewStore(tmp_path / "store.jsonl", registry)
        store.record_decision(Decision(
            patient_id="p1", action="approve", entity_type="Biomarker", instance_id="i1",
        ))
        store.record_decision(Decision(
            patient_id="p1", action="edit", entity_type="Biomarker", instance_id="i1",
            edited_attributes={"interpretation": "Negative"},
        ))
        tallies = store.tallies()
        assert len(tallies) == 1
        assert (tallies[0].n_correct, tallies[0].n_incorrect) == (0, 1)
        assert len(store.events) == 2  # both retained in the log

    def test_94_approves_6_edits(self, registry, tmp_path):
        store = ReviewStore(tmp_path / "store.jsonl", registry)
        for i in range(94):
            store.record_decision(Decision(
                patient_id="p1", action="approve", entity_type="Biomarker",
                instance_id=f"a{i}",
            ))
        for i in range(6):
            store.record_decision(Decision(
                patient_id="p1", action="edit", entity_type="Biomarker",
                instance_id=f"e{i}", edited_attributes={"method": "NGS"},
            ))
        assert store.rates().acceptance_score == pytest.approx(0.94)

    def test_add_with_invalid_value_rejected_log_unchanged(self, registry, tmp_path):
        path = tmp_path / "store.jsonl"
        store = ReviewStore(path, registry)
        raw = {
            "patient_id": "p1",
            "action": "add",
            "new_instance": {
                "entity_type": "Biomarker",
                "attributes": {"interpretation": "Maybe"},
            },
        }
        with pytest.raises(Exception):
            decision = decision_from_json(registry, raw)
            store.record_decision(decision)
        assert not path.exists() or path.read_text("utf-8") == ""

    def test_corrupt_store_refuses_to_load(self, registry, tmp_path):
        path = tmp_path / "store.jsonl"
        path.write_text('{"type": "decision", "patient_id": "p1"\n', "utf-8")
        with pytest.raises(StoreError, match="corrupt store"):
            ReviewStore(path, registry)
        assert "p1" in path.read_text("utf-8")  # log left intact


@pytest.fixture
def served(registry, tmp_path):
    corpus_root = tmp_path / "corpus"
    notes = corpus_root / "p1" / "notes"
    notes.mkdir(parents=True)
    text = "BRAF V600E mutation detected in the specimen. Margins are clear."
    (notes / "path1.md").write_text(text, "utf-8")

    instance = make_instance(
        registry, "Biomarker",
        provenance=(Provenance("path1", 0, 0, 46),),
        biomarker_tested="BRAF", interpretation="Positive",
    )
    other = make_instance(registry, "Diagnosis", condition="Melanoma")
    outputs = tmp_path / "outputs"
    outputs.mkdir()
    record = PatientRecord(patient_id="p1", instances=[instance, other])
    (outputs / "p1.json").write_text(record_to_json(record), "utf-8")

    gt_dir = tmp_path / "gt"
    gt_dir.mkdir()
    gt = PatientRecord(patient_id="p1", instances=[
        make_instance(registry, "Biomarker", biomarker_tested="BRAF",
                      interpretation="Negative"),
    ])
    (gt_dir / "p1.json").write_text(record_to_json(gt), "utf-8")

    app = create_app(
        output_dir=outputs,
        corpus_root=corpus_root,
        store_path=tmp_path / "store.jsonl",
        registry=registry,
        gt_dir=gt_dir,
    )
    client = TestClient(app)
    return client, instance, other, text


class TestServer:
    def test_patients_listing_ds_descending(self, served):
        client, *_ = served
        payload = client.get("/api/patients").json()
        assert payload[0]["patient_id"] == "p1"
        assert payload[0]["ds_score"] > 0
        assert payload[0]["entity_counts"] == {"Biomarker": 1, "Diagnosis": 1}

    def test_entities_carry_schema_and_state(self, served):
        client, instance, *_ = served
        payload = client.get("/api/patients/p1/entities").json()
        biomarker = payload["entities"]["Biomarker"]
        field_names = [f["name"] for f in biomarker["schema"]]
        assert "interpretation" in field_names
        interp = next(f for f in biomarker["schema"] if f["name"] == "interpretation")
        assert "Positive" in interp["values"]
        assert biomarker["instances"][0]["decision"] is None
        # blinded review: nothing marks the data source
        assert "source" not in biomarker["instances"][0]

    def test_document_highlights_match_offsets(self, served):
        client, instance, _, text = served
        payload = client.get("/api/patients/p1/documents/path1").json()
        assert payload["text"] == text
        highlight = payload["highlights"][0]
        assert highlight["instance_id"] == instance.instance_id
        substring = payload["text"][highlight["char_start"]:highlight["char_end"]]
        assert "BRAF V600E" in substring

    def test_unknown_patient_404(self, served):
        client, *_ = served
        assert client.get("/api/patients/none/entities").status_code == 404

    def test_approve_increments_dashboard(self, served):
        client, instance, *_ = served
        before = client.get("/api/dashboard").json()
        assert before["n_correct"] == 0
        response = client.post("/api/decisions", json={
            "patient_id": "p1",
            "action": "approve",
            "instance_id": instance.instance_id,
            "reviewer": "abstractor-1",
        })
        assert response.status_code == 200
        after = client.get("/api/dashboard").json()
        assert after["n_correct"] == 1
        assert after["approved_rate"] == 1.0

    def test_edit_with_invalid_value_400(self, served):
        client, instance, *_ = served
        response = client.post("/api/decisions", json={
            "patient_id": "p1",
            "action": "edit",
            "instance_id": instance.instance_id,
            "edited_attributes": {"interpretation": "Maybe"},
        })
        assert response.status_code == 400

    def test_add_appears_flagged_reviewer_added(self, served, registry):
        client, *_ = served
        new_instance = make_instance(
            registry, "Medication", medication="Nivolumab", start_date="2019-03-01",
        )
        response = client.post("/api/decisions", json={
            "patient_id": "p1",
            "action": "add",
            "new_instance": new_instance.to_json(),
        })
        assert response.status_code == 200
        payload = client.get("/api/patients/p1/entities").json()
        meds = payload["entities"]["Medication"]["instances"]
        assert meds[0]["reviewer_added"] is True
        dashboard = client.get("/api/dashboard").json()
        assert dashboard["n_missing"] == 1

    def test_unknown_instance_404(self, served):
        client, *_ = served
        response = client.post("/api/decisions", json={
            "patient_id": "p1", "action": "approve", "instance_id": "missing",
        })
        assert response.status_code == 404

    def test_complete_round_trip(self, served):
        client, *_ = served
        assert client.get("/api/patients/p1/complete").json()["complete"] is False
        client.post("/api/patients/p1/complete", json={"complete": True})
        assert client.get("/api/patients/p1/complete").json()["complete"] is True

    def test_dashboard_per_entity_breakdown(self, served, registry):
        client, instance, other, _ = served
        client.post("/api/decisions", json={
            "patient_id": "p1", "action": "approve", "instance_id": instance.instance_id,
        })
        client.post("/api/decisions", json={
            "patient_id": "p1", "action": "edit", "instance_id": other.instance_id,
            "edited_attributes": {"condition": "Nodular melanoma"},
        })
        payload = client.get("/api/dashboard").json()
        assert payload["per_entity"]["Biomarker"]["n_correct"] == 1
        assert payload["per_entity"]["Diagnosis"]["n_incorrect"] == 1
        assert payload["approved_rate"] + payload["edit_rate"] == pytest.approx(1.0)
