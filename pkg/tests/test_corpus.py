from __future__ import annotations

import json
from datetime import date

import pytest

from oncoextract.corpus import (
    Chunk,
    CorpusError,
    Document,
    DocumentMetadata,
    chunk_document,
    extract_document_metadata,
    ingest_corpus,
    list_patients,
    sentence_spans,
)
from oncoextract.synthesis import MockSynthesizer


def make_doc(text: str, document_id: str = "d1") -> Document:
    return Document(document_id=document_id, patient_id="p1", modality="html_note", text=text)


class TestSentenceSpans:
    def test_empty(self):
        assert sentence_spans("") == []

    def test_spans_are_contiguous_and_cover(self):
        text = "First sentence here. Second one follows! Third; Fourth ends.\nNew line."
        spans = sentence_spans(text)
        assert spans[0][0] == 0
        assert spans[-1][1] == len(text)
        for (_, end), (start, _) in zip(spans, spans[1:]):
            assert end == start

    def test_abbreviations_do_not_split(self):
        # "Dr." and unit abbreviations like "cm." are guarded boundaries.
        text = "Seen by Dr. Smith today. Tumor measured 2 cm. Margins clear."
        spans = sentence_spans(text)
        texts = [text[a:b] for a, b in spans]
        assert texts[0] == "Seen by Dr. Smith today. "
        assert texts[1] == "Tumor measured 2 cm. Margins clear."
        assert len(spans) == 2

    def test_decimal_numbers_do_not_split(self):
        text = "Dose was 2.5 mg daily. Next review in May."
        spans = sentence_spans(text)
        assert len(spans) == 2


class TestChunkDocument:
    def test_empty_text(self):
        assert chunk_document(make_doc(""), 100) == []

    def test_single_sentence_single_chunk(self):
        text = "A" * 39 + "."  # one 40-char sentence
        chunks = chunk_document(make_doc(text), 100)
        assert len(chunks) == 1
        assert chunks[0].text == text
        assert (chunks[0].char_start, chunks[0].char_end) == (0, len(text))

    def test_three_sentences_overlap_windows(self):
        # Three 40-char sentences with M=100: greedy packing takes s1+s2
        # (80 <= 100, +s3 would be 119), then re-opens at s2 for s2+s3.
        s1 = "Alpha " + "a" * 32 + ". "
        s2 = "Bravo " + "b" * 32 + ". "
        s3 = "Carol " + "c" * 33 + "."
        assert len(s1) == len(s2) == 40
        text = s1 + s2 + s3
        chunks = chunk_document(make_doc(text), 100)
        assert [c.text for c in chunks] == [s1 + s2, s2 + s3]
        assert [(c.char_start, c.char_end) for c in chunks] == [(0, 80), (40, 80 + len(s3))]

    def test_oversized_sentence_is_own_chunk(self):
        big = "B" * 250 + ". "
        small = "Small sentence."
        text = big + small
        chunks = chunk_document(make_doc(text), 100)
        assert chunks[0].text == big
        assert chunks[1].text == small

    def test_determinism(self):
        text = " ".join(f"Sentence number {i} with some words." for i in range(50))
        first = chunk_document(make_doc(text), 120)
        second = chunk_document(make_doc(text), 120)
        assert first == second

    def test_coverage_reconstructs_document(self):
        text = " ".join(f"Sentence number {i} with filler words added." for i in range(40))
        chunks = chunk_document(make_doc(text), 150)
        rebuilt = chunks[0].text
        for prev, cur in zip(chunks, chunks[1:]):
            assert cur.char_start < prev.char_end  # shared boundary sentence
            rebuilt += text[prev.char_end:cur.char_end]
        assert rebuilt == text
        for chunk in chunks:
            assert chunk.text == text[chunk.char_start:chunk.char_end]

    def test_length_cap_except_oversized(self):
        text = " ".join(f"Sentence {i} padded with words here." for i in range(60))
        for chunk in chunk_document(make_doc(text), 90):
            single_sentence = len(sentence_spans(chunk.text)) == 1
            assert single_sentence or len(chunk.text) <= 90

    def test_chunk_indexes_sequential(self):
        text = " ".join(f"Sentence number {i} is here." for i in range(20))
        chunks = chunk_document(make_doc(text), 60)
        assert [c.chunk_index for c in chunks] == list(range(len(chunks)))


def write_patient(root, patient_id, notes, sidecars=None):
    notes_dir = root / patient_id / "notes"
    notes_dir.mkdir(parents=True)
    for name, text in notes.items():
        (notes_dir / name).write_text(text, "utf-8")
    if sidecars:
        meta_dir = root / patient_id / "meta"
        meta_dir.mkdir()
        for name, payload in sidecars.items():
            (meta_dir / name).write_text(json.dumps(payload), "utf-8")


class TestIngest:
    def test_two_notes(self, tmp_path):
        write_patient(tmp_path, "p1", {
            "note_a.md": "Patient seen today. Doing well.",
            "note_b.md": "Follow-up scheduled.",
        })
        corpus = ingest_corpus(tmp_path, "p1")
        assert [d.document_id for d in corpus.documents] == ["note_a", "note_b"]
        assert all(d.modality == "html_note" for d in corpus.documents)
        assert corpus.chunks

    def test_sidecar_metadata(self, tmp_path):
        write_patient(
            tmp_path, "p1",
            {"path_report.md": "Melanoma confirmed."},
            {"path_report.json": {"title": "Pathology", "encounter_date": "2019-02-11"}},
        )
        corpus = ingest_corpus(tmp_path, "p1")
        meta = corpus.documents[0].metadata
        assert meta.encounter_date == date(2019, 2, 11)
        assert meta.title == "Pathology"

    def test_page_group_marks_pdf_modality(self, tmp_path):
        write_patient(
            tmp_path, "p1",
            {"scan_p1.md": "Page one text."},
            {"scan_p1.json": {"page_group": "scan"}},
        )
        corpus = ingest_corpus(tmp_path, "p1")
        assert corpus.documents[0].modality == "pdf_page_markdown"

    def test_duplicate_document_id(self, tmp_path):
        write_patient(tmp_path, "p1", {"a.md": "One.", "a.txt": "Two."})
        with pytest.raises(CorpusError, match="duplicate document_id"):
            ingest_corpus(tmp_path, "p1")

    def test_missing_directory(self, tmp_path):
        with pytest.raises(CorpusError, match="missing notes directory"):
            ingest_corpus(tmp_path, "nobody")

    def test_malformed_sidecar(self, tmp_path):
        write_patient(tmp_path, "p1", {"a.md": "Text."})
        meta_dir = tmp_path / "p1" / "meta"
        meta_dir.mkdir()
        (meta_dir / "a.json").write_text("{not json", "utf-8")
        with pytest.raises(CorpusError, match="malformed"):
            ingest_corpus(tmp_path, "p1")

    def test_list_patients(self, tmp_path):
        write_patient(tmp_path, "p2", {"a.md": "Two."})
        write_patient(tmp_path, "p1", {"a.md": "One."})
        assert list_patients(tmp_path) == ["p1", "p2"]


class TestMetadataExtraction:
    def test_mock_fills_metadata(self):
        doc = make_doc("FINAL PATHOLOGY REPORT dated 02/11/2019 for specimen.")
        mock = MockSynthesizer({
            "responses": [{
                "template_id": "document_metadata",
                "contains": "FINAL PATHOLOGY REPORT",
                "output": '{"title": "Pathology Report", "encounter_date": "2019-02-11", "doc_type": "pathology"}',
            }]
        })
        updated = extract_document_metadata(doc, mock)
        assert updated.metadata.title == "Pathology Report"
        assert updated.metadata.encounter_date == date(2019, 2, 11)
        assert updated.metadata.doc_type == "pathology"

    def test_unparseable_output_leaves_metadata_empty(self):
        doc = make_doc("Some text.")
        mock = MockSynthesizer({
            "responses": [{"template_id": "document_metadata", "output": "not json at all"}]
        })
        updated = extract_document_metadata(doc, mock)
        assert updated.metadata == DocumentMetadata()

    def test_sidecar_wins_and_call_skipped(self):
        doc = Document(
            document_id="d1", patient_id="p1", modality="html_note", text="Text.",
            metadata=DocumentMetadata(
                encounter_date=date(2020, 1, 1), title="T", doc_type="note",
            ),
        )
        mock = MockSynthesizer({"responses": []})
        updated = extract_document_metadata(doc, mock)
        assert updated.metadata.title == "T"
        assert mock.calls == []
