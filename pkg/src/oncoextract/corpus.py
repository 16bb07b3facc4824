"""Patient document ingestion and deterministic sentence-bounded chunking.

Documents are immutable after ingestion. Chunking packs whole sentences
greedily up to ``max_chars``, with a one-sentence overlap between
consecutive windows; a single oversized sentence becomes its own chunk.

On-disk layout per patient::

    <root>/<patient_id>/notes/*.md          one file per HTML note or PDF page
    <root>/<patient_id>/meta/<doc>.json     optional sidecar
                                            {title, encounter_date, doc_type, page_group}
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Optional

from .dates import DateParseError, parse_full_date

log = logging.getLogger(__name__)

DEFAULT_MAX_CHARS = 2000

# Sentence boundary: terminator, whitespace, then an uppercase letter or digit.
_BOUNDARY_RE = re.compile(r"[.?!;](?=\s+[A-Z0-9])|\n")
_ABBREVIATIONS = (
    "dr", "mr", "mrs", "ms", "prof", "st", "mg", "ml", "kg", "cm", "mm",
    "e.g", "i.e", "vs", "etc", "no", "fig", "approx",
)


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class DocumentMetadata:
    encounter_date: Optional[date] = None
    title: Optional[str] = None
    doc_type: Optional[str] = None
    page_group: Optional[str] = None


@dataclass(frozen=True)
class Document:
    document_id: str
    patient_id: str
    modality: str  # html_note | pdf_page_markdown
    text: str
    metadata: DocumentMetadata = DocumentMetadata()


@dataclass(frozen=True)
class Chunk:
    document_id: str
    chunk_index: int
    char_start: int
    char_end: int
    text: str


@dataclass
class PatientCorpus:
    patient_id: str
    documents: list[Document] = field(default_factory=list)
    chunks: list[Chunk] = field(default_factory=list)

    def document(self, document_id: str) -> Document:
        for doc in self.documents:
            if doc.document_id == document_id:
                return doc
        raise CorpusError(f"unknown document {document_id!r}")

    def chunks_for(self, document_id: str) -> list[Chunk]:
        return [c for c in self.chunks if c.document_id == document_id]


def _is_abbreviation(text: str, dot_pos: int) -> bool:
    # Word immediately before a '.' boundary; guards "Dr. Smith" style splits.
    start = dot_pos
    while start > 0 and (text[start - 1].isalnum() or text[start - 1] == "."):
        start -= 1
    word = text[start:dot_pos].lower().rstrip(".")
    return word in _ABBREVIATIONS


def sentence_spans(text: str) -> list[tuple[int, int]]:
    """Contiguous (start, end) sentence spans covering all of *text*.

    Trailing whitespace after a terminator belongs to the sentence it ends,
    so concatenating the spans reproduces the text byte-for-byte.
    """
    if not text:
        return []
    boundaries = []
    for match in _BOUNDARY_RE.finditer(text):
        pos = match.start()
        if text[pos] == "." and _is_abbreviation(text, pos):
            continue
        # End of sentence = terminator plus the whitespace run that follows.
        end = pos + 1
        while end < len(text) and text[end] in " \t\r\n":
            end += 1
        boundaries.append(end)
    spans = []
    start = 0
    for end in boundaries:
        if end > start:
            spans.append((start, end))
            start = end
    if start < len(text):
        spans.append((start, len(text)))
    return spans


def chunk_document(doc: Document, max_chars: int = DEFAULT_MAX_CHARS) -> list[Chunk]:
    """Greedy sentence packing up to *max_chars* with a one-sentence overlap."""
    if max_chars <= 0:
        raise CorpusError(f"max_chars must be positive, got {max_chars}")
    spans = sentence_spans(doc.text)
    chunks: list[Chunk] = []
    i = 0
    while i < len(spans):
        j = i
        while j + 1 < len(spans) and spans[j + 1][1] - spans[i][0] <= max_chars:
            j += 1
        start, end = spans[i][0], spans[j][1]
        chunks.append(
            Chunk(
                document_id=doc.document_id,
                chunk_index=len(chunks),
                char_start=start,
                char_end=end,
                text=doc.text[start:end],
            )
        )
        if j == len(spans) - 1:
            break
        # Next window re-opens with the previous window's last sentence,
        # unless that window held a single sentence (no progress otherwise).
        i = j if j > i else j + 1
    return chunks


def _load_sidecar(path: Path) -> DocumentMetadata:
    try:
        raw = json.loads(path.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise CorpusError(f"malformed metadata sidecar {path}: {exc}") from exc
    encounter = raw.get("encounter_date")
    parsed: Optional[date] = None
    if encounter:
        try:
            parsed = parse_full_date(str(encounter))
        except DateParseError as exc:
            raise CorpusError(f"bad encounter_date in {path}: {exc}") from exc
    return DocumentMetadata(
        encounter_date=parsed,
        title=raw.get("title"),
        doc_type=raw.get("doc_type"),
        page_group=raw.get("page_group"),
    )


def ingest_corpus(
    root: Path | str,
    patient_id: str,
    max_chars: int = DEFAULT_MAX_CHARS,
) -> PatientCorpus:
    """Load one patient's note files plus sidecars and compute chunks."""
    patient_dir = Path(root) / patient_id
    notes_dir = patient_dir / "notes"
    if not notes_dir.is_dir():
        raise CorpusError(f"missing notes directory: {notes_dir}")
    meta_dir = patient_dir / "meta"
    documents: list[Document] = []
    seen_ids: set[str] = set()
    for path in sorted(notes_dir.iterdir()):
        if not path.is_file() or path.name.startswith("."):
            continue
        document_id = path.stem
        if document_id in seen_ids:
            raise CorpusError(f"duplicate document_id {document_id!r} for patient {patient_id!r}")
        seen_ids.add(document_id)
        sidecar = meta_dir / f"{document_id}.json"
        metadata = _load_sidecar(sidecar) if sidecar.is_file() else DocumentMetadata()
        modality = "pdf_page_markdown" if metadata.page_group else "html_note"
        documents.append(
            Document(
                document_id=document_id,
                patient_id=patient_id,
                modality=modality,
                text=path.read_text("utf-8"),
                metadata=metadata,
            )
        )
    chunks: list[Chunk] = []
    for doc in documents:
        chunks.extend(chunk_document(doc, max_chars))
    return PatientCorpus(patient_id=patient_id, documents=documents, chunks=chunks)


def list_patients(root: Path | str) -> list[str]:
    base = Path(root)
    if not base.is_dir():
        raise CorpusError(f"missing corpus root: {base}")
    return sorted(p.name for p in base.iterdir() if (p / "notes").is_dir())


def extract_document_metadata(doc: Document, synthesizer, template=None) -> Document:
    """Fill missing metadata fields through a synthesizer metadata prompt.

    Sidecar-populated fields win; synthesizer failures leave the metadata
    empty and are logged as warnings rather than raised.
    """
    from .synthesis import PromptTemplate, SynthesisError, render_prompt

    meta = doc.metadata
    if meta.title and meta.encounter_date and meta.doc_type:
        return doc
    if template is None:
        template = PromptTemplate(
            template_id="document_metadata",
            role_sections=(
                ("system", "Extract document metadata as JSON with keys "
                           "title, encounter_date, doc_type. Use null when unknown."),
                ("user", "{{SNIPPET}}"),
            ),
            target_attributes=(),
        )
    rendered = render_prompt(template, {"SNIPPET": doc.text[:2000]})
    try:
        raw = synthesizer.complete(rendered)
    except SynthesisError as exc:
        log.warning("metadata extraction failed for %s: %s", doc.document_id, exc)
        return doc
    try:
        start = raw.index("{")
        payload = json.loads(raw[start:raw.rindex("}") + 1])
    except (ValueError, json.JSONDecodeError):
        log.warning("unparseable metadata output for %s", doc.document_id)
        return doc
    encounter = meta.encounter_date
    if encounter is None and payload.get("encounter_date"):
        try:
            encounter = parse_full_date(str(payload["encounter_date"]))
        except DateParseError:
            log.warning("unparseable encounter_date for %s", doc.document_id)
    merged = DocumentMetadata(
        encounter_date=encounter,
        title=meta.title or payload.get("title"),
        doc_type=meta.doc_type or payload.get("doc_type"),
        page_group=meta.page_group,
    )
    return Document(
        document_id=doc.document_id,
        patient_id=doc.patient_id,
        modality=doc.modality,
        text=doc.text,
        metadata=merged,
    )
