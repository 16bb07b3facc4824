"""Pipeline configuration and per-patient orchestration.

A declarative JSON config names, per entity: a retriever (vector, regex,
or regex+vector), one or more synthesizer stages (prompt files), and a
collator rule list; plus record-level post-processors and evaluation
defaults. Strategy selection is explicit via ``"strategy"`` or derived:
a stage list means multi-step, a ``topics`` block means topical,
``"per_document": true`` means sequential-documents, otherwise single-step.

Execution per patient follows the dependency order of the schema registry;
with a deterministic synthesizer client two runs produce byte-identical
records.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from datetime import date
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

from .collation import build_chain, collate, parse_rule, resolve_rule, topo_order
from .corpus import Chunk, Document, PatientCorpus
from .dates import DateParseError, normalize_date, parse_full_date  # noqa: F401  (normalize_date is public API)
from .retrieval import (
    ChunkIndex,
    EmbeddingProvider,
    HashingEmbedder,
    Query,
    RemoteEmbeddingProvider,
    RetrievedChunk,
    build_index,
    hybrid_retrieve,
    regex_retrieve,
    vector_retrieve,
)
from .schema import (
    EntityInstance,
    Kind,
    PatientRecord,
    Provenance,
    SchemaRegistry,
    SchemaViolation,
    TypedValue,
    canonical_text,
    validate_instance,
)
from .synthesis import (
    GenerationParams,
    MockSynthesizer,
    PromptTemplate,
    RemoteCompletionClient,
    SynthesisError,
    enumerate_then_detail,
    parse_prompt_file,
    synthesize_with_reflection,
)

log = logging.getLogger(__name__)

DEFAULT_PROMPT_BUDGET = 12_000
DEFAULT_MAX_CHARS = 2000
DEFAULT_EMBEDDING_DIM = 256

STRATEGIES = ("single_step", "multi_step", "topical", "sequential_documents")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Config model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RetrieverConfig:
    type: str
    embedding_model: str = ""
    endpoint: str = ""
    dimension: int = DEFAULT_EMBEDDING_DIM
    k: int = 8
    queries: tuple[str, ...] = ()
    patterns: tuple[str, ...] = ()

    @property
    def uses_vector(self) -> bool:
        return self.type in ("vector", "regex+vector")

    @property
    def uses_regex(self) -> bool:
        return self.type in ("regex", "regex+vector")


@dataclass(frozen=True)
class SynthesizerStage:
    prompt_file: str
    stage: str = ""
    llm: str = ""
    endpoint: str = ""
    max_tokens: int = 1024
    temperature: float = 0.0
    top_p: float = 0.1
    loop_over: str = ""
    target_attributes: tuple[str, ...] = ()
    required_attributes: Optional[tuple[str, ...]] = None

    @property
    def params(self) -> GenerationParams:
        return GenerationParams(
            temperature=self.temperature, top_p=self.top_p, max_tokens=self.max_tokens
        )


@dataclass(frozen=True)
class TopicConfig:
    name: str
    prompt_file: str
    doc_types: tuple[str, ...] = ()
    keywords: tuple[str, ...] = ()


@dataclass(frozen=True)
class EntityPipelineSpec:
    name: str           # registry name
    config_name: str    # as written in the config document
    strategy: str
    retriever: Optional[RetrieverConfig]
    stages: tuple[SynthesizerStage, ...]
    collator_rules: tuple[str, ...]
    topics: tuple[TopicConfig, ...] = ()
    on_missing_dependency: str = "warn"


@dataclass(frozen=True)
class EvaluationDefaults:
    alignment_method: str = "root_or_weighted"
    metrics: tuple[str, ...] = ("precision", "recall", "f1")
    date_tolerance_days: int = 7


@dataclass(frozen=True)
class PipelineConfig:
    pipeline_name: str
    entities: tuple[EntityPipelineSpec, ...]
    post_processors: tuple[str, ...]
    evaluation: EvaluationDefaults
    run_date: Optional[date] = None
    max_chars: int = DEFAULT_MAX_CHARS
    prompt_budget: int = DEFAULT_PROMPT_BUDGET
    extract_metadata: bool = False
    unit_conversions: tuple[tuple[str, str, float], ...] = ()
    base_dir: Path = field(default_factory=Path.cwd, compare=False)

    def entity(self, name: str) -> EntityPipelineSpec:
        for spec in self.entities:
            if spec.name == name:
                return spec
        raise ConfigError(f"entity {name!r} not configured")


def _require_keys(raw: Mapping[str, Any], allowed: set[str], where: str) -> None:
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)} in {where}")


def _parse_retriever(raw: Mapping[str, Any], where: str) -> RetrieverConfig:
    _require_keys(raw, {
        "type", "embedding_model", "endpoint", "dimension", "k",
        "query_template", "queries", "patterns",
    }, where)
    rtype = raw.get("type")
    if rtype not in ("vector", "regex", "regex+vector"):
        raise ConfigError(f"unknown retriever type {rtype!r} in {where}")
    queries = list(raw.get("queries", []))
    if "query_template" in raw:
        queries.insert(0, str(raw["query_template"]))
    config = RetrieverConfig(
        type=rtype,
        embedding_model=str(raw.get("embedding_model", "")),
        endpoint=str(raw.get("endpoint", "")),
        dimension=int(raw.get("dimension", DEFAULT_EMBEDDING_DIM)),
        k=int(raw.get("k", 8)),
        queries=tuple(str(q) for q in queries),
        patterns=tuple(str(p) for p in raw.get("patterns", [])),
    )
    if config.type == "vector" and not config.queries:
        raise ConfigError(f"vector retriever in {where} needs a query")
    if config.type == "regex" and not config.patterns:
        raise ConfigError(f"regex retriever in {where} needs patterns")
    return config


def _parse_stage(raw: Mapping[str, Any], where: str, base_dir: Path) -> SynthesizerStage:
    _require_keys(raw, {
        "stage", "llm", "endpoint", "prompt_file", "max_tokens", "temperature",
        "top_p", "loop_over", "target_attributes", "required_attributes",
    }, where)
    prompt_file = raw.get("prompt_file")
    if not prompt_file:
        raise ConfigError(f"missing prompt_file in {where}")
    if not (base_dir / str(prompt_file)).is_file():
        raise ConfigError(f"prompt file not found: {base_dir / str(prompt_file)}")
    required = raw.get("required_attributes")
    return SynthesizerStage(
        prompt_file=str(prompt_file),
        stage=str(raw.get("stage", "")),
        llm=str(raw.get("llm", "")),
        endpoint=str(raw.get("endpoint", "")),
        max_tokens=int(raw.get("max_tokens", 1024)),
        temperature=float(raw.get("temperature", 0.0)),
        top_p=float(raw.get("top_p", 0.1)),
        loop_over=str(raw.get("loop_over", "")),
        target_attributes=tuple(str(a) for a in raw.get("target_attributes", [])),
        required_attributes=None if required is None else tuple(str(a) for a in required),
    )


def _parse_topic(raw: Mapping[str, Any], where: str, base_dir: Path) -> TopicConfig:
    _require_keys(raw, {"name", "prompt_file", "doc_types", "keywords"}, where)
    if not raw.get("name") or not raw.get("prompt_file"):
        raise ConfigError(f"topic in {where} needs name and prompt_file")
    if not (base_dir / str(raw["prompt_file"])).is_file():
        raise ConfigError(f"prompt file not found: {base_dir / str(raw['prompt_file'])}")
    return TopicConfig(
        name=str(raw["name"]),
        prompt_file=str(raw["prompt_file"]),
        doc_types=tuple(str(d) for d in raw.get("doc_types", [])),
        keywords=tuple(str(k) for k in raw.get("keywords", [])),
    )


def _derive_strategy(raw: Mapping[str, Any], stages: int, where: str) -> str:
    explicit = raw.get("strategy")
    if explicit is not None:
        if explicit not in STRATEGIES:
            raise ConfigError(f"unknown strategy {explicit!r} in {where}")
        return str(explicit)
    if raw.get("topics"):
        return "topical"
    if raw.get("per_document"):
        return "sequential_documents"
    if stages >= 2:
        return "multi_step"
    return "single_step"


def _parse_entity(
    raw: Mapping[str, Any], registry: SchemaRegistry, base_dir: Path
) -> EntityPipelineSpec:
    name = raw.get("name")
    where = f"entity {name!r}"
    _require_keys(raw, {
        "name", "retriever", "synthesizer", "collator", "strategy",
        "topics", "per_document", "on_missing_dependency",
    }, where)
    resolved = registry.resolve_name(str(name)) if name else None
    if resolved is None:
        raise ConfigError(f"config names unregistered entity {name!r}")
    spec = registry.get(resolved)

    raw_synth = raw.get("synthesizer")
    if raw_synth is None:
        stages: tuple[SynthesizerStage, ...] = ()
    elif isinstance(raw_synth, Mapping):
        stages = (_parse_stage(raw_synth, where, base_dir),)
    else:
        stages = tuple(_parse_stage(s, where, base_dir) for s in raw_synth)

    retriever = None
    if raw.get("retriever") is not None:
        retriever = _parse_retriever(raw["retriever"], where)

    rules: tuple[str, ...] = ()
    on_missing = str(raw.get("on_missing_dependency", "warn"))
    if raw.get("collator") is not None:
        _require_keys(raw["collator"], {"rules", "on_missing_dependency"}, f"{where} collator")
        rules = tuple(str(r) for r in raw["collator"].get("rules", []))
        on_missing = str(raw["collator"].get("on_missing_dependency", on_missing))
    if on_missing not in ("warn", "error"):
        raise ConfigError(f"bad on_missing_dependency {on_missing!r} in {where}")
    for rule_text in rules:
        resolve_rule(parse_rule(rule_text), spec)  # unknown shapes/attributes fail here

    topics = tuple(_parse_topic(t, where, base_dir) for t in raw.get("topics", []))
    strategy = _derive_strategy(raw, len(stages), where)
    if strategy == "multi_step" and len(stages) < 2:
        raise ConfigError(f"multi_step in {where} requires at least 2 synthesizer stages")
    if strategy == "topical" and not topics:
        raise ConfigError(f"topical strategy in {where} requires a topics list")
    if strategy != "topical" and not stages:
        raise ConfigError(f"{where} has no synthesizer stages")

    for stage in stages:
        for attr in (stage.target_attributes or ()) + (stage.required_attributes or ()):
            if not spec.has_attribute(attr):
                raise ConfigError(f"unknown attribute {attr!r} in {where} synthesizer")

    return EntityPipelineSpec(
        name=spec.name,
        config_name=str(name),
        strategy=strategy,
        retriever=retriever,
        stages=stages,
        collator_rules=rules,
        topics=topics,
        on_missing_dependency=on_missing,
    )


KNOWN_POST_PROCESSORS = ("validate_against_schema", "iso8601_date_normalizer", "convert_units")

_TOP_LEVEL_KEYS = {
    "pipeline_name", "entities", "post_processors", "evaluation",
    "run_date", "chunking", "prompt_budget", "extract_metadata", "unit_conversions",
}


def load_config(
    source: str | Mapping[str, Any],
    registry: SchemaRegistry,
    base_dir: Path | str = ".",
) -> PipelineConfig:
    """Parse and validate a pipeline configuration document.

    Unknown keys are rejected at every level; entity names must resolve in
    the registry; prompt files must exist under *base_dir*; collator rules
    must parse and bind to real attributes.
    """
    if isinstance(source, str):
        try:
            doc = json.loads(source)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    else:
        doc = source
    if not isinstance(doc, Mapping):
        raise ConfigError("config must be a JSON object")
    _require_keys(doc, _TOP_LEVEL_KEYS, "config")
    base = Path(base_dir)

    entities = tuple(_parse_entity(e, registry, base) for e in doc.get("entities", []))
    if not entities:
        raise ConfigError("config defines no entities")
    seen: set[str] = set()
    for spec in entities:
        if spec.name in seen:
            raise ConfigError(f"entity {spec.name!r} configured twice")
        seen.add(spec.name)

    post_processors = tuple(str(p) for p in doc.get("post_processors", []))
    for processor in post_processors:
        if processor not in KNOWN_POST_PROCESSORS:
            raise ConfigError(f"unknown post-processor {processor!r}")

    raw_eval = doc.get("evaluation", {})
    _require_keys(raw_eval, {"alignment_method", "metrics", "date_tolerance_days"}, "evaluation")
    method = str(raw_eval.get("alignment_method", "root_or_weighted"))
    if method != "root_or_weighted":
        raise ConfigError(f"unknown alignment_method {method!r}")
    metrics = tuple(str(m) for m in raw_eval.get("metrics", ["precision", "recall", "f1"]))
    for metric in metrics:
        if metric not in ("precision", "recall", "f1"):
            raise ConfigError(f"unknown metric {metric!r}")
    evaluation = EvaluationDefaults(
        alignment_method=method,
        metrics=metrics,
        date_tolerance_days=int(raw_eval.get("date_tolerance_days", 7)),
    )

    raw_chunking = doc.get("chunking", {})
    _require_keys(raw_chunking, {"max_chars"}, "chunking")

    run_date: Optional[date] = None
    if doc.get("run_date"):
        try:
            run_date = parse_full_date(str(doc["run_date"]))
        except DateParseError as exc:
            raise ConfigError(f"bad run_date: {exc}") from exc

    conversions = []
    for unit, spec in doc.get("unit_conversions", {}).items():
        _require_keys(spec, {"to", "factor"}, f"unit_conversions[{unit!r}]")
        conversions.append((str(unit), str(spec["to"]), float(spec["factor"])))

    return PipelineConfig(
        pipeline_name=str(doc.get("pipeline_name", "")),
        entities=entities,
        post_processors=post_processors,
        evaluation=evaluation,
        run_date=run_date,
        max_chars=int(raw_chunking.get("max_chars", DEFAULT_MAX_CHARS)),
        prompt_budget=int(doc.get("prompt_budget", DEFAULT_PROMPT_BUDGET)),
        extract_metadata=bool(doc.get("extract_metadata", False)),
        unit_conversions=tuple(conversions),
        base_dir=base,
    )


def serialize_config(config: PipelineConfig) -> str:
    """Emit a document that loads back to an equal config (same base_dir)."""
    entities = []
    for spec in config.entities:
        raw: dict[str, Any] = {"name": spec.config_name, "strategy": spec.strategy}
        if spec.retriever:
            r = spec.retriever
            raw_retriever: dict[str, Any] = {"type": r.type, "k": r.k}
            if r.embedding_model:
                raw_retriever["embedding_model"] = r.embedding_model
            if r.endpoint:
                raw_retriever["endpoint"] = r.endpoint
            if r.dimension != DEFAULT_EMBEDDING_DIM:
                raw_retriever["dimension"] = r.dimension
            if r.queries:
                raw_retriever["queries"] = list(r.queries)
            if r.patterns:
                raw_retriever["patterns"] = list(r.patterns)
            raw["retriever"] = raw_retriever
        stages = []
        for stage in spec.stages:
            raw_stage: dict[str, Any] = {"prompt_file": stage.prompt_file}
            if stage.stage:
                raw_stage["stage"] = stage.stage
            if stage.llm:
                raw_stage["llm"] = stage.llm
            if stage.endpoint:
                raw_stage["endpoint"] = stage.endpoint
            if stage.max_tokens != 1024:
                raw_stage["max_tokens"] = stage.max_tokens
            if stage.temperature != 0.0:
                raw_stage["temperature"] = stage.temperature
            if stage.top_p != 0.1:
                raw_stage["top_p"] = stage.top_p
            if stage.loop_over:
                raw_stage["loop_over"] = stage.loop_over
            if stage.target_attributes:
                raw_stage["target_attributes"] = list(stage.target_attributes)
            if stage.required_attributes is not None:
                raw_stage["required_attributes"] = list(stage.required_attributes)
            stages.append(raw_stage)
        if len(stages) == 1:
            raw["synthesizer"] = stages[0]
        elif stages:
            raw["synthesizer"] = stages
        if spec.collator_rules or spec.on_missing_dependency != "warn":
            raw["collator"] = {"rules": list(spec.collator_rules)}
            if spec.on_missing_dependency != "warn":
                raw["collator"]["on_missing_dependency"] = spec.on_missing_dependency
        if spec.topics:
            raw["topics"] = [
                {
                    "name": t.name,
                    "prompt_file": t.prompt_file,
                    **({"doc_types": list(t.doc_types)} if t.doc_types else {}),
                    **({"keywords": list(t.keywords)} if t.keywords else {}),
                }
                for t in spec.topics
            ]
        entities.append(raw)
    doc: dict[str, Any] = {
        "pipeline_name": config.pipeline_name,
        "entities": entities,
        "post_processors": list(config.post_processors),
        "evaluation": {
            "alignment_method": config.evaluation.alignment_method,
            "metrics": list(config.evaluation.metrics),
            "date_tolerance_days": config.evaluation.date_tolerance_days,
        },
    }
    if config.run_date:
        doc["run_date"] = config.run_date.isoformat()
    if config.max_chars != DEFAULT_MAX_CHARS:
        doc["chunking"] = {"max_chars": config.max_chars}
    if config.prompt_budget != DEFAULT_PROMPT_BUDGET:
        doc["prompt_budget"] = config.prompt_budget
    if config.extract_metadata:
        doc["extract_metadata"] = True
    if config.unit_conversions:
        doc["unit_conversions"] = {
            unit: {"to": to, "factor": factor}
            for unit, to, factor in config.unit_conversions
        }
    return json.dumps(doc, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------

@dataclass
class Clients:
    synthesizer: Any
    embedder: Optional[EmbeddingProvider] = None  # overrides per-entity providers


@dataclass
class RunReport:
    execution_order: list[str] = field(default_factory=list)
    synthesis_calls: list[dict[str, Any]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    entity_errors: dict[str, str] = field(default_factory=dict)
    audit: list[dict[str, Any]] = field(default_factory=list)

    def to_json(self) -> dict[str, Any]:
        return {
            "execution_order": self.execution_order,
            "synthesis_calls": self.synthesis_calls,
            "warnings": self.warnings,
            "entity_errors": dict(sorted(self.entity_errors.items())),
            "audit": self.audit,
        }


class PipelineRunner:
    """Executes a config against one patient corpus at a time."""

    def __init__(self, config: PipelineConfig, registry: SchemaRegistry, clients: Clients):
        self.config = config
        self.registry = registry
        self.clients = clients
        self._templates: dict[str, PromptTemplate] = {}
        self._indexes: dict[tuple, ChunkIndex] = {}
        self._providers: dict[tuple, EmbeddingProvider] = {}

    # -- shared plumbing ----------------------------------------------------

    def _template(self, prompt_file: str, targets: Sequence[str] = ()) -> PromptTemplate:
        key = f"{prompt_file}::{','.join(targets)}"
        if key not in self._templates:
            path = self.config.base_dir / prompt_file
            self._templates[key] = parse_prompt_file(
                path.read_text("utf-8"), template_id=Path(prompt_file).stem,
                target_attributes=targets,
            )
        return self._templates[key]

    def _provider(self, retriever: RetrieverConfig) -> EmbeddingProvider:
        if self.clients.embedder is not None:
            return self.clients.embedder
        key = (retriever.endpoint, retriever.embedding_model, retriever.dimension)
        if key not in self._providers:
            if retriever.endpoint:
                self._providers[key] = RemoteEmbeddingProvider(
                    retriever.endpoint, retriever.dimension
                )
            else:
                self._providers[key] = HashingEmbedder(
                    dimension=retriever.dimension,
                    seed=retriever.embedding_model or "default",
                )
        return self._providers[key]

    def _index(self, corpus: PatientCorpus, provider: EmbeddingProvider) -> ChunkIndex:
        key = (corpus.patient_id, id(provider))
        if key not in self._indexes:
            self._indexes[key] = build_index(corpus, provider)
        return self._indexes[key]

    def _retrieve(
        self, spec: EntityPipelineSpec, corpus: PatientCorpus
    ) -> list[RetrievedChunk]:
        retriever = spec.retriever
        if retriever is None:
            return [
                RetrievedChunk(chunk=c, score=1.0, source="regex")
                for c in sorted(corpus.chunks, key=lambda c: (c.document_id, c.chunk_index))
            ]
        provider = self._provider(retriever) if retriever.uses_vector else None
        index = self._index(corpus, provider) if provider is not None else ChunkIndex([])
        queries = [Query(text=q, top_k=retriever.k) for q in retriever.queries]
        if retriever.type == "vector":
            merged: dict[tuple[str, int], RetrievedChunk] = {}
            for query in queries:
                for hit in vector_retrieve(index, provider, query):
                    key = (hit.chunk.document_id, hit.chunk.chunk_index)
                    held = merged.get(key)
                    if held is None or hit.score > held.score:
                        merged[key] = hit
            return sorted(
                merged.values(),
                key=lambda r: (-r.score, r.chunk.document_id, r.chunk.chunk_index),
            )
        if retriever.type == "regex":
            return regex_retrieve(corpus, retriever.patterns)
        return hybrid_retrieve(index, provider, corpus, queries, retriever.patterns)

    def _doc_order_key(self, corpus: PatientCorpus, document_id: str) -> tuple:
        meta = corpus.document(document_id).metadata
        if meta.encounter_date is not None:
            return (0, meta.encounter_date.isoformat(), document_id)
        return (1, "", document_id)

    def _group_chunks(
        self, corpus: PatientCorpus, retrieved: Sequence[RetrievedChunk]
    ) -> list[tuple[str, tuple[Provenance, ...]]]:
        """Concatenate chunks (document-id headers) into prompt-budget groups."""
        ordered = sorted(
            {((r.chunk.document_id, r.chunk.chunk_index)): r.chunk for r in retrieved}.values(),
            key=lambda c: self._doc_order_key(corpus, c.document_id) + (c.chunk_index,),
        )
        groups: list[tuple[str, tuple[Provenance, ...]]] = []
        parts: list[str] = []
        provenance: list[Provenance] = []
        size = 0
        budget = self.config.prompt_budget

        def flush() -> None:
            nonlocal parts, provenance, size
            if parts:
                groups.append(("\n\n".join(parts), tuple(provenance)))
                parts, provenance, size = [], [], 0

        for chunk in ordered:
            piece = f"[{chunk.document_id}]\n{chunk.text}"
            if parts and size + len(piece) > budget:
                flush()
            parts.append(piece)
            provenance.append(Provenance(
                document_id=chunk.document_id,
                chunk_index=chunk.chunk_index,
                char_start=chunk.char_start,
                char_end=chunk.char_end,
            ))
            size += len(piece)
        flush()
        return groups

    def _synthesize_groups(
        self,
        spec: EntityPipelineSpec,
        stage: SynthesizerStage,
        groups: Sequence[tuple[str, tuple[Provenance, ...]]],
        report: RunReport,
        topic: str = "",
        template: Optional[PromptTemplate] = None,
    ) -> list:
        extractions = []
        template = template or self._template(stage.prompt_file, stage.target_attributes)
        for group_text, provenance in groups:
            report.synthesis_calls.append({
                "entity": spec.name,
                "strategy": spec.strategy,
                "template_id": template.template_id,
                "topic": topic,
                "documents": sorted({p.document_id for p in provenance}),
            })
            try:
                extractions.append(synthesize_with_reflection(
                    self.clients.synthesizer, template, {"SNIPPET": group_text},
                    self.registry, spec.name, params=stage.params,
                    required_attributes=stage.required_attributes,
                    provenance=provenance,
                ))
            except SynthesisError as exc:
                report.warnings.append(f"{spec.name}: synthesis failed: {exc}")
        return extractions

    # -- strategies -----------------------------------------------------------

    def _run_single_step(self, spec, corpus, report) -> list:
        groups = self._group_chunks(corpus, self._retrieve(spec, corpus))
        return self._synthesize_groups(spec, spec.stages[0], groups, report)

    def _run_multi_step(self, spec, corpus, report) -> list:
        groups = self._group_chunks(corpus, self._retrieve(spec, corpus))
        if not groups:
            return []
        stage1, stage2 = spec.stages[0], spec.stages[1]
        template1 = self._template(stage1.prompt_file, stage1.target_attributes)
        template2 = self._template(stage2.prompt_file, stage2.target_attributes)
        for group_text, provenance in groups:
            report.synthesis_calls.append({
                "entity": spec.name,
                "strategy": spec.strategy,
                "template_id": template1.template_id,
                "topic": "",
                "documents": sorted({p.document_id for p in provenance}),
            })
        return enumerate_then_detail(
            self.clients.synthesizer, template1, template2, groups,
            self.registry, spec.name, params=stage2.params,
            detail_required=stage2.required_attributes,
        )

    def _assign_topics(
        self, spec: EntityPipelineSpec, corpus: PatientCorpus
    ) -> dict[str, list[Document]]:
        assigned: dict[str, list[Document]] = {t.name: [] for t in spec.topics}
        assigned.setdefault("general", [])
        for doc in corpus.documents:
            matched = False
            doc_type = canonical_text(doc.metadata.doc_type or "")
            haystack = canonical_text((doc.metadata.title or "") + " " + doc.text)
            for topic in spec.topics:
                if doc_type and any(canonical_text(t) == doc_type for t in topic.doc_types):
                    assigned[topic.name].append(doc)
                    matched = True
                    continue
                if any(canonical_text(k) in haystack for k in topic.keywords):
                    assigned[topic.name].append(doc)
                    matched = True
            if not matched:
                assigned["general"].append(doc)
        return assigned

    def _run_topical(self, spec, corpus, report) -> list:
        retrieved = self._retrieve(spec, corpus) if spec.retriever else None
        allowed = (
            {(r.chunk.document_id, r.chunk.chunk_index) for r in retrieved}
            if retrieved is not None else None
        )
        assignment = self._assign_topics(spec, corpus)
        topic_prompts = {t.name: t.prompt_file for t in spec.topics}
        extractions = []
        stage = spec.stages[0] if spec.stages else None
        for topic_name in sorted(assignment):
            prompt_file = topic_prompts.get(topic_name)
            if prompt_file is None:
                continue  # reserved "general" bucket without a configured prompt
            docs = assignment[topic_name]
            doc_ids = {d.document_id for d in docs}
            chunks = [
                RetrievedChunk(chunk=c, score=1.0, source="regex")
                for c in corpus.chunks
                if c.document_id in doc_ids
                and (allowed is None or (c.document_id, c.chunk_index) in allowed)
            ]
            groups = self._group_chunks(corpus, chunks)
            stage_cfg = stage or SynthesizerStage(prompt_file=prompt_file)
            template = self._template(prompt_file, stage_cfg.target_attributes)
            extractions.extend(self._synthesize_groups(
                spec, stage_cfg, groups, report, topic=topic_name, template=template,
            ))
        return extractions

    def _run_sequential(self, spec, corpus, report) -> list:
        retrieved = self._retrieve(spec, corpus)
        by_doc: dict[str, list[RetrievedChunk]] = {}
        for hit in retrieved:
            by_doc.setdefault(hit.chunk.document_id, []).append(hit)
        extractions = []
        ordered_docs = sorted(by_doc, key=lambda d: self._doc_order_key(corpus, d))
        for document_id in ordered_docs:
            groups = self._group_chunks(corpus, by_doc[document_id])
            extractions.extend(self._synthesize_groups(
                spec, spec.stages[0], groups, report,
            ))
        return extractions

    # -- entity and patient --------------------------------------------------

    def run_entity(
        self,
        entity_name: str,
        corpus: PatientCorpus,
        dependency_outputs: Mapping[str, Sequence[EntityInstance]],
        report: RunReport,
    ) -> list[EntityInstance]:
        spec = self.config.entity(entity_name)
        runner = {
            "single_step": self._run_single_step,
            "multi_step": self._run_multi_step,
            "topical": self._run_topical,
            "sequential_documents": self._run_sequential,
        }[spec.strategy]
        extractions = runner(spec, corpus, report)
        # "{}" responses mean nothing found; an all-null extraction carries
        # no information and must not become an instance.
        extractions = [
            e for e in extractions if any(v is not None for v in e.attributes.values())
        ]
        document_dates = {
            doc.document_id: doc.metadata.encounter_date for doc in corpus.documents
        }
        chain = build_chain(
            self.registry, spec.name, spec.collator_rules,
            dependencies=dependency_outputs,
            document_dates=document_dates,
            run_date=self.config.run_date,
            on_missing_dependency=spec.on_missing_dependency,
        )
        return collate(chain, extractions, self.registry, audit=report.audit)

    def run_patient(self, corpus: PatientCorpus) -> tuple[PatientRecord, RunReport]:
        report = RunReport()
        configured = {spec.name for spec in self.config.entities}
        edges = {
            name: [d for d in self.registry.get(name).depends_on
                   if (self.registry.resolve_name(d) or d) in configured]
            for name in configured
        }
        order = topo_order(edges)
        outputs: dict[str, list[EntityInstance]] = {}
        for entity_name in order:
            report.execution_order.append(entity_name)
            try:
                outputs[entity_name] = self.run_entity(entity_name, corpus, outputs, report)
            except (SynthesisError, SchemaViolation, ValueError) as exc:
                report.entity_errors[entity_name] = str(exc)
                log.error("entity %s aborted for %s: %s", entity_name, corpus.patient_id, exc)
        instances: list[EntityInstance] = []
        seen_ids: set[str] = set()
        for entity_name in sorted(outputs):
            for inst in outputs[entity_name]:
                while inst.instance_id in seen_ids:
                    inst = EntityInstance(
                        entity_type=inst.entity_type,
                        attributes=inst.attributes,
                        provenance=inst.provenance,
                        instance_id=inst.instance_id + "+",
                    )
                seen_ids.add(inst.instance_id)
                instances.append(inst)
        record = PatientRecord(patient_id=corpus.patient_id, instances=instances)
        record = apply_post_processors(record, self.config, self.registry)
        return record, report


def run_patient(
    config: PipelineConfig,
    corpus: PatientCorpus,
    clients: Clients,
    registry: Optional[SchemaRegistry] = None,
) -> PatientRecord:
    from .schema import default_registry

    runner = PipelineRunner(config, registry or default_registry(), clients)
    record, _ = runner.run_patient(corpus)
    return record


# ---------------------------------------------------------------------------
# Post-processors
# ---------------------------------------------------------------------------

BUILTIN_UNIT_CONVERSIONS: tuple[tuple[str, str, float], ...] = (
    ("g", "mg", 1000.0),
    ("cgy", "Gy", 0.01),
    ("cm", "mm", 10.0),
)

_QUANTITY_SUFFIXES = ("_value", "_quantity", "")


def _unit_pairs(spec) -> list[tuple[str, str]]:
    pairs = []
    for attr in spec.attribute_names:
        for unit_suffix in ("_unit", "_units"):
            if not attr.endswith(unit_suffix):
                continue
            stem = attr[: -len(unit_suffix)]
            for quantity_suffix in _QUANTITY_SUFFIXES:
                candidate = stem + quantity_suffix
                if candidate != attr and spec.has_attribute(candidate):
                    pairs.append((candidate, attr))
                    break
    return pairs


def _convert_units(record: PatientRecord, config: PipelineConfig, registry: SchemaRegistry) -> PatientRecord:
    table = {
        canonical_text(unit): (to, factor)
        for unit, to, factor in BUILTIN_UNIT_CONVERSIONS + config.unit_conversions
    }
    instances = []
    for inst in record.instances:
        spec = registry.get(inst.entity_type)
        attributes = dict(inst.attributes)
        changed = False
        for quantity_attr, unit_attr in _unit_pairs(spec):
            unit_value = attributes.get(unit_attr)
            quantity_value = attributes.get(quantity_attr)
            if unit_value is None or quantity_value is None:
                continue
            conversion = table.get(canonical_text(str(unit_value.to_json())))
            if conversion is None:
                continue
            target_unit, factor = conversion
            if quantity_value.kind not in (Kind.DECIMAL, Kind.INTEGER):
                continue
            scaled = float(quantity_value.value) * factor  # type: ignore[arg-type]
            if quantity_value.kind is Kind.INTEGER and scaled.is_integer():
                attributes[quantity_attr] = TypedValue(Kind.INTEGER, int(scaled))
            else:
                attributes[quantity_attr] = TypedValue(Kind.DECIMAL, scaled)
            attributes[unit_attr] = TypedValue(unit_value.kind, target_unit)
            changed = True
        if changed:
            instances.append(EntityInstance(
                entity_type=inst.entity_type, attributes=attributes,
                provenance=inst.provenance,
            ))
        else:
            instances.append(inst)
    return PatientRecord(patient_id=record.patient_id, instances=instances)


def _validate_record(record: PatientRecord, config: PipelineConfig, registry: SchemaRegistry) -> PatientRecord:
    return PatientRecord(
        patient_id=record.patient_id,
        instances=[validate_instance(registry, inst) for inst in record.instances],
    )


def _normalize_dates(record: PatientRecord, config: PipelineConfig, registry: SchemaRegistry) -> PatientRecord:
    # Date values are stored typed, so serialization is already ISO-8601;
    # this pass exists so configs can pin the guarantee explicitly.
    for inst in record.instances:
        for value in inst.non_null().values():
            if value.kind is Kind.DATE:
                date.fromisoformat(value.to_json())  # type: ignore[arg-type]
    return record


_POST_PROCESSORS = {
    "validate_against_schema": _validate_record,
    "iso8601_date_normalizer": _normalize_dates,
    "convert_units": _convert_units,
}


def apply_post_processors(
    record: PatientRecord, config: PipelineConfig, registry: SchemaRegistry
) -> PatientRecord:
    for name in config.post_processors:
        record = _POST_PROCESSORS[name](record, config, registry)
    return record


def build_clients(
    config: PipelineConfig,
    mock_fixtures: Optional[Path | str] = None,
) -> Clients:
    """Default client wiring: mock fixture file or remote completion endpoint."""
    if mock_fixtures is not None:
        return Clients(synthesizer=MockSynthesizer.from_file(mock_fixtures))
    endpoints = {s.endpoint for e in config.entities for s in e.stages if s.endpoint}
    if not endpoints:
        raise ConfigError(
            "no synthesizer endpoint configured; pass --mock-fixtures for offline runs"
        )
    if len(endpoints) > 1:
        raise ConfigError("multiple synthesizer endpoints are not supported")
    models = {s.llm for e in config.entities for s in e.stages if s.llm}
    return Clients(synthesizer=RemoteCompletionClient(
        endpoints.pop(), model=models.pop() if models else "",
    ))
