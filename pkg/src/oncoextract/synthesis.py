"""Completion-client synthesis with schema-enforced parsing and retry.

A synthesis call renders a role-tagged prompt template, sends it through a
pluggable completion client, and parses the first JSON object out of the
response under strong typing: any value that violates the attribute schema
rejects the whole extraction. One self-reflection retry is attempted when
parsing fails or a required attribute comes back null.

The :class:`MockSynthesizer` replays a fixture table and is a pure function
of (template_id, rendered input), which makes whole pipeline runs
reproducible byte-for-byte.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

from .schema import (
    Provenance,
    SchemaRegistry,
    SchemaViolation,
    TypedValue,
    canonical_text,
    validate_value,
)

log = logging.getLogger(__name__)

_PLACEHOLDER_RE = re.compile(r"\{\{([A-Za-z0-9_]+)\}\}")

REFLECTION_SUFFIX = (
    "The previous answer was missing required fields or was not valid JSON. "
    "Re-read the context above and answer once more with a single complete "
    "JSON object."
)


class SynthesisError(RuntimeError):
    def __init__(self, message: str, raw_outputs: Sequence[str] = ()):
        super().__init__(message)
        self.raw_outputs = tuple(raw_outputs)


@dataclass(frozen=True)
class GenerationParams:
    temperature: float = 0.0
    top_p: float = 0.1
    max_tokens: int = 1024


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    role_sections: tuple[tuple[str, str], ...]
    target_attributes: tuple[str, ...] = ()

    @property
    def placeholders(self) -> tuple[str, ...]:
        names: list[str] = []
        for _, text in self.role_sections:
            for match in _PLACEHOLDER_RE.finditer(text):
                if match.group(1) not in names:
                    names.append(match.group(1))
        return tuple(names)


@dataclass(frozen=True)
class RenderedPrompt:
    template_id: str
    messages: tuple[tuple[str, str], ...]

    @property
    def text(self) -> str:
        return "\n".join(f"{role}: {content}" for role, content in self.messages)


@dataclass
class PartialExtraction:
    entity_type: str
    attributes: dict[str, Optional[TypedValue]]
    provenance: tuple[Provenance, ...] = ()


def fingerprint64(text: str) -> str:
    """64-bit content fingerprint, hex-encoded."""
    return hashlib.blake2b(text.encode("utf-8"), digest_size=8).hexdigest()


def parse_prompt_file(
    text: str, template_id: str, target_attributes: Sequence[str] = ()
) -> PromptTemplate:
    """Parse a role-tagged prompt file (``system:`` / ``user:`` / ``assistant:``)."""
    sections: list[tuple[str, list[str]]] = []
    for line in text.splitlines():
        match = re.match(r"^(system|user|assistant)\s*:\s?(.*)$", line)
        if match:
            sections.append((match.group(1), [match.group(2)]))
        elif sections:
            sections[-1][1].append(line)
        elif line.strip():
            sections.append(("system", [line]))
    if not sections:
        raise SynthesisError(f"prompt template {template_id!r} is empty")
    return PromptTemplate(
        template_id=template_id,
        role_sections=tuple((role, "\n".join(lines).strip()) for role, lines in sections),
        target_attributes=tuple(target_attributes),
    )


def render_prompt(template: PromptTemplate, bindings: Mapping[str, str]) -> RenderedPrompt:
    """Byte-deterministic placeholder substitution; no recursive expansion."""
    declared = set(template.placeholders)
    unknown = set(bindings) - declared
    if unknown:
        raise SynthesisError(
            f"unknown placeholders {sorted(unknown)} for template {template.template_id!r}"
        )
    missing = declared - set(bindings)
    if missing:
        raise SynthesisError(
            f"missing bindings {sorted(missing)} for template {template.template_id!r}"
        )
    messages = tuple(
        (role, _PLACEHOLDER_RE.sub(lambda m: bindings[m.group(1)], text))
        for role, text in template.role_sections
    )
    return RenderedPrompt(template_id=template.template_id, messages=messages)


# ---------------------------------------------------------------------------
# Clients
# ---------------------------------------------------------------------------

class MockSynthesizer:
    """Fixture-table client; a pure function of (template_id, rendered input).

    Fixture format::

        {
          "default": "error" | "empty",
          "responses": [
            {"template_id": "...",            # optional filter
             "fingerprint": "<16 hex>",       # exact rendered-input fingerprint
             "contains": "substring",         # substring(s) of the rendered input
             "on_retry": true,                # match only reflection retries
             "output": "raw completion text"}
          ]
        }

    ``contains`` may be a string or a list (every entry must be present).
    Rules are tried in file order; the first match wins.
    """

    def __init__(self, fixture: Mapping[str, Any]):
        self.default = fixture.get("default", "error")
        if self.default not in ("error", "empty"):
            raise SynthesisError(f"bad mock default {self.default!r}")
        self.rules = list(fixture.get("responses", []))
        self.calls: list[tuple[str, str]] = []

    @classmethod
    def from_file(cls, path: Path | str) -> "MockSynthesizer":
        return cls(json.loads(Path(path).read_text("utf-8")))

    def complete(self, prompt: RenderedPrompt, params: GenerationParams = GenerationParams()) -> str:
        text = prompt.text
        fp = fingerprint64(text)
        self.calls.append((prompt.template_id, fp))
        is_retry = REFLECTION_SUFFIX in text
        for rule in self.rules:
            if rule.get("template_id") and rule["template_id"] != prompt.template_id:
                continue
            if rule.get("fingerprint") and rule["fingerprint"] != fp:
                continue
            needles = rule.get("contains")
            if needles:
                if isinstance(needles, str):
                    needles = [needles]
                if not all(needle in text for needle in needles):
                    continue
            if "on_retry" in rule and bool(rule["on_retry"]) != is_retry:
                continue
            return str(rule["output"])
        if self.default == "empty":
            return "{}"
        raise SynthesisError(
            f"no mock response for template {prompt.template_id!r} fingerprint {fp}"
        )


class RemoteCompletionClient:
    """HTTP completion endpoint: POST messages + params -> {"text": ...}."""

    def __init__(self, endpoint: str, model: str = "", client=None):
        import httpx

        self.endpoint = endpoint
        self.model = model
        self._client = client or httpx.Client()

    def complete(self, prompt: RenderedPrompt, params: GenerationParams = GenerationParams()) -> str:
        payload = {
            "model": self.model,
            "messages": [{"role": r, "content": c} for r, c in prompt.messages],
            "temperature": params.temperature,
            "top_p": params.top_p,
            "max_tokens": params.max_tokens,
        }
        response = self._client.post(self.endpoint, json=payload)
        response.raise_for_status()
        return response.json()["text"]


# ---------------------------------------------------------------------------
# Structured-output parsing
# ---------------------------------------------------------------------------

def _first_json_value(raw: str, opener: str) -> Any:
    decoder = json.JSONDecoder()
    for pos in range(len(raw)):
        if raw[pos] != opener:
            continue
        try:
            value, _ = decoder.raw_decode(raw, pos)
            return value
        except json.JSONDecodeError:
            continue
    return None


def parse_structured_output(
    raw: str,
    registry: SchemaRegistry,
    entity_type: str,
    target_attributes: Sequence[str] = (),
    provenance: tuple[Provenance, ...] = (),
) -> PartialExtraction:
    """Extract the first JSON object in *raw* into typed attribute values.

    Surrounding prose and code fences are tolerated. Keys outside the target
    set are dropped with a warning; explicit null means "not found"; any
    value failing schema validation rejects the whole extraction.
    """
    spec = registry.get(entity_type)
    targets = tuple(target_attributes) or spec.attribute_names
    payload = _first_json_value(raw, "{")
    if not isinstance(payload, dict):
        raise SynthesisError(f"no parseable object in output for {spec.name}", [raw])
    attributes: dict[str, Optional[TypedValue]] = {name: None for name in targets}
    for key, value in payload.items():
        if key not in targets:
            log.warning("dropping unexpected key %r in %s output", key, spec.name)
            continue
        if value is None:
            attributes[key] = None
            continue
        try:
            attributes[key] = validate_value(spec.attribute(key), value)
        except SchemaViolation as exc:
            raise SynthesisError(f"schema violation in {spec.name} output: {exc}", [raw]) from exc
    return PartialExtraction(entity_type=spec.name, attributes=attributes, provenance=provenance)


def parse_list_output(raw: str) -> list[str]:
    """Extract a list of strings (bare array or first list value of an object)."""
    value = _first_json_value(raw, "[")
    if isinstance(value, list) and all(isinstance(v, str) for v in value):
        return value
    payload = _first_json_value(raw, "{")
    if isinstance(payload, dict):
        for candidate in payload.values():
            if isinstance(candidate, list) and all(isinstance(v, str) for v in candidate):
                return candidate
    raise SynthesisError("no parseable list in output", [raw])


# ---------------------------------------------------------------------------
# Synthesis strategies
# ---------------------------------------------------------------------------

def _with_reflection(prompt: RenderedPrompt) -> RenderedPrompt:
    return RenderedPrompt(
        template_id=prompt.template_id,
        messages=prompt.messages + (("user", REFLECTION_SUFFIX),),
    )


def synthesize_with_reflection(
    client,
    template: PromptTemplate,
    bindings: Mapping[str, str],
    registry: SchemaRegistry,
    entity_type: str,
    params: GenerationParams = GenerationParams(),
    required_attributes: Optional[Sequence[str]] = None,
    provenance: tuple[Provenance, ...] = (),
) -> PartialExtraction:
    """One completion plus at most one reflection retry.

    The retry fires when parsing rejects the output or any required
    attribute (default: the entity's anchor attribute) is null; the retry
    result is final either way.
    """
    spec = registry.get(entity_type)
    targets = tuple(template.target_attributes) or spec.attribute_names
    if required_attributes is None:
        required = tuple(a for a in (spec.anchor_attribute,) if a in targets)
    else:
        required = tuple(required_attributes)
    prompt = render_prompt(template, bindings)

    def attempt(rendered: RenderedPrompt) -> tuple[Optional[PartialExtraction], str, Optional[str]]:
        raw = client.complete(rendered, params)
        try:
            extraction = parse_structured_output(
                raw, registry, entity_type, targets, provenance
            )
        except SynthesisError as exc:
            return None, raw, str(exc)
        return extraction, raw, None

    extraction, raw1, error1 = attempt(prompt)
    if extraction is not None and all(extraction.attributes.get(a) is not None for a in required):
        return extraction
    retry, raw2, error2 = attempt(_with_reflection(prompt))
    if retry is not None:
        return retry
    raise SynthesisError(
        f"synthesis failed for {spec.name} after retry: {error1 or 'missing required'}; {error2}",
        [raw1, raw2],
    )


def enumerate_then_detail(
    client,
    stage1: PromptTemplate,
    stage2: PromptTemplate,
    chunk_groups: Sequence[tuple[str, tuple[Provenance, ...]]],
    registry: SchemaRegistry,
    entity_type: str,
    params: GenerationParams = GenerationParams(),
    detail_required: Optional[Sequence[str]] = None,
) -> list[PartialExtraction]:
    """Two-stage synthesis: enumerate variants per chunk group, then detail each.

    Stage 1 runs once per group and must yield a list; the canonicalized,
    deduplicated union of variants drives one stage-2 call per variant with
    ``{{DRUG}}`` bound. Stage-2 failures skip that variant with a warning.
    """
    spec = registry.get(entity_type)
    variants: list[str] = []
    seen: set[str] = set()
    for group_text, _ in chunk_groups:
        prompt = render_prompt(stage1, {"SNIPPET": group_text})
        raw = client.complete(prompt, params)
        try:
            listed = parse_list_output(raw)
        except SynthesisError:
            retry_raw = client.complete(_with_reflection(prompt), params)
            try:
                listed = parse_list_output(retry_raw)
            except SynthesisError:
                log.warning("enumeration unparseable for %s; skipping group", spec.name)
                continue
        for item in listed:
            key = canonical_text(item)
            if key and key not in seen:
                seen.add(key)
                variants.append(item.strip())
    if not variants:
        return []
    all_text = "\n\n".join(text for text, _ in chunk_groups)
    all_provenance = tuple(p for _, prov in chunk_groups for p in prov)
    results: list[PartialExtraction] = []
    for variant in variants:
        bindings = {"SNIPPET": all_text, "DRUG": variant}
        if "ENUMERATED_DRUGS" in stage2.placeholders:
            bindings["ENUMERATED_DRUGS"] = ", ".join(variants)
        bindings = {k: v for k, v in bindings.items() if k in stage2.placeholders}
        try:
            extraction = synthesize_with_reflection(
                client, stage2, bindings, registry, entity_type,
                params=params, required_attributes=detail_required,
                provenance=all_provenance,
            )
        except SynthesisError as exc:
            log.warning("detail synthesis failed for %s %r: %s", spec.name, variant, exc)
            continue
        anchor = spec.anchor_attribute
        if extraction.attributes.get(anchor) is None and anchor in extraction.attributes:
            try:
                extraction.attributes[anchor] = validate_value(spec.attribute(anchor), variant)
            except SchemaViolation:
                pass
        results.append(extraction)
    return results
