"""Entity-conditioned chunk retrieval: vector, regex, and hybrid.

Search is exact (exhaustive cosine scoring), never approximate; ties break
on (document_id, chunk_index) so results are reproducible. The bundled
:class:`HashingEmbedder` is a seeded character n-gram feature hasher, which
keeps retrieval fully deterministic without an embedding service.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from typing import Iterable, Optional, Protocol, Sequence

import numpy as np

from .corpus import Chunk, PatientCorpus


class RetrievalError(ValueError):
    pass


class EmbeddingProvider(Protocol):
    dimension: int

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]: ...


@dataclass(frozen=True)
class Query:
    text: str
    top_k: int

    def __post_init__(self) -> None:
        if self.top_k < 1:
            raise RetrievalError(f"top_k must be >= 1, got {self.top_k}")


@dataclass(frozen=True)
class RetrievedChunk:
    chunk: Chunk
    score: float
    source: str  # vector | regex


@dataclass
class ChunkIndex:
    entries: list[tuple[Chunk, np.ndarray]]

    def __len__(self) -> int:
        return len(self.entries)


class HashingEmbedder:
    """Deterministic feature-hashing embedder over character n-grams."""

    def __init__(self, dimension: int = 256, ngram: int = 3, seed: str = "default"):
        if dimension < 2:
            raise RetrievalError("dimension must be >= 2")
        self.dimension = dimension
        self.ngram = ngram
        self.seed = seed

    def _hash(self, token: str) -> int:
        digest = hashlib.blake2b(
            token.encode("utf-8"), digest_size=8, key=self.seed.encode("utf-8")[:64]
        ).digest()
        return int.from_bytes(digest, "big")

    def embed_one(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dimension, dtype=np.float64)
        lowered = text.lower()
        grams = (
            [lowered[i:i + self.ngram] for i in range(len(lowered) - self.ngram + 1)]
            if len(lowered) >= self.ngram
            else [lowered]  # short or empty text hashes as a single token
        )
        for gram in grams:
            h = self._hash(gram)
            bucket = h % self.dimension
            sign = 1.0 if (h >> 63) & 1 else -1.0
            vec[bucket] += sign
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            vec[self._hash(lowered) % self.dimension] = 1.0
            norm = 1.0
        return vec / norm

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        return [self.embed_one(t) for t in texts]


class RemoteEmbeddingProvider:
    """HTTP embedding endpoint: POST {"texts": [...]} -> {"vectors": [[...]]}."""

    def __init__(self, endpoint: str, dimension: int, client=None):
        import httpx

        self.endpoint = endpoint
        self.dimension = dimension
        self._client = client or httpx.Client()

    def embed(self, texts: Sequence[str]) -> list[np.ndarray]:
        response = self._client.post(self.endpoint, json={"texts": list(texts)})
        response.raise_for_status()
        vectors = response.json()["vectors"]
        return [np.asarray(v, dtype=np.float64) for v in vectors]


def _normalize(vec: np.ndarray, label: str) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise RetrievalError(f"zero-norm embedding for {label}")
    return vec / norm


def build_index(corpus: PatientCorpus, provider: EmbeddingProvider) -> ChunkIndex:
    """Embed every chunk exactly once; vectors stored unit-normalized."""
    chunks = list(corpus.chunks)
    if not chunks:
        return ChunkIndex(entries=[])
    vectors = provider.embed([c.text for c in chunks])
    if len(vectors) != len(chunks):
        raise RetrievalError(
            f"provider returned {len(vectors)} vectors for {len(chunks)} chunks"
        )
    entries = []
    for chunk, vec in zip(chunks, vectors):
        arr = np.asarray(vec, dtype=np.float64)
        if arr.shape != (provider.dimension,):
            raise RetrievalError(
                f"wrong embedding dimension {arr.shape} for chunk "
                f"{chunk.document_id}#{chunk.chunk_index}"
            )
        entries.append((chunk, _normalize(arr, f"{chunk.document_id}#{chunk.chunk_index}")))
    return ChunkIndex(entries=entries)


def _chunk_order(chunk: Chunk) -> tuple[str, int]:
    return (chunk.document_id, chunk.chunk_index)


def vector_retrieve(
    index: ChunkIndex, provider: EmbeddingProvider, query: Query
) -> list[RetrievedChunk]:
    """Exact top-k by cosine similarity, descending; ties in document order."""
    if not index.entries:
        return []
    qvec = _normalize(np.asarray(provider.embed([query.text])[0], dtype=np.float64), "query")
    scored = [
        (float(np.dot(qvec, vec)), chunk) for chunk, vec in index.entries
    ]
    scored.sort(key=lambda item: (-item[0], _chunk_order(item[1])))
    k = min(query.top_k, len(scored))
    return [RetrievedChunk(chunk=c, score=s, source="vector") for s, c in scored[:k]]


def regex_retrieve(
    corpus: PatientCorpus, patterns: Sequence[str]
) -> list[RetrievedChunk]:
    """Every chunk matching at least one pattern, once, in document order."""
    compiled = []
    for pattern in patterns:
        try:
            compiled.append(re.compile(pattern))
        except re.error as exc:
            raise RetrievalError(f"invalid pattern {pattern!r}: {exc}") from exc
    hits: dict[tuple[str, int], Chunk] = {}
    for chunk in corpus.chunks:
        if any(rx.search(chunk.text) for rx in compiled):
            hits[_chunk_order(chunk)] = chunk
    return [
        RetrievedChunk(chunk=hits[key], score=1.0, source="regex")
        for key in sorted(hits)
    ]


def hybrid_retrieve(
    index: ChunkIndex,
    provider: Optional[EmbeddingProvider],
    corpus: PatientCorpus,
    queries: Iterable[Query],
    patterns: Sequence[str],
) -> list[RetrievedChunk]:
    """Union of regex hits and per-query vector hits, regex-first ordering.

    Duplicates keep the maximum score; a chunk found by both routes counts
    as regex-sourced (regex scores are fixed at 1.0).
    """
    regex_hits = regex_retrieve(corpus, patterns) if patterns else []
    taken = {_chunk_order(r.chunk) for r in regex_hits}
    best_vector: dict[tuple[str, int], RetrievedChunk] = {}
    if provider is not None:
        for query in queries:
            for hit in vector_retrieve(index, provider, query):
                key = _chunk_order(hit.chunk)
                if key in taken:
                    continue
                held = best_vector.get(key)
                if held is None or hit.score > held.score:
                    best_vector[key] = hit
    vector_hits = sorted(
        best_vector.values(), key=lambda r: (-r.score, _chunk_order(r.chunk))
    )
    return regex_hits + vector_hits
