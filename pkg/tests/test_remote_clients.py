from __future__ import annotations

import json

import httpx
import numpy as np
import pytest

from oncoextract.retrieval import RemoteEmbeddingProvider
from oncoextract.synthesis import (
    GenerationParams,
    PromptTemplate,
    RemoteCompletionClient,
    render_prompt,
)


def transport_returning(payload, seen):
    def handler(request: httpx.Request) -> httpx.Response:
        seen.append(json.loads(request.content.decode("utf-8")))
        return httpx.Response(200, json=payload)

    return httpx.MockTransport(handler)


class TestRemoteEmbeddingProvider:
    def test_wire_format(self):
        seen = []
        transport = transport_returning(
            {"vectors": [[1.0, 0.0], [0.0, 1.0]]}, seen,
        )
        provider = RemoteEmbeddingProvider(
            "http://embedder.local/embed", dimension=2,
            client=httpx.Client(transport=transport),
        )
        vectors = provider.embed(["alpha", "beta"])
        assert seen == [{"texts": ["alpha", "beta"]}]
        assert np.array_equal(vectors[0], np.array([1.0, 0.0]))
        assert np.array_equal(vectors[1], np.array([0.0, 1.0]))

    def test_http_error_propagates(self):
        transport = httpx.MockTransport(lambda req: httpx.Response(500, text="boom"))
        provider = RemoteEmbeddingProvider(
            "http://embedder.local/embed", dimension=2,
            client=httpx.Client(transport=transport),
        )
        with pytest.raises(httpx.HTTPStatusError):
            provider.embed(["x"])


class TestRemoteCompletionClient:
    def test_wire_format(self):
        seen = []
        transport = transport_returning({"text": '{"biomarker_tested": "BRAF"}'}, seen)
        client = RemoteCompletionClient(
            "http://llm.local/complete", model="demo-model",
            client=httpx.Client(transport=transport),
        )
        template = PromptTemplate(
            template_id="t", role_sections=(("system", "Extract."), ("user", "{{SNIPPET}}")),
        )
        raw = client.complete(
            render_prompt(template, {"SNIPPET": "BRAF found"}),
            GenerationParams(temperature=0.0, top_p=0.1, max_tokens=64),
        )
        assert raw == '{"biomarker_tested": "BRAF"}'
        assert seen == [{
            "model": "demo-model",
            "messages": [
                {"role": "system", "content": "Extract."},
                {"role": "user", "content": "BRAF found"},
            ],
            "temperature": 0.0,
            "top_p": 0.1,
            "max_tokens": 64,
        }]
