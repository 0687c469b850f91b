from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from ovmap.grounding import CandidateReport, render_candidate
from ovmap.llm import HttpChatClient, LLMError, ScriptedLLM, prompt_kind
from ovmap.providers import (
    CropRequest, FileEmbeddingProvider, HashedTokenEmbedder, HttpEmbeddingProvider, ProviderError,
    SyntheticCropEmbedder, write_crop_store,
)


@pytest.fixture
def server():
    """Local JSON endpoint; handlers are set per test via ``server.reply``."""
    state = {"reply": None, "requests": []}

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
            state["requests"].append((self.path, dict(self.headers), body))
            status, payload = state["reply"](self.path, body)
            data = json.dumps(payload).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def log_message(self, *args):
            pass

    srv = HTTPServer(("127.0.0.1", 0), Handler)
    threading.Thread(target=srv.serve_forever, daemon=True).start()
    state["url"] = f"http://127.0.0.1:{srv.server_port}"
    yield state
    srv.shutdown()


def test_hashed_embedder_is_deterministic_and_unit():
    e = HashedTokenEmbedder(32, seed=1)
    a = e.embed_text("a cup of water")
    assert np.allclose(a, HashedTokenEmbedder(32, seed=1).embed_text("cup water"))
    assert abs(np.linalg.norm(a) - 1) < 1e-12
    assert not np.allclose(a, HashedTokenEmbedder(32, seed=2).embed_text("cup water"))
    with pytest.raises(ProviderError):
        e.embed_text("the of a")


def test_crop_request_rejects_empty_box():
    with pytest.raises(ValueError):
        CropRequest(0, (5, 5, 5, 9), 0, 1)


def test_synthetic_crop_embedder_stays_near_source():
    f = np.eye(8)[2]
    emb = SyntheticCropEmbedder({4: f})
    crops = [CropRequest(0, (0, 0, 10, 10), lvl, 4) for lvl in range(3)]
    vecs = emb.embed(crops)
    assert all(abs(np.linalg.norm(v) - 1) < 1e-12 and v @ f > 0.95 for v in vecs)
    assert np.array_equal(vecs[0], emb.embed(crops[:1])[0])
    with pytest.raises(ProviderError):
        emb.embed([CropRequest(0, (0, 0, 1, 1), 0, 99)])


def test_file_store_round_trip(tmp_path):
    crops = [CropRequest(1, (0, 0, 4, 4), 0, 0), CropRequest(2, (1, 1, 5, 5), 1, 0)]
    vecs = [np.array([3.0, 4.0]), np.array([0.0, 2.0])]
    write_crop_store(tmp_path / "crops.bin", crops, vecs)
    p = FileEmbeddingProvider(tmp_path / "crops.bin")
    out = p.embed(crops[::-1])
    assert np.allclose(out[0], [0, 1]) and np.allclose(out[1], [0.6, 0.8], atol=1e-6)
    with pytest.raises(ProviderError):
        p.embed([CropRequest(9, (0, 0, 1, 1), 0, 0)])


def test_http_embedding_provider(server, monkeypatch):
    monkeypatch.setenv("OVMAP_EMBED_API_KEY", "k1")
    server["reply"] = lambda path, body: (200, {"dimension": 2, "embeddings": [[2.0, 0.0]] * len(body.get("crops", body.get("texts", [])))})
    p = HttpEmbeddingProvider(server["url"], 2, scene="s", batch_size=2)
    crops = [CropRequest(0, (0, 0, 2, 2), lvl, 0) for lvl in range(3)]
    assert [v.tolist() for v in p.embed(crops)] == [[1.0, 0.0]] * 3
    assert [r[0] for r in server["requests"]] == ["/embed/crops", "/embed/crops"]
    assert server["requests"][0][1]["Authorization"] == "Bearer k1"
    assert p.embed_text("hello").tolist() == [1.0, 0.0]


def test_http_embedding_errors(server):
    server["reply"] = lambda path, body: (500, {})
    with pytest.raises(ProviderError):
        HttpEmbeddingProvider(server["url"], 2).embed_text("x")
    server["reply"] = lambda path, body: (200, {"embeddings": [[1.0, 0.0, 0.0]]})
    with pytest.raises(ProviderError):
        HttpEmbeddingProvider(server["url"], 2).embed_text("x")


def test_http_chat_client(server, monkeypatch):
    monkeypatch.setenv("OVMAP_LLM_BASE_URL", server["url"])
    monkeypatch.setenv("OVMAP_LLM_API_KEY", "secret")
    monkeypatch.setenv("OVMAP_LLM_MODEL", "m1")
    server["reply"] = lambda path, body: (200, {"choices": [{"message": {"content": "2"}}]})
    assert HttpChatClient().chat([{"role": "user", "content": "hi"}]) == "2"
    path, headers, body = server["requests"][0]
    assert path == "/chat/completions" and body["model"] == "m1" and headers["Authorization"] == "Bearer secret"


def test_http_chat_client_errors(server, monkeypatch):
    monkeypatch.delenv("OVMAP_LLM_BASE_URL", raising=False)
    with pytest.raises(LLMError):
        HttpChatClient()
    server["reply"] = lambda path, body: (200, {"unexpected": True})
    with pytest.raises(LLMError):
        HttpChatClient(server["url"]).chat([{"role": "user", "content": "hi"}])


def msgs(text):
    return [{"role": "system", "content": "sys"}, {"role": "user", "content": text}]


def test_scripted_list_replays_in_order():
    llm = ScriptedLLM(["one", "two"])
    assert [llm.chat(msgs("x")) for _ in range(3)] == ["one", "two", ""]


def test_scripted_per_round_mapping_and_neighbor_choice():
    script = {"find the chair": {"round1": "chair", "round2": {"choose_with_neighbor": "table"}}}
    llm = ScriptedLLM(script)
    assert llm.chat(msgs("Instruction: find the chair")) == "chair"
    cands = [CandidateReport(7, (0, 0, 0), 0.9), CandidateReport(8, (1, 0, 0), 0.8, [(4, (1, 0.5, 0), "table")])]
    prompt = "Instruction: find the chair\n" + "\n".join(render_candidate(i + 1, c) for i, c in enumerate(cands))
    assert prompt_kind(msgs(prompt)) == "round2"
    assert llm.chat(msgs(prompt)) == "2"
    assert llm.chat(msgs("Instruction: something else")) == ""
