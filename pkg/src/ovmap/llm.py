"""Chat-completion clients: an HTTP backend and a scripted mock for tests."""

from __future__ import annotations

import json
import os
import re
from collections import defaultdict
from pathlib import Path
from typing import Any, Protocol, Sequence

import requests

Message = dict[str, str]


class LLMError(RuntimeError):
    pass


class LLMClient(Protocol):
    def chat(self, messages: Sequence[Message]) -> str: ...


class HttpChatClient:
    """OpenAI-compatible ``/chat/completions`` client.

    Configuration comes from the environment: ``OVMAP_LLM_BASE_URL``,
    ``OVMAP_LLM_API_KEY`` and ``OVMAP_LLM_MODEL``.
    """

    def __init__(self, base_url: str | None = None, model: str | None = None,
                 api_key: str | None = None, timeout: float = 60.0):
        self.base_url = (base_url or os.environ.get("OVMAP_LLM_BASE_URL", "")).rstrip("/")
        if not self.base_url:
            raise LLMError("no LLM endpoint configured; set OVMAP_LLM_BASE_URL")
        self.model = model or os.environ.get("OVMAP_LLM_MODEL", "gpt-4")
        self.api_key = api_key if api_key is not None else os.environ.get("OVMAP_LLM_API_KEY")
        self.timeout = timeout

    def chat(self, messages: Sequence[Message]) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {"model": self.model, "messages": list(messages), "temperature": 0}
        try:
            resp = requests.post(f"{self.base_url}/chat/completions", headers=headers,
                                 json=payload, timeout=self.timeout)
        except requests.RequestException as exc:
            raise LLMError(f"LLM request failed: {exc}") from exc
        if resp.status_code != 200:
            raise LLMError(f"LLM endpoint returned HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise LLMError("unexpected chat-completion response shape") from exc


_CANDIDATE_LINE = re.compile(r"^Candidate Instance (\d+): (.*)$", re.MULTILINE)


def prompt_kind(messages: Sequence[Message]) -> str:
    text = "\n".join(m["content"] for m in messages)
    if "Your answer could not be read" in messages[-1]["content"]:
        return "reminder"
    if "Candidate Instance" in text:
        return "round2"
    if "## Label Vocabulary" in text:
        return "round1_closed"
    return "round1"


class ScriptedLLM:
    """Replays scripted replies.

    A script is either a list of replies consumed in order, or a mapping from
    instruction text to such a list or to a per-round mapping with keys
    ``round1``, ``round1_closed``, ``round2`` and ``reminder``.  A reply may
    be a literal string or ``{"choose_with_neighbor": "<label>"}``, which
    answers a candidate prompt with the first candidate that lists that label
    among its surrounding objects (index 1 when none does).
    """

    def __init__(self, script: list | dict[str, Any]):
        self.script = script
        self._cursor: dict[str, int] = defaultdict(int)
        self.calls: list[list[Message]] = []

    @classmethod
    def load(cls, path: str | Path) -> ScriptedLLM:
        try:
            return cls(json.loads(Path(path).read_text()))
        except FileNotFoundError as exc:
            raise LLMError(f"mock script not found: {path}") from exc

    def _entry_for(self, messages: Sequence[Message]) -> Any:
        if isinstance(self.script, list):
            return self.script
        text = "\n".join(m["content"] for m in messages)
        keys = [k for k in self.script if f"Instruction: {k}\n" in text + "\n"]
        if not keys:
            return None
        return self.script[max(keys, key=len)], max(keys, key=len)

    def chat(self, messages: Sequence[Message]) -> str:
        self.calls.append([dict(m) for m in messages])
        entry = self._entry_for(messages)
        if entry is None:
            return ""
        if isinstance(self.script, list):
            seq, key = entry, "__list__"
        else:
            seq, key = entry
        kind = prompt_kind(messages)
        if isinstance(seq, dict):
            reply = seq.get(kind)
            if reply is None and kind == "reminder":
                reply = seq.get("round2")
        else:
            i = self._cursor[key]
            self._cursor[key] += 1
            reply = seq[i] if i < len(seq) else ""
        return self._render(reply, messages)

    @staticmethod
    def _render(reply: Any, messages: Sequence[Message]) -> str:
        if reply is None:
            return ""
        if isinstance(reply, str):
            return reply
        if isinstance(reply, dict) and "choose_with_neighbor" in reply:
            label = reply["choose_with_neighbor"]
            prompt = messages[-1]["content"]
            if prompt_kind(messages) == "reminder":
                prompt = "\n".join(m["content"] for m in messages)
            for idx, body in _CANDIDATE_LINE.findall(prompt):
                surrounding = body.split("surrounding objects:", 1)[-1]
                if f"label: {label}]" in surrounding or f"label: {label};" in surrounding:
                    return idx
            return "1"
        raise LLMError(f"unsupported script entry {reply!r}")
