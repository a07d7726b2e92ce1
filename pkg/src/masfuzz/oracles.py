"""Language-model oracles.

Every oracle role (semantic analysis, driver generation/repair, crash
analysis) goes through the same call: ``complete(task, messages, payload)``.
``messages`` is the chat transcript sent to an OpenAI-compatible
``/chat/completions`` endpoint; ``payload`` carries the same request in
structured form so the offline :class:`StubOracle` can answer without
parsing prose.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Any, Callable, Protocol

from .errors import OracleError

log = logging.getLogger(__name__)


class ChatOracle(Protocol):
    def complete(self, task: str, messages: list[dict[str, str]], payload: dict[str, Any]) -> str: ...


# Role aliases; all roles share the chat shape.
SemanticOracle = ChatOracle
GenerationOracle = ChatOracle
AnalysisOracle = ChatOracle


@dataclass
class HttpChatOracle:
    """OpenAI-compatible chat-completion backend."""

    endpoint: str
    model: str
    api_key_env: str = "MASFUZZ_API_KEY"
    temperature: float = 0.0
    timeout: float = 120.0
    max_tokens: int | None = None

    def complete(self, task: str, messages: list[dict[str, str]], payload: dict[str, Any]) -> str:
        body: dict[str, Any] = {
            "model": self.model,
            "messages": messages,
            "temperature": self.temperature,
        }
        if self.max_tokens:
            body["max_tokens"] = self.max_tokens
        url = self.endpoint.rstrip("/")
        if not url.endswith("/chat/completions"):
            url += "/chat/completions"
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        req = urllib.request.Request(url, json.dumps(body).encode(), headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                reply = json.loads(resp.read().decode())
        except (urllib.error.URLError, TimeoutError, OSError, json.JSONDecodeError) as exc:
            raise OracleError(f"{task}: request to {url} failed: {exc}") from exc
        try:
            return reply["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise OracleError(f"{task}: malformed completion response") from exc


@dataclass
class StubOracle:
    """Deterministic rule-based stand-in for every oracle role.

    ``overrides`` maps a task name to a callable taking the payload and
    returning the reply text; tests use it to inject malformed replies.
    """

    overrides: dict[str, Callable[[dict[str, Any]], str]] = field(default_factory=dict)
    calls: list[str] = field(default_factory=list)

    def complete(self, task: str, messages: list[dict[str, str]], payload: dict[str, Any]) -> str:
        self.calls.append(task)
        if task in self.overrides:
            return self.overrides[task](payload)
        handler = _STUB_HANDLERS.get(task)
        if handler is None:
            raise OracleError(f"stub oracle has no rule for task {task!r}")
        return handler(payload)


_STUB_HANDLERS: dict[str, Callable[[dict[str, Any]], str]] = {}


def stub_rule(task: str):
    """Register the stub's deterministic answer for ``task``."""

    def deco(fn: Callable[[dict[str, Any]], str]):
        _STUB_HANDLERS[task] = fn
        return fn

    return deco


def transcript_id(task: str, messages: list[dict[str, str]], reply: str) -> str:
    h = hashlib.sha1()
    h.update(task.encode())
    for m in messages:
        h.update(m.get("role", "").encode())
        h.update(m.get("content", "").encode())
    h.update(reply.encode())
    return f"{task}-{h.hexdigest()[:12]}"


_FENCE = re.compile(r"```(?:json|c|C)?\s*\n(.*?)```", re.S)


def extract_block(reply: str) -> str:
    """Body of the first fenced block, or the whole reply when unfenced."""
    m = _FENCE.search(reply)
    return m.group(1) if m else reply


def parse_json_reply(reply: str) -> Any:
    try:
        return json.loads(extract_block(reply))
    except json.JSONDecodeError as exc:
        raise OracleError(f"reply is not JSON: {exc}") from exc


def ask(
    oracle: ChatOracle,
    task: str,
    messages: list[dict[str, str]],
    payload: dict[str, Any],
    parse: Callable[[str], Any],
    retries: int = 1,
    backoff: float = 0.0,
) -> tuple[Any, str]:
    """Call the oracle and parse the reply, retrying up to ``retries`` times
    on transport or format failure.  Returns (parsed value, transcript id)."""
    last: Exception | None = None
    for attempt in range(retries + 1):
        try:
            reply = oracle.complete(task, messages, payload)
            return parse(reply), transcript_id(task, messages, reply)
        except (OracleError, ValueError, KeyError, TypeError) as exc:
            last = exc
            log.info("%s: attempt %d failed: %s", task, attempt + 1, exc)
            if backoff:
                time.sleep(backoff)
    raise OracleError(f"{task}: no conforming reply after {retries + 1} attempts: {last}")


def make_oracle(spec: dict[str, Any] | str | None) -> ChatOracle:
    """Build an oracle from config: ``"stub"`` or
    ``{"backend": "http", "endpoint": ..., "model": ...}``."""
    if spec is None or spec == "stub" or (isinstance(spec, dict) and spec.get("backend", "stub") == "stub"):
        return StubOracle()
    if isinstance(spec, dict) and spec.get("backend") == "http":
        kwargs = {k: v for k, v in spec.items() if k != "backend"}
        return HttpChatOracle(**kwargs)
    raise ValueError(f"unknown oracle backend: {spec!r}")
