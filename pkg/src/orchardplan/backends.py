"""Plan-generation backends: live HTTP, record/replay and scripted.

The rule-based offline backend lives in :mod:`orchardplan.mock`.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import os
import time
from dataclasses import dataclass
from pathlib import Path

import httpx

from .planner import BackendError, PlannerContext

RETRY_STATUS = {429, 500, 502, 503, 504}


@dataclass(frozen=True)
class BackendConfig:
    endpoint_url: str = "https://api.openai.com/v1/chat/completions"
    model_name: str = "gpt-4o-2024-05-13"
    temperature: float = 0.2
    max_tokens: int = 4096
    timeout: float = 60.0
    api_key_env: str = "OPENAI_API_KEY"
    retry_backoff: float = 1.0
    replay_dir: str = ""

    def __post_init__(self):
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature must be in [0, 2], got {self.temperature}")
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be >= 1, got {self.max_tokens}")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")

    def request_body(self, messages: list[dict[str, str]]) -> dict:
        return {
            "model": self.model_name,
            "messages": messages,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }


def load_backend_config(path) -> BackendConfig:
    """Read the ``[backend]`` section of an INI file."""
    cp = configparser.ConfigParser()
    if not cp.read(path, encoding="utf-8"):
        raise OSError(f"cannot read backend config {path}")
    if "backend" not in cp:
        raise ValueError(f"{path}: missing [backend] section")
    sec = cp["backend"]
    known = set(BackendConfig.__dataclass_fields__)
    unknown = set(sec) - known
    if unknown:
        raise ValueError(f"{path}: unknown backend keys {sorted(unknown)}")
    kw: dict = {}
    for name in known & set(sec):
        ftype = BackendConfig.__dataclass_fields__[name].type
        if ftype == "float":
            kw[name] = sec.getfloat(name)
        elif ftype == "int":
            kw[name] = sec.getint(name)
        else:
            kw[name] = sec.get(name)
    if kw.get("replay_dir") and not os.path.isabs(kw["replay_dir"]):
        kw["replay_dir"] = str(Path(path).resolve().parent / kw["replay_dir"])
    return BackendConfig(**kw)


def reply_content(body: dict) -> str:
    try:
        content = body["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        raise BackendError("response has no choices[0].message.content") from None
    if not isinstance(content, str):
        raise BackendError("response message content is not text")
    return content


class LiveBackend:
    """Chat-completions client. One retry with backoff on transport errors,
    429 and 5xx; validation failures are never retried here."""

    def __init__(self, config: BackendConfig, transport: httpx.BaseTransport | None = None):
        self.config = config
        self._transport = transport

    def _headers(self) -> dict[str, str]:
        key = os.environ.get(self.config.api_key_env)
        if not key:
            raise BackendError(f"environment variable {self.config.api_key_env} is not set")
        return {"Authorization": f"Bearer {key}"}

    def post(self, body: dict) -> dict:
        headers = self._headers()
        last = ""
        with httpx.Client(timeout=self.config.timeout, transport=self._transport) as client:
            for attempt in range(2):
                if attempt:
                    time.sleep(self.config.retry_backoff)
                try:
                    resp = client.post(self.config.endpoint_url, json=body, headers=headers)
                except httpx.TransportError as exc:
                    last = f"transport error: {exc!r}"
                    continue
                if resp.status_code in RETRY_STATUS:
                    last = f"HTTP {resp.status_code}"
                    continue
                if resp.status_code >= 400:
                    raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                try:
                    return resp.json()
                except ValueError:
                    raise BackendError("response body is not JSON") from None
        raise BackendError(f"backend unreachable after retry ({last})")

    def complete(self, messages, *, query: str = "", ctx: PlannerContext | None = None) -> str:
        return reply_content(self.post(self.config.request_body(messages)))


def request_hash(body: dict) -> str:
    canonical = json.dumps(body, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class ReplayBackend:
    """Serves recorded responses from ``<dir>/<sha256 of request>.json``.

    With ``record`` set to a live backend, misses are fetched and written.
    """

    def __init__(self, directory, config: BackendConfig | None = None, record: LiveBackend | None = None):
        self.directory = Path(directory)
        self.config = config or BackendConfig()
        self.record = record

    def complete(self, messages, *, query: str = "", ctx: PlannerContext | None = None) -> str:
        body = self.config.request_body(messages)
        path = self.directory / f"{request_hash(body)}.json"
        if path.exists():
            try:
                stored = json.loads(path.read_text(encoding="utf-8"))
            except ValueError:
                raise BackendError(f"corrupt replay fixture {path}") from None
            return reply_content(stored["response"])
        if self.record is None:
            raise BackendError(f"no recorded response for this request ({path.name})")
        response = self.record.post(body)
        self.directory.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"request": body, "response": response}, indent=2, sort_keys=True) + "\n",
                        encoding="utf-8")
        return reply_content(response)


class ScriptedBackend:
    """Returns canned replies in order; an exception instance is raised instead."""

    def __init__(self, replies):
        self.replies = list(replies)
        self.calls: list[list[dict[str, str]]] = []

    def complete(self, messages, *, query: str = "", ctx: PlannerContext | None = None) -> str:
        self.calls.append(messages)
        if not self.replies:
            raise BackendError("scripted backend has no replies left")
        reply = self.replies.pop(0)
        if isinstance(reply, BaseException):
            raise reply
        return reply
