"""Pluggable LLM backends and prompt plumbing.

Extraction never talks to a model directly: it renders a versioned prompt
template, sends it through an :class:`LlmBackend`, and logs every call with
a prompt digest so runs are auditable and, under the scripted stub backend,
fully deterministic.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from string import Template
from typing import Optional, Protocol

logger = logging.getLogger(__name__)


class BackendUnavailable(Exception):
    pass


class OutputUnparseable(Exception):
    pass


class LlmBackend(Protocol):
    identity: str

    def complete(self, prompt: str, max_output: int) -> str: ...


def prompt_digest(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class PromptTemplate:
    """A named prompt with a content digest recorded in provenance."""

    name: str
    text: str
    digest: str

    def render(self, **values: str) -> str:
        return Template(self.text).substitute(**values)


def load_prompt(name: str) -> PromptTemplate:
    """Load a prompt template shipped with the package."""
    text = resources.files("npalert").joinpath(f"prompts/{name}.txt").read_text(encoding="utf-8")
    return PromptTemplate(name=name, text=text, digest=prompt_digest(text))


def load_prompt_file(path: str | Path) -> PromptTemplate:
    text = Path(path).read_text(encoding="utf-8")
    return PromptTemplate(name=Path(path).stem, text=text, digest=prompt_digest(text))


class StubBackend:
    """Deterministic backend for tests and fixture runs.

    Reads a script file of ``{"rules": [{"pattern": ..., "response": ...}],
    "default": ...}``; the first rule whose regex matches the prompt wins.
    A rule may carry ``"unavailable": true`` to simulate an outage.
    """

    def __init__(self, script_path: str | Path, model_tag: str = "stub"):
        raw = Path(script_path).read_bytes()
        script = json.loads(raw)
        self._rules = [
            (re.compile(rule["pattern"], re.DOTALL), rule)
            for rule in script.get("rules", [])
        ]
        self._default = script.get("default")
        self.identity = f"{model_tag}/{hashlib.sha256(raw).hexdigest()[:12]}"

    def complete(self, prompt: str, max_output: int) -> str:
        for pattern, rule in self._rules:
            if pattern.search(prompt):
                if rule.get("unavailable"):
                    raise BackendUnavailable(f"scripted outage for {pattern.pattern!r}")
                return rule["response"]
        if self._default is not None:
            return self._default
        return ""


class HttpBackend:
    """Minimal HTTP completion backend.

    Posts ``{"model", "prompt", "max_tokens"}`` as JSON and expects a JSON
    body with a ``"text"`` field. The auth token is read from the named
    environment variable, never from configuration files.
    """

    def __init__(
        self,
        endpoint: str,
        model_tag: str,
        auth_env: Optional[str] = None,
        timeout: float = 120.0,
    ):
        self.endpoint = endpoint
        self.model_tag = model_tag
        self.auth_env = auth_env
        self.timeout = timeout
        self.identity = f"http/{model_tag}"

    def complete(self, prompt: str, max_output: int) -> str:
        import requests

        headers = {}
        if self.auth_env:
            token = os.environ.get(self.auth_env)
            if not token:
                raise BackendUnavailable(f"auth variable {self.auth_env} is not set")
            headers["Authorization"] = f"Bearer {token}"
        try:
            response = requests.post(
                self.endpoint,
                json={"model": self.model_tag, "prompt": prompt, "max_tokens": max_output},
                headers=headers,
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise BackendUnavailable(str(exc)) from exc
        if response.status_code != 200:
            raise BackendUnavailable(f"backend returned {response.status_code}")
        body = response.json()
        if "text" not in body:
            raise OutputUnparseable("backend response has no text field")
        return body["text"]


def build_backend(config: dict) -> LlmBackend:
    """Construct a backend from a configuration entry."""
    kind = config.get("kind", "stub")
    if kind == "stub":
        return StubBackend(config["script"], model_tag=config.get("model", "stub"))
    if kind == "http":
        return HttpBackend(
            endpoint=config["endpoint"],
            model_tag=config.get("model", "unknown"),
            auth_env=config.get("auth_env"),
            timeout=float(config.get("timeout", 120.0)),
        )
    raise ValueError(f"unknown backend kind {kind!r}")


class ExtractionLog:
    """Append-only line-delimited record of every backend call."""

    def __init__(self, path: Optional[str | Path] = None):
        self.path = Path(path) if path else None
        self._lock = threading.Lock()
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def record(self, entry: dict) -> None:
        line = json.dumps(entry, sort_keys=True)
        if self.path is None:
            logger.debug("extraction call: %s", line)
            return
        with self._lock, open(self.path, "a", encoding="utf-8") as handle:
            handle.write(line + "\n")


def call_backend(
    backend: LlmBackend,
    prompt: str,
    max_output: int,
    log: Optional[ExtractionLog] = None,
    purpose: str = "",
) -> str:
    """Send one prompt through a backend, timing and logging the call."""
    digest = prompt_digest(prompt)
    started = time.monotonic()
    status = "ok"
    try:
        return backend.complete(prompt, max_output)
    except BackendUnavailable:
        status = "unavailable"
        raise
    finally:
        (log or _NULL_LOG).record({
            "purpose": purpose,
            "prompt_digest": digest,
            "backend": backend.identity,
            "duration_ms": round((time.monotonic() - started) * 1000, 3),
            "status": status,
        })


_NULL_LOG = ExtractionLog(None)
