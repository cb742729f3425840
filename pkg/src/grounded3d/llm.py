"""Text-completion client with an on-disk record/replay cache.

Three modes:

* ``live``: chat-completion over HTTP; every response is written to the store.
* ``replay``: answers only from the store; a miss raises :class:`ReplayMiss`
  (or falls back to the deterministic composer if ``fallback_on_miss``).
* ``fallback``: never touches the network or the store; the caller-supplied
  deterministic composer produces the text.
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
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from typing import Callable, Mapping

import httpx

log = logging.getLogger(__name__)

MODES = ("live", "replay", "fallback")
DEFAULT_ENDPOINT = "https://api.openai.com/v1/chat/completions"
DEFAULT_MODEL = "gpt-4"
API_KEY_ENV = "GROUNDED3D_API_KEY"

_PLACEHOLDER = re.compile(r"\{([A-Za-z][A-Za-z0-9_ ]*)\}")


class LLMError(RuntimeError):
    pass


class ReplayMiss(LLMError):
    def __init__(self, request_hash: str, name: str):
        super().__init__(f"no recorded response for prompt {name!r} (request hash {request_hash})")
        self.request_hash = request_hash


class UnboundPlaceholder(KeyError):
    def __init__(self, name: str):
        super().__init__(name)
        self.name = name

    def __str__(self) -> str:
        return f"placeholder {{{self.name}}} has no binding"


@dataclass(frozen=True)
class PromptSpec:
    name: str
    system: str
    user_template: str

    @property
    def placeholders(self) -> list[str]:
        seen: list[str] = []
        for m in _PLACEHOLDER.finditer(self.system + "\n" + self.user_template):
            if m.group(1) not in seen:
                seen.append(m.group(1))
        return seen

    @classmethod
    def from_json(cls, data: Mapping) -> "PromptSpec":
        return cls(data["name"], data.get("system", ""), data["user"])

    @classmethod
    def builtin(cls, name: str) -> "PromptSpec":
        text = resources.files("grounded3d").joinpath("data", "prompts", f"{name}.json").read_text("utf-8")
        return cls.from_json(json.loads(text))

    @classmethod
    def load(cls, path: str | Path) -> "PromptSpec":
        return cls.from_json(json.loads(Path(path).read_text("utf-8")))


def _substitute(template: str, bindings: Mapping[str, str]) -> str:
    def repl(m: re.Match) -> str:
        key = m.group(1)
        if key not in bindings:
            raise UnboundPlaceholder(key)
        return str(bindings[key])

    return _PLACEHOLDER.sub(repl, template)


def render_prompt(spec: PromptSpec, bindings: Mapping[str, str]) -> str:
    """Resolve the user template; bound values are inserted verbatim."""
    return _substitute(spec.user_template, bindings)


def render_system(spec: PromptSpec, bindings: Mapping[str, str]) -> str:
    return _substitute(spec.system, bindings)


def request_hash(name: str, system: str, prompt: str) -> str:
    payload = json.dumps({"name": name, "system": system, "prompt": prompt},
                         sort_keys=True, ensure_ascii=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Exchange:
    request_hash: str
    name: str
    system: str
    prompt: str
    response: str
    timestamp: str

    def to_json(self) -> dict:
        return {
            "request_hash": self.request_hash,
            "name": self.name,
            "system": self.system,
            "prompt": self.prompt,
            "response": self.response,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "Exchange":
        return cls(**{k: data[k] for k in ("request_hash", "name", "system", "prompt", "response", "timestamp")})


class ReplayStore:
    """One JSON file per request hash. Append-only; writes are serialized."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self._lock = threading.Lock()

    def _path(self, h: str) -> Path:
        return self.directory / f"{h}.json"

    def get(self, h: str) -> Exchange | None:
        p = self._path(h)
        if not p.exists():
            return None
        return Exchange.from_json(json.loads(p.read_text("utf-8")))

    def put(self, exchange: Exchange) -> None:
        with self._lock:
            self.directory.mkdir(parents=True, exist_ok=True)
            p = self._path(exchange.request_hash)
            if p.exists():
                existing = Exchange.from_json(json.loads(p.read_text("utf-8")))
                if existing.response != exchange.response:
                    raise LLMError(f"replay record {exchange.request_hash} already holds a different response")
                return
            tmp = p.with_suffix(".tmp")
            tmp.write_text(json.dumps(exchange.to_json(), sort_keys=True, indent=1), "utf-8")
            os.replace(tmp, p)

    def __len__(self) -> int:
        return len(list(self.directory.glob("*.json"))) if self.directory.exists() else 0


class LLMClient:
    def __init__(
        self,
        mode: str = "fallback",
        store: ReplayStore | None = None,
        *,
        fallback_on_miss: bool = False,
        endpoint: str = DEFAULT_ENDPOINT,
        model: str = DEFAULT_MODEL,
        api_key_env: str = API_KEY_ENV,
        timeout: float = 60.0,
        max_retries: int = 3,
        backoff: float = 1.0,
        max_in_flight: int = 4,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        if mode in ("live", "replay") and store is None:
            raise ValueError(f"{mode} mode needs a replay store")
        self.mode = mode
        self.store = store
        self.fallback_on_miss = fallback_on_miss
        self.endpoint = endpoint
        self.model = model
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._transport = transport
        self._sleep = sleep

    def complete(
        self,
        spec: PromptSpec,
        bindings: Mapping[str, str],
        fallback: Callable[[], str] | None = None,
    ) -> str:
        if self.mode == "fallback":
            return self._fallback(spec, fallback)
        system = render_system(spec, bindings)
        prompt = render_prompt(spec, bindings)
        h = request_hash(spec.name, system, prompt)
        cached = self.store.get(h)
        if cached is not None:
            return cached.response
        if self.mode == "replay":
            if self.fallback_on_miss and fallback is not None:
                return fallback()
            raise ReplayMiss(h, spec.name)
        response = self._call(system, prompt)
        self.store.put(Exchange(h, spec.name, system, prompt, response,
                                datetime.now(timezone.utc).isoformat()))
        return response

    @staticmethod
    def _fallback(spec: PromptSpec, fallback: Callable[[], str] | None) -> str:
        if fallback is None:
            raise LLMError(f"prompt {spec.name!r} has no deterministic fallback")
        return fallback()

    def _call(self, system: str, prompt: str) -> str:
        key = os.environ.get(self.api_key_env)
        if not key:
            raise LLMError(f"live mode needs an API key in ${self.api_key_env}")
        body = {
            "model": self.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": prompt},
            ],
        }
        headers = {"Authorization": f"Bearer {key}"}
        last: Exception | None = None
        with self._slots, httpx.Client(timeout=self.timeout, transport=self._transport) as http:
            for attempt in range(self.max_retries + 1):
                try:
                    r = http.post(self.endpoint, json=body, headers=headers)
                    if r.status_code == 429 or r.status_code >= 500:
                        raise LLMError(f"HTTP {r.status_code}")
                    r.raise_for_status()
                    return r.json()["choices"][0]["message"]["content"]
                except (httpx.HTTPError, LLMError, KeyError, ValueError) as exc:
                    last = exc
                    if attempt < self.max_retries:
                        delay = self.backoff * 2 ** attempt
                        log.warning("completion attempt %d failed (%s); retrying in %.1fs", attempt + 1, exc, delay)
                        self._sleep(delay)
        raise LLMError(f"completion failed after {self.max_retries + 1} attempts: {last}")
