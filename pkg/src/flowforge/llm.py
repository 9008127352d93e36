"""Chat-completion clients: an OpenAI-compatible HTTP client and a
deterministic scripted mock, sharing a contention-safe cost ledger."""

from __future__ import annotations

import logging
import os
import threading
from dataclasses import dataclass
from typing import Any, Mapping, Protocol

import requests
import yaml

from .errors import IoError, LlmError

logger = logging.getLogger(__name__)

API_KEY_ENV = "FLOWFORGE_API_KEY"
ROLES = ("system", "user", "assistant")


@dataclass(frozen=True)
class Message:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role {self.role!r} not in {ROLES}")


@dataclass(frozen=True)
class CompletionRequest:
    model: str
    messages: tuple[Message, ...]
    temperature: float = 0.0
    max_tokens: int = 4096
    seed: int | None = None
    #: Routing key for the scripted mock ("<query>/round<j>/<node>"); the
    #: HTTP client ignores it.
    tag: str = ""

    def __post_init__(self):
        if not self.messages:
            raise ValueError("at least one message required")
        if not 0 <= self.temperature <= 2:
            raise ValueError(f"temperature {self.temperature} outside [0, 2]")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")


@dataclass(frozen=True)
class UsageRecord:
    prompt_tokens: int
    completion_tokens: int
    cost: float

    def __post_init__(self):
        if self.prompt_tokens < 0 or self.completion_tokens < 0 or self.cost < 0:
            raise ValueError("usage fields must be nonnegative")


ZERO_USAGE = UsageRecord(0, 0, 0.0)


@dataclass(frozen=True)
class ModelRates:
    """Cost per 1000 tokens, in configured currency units."""

    prompt: float = 0.0
    completion: float = 0.0


class CostLedger:
    """Linearizable accumulator of usage records."""

    def __init__(self):
        self._lock = threading.Lock()
        self._records: list[UsageRecord] = []

    def record(self, usage: UsageRecord) -> None:
        with self._lock:
            self._records.append(usage)

    def total_cost(self) -> float:
        with self._lock:
            return sum(r.cost for r in self._records)

    def __len__(self) -> int:
        with self._lock:
            return len(self._records)


def compute_cost(model: str, prompt_tokens: int, completion_tokens: int,
                 rates: Mapping[str, ModelRates]) -> float:
    spec = rates.get(model)
    if spec is None:
        logger.warning("no rates configured for model %r; costing 0", model)
        return 0.0
    return prompt_tokens / 1000 * spec.prompt + completion_tokens / 1000 * spec.completion


class ModelClient(Protocol):
    def complete(self, req: CompletionRequest) -> tuple[str, UsageRecord]: ...

    def total_cost(self) -> float: ...


class HttpModelClient:
    """OpenAI-compatible ``POST /v1/chat/completions`` client. Never retries
    on non-transport errors; transport retries belong to the caller."""

    def __init__(self, endpoint: str, rates: Mapping[str, ModelRates] | None = None,
                 api_key: str | None = None, timeout_s: float = 60.0,
                 ledger: CostLedger | None = None):
        self.endpoint = endpoint.rstrip("/")
        self.rates = dict(rates or {})
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        self.timeout_s = timeout_s
        self.ledger = ledger or CostLedger()

    def complete(self, req: CompletionRequest) -> tuple[str, UsageRecord]:
        body: dict[str, Any] = {
            "model": req.model,
            "messages": [{"role": m.role, "content": m.content} for m in req.messages],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        }
        if req.seed is not None:
            body["seed"] = req.seed
        try:
            resp = requests.post(
                f"{self.endpoint}/v1/chat/completions",
                json=body,
                headers={"Authorization": f"Bearer {self.api_key}"},
                timeout=self.timeout_s,
            )
        except requests.RequestException as exc:
            raise LlmError("transport", str(exc)) from exc
        if resp.status_code in (401, 403):
            raise LlmError("auth", f"HTTP {resp.status_code}: {resp.text[:200]}")
        if resp.status_code == 429:
            raise LlmError("rate-limit", resp.text[:200])
        if resp.status_code >= 400:
            raise LlmError("transport", f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            payload = resp.json()
            text = payload["choices"][0]["message"]["content"]
            usage = payload.get("usage") or {}
            pt = int(usage.get("prompt_tokens", 0))
            ct = int(usage.get("completion_tokens", 0))
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise LlmError("malformed-response", str(exc)) from exc
        record = UsageRecord(pt, ct, compute_cost(req.model, pt, ct, self.rates))
        self.ledger.record(record)
        return text, record

    def total_cost(self) -> float:
        return self.ledger.total_cost()


@dataclass(frozen=True)
class ScriptedResponse:
    content: str
    prompt_tokens: int = 0
    completion_tokens: int = 0


class MockModelClient:
    """Deterministic scripted client keyed by request tag, with an optional
    ``default`` fallback entry."""

    DEFAULT_KEY = "default"

    def __init__(self, script: Mapping[str, ScriptedResponse],
                 rates: Mapping[str, ModelRates] | None = None,
                 ledger: CostLedger | None = None):
        self.script = dict(script)
        self.rates = dict(rates or {})
        self.ledger = ledger or CostLedger()

    @classmethod
    def from_file(cls, path: str, rates: Mapping[str, ModelRates] | None = None,
                  ledger: CostLedger | None = None) -> "MockModelClient":
        try:
            with open(path, encoding="utf-8") as handle:
                doc = yaml.safe_load(handle)
        except (OSError, yaml.YAMLError) as exc:
            raise IoError(f"cannot load mock script {path!r}: {exc}") from exc
        if not isinstance(doc, dict) or not isinstance(doc.get("responses"), dict):
            raise IoError(f"mock script {path!r} must be a mapping with a 'responses' key")
        script = {}
        for key, entry in doc["responses"].items():
            if not isinstance(entry, dict) or "content" not in entry:
                raise IoError(f"mock script entry {key!r} must be a mapping with 'content'")
            script[str(key)] = ScriptedResponse(
                content=str(entry["content"]),
                prompt_tokens=int(entry.get("prompt_tokens", 0)),
                completion_tokens=int(entry.get("completion_tokens", 0)),
            )
        return cls(script, rates=rates, ledger=ledger)

    def complete(self, req: CompletionRequest) -> tuple[str, UsageRecord]:
        scripted = self.script.get(req.tag) or self.script.get(self.DEFAULT_KEY)
        if scripted is None:
            raise LlmError("script", f"no scripted response for tag {req.tag!r} and no default")
        record = UsageRecord(
            scripted.prompt_tokens,
            scripted.completion_tokens,
            compute_cost(req.model, scripted.prompt_tokens, scripted.completion_tokens, self.rates),
        )
        self.ledger.record(record)
        return scripted.content, record

    def total_cost(self) -> float:
        return self.ledger.total_cost()
