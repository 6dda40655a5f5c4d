"""Completion backends: an HTTP chat-completion client and deterministic test doubles.

Every backend enforces the context-window precondition before generating and
records each completion to an optional :class:`TraceLog`.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable

import httpx

from .config import Config, Sampling
from .errors import BudgetError, EndpointError, InvalidInput, ScriptExhausted, ScriptMismatch
from .tokenization import Tokenizer, count_tokens, get_tokenizer

log = logging.getLogger(__name__)

API_BASE_ENV = "MEMWALKER_API_BASE"
API_KEY_ENV = "MEMWALKER_API_KEY"
SYSTEM_MESSAGE = "You are a helpful assistant."


@dataclass(frozen=True)
class CompletionRequest:
    prompt: str
    sampling: Sampling
    tag: str = ""


@dataclass
class TraceRecord:
    tag: str
    prompt: str
    response: str
    prompt_tokens: int
    completion_tokens: int
    timestamp: float
    latency: float = 0.0


class TraceLog:
    """Append-only log of completions, mirrored to a JSONL file when ``path`` is set."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self.records: list[TraceRecord] = []
        self._lock = threading.Lock()

    def append(self, record: TraceRecord) -> None:
        with self._lock:
            self.records.append(record)
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(asdict(record), ensure_ascii=False) + "\n")

    @staticmethod
    def read(path: str | Path) -> list[TraceRecord]:
        with open(path, encoding="utf-8") as fh:
            return [TraceRecord(**json.loads(line)) for line in fh if line.strip()]


def remaining_budget(
    prompt: str,
    context_window: int,
    generation_reserve: int,
    tokenizer: Tokenizer | None = None,
) -> int:
    return max(0, context_window - count_tokens(prompt, tokenizer) - generation_reserve)


class Backend:
    """Base class; subclasses implement :meth:`_generate`."""

    concurrent_safe = True

    def __init__(
        self,
        context_window: int = 4096,
        tokenizer: Tokenizer | None = None,
        trace: TraceLog | None = None,
        clock: Callable[[], float] = time.time,
    ):
        self.context_window = context_window
        self.tokenizer = tokenizer or get_tokenizer()
        self.trace = trace
        self.clock = clock
        self.calls = 0

    @classmethod
    def for_config(cls, config: Config, **kwargs):
        kwargs.setdefault("context_window", config.context_window)
        kwargs.setdefault("tokenizer", get_tokenizer(config.tokenizer))
        return cls(**kwargs)

    def complete(self, request: CompletionRequest) -> str:
        prompt_tokens = count_tokens(request.prompt, self.tokenizer)
        if prompt_tokens + request.sampling.max_new_tokens > self.context_window:
            raise BudgetError(
                f"{request.tag or 'request'}: {prompt_tokens} prompt tokens + "
                f"{request.sampling.max_new_tokens} new tokens exceed window {self.context_window}"
            )
        started = time.perf_counter()
        response = self._generate(request)
        latency = time.perf_counter() - started
        self.calls += 1
        if self.trace is not None:
            self.trace.append(
                TraceRecord(
                    tag=request.tag,
                    prompt=request.prompt,
                    response=response,
                    prompt_tokens=prompt_tokens,
                    completion_tokens=count_tokens(response, self.tokenizer),
                    timestamp=self.clock(),
                    latency=latency,
                )
            )
        return response

    def _generate(self, request: CompletionRequest) -> str:
        raise NotImplementedError


@dataclass
class ScriptEntry:
    response: str
    match: str | None = None


class ScriptedBackend(Backend):
    """Plays back a fixed list of responses, in order.

    An entry with ``match`` set asserts that the prompt contains that
    substring; a mismatch raises :class:`ScriptMismatch` instead of skipping.
    """

    concurrent_safe = False

    def __init__(self, script: Iterable[ScriptEntry | str | tuple], **kwargs):
        super().__init__(**kwargs)
        self.script = [_entry(e) for e in script]
        self.cursor = 0
        self._busy = threading.Lock()

    @property
    def exhausted(self) -> bool:
        return self.cursor >= len(self.script)

    def _generate(self, request: CompletionRequest) -> str:
        if not self._busy.acquire(blocking=False):
            raise RuntimeError("ScriptedBackend does not support concurrent requests")
        try:
            if self.cursor >= len(self.script):
                raise ScriptExhausted(f"script exhausted after {self.cursor} responses ({request.tag})")
            entry = self.script[self.cursor]
            if entry.match is not None and entry.match not in request.prompt:
                raise ScriptMismatch(
                    f"script entry {self.cursor} expects {entry.match!r} in the {request.tag or 'prompt'} prompt"
                )
            self.cursor += 1
            return entry.response
        finally:
            self._busy.release()

    @classmethod
    def from_file(cls, path: str | Path, **kwargs) -> "ScriptedBackend":
        """Load a JSONL script.

        Lines are either ``{"response": ..., "match": ...}`` or trace records
        (``{"prompt": ..., "response": ...}``); a trace record's full prompt
        becomes its matcher, so replaying a trace is strict.
        """
        entries = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    entries.append(ScriptEntry(rec["response"], rec.get("match", rec.get("prompt"))))
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise InvalidInput(f"{path}:{lineno}: bad script line ({exc})") from None
        return cls(entries, **kwargs)

    @classmethod
    def from_trace(cls, records: Iterable[TraceRecord], **kwargs) -> "ScriptedBackend":
        return cls([ScriptEntry(r.response, r.prompt) for r in records], **kwargs)


def _entry(item) -> ScriptEntry:
    if isinstance(item, ScriptEntry):
        return item
    if isinstance(item, str):
        return ScriptEntry(item)
    match, response = item
    return ScriptEntry(response, match)


class CallableBackend(Backend):
    """Answers each request with ``fn(request)``; handy for synthetic runs."""

    def __init__(self, fn: Callable[[CompletionRequest], str], concurrent_safe: bool = False, **kwargs):
        super().__init__(**kwargs)
        self.fn = fn
        self.concurrent_safe = concurrent_safe

    def _generate(self, request: CompletionRequest) -> str:
        return self.fn(request)


class HTTPBackend(Backend):
    """OpenAI-style ``/chat/completions`` client.

    The whole prompt goes in a single user message after a fixed system
    message. Transport errors and 5xx/429 responses are retried with
    exponential backoff; anything else fails immediately.
    """

    def __init__(
        self,
        api_base: str | None = None,
        api_key: str | None = None,
        model: str = "stabilityai/StableBeluga2",
        seed: int | None = None,
        max_retries: int = 3,
        backoff: float = 1.0,
        timeout: float = 120.0,
        client: httpx.Client | None = None,
        **kwargs,
    ):
        super().__init__(**kwargs)
        self.api_base = (api_base or os.environ.get(API_BASE_ENV, "")).rstrip("/")
        if not self.api_base:
            raise EndpointError(f"no endpoint configured; set {API_BASE_ENV}")
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.model = model
        self.seed = seed
        self.max_retries = max_retries
        self.backoff = backoff
        self.client = client or httpx.Client(timeout=timeout)

    @classmethod
    def for_config(cls, config: Config, **kwargs):
        kwargs.setdefault("model", config.model)
        kwargs.setdefault("seed", config.seed)
        return super().for_config(config, **kwargs)

    def _payload(self, request: CompletionRequest) -> dict:
        payload = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": SYSTEM_MESSAGE},
                {"role": "user", "content": request.prompt},
            ],
            "temperature": request.sampling.temperature,
            "top_p": request.sampling.top_p,
            "max_tokens": request.sampling.max_new_tokens,
        }
        if self.seed is not None:
            payload["seed"] = self.seed
        return payload

    def _generate(self, request: CompletionRequest) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        url = f"{self.api_base}/chat/completions"
        last: Exception | None = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self.client.post(url, json=self._payload(request), headers=headers)
            except httpx.TransportError as exc:
                last = exc
                log.warning("transport error on %s (attempt %d): %s", request.tag, attempt + 1, exc)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = EndpointError(f"HTTP {resp.status_code}")
                log.warning("HTTP %d on %s (attempt %d)", resp.status_code, request.tag, attempt + 1)
                continue
            if resp.status_code != 200:
                raise EndpointError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise EndpointError(f"unexpected response body: {exc}") from None
        raise EndpointError(f"giving up after {self.max_retries + 1} attempts: {last}")


def backend_from_arg(arg: str, config: Config, trace: TraceLog | None = None) -> Backend:
    """Build a backend from a CLI argument: ``http`` or ``scripted:<file>``."""
    if arg == "http":
        return HTTPBackend.for_config(config, trace=trace)
    if arg.startswith("scripted:"):
        return ScriptedBackend.from_file(
            arg.split(":", 1)[1],
            context_window=config.context_window,
            tokenizer=get_tokenizer(config.tokenizer),
            trace=trace,
        )
    raise InvalidInput(f"unknown backend {arg!r}; use 'http' or 'scripted:<file>'")
