"""Run configuration and the shipped per-task presets."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from importlib import resources
from pathlib import Path
from typing import Any

from .errors import ConfigError

TASKS = ("quality", "summscreenfd", "govreport")


@dataclass(frozen=True)
class Sampling:
    temperature: float
    top_p: float
    max_new_tokens: int


@dataclass(frozen=True)
class Config:
    """Flat configuration shared by construction, navigation, baselines and evaluation.

    ``summary_budget``, ``working_memory_budget`` and ``max_steps`` may be left
    as ``None`` and are then derived from the other fields (see the
    ``effective_*`` properties).
    """

    task: str = "quality"
    segment_size: int = 1000
    max_fanout: int = 8
    context_window: int = 4096
    generation_reserve: int = 512
    # allowance for template boilerplate plus query and options
    prompt_overhead: int = 384
    summary_budget: int | None = None
    working_memory_budget: int | None = None
    max_invalid_streak: int = 3
    max_steps: int | None = None
    reasoning_enabled: bool = True
    faithful_prompts: bool = True
    temperature: float = 0.7
    top_p: float = 0.9
    max_new_tokens: int = 512
    seed: int | None = None
    model: str = "stabilityai/StableBeluga2"
    tokenizer: str = "whitespace4"
    grouping: str = "greedy"
    recurrence_segment_size: int = 2500
    recurrence_summary_size: int = 500
    retrieval_segment_size: int | None = None
    retrieval_order: str = "score"
    long_threshold: int = 8000
    parallelism: int = 1
    template_dir: str | None = None

    def __post_init__(self) -> None:
        for name in ("segment_size", "max_fanout", "context_window", "max_invalid_streak"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.max_fanout < 2:
            raise ConfigError("max_fanout must be >= 2")
        if self.segment_size + self.generation_reserve + self.prompt_overhead >= self.context_window:
            raise ConfigError(
                "segment_size + generation_reserve + prompt_overhead must be below context_window"
            )
        if self.max_new_tokens > self.generation_reserve:
            raise ConfigError("max_new_tokens cannot exceed generation_reserve")
        if not 0 < self.top_p <= 1 or self.temperature < 0:
            raise ConfigError("sampling needs temperature >= 0 and top_p in (0, 1]")
        if self.effective_summary_budget < 1:
            raise ConfigError("summary budget must be positive")
        if self.grouping not in ("greedy", "balanced"):
            raise ConfigError(f"unknown grouping {self.grouping!r}")
        if self.retrieval_order not in ("score", "document"):
            raise ConfigError(f"unknown retrieval_order {self.retrieval_order!r}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")

    @property
    def sampling(self) -> Sampling:
        return Sampling(self.temperature, self.top_p, self.max_new_tokens)

    @property
    def effective_summary_budget(self) -> int:
        # sized so a triage prompt showing max_fanout children always fits
        if self.summary_budget is not None:
            return self.summary_budget
        free = self.context_window - self.generation_reserve - self.prompt_overhead
        return free // self.max_fanout

    @property
    def effective_working_memory_budget(self) -> int:
        if self.working_memory_budget is not None:
            return self.working_memory_budget
        return (
            self.context_window
            - self.generation_reserve
            - self.prompt_overhead
            - self.segment_size
        )

    @property
    def effective_retrieval_segment_size(self) -> int:
        return self.retrieval_segment_size or self.segment_size

    def max_steps_for(self, node_count: int) -> int:
        return self.max_steps if self.max_steps is not None else 3 * node_count

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Config":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def with_overrides(self, **overrides: Any) -> "Config":
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def load_config(path: str | Path) -> Config:
    with open(path, encoding="utf-8") as fh:
        return Config.from_dict(json.load(fh))


def task_config(task: str) -> Config:
    """Load the shipped preset for one of :data:`TASKS`."""
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")
    text = resources.files("memwalker.configs").joinpath(f"{task}.json").read_text("utf-8")
    return Config.from_dict(json.loads(text))
