"""Query-time navigation of a memory tree.

The navigator starts at the root, shows the LLM the children's summaries
(triage) or a leaf's segment (leaf prompt), and follows the parsed action:
descend into a child, revert to the parent, or commit an answer at a leaf.
Unparsable or illegal replies are regenerated; ``max_invalid_streak`` of
them in a row end the run with "no answer".
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .backend import Backend, CompletionRequest
from .config import Config
from .core import Commit, Descend, MemoryTree, Revert
from .errors import BudgetError, InvalidInput, ParseError
from .prompts import parse_response, render_leaf, render_triage
from .tokenization import Tokenizer, count_tokens, get_tokenizer, truncate

MEMORY_JOINER = "\n"

NO_ANSWER = "no answer"


@dataclass(frozen=True)
class MemoryEntry:
    node_id: str
    text: str
    tokens: int


@dataclass
class TrajectoryStep:
    index: int
    node_id: str
    kind: str  # "triage" or "leaf"
    dynamic_tokens: int
    response: str
    action: int | None  # child ordinal, -1 revert, -2 commit; None when invalid
    answer: str | None = None
    error: str | None = None
    transition: str = ""
    timestamp: float = 0.0
    # per-part token counts, used by the unique-content accounting
    parts: list[list] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrajectoryStep":
        return cls(**data)


@dataclass
class TraceMetrics:
    strayed: bool
    tokens_processed: int
    fraction_of_original: float
    steps: int
    tokens_processed_unique: int = 0
    recovered: bool | None = None


@dataclass
class NavigationResult:
    answer: str | None
    reason: str | None  # None when answered, else "invalid_streak" or "step_limit"
    trajectory: list[TrajectoryStep]
    metrics: TraceMetrics

    @property
    def answered(self) -> bool:
        return self.answer is not None


@dataclass
class NavigationState:
    path: list[str]
    working_memory: list[MemoryEntry] = field(default_factory=list)
    invalid_streak: int = 0
    steps_taken: int = 0
    trajectory: list[TrajectoryStep] = field(default_factory=list)

    @property
    def current_node(self) -> str:
        return self.path[-1]


def memory_tokens(memory: Sequence[MemoryEntry]) -> int:
    return sum(e.tokens for e in memory)


def update_working_memory(
    memory: Sequence[MemoryEntry], entry: MemoryEntry, budget: int
) -> list[MemoryEntry]:
    """Append ``entry`` and evict the oldest entries until the total fits ``budget``."""
    if budget < 0:
        raise InvalidInput("budget must be >= 0")
    out = list(memory) + [entry]
    while out and memory_tokens(out) > budget:
        out.pop(0)
    return out


def revert_working_memory(memory: Sequence[MemoryEntry], node_id: str) -> list[MemoryEntry]:
    """Drop whatever the abandoned node contributed."""
    return [e for e in memory if e.node_id != node_id]


def compute_trace_metrics(trajectory: Sequence[TrajectoryStep], original_tokens: int) -> TraceMetrics:
    """Fold a stored trajectory into its token and stray statistics."""
    if not trajectory:
        raise InvalidInput("empty trajectory")
    total = sum(s.dynamic_tokens for s in trajectory)
    seen: dict[tuple[str, str], int] = {}
    for step in trajectory:
        for key, tokens in step.parts:
            seen[(step.node_id, key)] = max(seen.get((step.node_id, key), 0), tokens)
    strayed = any(s.action == -1 for s in trajectory)
    return TraceMetrics(
        strayed=strayed,
        tokens_processed=total,
        fraction_of_original=total / original_tokens if original_tokens else 0.0,
        steps=len(trajectory),
        tokens_processed_unique=sum(seen.values()),
    )


class Navigator:
    def __init__(
        self,
        tree: MemoryTree,
        backend: Backend,
        config: Config | None = None,
        clock: Callable[[], float] = time.time,
    ):
        self.tree = tree
        self.backend = backend
        self.config = config or tree.config
        self.tokenizer: Tokenizer = get_tokenizer(self.config.tokenizer)
        self.clock = clock
        self.max_steps = self.config.max_steps_for(len(tree.nodes))
        self.wm_budget = self.config.effective_working_memory_budget
        self.prompt_room = self.config.context_window - self.config.generation_reserve

    # -- prompt assembly ----------------------------------------------------

    def _count(self, text: str) -> int:
        return count_tokens(text, self.tokenizer)

    def _triage_prompt(self, query, options, nid) -> tuple[str, list]:
        cfg = self.config
        summaries = [c.summary for c in self.tree.children(nid)]
        render = lambda ss: render_triage(
            query, ss, options, cfg.reasoning_enabled, cfg.faithful_prompts, cfg.template_dir
        )
        prompt = render(summaries)
        if self._count(prompt) > self.prompt_room:
            # shrink every child summary to an equal share
            empty = self._count(render(["" for _ in summaries]))
            share = (self.prompt_room - empty) // len(summaries)
            if share < 1:
                raise BudgetError("query alone leaves no room for child summaries")
            summaries = [truncate(s, share, "keep_left", self.tokenizer) for s in summaries]
            prompt = render(summaries)
        parts = [[self.tree.children(nid)[i].id, self._count(s)] for i, s in enumerate(summaries)]
        return prompt, parts

    def _leaf_prompt(self, query, options, nid, memory: Sequence[MemoryEntry]) -> tuple[str, list]:
        cfg = self.config
        segment = self.tree.segment_of(nid).text.strip()
        shown = [e for e in memory if e.node_id != nid]
        wm = MEMORY_JOINER.join(e.text for e in shown)
        render = lambda w, s: render_leaf(
            query, s, options, w or None, cfg.reasoning_enabled, True, cfg.template_dir
        )
        prompt = render(wm, segment)
        if self._count(prompt) > self.prompt_room:
            fixed = self._count(render("", "x")) - 1
            room = self.prompt_room - fixed - self._count(segment)
            wm = truncate(wm, max(0, room), "keep_right", self.tokenizer)
            prompt = render(wm, segment)
            if self._count(prompt) > self.prompt_room:
                fixed = self._count(render(wm, "x")) - 1
                seg_room = self.prompt_room - fixed
                if seg_room < 1:
                    raise BudgetError("query alone leaves no room for the segment")
                segment = truncate(segment, seg_room, "keep_left", self.tokenizer)
                prompt = render(wm, segment)
        parts = [["segment", self._count(segment)], ["memory", self._count(wm)]]
        return prompt, parts

    # -- main loop ------------------------------------------------------------

    def navigate(self, query: str, options=None) -> NavigationResult:
        if not query or not query.strip():
            raise InvalidInput("query is empty")
        cfg = self.config
        tree = self.tree
        state = NavigationState(path=[tree.root_id])
        answer: str | None = None
        reason: str | None = None

        while True:
            nid = state.current_node
            node = tree.node(nid)
            if len(node.children) == 1:
                # a single child offers no choice: enter it without prompting
                child = node.children[0]
                state.path.append(child)
                self._remember(state, child)
                continue
            if state.steps_taken >= self.max_steps:
                reason = "step_limit"
                break

            kind = "leaf" if node.is_leaf else "triage"
            if node.is_leaf:
                prompt, parts = self._leaf_prompt(query, options, nid, state.working_memory)
            else:
                prompt, parts = self._triage_prompt(query, options, nid)
            if self._count(prompt) + cfg.generation_reserve > cfg.context_window:
                raise BudgetError(f"prompt at {nid} exceeds the context window")

            raw = self.backend.complete(CompletionRequest(prompt, cfg.sampling, kind))
            state.steps_taken += 1
            step = TrajectoryStep(
                index=len(state.trajectory),
                node_id=nid,
                kind=kind,
                dynamic_tokens=sum(t for _, t in parts),
                response=raw,
                action=None,
                timestamp=self.clock(),
                parts=parts,
            )
            state.trajectory.append(step)

            try:
                parsed = parse_response(raw, "leaf" if node.is_leaf else "non_leaf", len(node.children))
                if isinstance(parsed.action, Revert) and len(state.path) == 1:
                    raise ParseError("revert at the root")
            except ParseError as exc:
                step.error = str(exc)
                step.transition = "invalid"
                state.invalid_streak += 1
                if state.invalid_streak >= cfg.max_invalid_streak:
                    reason = "invalid_streak"
                    break
                continue

            state.invalid_streak = 0
            action = parsed.action
            step.action = action.code
            if isinstance(action, Commit):
                step.answer = action.answer
                step.transition = "commit"
                answer = action.answer
                break
            if isinstance(action, Descend):
                child = node.children[action.child_ordinal]
                state.path.append(child)
                self._remember(state, child)
                step.transition = f"enter {child}"
            else:
                self._revert(state)
                step.transition = f"revert to {state.current_node}"

        metrics = compute_trace_metrics(state.trajectory, tree.source_tokens) if state.trajectory else TraceMetrics(
            strayed=False, tokens_processed=0, fraction_of_original=0.0, steps=0
        )
        self.state = state
        return NavigationResult(answer=answer, reason=reason, trajectory=state.trajectory, metrics=metrics)

    def _remember(self, state: NavigationState, nid: str) -> None:
        text = self.tree.node(nid).summary
        entry = MemoryEntry(nid, text, self._count(text))
        state.working_memory = update_working_memory(state.working_memory, entry, self.wm_budget)

    def _revert(self, state: NavigationState) -> None:
        # climb out of the abandoned node, and past any single-child parents
        # that would otherwise auto-descend straight back into it
        while True:
            left = state.path.pop()
            state.working_memory = revert_working_memory(state.working_memory, left)
            if len(state.path) == 1 or len(self.tree.node(state.current_node).children) > 1:
                return


def navigate(
    tree: MemoryTree,
    query: str,
    backend: Backend,
    config: Config | None = None,
    options=None,
    clock: Callable[[], float] = time.time,
) -> NavigationResult:
    return Navigator(tree, backend, config, clock).navigate(query, options)


def write_trajectory(path: str | Path, trajectory: Sequence[TrajectoryStep]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for step in trajectory:
            fh.write(json.dumps(step.to_dict(), ensure_ascii=False) + "\n")


def read_trajectory(path: str | Path) -> list[TrajectoryStep]:
    with open(path, encoding="utf-8") as fh:
        return [TrajectoryStep.from_dict(json.loads(line)) for line in fh if line.strip()]


def render_transcript(trajectory: Sequence[TrajectoryStep]) -> str:
    """Plain-text transcript of a trajectory, one block per prompted step."""
    rule = "-" * 72
    lines = []
    for step in trajectory:
        lines.append(rule)
        lines.append(f"[{step.index + 1}] {step.node_id} ({step.kind} prompt, {step.dynamic_tokens} tokens)")
        lines.append("Response:")
        lines.extend("  " + line for line in step.response.strip().split("\n"))
        if step.error:
            lines.append(f"=> invalid: {step.error}")
        else:
            lines.append(f"=> action {step.action}: {step.transition}")
    lines.append(rule)
    last = trajectory[-1] if trajectory else None
    if last is not None and last.transition == "commit":
        lines.append(f"Answer: {last.answer}")
    else:
        lines.append(f"Answer: {NO_ANSWER}")
    strayed = any(s.action == -1 for s in trajectory)
    lines.append(f"Steps: {len(trajectory)}  Strayed: {'yes' if strayed else 'no'}")
    return "\n".join(lines) + "\n"
