"""Prompt templates and the structured-response parser.

Templates live as text assets in ``memwalker/templates``. Setting
``MEMWALKER_TEMPLATE_DIR`` (or ``Config.template_dir``) points at a directory
whose files of the same names replace the shipped ones.
"""

from __future__ import annotations

import os
import re
import string
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

from .core import COMMIT_CODE, REVERT_CODE, Action, Commit, Descend, Revert
from .errors import InvalidInput, ParseError

TEMPLATE_DIR_ENV = "MEMWALKER_TEMPLATE_DIR"
KINDS = ("construction_leaf", "construction_nonleaf", "triage", "leaf", "recurrence_summary")
EMPTY_MEMORY = "None."
DELIMITER = "#" * 35

_PLACEHOLDER = re.compile(r"\[([A-Z][A-Z_0-9]*)\]")
# format/instruction lines dropped when reasoning is disabled
_REASONING_LINES = (
    "First provide reasoning to compare the summaries before you make the decision.",
    "Reasoning: ...",
)


@lru_cache(maxsize=None)
def _read_template(kind: str, override_dir: str | None) -> str:
    if kind not in KINDS:
        raise InvalidInput(f"unknown template {kind!r}")
    if override_dir:
        candidate = Path(override_dir) / f"{kind}.txt"
        if candidate.is_file():
            return candidate.read_text("utf-8").rstrip("\n")
    return resources.files("memwalker.templates").joinpath(f"{kind}.txt").read_text("utf-8").rstrip("\n")


def load_template(kind: str, template_dir: str | None = None) -> str:
    return _read_template(kind, template_dir or os.environ.get(TEMPLATE_DIR_ENV))


def fill(template: str, values: Mapping[str, str]) -> str:
    """Substitute ``[NAME]`` placeholders in one pass.

    Placeholder-like text inside substituted values is left alone; a
    placeholder in the template without a value is an error.
    """
    missing = [name for name in _PLACEHOLDER.findall(template) if name not in values]
    if missing:
        raise InvalidInput(f"unresolved placeholders: {sorted(set(missing))}")
    return _PLACEHOLDER.sub(lambda m: values[m.group(1)], template)


def _drop_lines(template: str, lines: Sequence[str]) -> str:
    return "\n".join(line for line in template.split("\n") if line not in lines)


def format_options(options: Sequence[str] | Mapping[str, str]) -> str:
    """Render choices one per line as ``(A) text``."""
    if isinstance(options, Mapping):
        items = list(options.items())
    else:
        items = list(zip(string.ascii_uppercase, options))
    return "\n".join(f"({label}) {text}" for label, text in items)


def render_construction_leaf(segment_text: str, template_dir: str | None = None) -> str:
    if not segment_text:
        raise InvalidInput("segment text is empty")
    return fill(load_template("construction_leaf", template_dir), {"TEXT_OF_SEGMENT": segment_text})


def render_construction_nonleaf(summaries: Sequence[str], template_dir: str | None = None) -> str:
    if not summaries:
        raise InvalidInput("need at least one summary to compress")
    return fill(
        load_template("construction_nonleaf", template_dir), {"SUMMARIES": "\n".join(summaries)}
    )


def render_triage(
    query: str,
    child_summaries: Sequence[str],
    options=None,
    reasoning_enabled: bool = True,
    faithful: bool = True,
    template_dir: str | None = None,
) -> str:
    """Non-leaf prompt listing each child as ``Summary i: ...``.

    ``options`` is accepted for signature symmetry with :func:`render_leaf`
    but the triage template shows only the question.
    """
    if len(child_summaries) < 2:
        raise InvalidInput("triage needs at least two child summaries")
    template = load_template("triage", template_dir)
    if not reasoning_enabled:
        template = _drop_lines(template, _REASONING_LINES)
    if not faithful:
        template = template.replace("Relpy with", "Reply with")
    listing = "\n".join(f"Summary {i}: {s}" for i, s in enumerate(child_summaries))
    return fill(template, {"QUERY": query, "CHILD_SUMMARIES": listing})


def render_leaf(
    query: str,
    segment_text: str,
    options=None,
    working_memory: str | None = None,
    reasoning_enabled: bool = True,
    show_background: bool = True,
    template_dir: str | None = None,
) -> str:
    """Leaf prompt: background (working memory), main text, question, options.

    Without options the options line disappears and the answer hint is
    ``...``; with options it is ``(A) ...``. ``show_background=False`` drops
    the background line entirely (used by the single-shot baselines).
    """
    if not segment_text:
        raise InvalidInput("segment text is empty")
    template = load_template("leaf", template_dir)
    if not reasoning_enabled:
        template = _drop_lines(template, _REASONING_LINES)
    if not show_background:
        template = "\n".join(
            line for line in template.split("\n") if "[WORKING_MEMORY]" not in line
        )
    if not options:
        template = _drop_lines(template, ("[OPTIONS]",))
    return fill(
        template,
        {
            "WORKING_MEMORY": working_memory or EMPTY_MEMORY,
            "TEXT_OF_SEGMENT": segment_text,
            "QUERY": query,
            "OPTIONS": format_options(options) if options else "",
            "ANSWER_HINT": "(A) ..." if options else "...",
        },
    )


def render_recurrence_summary(
    previous_summary: str | None, segment_text: str, query: str, template_dir: str | None = None
) -> str:
    if not segment_text:
        raise InvalidInput("segment text is empty")
    return fill(
        load_template("recurrence_summary", template_dir),
        {
            "SUMMARY": previous_summary or EMPTY_MEMORY,
            "TEXT_OF_SEGMENT": segment_text,
            "QUERY": query,
        },
    )


# -- parsing ----------------------------------------------------------------


@dataclass(frozen=True)
class ParsedResponse:
    action: Action
    reasoning: str | None = None

    @property
    def answer(self) -> str | None:
        return self.action.answer if isinstance(self.action, Commit) else None


_ACTION = re.compile(r"^[ \t]*\**Action\**[ \t]*:\**[ \t]*(-?\d+)\b", re.MULTILINE | re.IGNORECASE)
_ANSWER = re.compile(r"^[ \t]*\**Answer\**[ \t]*:\**", re.MULTILINE | re.IGNORECASE)
_REASONING = re.compile(r"^[ \t]*\**Reasoning\**[ \t]*:\**", re.MULTILINE | re.IGNORECASE)


def extract_answer(raw: str) -> str | None:
    """Text after the last ``Answer:`` marker up to a delimiter line or the end."""
    matches = list(_ANSWER.finditer(raw))
    if not matches:
        return None
    body = []
    for i, line in enumerate(raw[matches[-1].end() :].split("\n")):
        stripped = line.strip()
        if stripped.startswith("###") or (i > 0 and _ACTION.match(line)):
            break
        body.append(line)
    answer = "\n".join(body).strip()
    return answer or None


def parse_response(raw: str, node_kind: str, num_children: int = 0) -> ParsedResponse:
    """Decode an LLM reply into an action legal at the current node.

    ``node_kind`` is ``"leaf"`` or ``"non_leaf"``. The last ``Action:`` line
    wins, so an echoed format block earlier in the reply is ignored.
    """
    if node_kind not in ("leaf", "non_leaf"):
        raise InvalidInput(f"unknown node kind {node_kind!r}")
    actions = list(_ACTION.finditer(raw))
    if not actions:
        raise ParseError("no Action line")
    last = actions[-1]
    code = int(last.group(1))

    reasoning = None
    reasons = [m for m in _REASONING.finditer(raw) if m.start() < last.start()]
    if reasons:
        reasoning = raw[reasons[-1].end() : last.start()].strip() or None

    if code == REVERT_CODE:
        action: Action = Revert()
    elif code == COMMIT_CODE:
        if node_kind != "leaf":
            raise ParseError("commit (-2) is only allowed at a leaf")
        answer = extract_answer(raw[last.end() :]) or extract_answer(raw)
        if answer is None:
            raise ParseError("commit without an Answer line")
        action = Commit(answer)
    elif code >= 0:
        if node_kind == "leaf":
            raise ParseError(f"action {code} at a leaf; only -2 or -1 allowed")
        if code >= num_children:
            raise ParseError(f"child {code} out of range for {num_children} children")
        action = Descend(code)
    else:
        raise ParseError(f"unknown action code {code}")
    return ParsedResponse(action=action, reasoning=reasoning)


def format_response(parsed: ParsedResponse) -> str:
    """Inverse of :func:`parse_response` for well-formed replies."""
    lines = []
    if parsed.reasoning is not None:
        lines.append(f"Reasoning: {parsed.reasoning}")
    lines.append(f"Action: {parsed.action.code}")
    if isinstance(parsed.action, Commit):
        lines.append(f"Answer: {parsed.action.answer}")
    return "\n".join(lines)
