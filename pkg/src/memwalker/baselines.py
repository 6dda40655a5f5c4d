"""Comparison systems sharing the same backend: full context, retrieval, recurrence."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import httpx

from .backend import Backend, CompletionRequest
from .config import Config
from .errors import BudgetError, EndpointError
from .prompts import extract_answer, render_leaf, render_recurrence_summary
from .tokenization import Segment, Side, count_tokens, get_tokenizer, split_into_segments, truncate

SEGMENT_JOINER = "\n"
_TERM = re.compile(r"\w+")


@dataclass(frozen=True)
class SegmentScore:
    segment_index: int
    score: float


class Scorer(Protocol):
    def __call__(self, query: str, texts: Sequence[str]) -> list[float]: ...


def terms(text: str) -> list[str]:
    return _TERM.findall(text.lower())


def tfidf_scorer(query: str, texts: Sequence[str]) -> list[float]:
    """Cosine similarity between tf-idf vectors; idf is fitted on ``texts``.

    Uses raw term counts and smoothed idf ``ln((1 + N) / (1 + df)) + 1``.
    """
    docs = [Counter(terms(t)) for t in texts]
    n = len(docs)
    df = Counter(term for d in docs for term in d)
    idf = {t: math.log((1 + n) / (1 + c)) + 1.0 for t, c in df.items()}

    def vector(counts: Counter) -> dict[str, float]:
        return {t: c * idf[t] for t, c in counts.items() if t in idf}

    q = vector(Counter(terms(query)))
    q_norm = math.sqrt(sum(v * v for v in q.values()))
    scores = []
    for d in docs:
        v = vector(d)
        norm = math.sqrt(sum(x * x for x in v.values()))
        if not q_norm or not norm:
            scores.append(0.0)
            continue
        scores.append(sum(w * v.get(t, 0.0) for t, w in q.items()) / (q_norm * norm))
    return scores


class EmbeddingScorer:
    """Dense scorer backed by an OpenAI-style ``/embeddings`` endpoint."""

    def __init__(self, api_base: str, model: str, api_key: str | None = None, client: httpx.Client | None = None):
        self.url = api_base.rstrip("/") + "/embeddings"
        self.model = model
        self.api_key = api_key
        self.client = client or httpx.Client(timeout=60.0)

    def _embed(self, inputs: list[str]) -> list[list[float]]:
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        try:
            resp = self.client.post(self.url, json={"model": self.model, "input": inputs}, headers=headers)
            resp.raise_for_status()
            data = sorted(resp.json()["data"], key=lambda d: d["index"])
        except (httpx.HTTPError, KeyError, ValueError) as exc:
            raise EndpointError(f"embedding request failed: {exc}") from None
        return [d["embedding"] for d in data]

    def __call__(self, query: str, texts: Sequence[str]) -> list[float]:
        vectors = self._embed([query, *texts])
        q = vectors[0]
        qn = math.sqrt(sum(x * x for x in q)) or 1.0
        out = []
        for v in vectors[1:]:
            vn = math.sqrt(sum(x * x for x in v)) or 1.0
            out.append(sum(a * b for a, b in zip(q, v)) / (qn * vn))
        return out


def score_segments(query: str, segments: Sequence[Segment], scorer: Scorer = tfidf_scorer) -> list[SegmentScore]:
    """Scores in descending order; ties go to the earlier segment."""
    if not segments:
        raise ValueError("need at least one segment")
    raw = scorer(query, [s.text for s in segments])
    ranked = [SegmentScore(s.index, float(x)) for s, x in zip(segments, raw)]
    return sorted(ranked, key=lambda r: (-r.score, r.segment_index))


def select_segments(ranking: Sequence[SegmentScore], token_counts: Sequence[int], budget: int) -> list[int]:
    """Take segments in ranking order until the next one would overflow ``budget``."""
    chosen, used = [], 0
    for item in ranking:
        cost = token_counts[item.segment_index]
        if used + cost > budget:
            break
        chosen.append(item.segment_index)
        used += cost
    return chosen


class Baselines:
    def __init__(self, backend: Backend, config: Config, scorer: Scorer = tfidf_scorer):
        self.backend = backend
        self.config = config
        self.scorer = scorer
        self.tokenizer = get_tokenizer(config.tokenizer)
        self.last_prompt: str | None = None
        self.last_selection: list[int] = []
        self.carried_summaries: list[str] = []

    def _count(self, text: str) -> int:
        return count_tokens(text, self.tokenizer)

    def _qa_room(self, query, options, working_memory: str | None = None) -> int:
        cfg = self.config
        show = working_memory is not None
        fixed = self._count(
            render_leaf(query, "x", options, working_memory, cfg.reasoning_enabled, show, cfg.template_dir)
        ) - 1
        room = cfg.context_window - cfg.generation_reserve - fixed
        if room < 1:
            raise BudgetError("question leaves no room for context")
        return room

    def _ask(self, query, options, context: str, working_memory: str | None = None) -> str | None:
        """Issue one QA prompt, regenerating on unparsable replies."""
        cfg = self.config
        show = working_memory is not None
        prompt = render_leaf(
            query, context or "(empty)", options, working_memory, cfg.reasoning_enabled, show, cfg.template_dir
        )
        while self._count(prompt) + cfg.generation_reserve > cfg.context_window:
            # tokenizer boundary slack: trim one more token
            if not self._count(context):
                raise BudgetError("question alone exceeds the context window")
            context = truncate(context, self._count(context) - 1, "keep_left", self.tokenizer)
            prompt = render_leaf(
                query, context or "(empty)", options, working_memory, cfg.reasoning_enabled, show, cfg.template_dir
            )
        self.last_prompt = prompt
        for _ in range(cfg.max_invalid_streak):
            raw = self.backend.complete(CompletionRequest(prompt, cfg.sampling, "qa"))
            answer = extract_answer(raw)
            if answer is not None:
                return answer
        return None

    def full_context(self, document: str, query: str, options=None, side: Side = "keep_left") -> str | None:
        room = self._qa_room(query, options)
        return self._ask(query, options, truncate(document, room, side, self.tokenizer))

    def retrieval(self, document: str, query: str, options=None) -> str | None:
        cfg = self.config
        segments = split_into_segments(document, cfg.effective_retrieval_segment_size, self.tokenizer)
        ranking = score_segments(query, segments, self.scorer)
        # separators are whitespace, so the joined cost is the sum of the parts
        room = self._qa_room(query, options)
        chosen = select_segments(ranking, [s.token_count for s in segments], room)
        if cfg.retrieval_order == "document":
            chosen = sorted(chosen)
        self.last_selection = chosen
        context = SEGMENT_JOINER.join(segments[i].text.strip() for i in chosen)
        return self._ask(query, options, context)

    def recurrence(self, document: str, query: str, options=None) -> str | None:
        cfg = self.config
        limit = cfg.recurrence_summary_size
        segments = split_into_segments(document, cfg.recurrence_segment_size, self.tokenizer)
        summary: str | None = None
        self.carried_summaries = []
        for seg in segments[:-1]:
            prompt = render_recurrence_summary(summary, seg.text, query, cfg.template_dir)
            if self._count(prompt) + cfg.generation_reserve > cfg.context_window:
                fixed = self._count(render_recurrence_summary(summary, "x", query, cfg.template_dir)) - 1
                text = truncate(seg.text, cfg.context_window - cfg.generation_reserve - fixed, "keep_left", self.tokenizer)
                prompt = render_recurrence_summary(summary, text, query, cfg.template_dir)
            raw = self.backend.complete(CompletionRequest(prompt, cfg.sampling, "recurrence-summary"))
            summary = truncate(raw.strip(), limit, "keep_left", self.tokenizer)
            self.carried_summaries.append(summary)
        last = segments[-1].text
        if summary is None:
            room = self._qa_room(query, options)
        else:
            room = self._qa_room(query, options, summary)
        context = truncate(last, room, "keep_left", self.tokenizer)
        return self._ask(query, options, context, summary)


METHODS = ("memwalker", "full-left", "full-right", "retrieval", "recurrence")


def baseline_runner(method: str, backend: Backend, config: Config, scorer: Scorer = tfidf_scorer) -> Callable:
    b = Baselines(backend, config, scorer)
    return {
        "full-left": lambda d, q, o: b.full_context(d, q, o, "keep_left"),
        "full-right": lambda d, q, o: b.full_context(d, q, o, "keep_right"),
        "retrieval": b.retrieval,
        "recurrence": b.recurrence,
    }[method]


def full_context_answer(document, query, options, side, backend, config):
    return Baselines(backend, config).full_context(document, query, options, side)


def retrieval_answer(document, query, options, backend, config, scorer: Scorer = tfidf_scorer):
    return Baselines(backend, config, scorer).retrieval(document, query, options)


def recurrence_answer(document, query, options, backend, config):
    return Baselines(backend, config).recurrence(document, query, options)
