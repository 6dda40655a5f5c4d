"""Memory tree construction: segment, summarize leaves, summarize groups up to a root."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .backend import Backend, CompletionRequest
from .config import Config
from .core import MemoryTree, TreeNode, node_id, source_digest, write_json_atomic
from .errors import InvalidInput
from .prompts import render_construction_leaf, render_construction_nonleaf
from .tokenization import Segment, count_tokens, get_tokenizer, split_into_segments, truncate

log = logging.getLogger(__name__)

MAX_RECOMPRESSIONS = 3
SUMMARY_JOINER = "\n"


def group_nodes(nodes: Sequence[str], max_fanout: int, balanced: bool = False) -> list[list[str]]:
    """Pack consecutive nodes into groups of at most ``max_fanout``.

    Greedy packing fills every group but the last. ``balanced`` spreads the
    same number of groups as evenly as possible instead.
    """
    if max_fanout < 2:
        raise InvalidInput("max_fanout must be >= 2")
    if not nodes:
        raise InvalidInput("nothing to group")
    nodes = list(nodes)
    if not balanced:
        return [nodes[i : i + max_fanout] for i in range(0, len(nodes), max_fanout)]
    n_groups = -(-len(nodes) // max_fanout)
    base, extra = divmod(len(nodes), n_groups)
    out, i = [], 0
    for g in range(n_groups):
        size = base + (1 if g < extra else 0)
        out.append(nodes[i : i + size])
        i += size
    return out


def expected_shape(n_segments: int, max_fanout: int) -> tuple[int, int]:
    """(height, node count) of a tree built over ``n_segments`` leaves."""
    height, total, width = 1, n_segments, n_segments
    while width > 1:
        width = -(-width // max_fanout)
        total += width
        height += 1
    return height, total


@dataclass
class TreeBuilder:
    config: Config
    backend: Backend

    def __post_init__(self) -> None:
        self.tokenizer = get_tokenizer(self.config.tokenizer)
        self.budget = self.config.effective_summary_budget
        self.llm_calls = 0

    def _complete(self, prompt: str, tag: str) -> str:
        cfg = self.config
        self.llm_calls += 1
        request = CompletionRequest(prompt, cfg.sampling, tag)
        return self.backend.complete(request).strip()

    def _compress_prompt(self, summaries: Sequence[str]) -> str:
        # keep the prompt inside the window even for oversized custom budgets
        cfg = self.config
        prompt = render_construction_nonleaf(summaries, cfg.template_dir)
        room = cfg.context_window - cfg.max_new_tokens
        if count_tokens(prompt, self.tokenizer) <= room:
            return prompt
        boilerplate = count_tokens(render_construction_nonleaf(["x"], cfg.template_dir), self.tokenizer) - 1
        joined = truncate(SUMMARY_JOINER.join(summaries), max(1, room - boilerplate - 1), "keep_left", self.tokenizer)
        return render_construction_nonleaf([joined], cfg.template_dir)

    def _fit(self, summary: str, tag: str) -> str:
        attempts = 0
        while count_tokens(summary, self.tokenizer) > self.budget and attempts < MAX_RECOMPRESSIONS:
            summary = self._complete(self._compress_prompt([summary]), f"{tag}-recompress")
            attempts += 1
        if count_tokens(summary, self.tokenizer) > self.budget:
            log.info("%s: summary still over budget after %d recompressions; truncating", tag, attempts)
            summary = truncate(summary, self.budget, "keep_left", self.tokenizer)
        return summary

    def summarize_leaf(self, segment: Segment) -> str:
        prompt = render_construction_leaf(segment.text, self.config.template_dir)
        summary = self._complete(prompt, "summarize-leaf")
        return self._fit(summary, "summarize-leaf")

    def summarize_group(self, child_summaries: Sequence[str]) -> str:
        if not child_summaries:
            raise InvalidInput("need at least one child summary")
        joined = SUMMARY_JOINER.join(child_summaries)
        if count_tokens(joined, self.tokenizer) <= self.budget:
            return joined
        summary = self._complete(self._compress_prompt(child_summaries), "summarize-group")
        return self._fit(summary, "summarize-group")

    def _node(self, level: int, position: int, summary: str, children=(), segment_index=None) -> TreeNode:
        return TreeNode(
            id=node_id(level, position),
            level=level,
            summary=summary,
            children=tuple(children),
            segment_index=segment_index,
            summary_token_count=count_tokens(summary, self.tokenizer),
        )

    def build(self, document: str, checkpoint: str | Path | None = None) -> MemoryTree:
        if not document or not document.strip():
            raise InvalidInput("document is empty")
        cfg = self.config
        digest = source_digest(document)
        segments = split_into_segments(document, cfg.segment_size, self.tokenizer)
        nodes: dict[str, TreeNode] = {}
        level_ids: list[str] = []
        resumed = _load_checkpoint(checkpoint, digest, cfg) if checkpoint else None

        if resumed:
            nodes = resumed
            top = max(n.level for n in nodes.values())
            level_ids = sorted((n.id for n in nodes.values() if n.level == top), key=_pos)
            level = top
            log.info("resuming construction from level %d (%d nodes)", top, len(level_ids))
        else:
            summaries = self._map(self.summarize_leaf, segments)
            for seg, summary in zip(segments, summaries):
                node = self._node(1, seg.index, summary, segment_index=seg.index)
                nodes[node.id] = node
                level_ids.append(node.id)
            level = 1
            self._flush(checkpoint, digest, segments, nodes, None)

        while len(level_ids) > 1:
            groups = group_nodes(level_ids, cfg.max_fanout, balanced=cfg.grouping == "balanced")
            summaries = self._map(
                self.summarize_group, [[nodes[c].summary for c in g] for g in groups]
            )
            level += 1
            level_ids = []
            for pos, (group, summary) in enumerate(zip(groups, summaries)):
                node = self._node(level, pos, summary, children=group)
                nodes[node.id] = node
                level_ids.append(node.id)
            self._flush(checkpoint, digest, segments, nodes, None)

        tree = MemoryTree(
            root_id=level_ids[0],
            nodes=nodes,
            segments=tuple(segments),
            source_hash=digest,
            config_snapshot=cfg.to_dict(),
        )
        if checkpoint:
            write_json_atomic(checkpoint, tree.to_dict())
        return tree

    def _map(self, fn, items):
        items = list(items)
        if self.config.parallelism > 1 and self.backend.concurrent_safe and len(items) > 1:
            with ThreadPoolExecutor(max_workers=self.config.parallelism) as pool:
                return list(pool.map(fn, items))
        return [fn(item) for item in items]

    def _flush(self, path, digest, segments, nodes, root_id) -> None:
        if not path:
            return
        write_json_atomic(
            path,
            {
                "source_hash": digest,
                "config_snapshot": self.config.to_dict(),
                "segments": [s.to_dict() for s in segments],
                "nodes": [n.to_dict() for n in sorted(nodes.values(), key=lambda n: (n.level, _pos(n.id)))],
                "root_id": root_id,
            },
        )


def _pos(nid: str) -> int:
    return int(nid.rsplit("-", 1)[1])


def _load_checkpoint(path, digest: str, config: Config) -> dict[str, TreeNode] | None:
    path = Path(path)
    if not path.is_file():
        return None
    try:
        data = json.loads(path.read_text("utf-8"))
    except (OSError, json.JSONDecodeError):
        return None
    if data.get("source_hash") != digest or data.get("config_snapshot") != config.to_dict():
        return None
    nodes = [TreeNode.from_dict(d) for d in data.get("nodes", [])]
    return {n.id: n for n in nodes} or None


def summarize_leaf(segment: Segment, backend: Backend, config: Config) -> str:
    return TreeBuilder(config, backend).summarize_leaf(segment)


def summarize_group(child_summaries: Sequence[str], backend: Backend, config: Config) -> str:
    return TreeBuilder(config, backend).summarize_group(child_summaries)


def build_tree(
    document: str, config: Config, backend: Backend, checkpoint: str | Path | None = None
) -> MemoryTree:
    return TreeBuilder(config, backend).build(document, checkpoint)
