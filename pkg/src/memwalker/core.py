"""Memory tree types, actions, structural validation and the tree cache format."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

from .config import Config
from .errors import CacheMismatch, InvalidInput
from .tokenization import Segment, count_tokens, get_tokenizer


def source_digest(document: str) -> str:
    return hashlib.sha256(document.encode("utf-8")).hexdigest()


def node_id(level: int, position: int) -> str:
    return f"L{level}-{position}"


@dataclass(frozen=True)
class TreeNode:
    id: str
    level: int
    summary: str
    children: tuple[str, ...] = ()
    segment_index: int | None = None
    summary_token_count: int = 0

    @property
    def is_leaf(self) -> bool:
        return self.segment_index is not None

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "level": self.level,
            "summary": self.summary,
            "children": list(self.children),
            "segment_index": self.segment_index,
            "summary_token_count": self.summary_token_count,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TreeNode":
        return cls(
            id=data["id"],
            level=int(data["level"]),
            summary=data["summary"],
            children=tuple(data.get("children") or ()),
            segment_index=data.get("segment_index"),
            summary_token_count=int(data["summary_token_count"]),
        )


@dataclass(frozen=True)
class MemoryTree:
    root_id: str
    nodes: dict[str, TreeNode]
    segments: tuple[Segment, ...]
    source_hash: str
    config_snapshot: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        parents: dict[str, str] = {}
        for node in self.nodes.values():
            for child in node.children:
                parents.setdefault(child, node.id)
        object.__setattr__(self, "_parents", parents)

    @property
    def root(self) -> TreeNode:
        return self.nodes[self.root_id]

    def node(self, nid: str) -> TreeNode:
        return self.nodes[nid]

    def children(self, nid: str) -> list[TreeNode]:
        return [self.nodes[c] for c in self.nodes[nid].children]

    def parent(self, nid: str) -> str | None:
        return self._parents.get(nid)  # type: ignore[attr-defined]

    def segment_of(self, nid: str) -> Segment:
        return self.segments[self.nodes[nid].segment_index]

    @property
    def height(self) -> int:
        return self.root.level

    def leaves(self) -> list[TreeNode]:
        """Leaves in left-to-right (in-order) traversal."""
        out: list[TreeNode] = []
        stack = [self.root_id]
        seen: set[str] = set()
        while stack:
            nid = stack.pop()
            if nid in seen or nid not in self.nodes:
                continue
            seen.add(nid)
            node = self.nodes[nid]
            if not node.children:
                out.append(node)
            stack.extend(reversed(node.children))
        return out

    @property
    def source_tokens(self) -> int:
        return sum(s.token_count for s in self.segments)

    def to_dict(self) -> dict:
        ordered = sorted(self.nodes.values(), key=lambda n: (n.level, _position(n.id)))
        return {
            "source_hash": self.source_hash,
            "config_snapshot": self.config_snapshot,
            "segments": [s.to_dict() for s in self.segments],
            "nodes": [n.to_dict() for n in ordered],
            "root_id": self.root_id,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MemoryTree":
        if data.get("root_id") is None:
            raise InvalidInput("tree cache is a partial checkpoint (no root_id)")
        nodes = [TreeNode.from_dict(d) for d in data["nodes"]]
        return cls(
            root_id=data["root_id"],
            nodes={n.id: n for n in nodes},
            segments=tuple(Segment.from_dict(s) for s in data["segments"]),
            source_hash=data["source_hash"],
            config_snapshot=dict(data.get("config_snapshot") or {}),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, ensure_ascii=False, sort_keys=False)

    @classmethod
    def loads(cls, text: str) -> "MemoryTree":
        return cls.from_dict(json.loads(text))

    @property
    def config(self) -> Config:
        return Config.from_dict(self.config_snapshot)


def _position(nid: str) -> int:
    try:
        return int(nid.rsplit("-", 1)[1])
    except (IndexError, ValueError):
        return 0


def save_tree(tree: MemoryTree, path: Union[str, Path]) -> None:
    write_json_atomic(path, tree.to_dict())


def load_tree(path: Union[str, Path], document: str | None = None) -> MemoryTree:
    """Load a cached tree; with ``document`` given, refuse a cache built from other text."""
    with open(path, encoding="utf-8") as fh:
        tree = MemoryTree.from_dict(json.load(fh))
    if document is not None and source_digest(document) != tree.source_hash:
        raise CacheMismatch(f"{path} was built from a different document")
    return tree


def write_json_atomic(path: Union[str, Path], payload: dict) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, ensure_ascii=False)
    os.replace(tmp, path)


# -- actions ---------------------------------------------------------------

REVERT_CODE = -1
COMMIT_CODE = -2


@dataclass(frozen=True)
class Descend:
    child_ordinal: int

    @property
    def code(self) -> int:
        return self.child_ordinal


@dataclass(frozen=True)
class Revert:
    @property
    def code(self) -> int:
        return REVERT_CODE


@dataclass(frozen=True)
class Commit:
    answer: str

    @property
    def code(self) -> int:
        return COMMIT_CODE


Action = Union[Descend, Revert, Commit]


# -- validation ------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    node_id: str | None
    kind: str
    message: str

    def __str__(self) -> str:
        where = self.node_id if self.node_id is not None else "<tree>"
        return f"{where}: {self.kind}: {self.message}"


def validate_tree(tree: MemoryTree, config: Config | None = None) -> list[Violation]:
    """Check every structural invariant; an empty list means the tree is well formed."""
    cfg = config or (Config.from_dict(tree.config_snapshot) if tree.config_snapshot else Config())
    tok = get_tokenizer(cfg.tokenizer)
    budget = cfg.effective_summary_budget
    out: list[Violation] = []

    if tree.root_id not in tree.nodes:
        return [Violation(None, "root", f"root {tree.root_id!r} missing from node map")]

    parent_of: dict[str, str] = {}
    for node in tree.nodes.values():
        if node.id in node.children:
            out.append(Violation(node.id, "cycle", "node lists itself as a child"))
        for child in node.children:
            if child not in tree.nodes:
                out.append(Violation(node.id, "dangling", f"child {child!r} does not exist"))
            elif child in parent_of:
                out.append(
                    Violation(child, "parents", f"has parents {parent_of[child]!r} and {node.id!r}")
                )
            else:
                parent_of[child] = node.id
    if tree.root_id in parent_of:
        out.append(Violation(tree.root_id, "root", "root has a parent"))
    orphans = [nid for nid in tree.nodes if nid != tree.root_id and nid not in parent_of]
    for nid in orphans:
        out.append(Violation(nid, "orphan", "non-root node without a parent"))

    # reachability and cycle detection
    reached: set[str] = set()
    stack = [tree.root_id]
    while stack:
        nid = stack.pop()
        if nid in reached:
            out.append(Violation(nid, "cycle", "node reached twice from the root"))
            continue
        reached.add(nid)
        stack.extend(c for c in tree.nodes[nid].children if c in tree.nodes)
    for nid in tree.nodes:
        if nid not in reached and nid not in orphans:
            out.append(Violation(nid, "unreachable", "not reachable from the root"))

    for node in tree.nodes.values():
        has_seg = node.segment_index is not None
        if has_seg != (not node.children):
            out.append(
                Violation(node.id, "leaf", "segment_index must be present exactly when children are empty")
            )
        if has_seg:
            if node.level != 1:
                out.append(Violation(node.id, "level", f"leaf at level {node.level}, expected 1"))
            if not 0 <= node.segment_index < len(tree.segments):
                out.append(Violation(node.id, "segment", f"segment_index {node.segment_index} out of range"))
        if node.children:
            if len(node.children) > cfg.max_fanout:
                out.append(
                    Violation(node.id, "fanout", f"{len(node.children)} children exceeds max_fanout {cfg.max_fanout}")
                )
            levels = [tree.nodes[c].level for c in node.children if c in tree.nodes]
            if levels and node.level != 1 + max(levels):
                out.append(
                    Violation(node.id, "level", f"level {node.level} != 1 + max child level {max(levels)}")
                )
        actual = count_tokens(node.summary, tok)
        if node.summary_token_count != actual:
            out.append(
                Violation(node.id, "token_count", f"recorded {node.summary_token_count}, counted {actual}")
            )
        if actual > budget:
            out.append(Violation(node.id, "summary_budget", f"{actual} tokens exceeds budget {budget}"))

    if not any(v.kind in ("cycle", "dangling") for v in out):
        order = [n.segment_index for n in tree.leaves()]
        if order != list(range(len(tree.segments))):
            out.append(Violation(None, "leaf_order", f"in-order leaves give segments {order}"))

    pos = 0
    for i, seg in enumerate(tree.segments):
        if seg.index != i:
            out.append(Violation(None, "segments", f"segment at position {i} has index {seg.index}"))
        if seg.char_span[0] != pos or seg.char_span[1] - seg.char_span[0] != len(seg.text):
            out.append(Violation(None, "segments", f"segment {i} span {seg.char_span} does not tile"))
        pos = seg.char_span[1]
        if seg.token_count != count_tokens(seg.text, tok):
            out.append(Violation(None, "segments", f"segment {i} token_count is stale"))
        if seg.token_count > cfg.segment_size:
            out.append(Violation(None, "segments", f"segment {i} exceeds segment_size"))
    return out
