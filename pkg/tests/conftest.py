from __future__ import annotations

import hashlib
import random
import re

import pytest

from memwalker.backend import CallableBackend, CompletionRequest, ScriptedBackend, ScriptEntry
from memwalker.config import Config
from memwalker.core import MemoryTree, TreeNode, node_id, source_digest
from memwalker.tokenization import Segment, count_tokens

FIXED_CLOCK = lambda: 0.0  # noqa: E731


def small_config(**kw) -> Config:
    base = dict(
        segment_size=60,
        max_fanout=4,
        context_window=1024,
        generation_reserve=128,
        prompt_overhead=160,
        max_new_tokens=128,
    )
    base.update(kw)
    return Config(**base)


def tree_from_levels(segment_texts, levels, config: Config | None = None) -> MemoryTree:
    """Assemble a tree by hand.

    ``levels[0]`` holds one summary per segment; every later level is a list
    of ``(summary, [child positions in the level below])``.
    """
    config = config or Config()
    document = "".join(segment_texts)
    # segments are cut on the given boundaries, not re-split
    segs, pos = [], 0
    for i, text in enumerate(segment_texts):
        segs.append(Segment(i, text, count_tokens(text), (pos, pos + len(text))))
        pos += len(text)
    nodes = {}
    for i, summary in enumerate(levels[0]):
        n = TreeNode(node_id(1, i), 1, summary, (), i, count_tokens(summary))
        nodes[n.id] = n
    for depth, level in enumerate(levels[1:], start=2):
        for pos_, (summary, children) in enumerate(level):
            kids = tuple(node_id(depth - 1, c) for c in children)
            lvl = 1 + max(nodes[k].level for k in kids)
            n = TreeNode(node_id(depth, pos_), lvl, summary, kids, None, count_tokens(summary))
            nodes[n.id] = n
    root = node_id(len(levels), 0)
    return MemoryTree(root, nodes, tuple(segs), source_digest(document), config.to_dict())


# -- the worked Mars example: root -> left group -> leaf 1 (revert) -> leaf 2 (commit)

MARS_QUERY = "Why did Ro change his mind about the people on Mars being backwards?"
MARS_OPTIONS = {
    "A": "He realized that despite human's technological advancements, they have over-complicated marriage.",
    "B": "He realized that while the humans are physically vulnerable without their weapons, the red people have formidable strength in their arms.",
    "C": "He realized that human males suppress public affection when they are intimidated by other males, whereas male Martians don't hide their affection.",
    "D": "He realized that male humans were petty and even brute when it came to rivalry over women, whereas male Martians were much more civilized.",
}
MARS_SEGMENTS = [
    "Ro stood at the edge of the red cliff and looked down at the valley below. ",
    "In his left hand and under his armpit Ro carried stones. They were of a good weight and would make short work of any Oan who was foolish enough to cross his path. ",
    "\"Last night I thought that we on Mars are backward. Now I'm not so sure.\" Ro watched the Earthmen argue over the woman. ",
    "The ship from Earth landed in the desert and its crew stepped out in strange suits. ",
    "Ro, a young Martian, is climbing down a cliff to rescue the girl from the Oan. ",
    "The Oan retreated into the caves as night fell over the plain. ",
]
MARS_LEAF_SUMMARIES = [
    "Ro looks over the valley from a red cliff.",
    "Ro carries stones to fight the Oan.",
    "Ro reconsiders whether Mars is backward after watching the Earthmen.",
    "An Earth ship lands in the desert.",
    "Ro climbs down a cliff on a rescue.",
    "The Oan retreat at nightfall.",
]
MARS_LEFT_SUMMARY = "The story is set on Mars and follows the adventures of Ro, who meets people from Earth."
MARS_RIGHT_SUMMARY = "Ro, a young Martian, is climbing down a cliff to rescue a girl from the Oan."
MARS_ROOT_SUMMARY = "Ro, a Martian, meets Earthmen and fights the Oan."

MARS_RESPONSES = [
    (
        "MOST LIKELY",
        "Reasoning: Summary 0 is most likely to contain information about why Ro changed his mind about the "
        "people on Mars being backwards, as it mentions Ro's interactions with the people from Earth and their "
        "advanced method of communication.\nAction: 0",
    ),
    ("Summary 0: Ro looks over the valley", "Reasoning: Summary 1 mentions Ro preparing for a fight.\nAction: 1"),
    (
        "Main text: In his left hand",
        "Reasoning: The text does not explicitly mention Ro changing his mind about the people on Mars being "
        "backwards. Therefore, the answer cannot be inferred from the text.\nAction: -1",
    ),
    ("Summary 2: Ro reconsiders", "Reasoning: Summary 2 is about Ro reconsidering Mars.\nAction: 2"),
    (
        "Main text: \"Last night I thought",
        "Reasoning: Ro initially sees Earth's customs as backward compared to Mars, However, after discussing "
        "[...]\nAction: -2\nAnswer: (A)",
    ),
]


@pytest.fixture
def mars_tree() -> MemoryTree:
    return tree_from_levels(
        MARS_SEGMENTS,
        [
            MARS_LEAF_SUMMARIES,
            [(MARS_LEFT_SUMMARY, [0, 1, 2]), (MARS_RIGHT_SUMMARY, [3, 4, 5])],
            [(MARS_ROOT_SUMMARY, [0, 1])],
        ],
    )


@pytest.fixture
def mars_backend() -> ScriptedBackend:
    return ScriptedBackend([ScriptEntry(r, m) for m, r in MARS_RESPONSES])


# -- synthetic documents and deterministic stand-in models -------------------

VOCAB = ["ro", "mars", "earth", "stone", "cliff", "valley", "ship", "night", "oan",
         "martian", "backward", "communication", "extraordinarily", "a", "of", "the"]


def random_document(rng: random.Random, n_tokens: int) -> str:
    words = []
    total = 0
    while total < n_tokens:
        w = rng.choice(VOCAB)
        t = -(-len(w) // 4)
        if total + t > n_tokens:
            w = "x" * 4 * (n_tokens - total)
            t = n_tokens - total
        words.append(w)
        total += t
    seps = [rng.choice([" ", " ", " ", "\n", "  "]) for _ in words]
    return "".join(w + s for w, s in zip(words, seps))


def _digest(text: str) -> int:
    return int(hashlib.sha256(text.encode()).hexdigest()[:8], 16)


def summarizer_backend(config: Config, overshoot: bool = True) -> CallableBackend:
    """Summaries are word prefixes of the prompt; some deliberately exceed the budget."""
    budget = config.effective_summary_budget

    def fn(req: CompletionRequest) -> str:
        words = req.prompt.split()
        h = _digest(req.prompt)
        limit = budget * 2 if overshoot else budget
        n = 1 + h % max(1, limit)
        return " ".join(words[:n])

    return CallableBackend(fn, context_window=config.context_window)


_CHILDREN = re.compile(r"^Summary (\d+):", re.MULTILINE)


def random_policy_backend(seed: int, garbage_rate: float = 0.1, context_window: int = 4096) -> CallableBackend:
    """Picks uniformly among legal actions, sometimes replying with junk."""
    rng = random.Random(seed)

    def fn(req: CompletionRequest) -> str:
        if rng.random() < garbage_rate:
            return rng.choice(["no idea", "Action: 99", "Action: -2", "Reasoning: hm"])
        if "MOST LIKELY" in req.prompt:
            k = len(_CHILDREN.findall(req.prompt))
            return f"Reasoning: pick\nAction: {rng.choice(list(range(k)) + [-1])}"
        return rng.choice(["Reasoning: no\nAction: -1", "Reasoning: yes\nAction: -2\nAnswer: (A)"])

    return CallableBackend(fn, context_window=context_window)


def pytest_terminal_summary(terminalreporter):
    import sys

    lines = getattr(sys.modules.get("test_acceptance"), "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
