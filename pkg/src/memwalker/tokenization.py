"""Token counting, budgeted segmentation and side truncation.

The default scheme is model-agnostic: every whitespace-delimited word is one
token, and words longer than four characters are cut into four-character
pieces. Any object exposing ``spans(text)`` (character offsets of each token)
can be registered as an alternative scheme.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Literal, Protocol

from .errors import InvalidInput

Side = Literal["keep_left", "keep_right"]

_WORD = re.compile(r"\S+")


class Tokenizer(Protocol):
    name: str

    def spans(self, text: str) -> list[tuple[int, int]]: ...


class WhitespaceTokenizer:
    """Whitespace words, with unbroken runs split every ``chars_per_token`` chars."""

    def __init__(self, chars_per_token: int = 4):
        self.chars_per_token = chars_per_token
        self.name = f"whitespace{chars_per_token}"

    def spans(self, text: str) -> list[tuple[int, int]]:
        step = self.chars_per_token
        out = []
        for m in _WORD.finditer(text):
            start, end = m.span()
            for s in range(start, end, step):
                out.append((s, min(s + step, end)))
        return out

    def count(self, text: str) -> int:
        step = self.chars_per_token
        return sum(-(-len(w) // step) for w in text.split())


DEFAULT_TOKENIZER = WhitespaceTokenizer()
_REGISTRY: dict[str, Tokenizer] = {DEFAULT_TOKENIZER.name: DEFAULT_TOKENIZER}


def register_tokenizer(tokenizer: Tokenizer) -> None:
    _REGISTRY[tokenizer.name] = tokenizer


def get_tokenizer(name: str | None = None) -> Tokenizer:
    if name is None:
        return DEFAULT_TOKENIZER
    try:
        return _REGISTRY[name]
    except KeyError:
        raise InvalidInput(f"unknown tokenizer scheme {name!r}") from None


def count_tokens(text: str, tokenizer: Tokenizer | None = None) -> int:
    tok = tokenizer or DEFAULT_TOKENIZER
    counter = getattr(tok, "count", None)
    if counter is not None:
        return counter(text)
    return len(tok.spans(text))


@dataclass(frozen=True)
class Segment:
    index: int
    text: str
    token_count: int
    char_span: tuple[int, int]

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "text": self.text,
            "token_count": self.token_count,
            "char_span": list(self.char_span),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Segment":
        return cls(
            index=int(data["index"]),
            text=data["text"],
            token_count=int(data["token_count"]),
            char_span=(int(data["char_span"][0]), int(data["char_span"][1])),
        )


def split_into_segments(
    text: str, segment_size: int, tokenizer: Tokenizer | None = None
) -> list[Segment]:
    """Greedily cut ``text`` into segments of at most ``segment_size`` tokens.

    Cuts land on token starts and are pulled back to the start of the word
    containing them, so words stay whole unless a single word is longer than
    a segment. Segments tile the input: whitespace between two segments is
    kept at the end of the earlier one.
    """
    if segment_size < 1:
        raise InvalidInput("segment_size must be >= 1")
    if not text:
        raise InvalidInput("cannot segment empty text")
    tok = tokenizer or DEFAULT_TOKENIZER
    spans = tok.spans(text)
    if not spans:
        # whitespace-only document: one zero-token segment
        return [Segment(0, text, 0, (0, len(text)))]

    cuts = [0]
    i = 0
    n = len(spans)
    while n - i > segment_size:
        j = i + segment_size  # first token of the next segment
        k = j
        # pull back while token k continues the word of token k-1
        while k > i and spans[k][0] == spans[k - 1][1]:
            k -= 1
        if k == i:
            k = j  # one word longer than a segment: hard cut inside it
        cuts.append(spans[k][0])
        i = k
    cuts.append(len(text))

    segments = []
    for idx, (start, end) in enumerate(zip(cuts, cuts[1:])):
        piece = text[start:end]
        segments.append(Segment(idx, piece, count_tokens(piece, tok), (start, end)))
    return segments


def truncate(
    text: str, budget: int, side: Side = "keep_left", tokenizer: Tokenizer | None = None
) -> str:
    """Return ``text`` cut to at most ``budget`` tokens from the given side."""
    if budget < 0:
        raise InvalidInput("budget must be >= 0")
    if side not in ("keep_left", "keep_right"):
        raise InvalidInput(f"unknown truncation side {side!r}")
    tok = tokenizer or DEFAULT_TOKENIZER
    if count_tokens(text, tok) <= budget:
        return text
    if budget == 0:
        return ""
    spans = tok.spans(text)
    if side == "keep_left":
        return text[: spans[budget - 1][1]]
    return text[spans[-budget][0] :]
