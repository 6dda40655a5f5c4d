"""Dataset loading, grading, metric aggregation and the tree-configuration sweep."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import re
import string
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence, Union

from .backend import Backend
from .baselines import METHODS, baseline_runner
from .builder import build_tree
from .config import Config
from .core import MemoryTree, load_tree, save_tree
from .errors import InvalidInput, MalformedRecord, MemWalkerError
from .navigator import navigate
from .tokenization import count_tokens, get_tokenizer

log = logging.getLogger(__name__)

# Published results obtained with a 70B instruction-tuned model. Live runs
# can be compared against these; desk-scale tests never depend on them.
REFERENCE_RESULTS = {
    "quality": {"memwalker": (67.4, 73.6), "full-left": (56.7, 64.8), "full-right": (70.1, 72.5),
                "retrieval": (63.1, 64.8), "recurrence": (51.3, 56.0), "stray": 15.0, "recovery": 70.0},
    "summscreenfd": {"memwalker": (67.3, 64.5), "full-left": (62.7, 62.7), "full-right": (64.7, 63.1),
                     "retrieval": (63.7, 62.2), "recurrence": (47.7, 45.4), "stray": 18.6, "recovery": 59.6},
    "govreport": {"memwalker": (59.4, 60.4), "full-left": (59.4, 56.3), "full-right": (50.5, 50.0),
                  "retrieval": (54.0, 52.1), "recurrence": (35.6, 33.8), "stray": 18.8, "recovery": 79.0},
}
REFERENCE_FRACTION_READ = {"all": (0.63, 0.69), "successful": (0.59, 0.64)}


@dataclass(frozen=True)
class Example:
    id: str
    context: str
    query: str
    gold: str
    options: tuple[tuple[str, str], ...] | None = None
    context_tokens: int = 0

    @property
    def labels(self) -> list[str]:
        return [label for label, _ in self.options or ()]

    @property
    def options_map(self) -> dict[str, str] | None:
        return dict(self.options) if self.options else None


def _parse_options(raw) -> tuple[tuple[str, str], ...] | None:
    if raw is None:
        return None
    if isinstance(raw, Mapping):
        items = [(str(k), str(v)) for k, v in raw.items()]
    elif isinstance(raw, list):
        items = []
        for i, item in enumerate(raw):
            if isinstance(item, Mapping):
                items.append((str(item["label"]), str(item["text"])))
            else:
                items.append((string.ascii_uppercase[i], str(item)))
    else:
        raise TypeError("options must be a list or an object")
    return tuple(items) or None


def load_dataset(path: Union[str, Path], tokenizer_name: str | None = None) -> list[Example]:
    """Read JSONL records ``{id, context, query, options?, gold}``."""
    tok = get_tokenizer(tokenizer_name)
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(lineno, f"invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise MalformedRecord(lineno, "record is not an object")
            for key in ("id", "context", "query", "gold"):
                if rec.get(key) in (None, ""):
                    raise MalformedRecord(lineno, f"missing {key!r}")
            try:
                options = _parse_options(rec.get("options"))
            except (TypeError, KeyError) as exc:
                raise MalformedRecord(lineno, f"bad options ({exc})") from None
            gold = str(rec["gold"]).strip()
            if options:
                gold = gold.strip("()")
                if gold not in [label for label, _ in options]:
                    raise MalformedRecord(lineno, f"gold {gold!r} is not an option label")
            out.append(
                Example(
                    id=str(rec["id"]),
                    context=rec["context"],
                    query=rec["query"],
                    gold=gold,
                    options=options,
                    context_tokens=count_tokens(rec["context"], tok),
                )
            )
    return out


_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = re.compile(r"[^\w\s]")


def normalize_answer(text: str) -> str:
    text = _PUNCT.sub(" ", text.casefold())
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def extract_choice(predicted: str, labels: Sequence[str]) -> str | None:
    """First ``(X)`` label in the prediction, else the first bare label letter."""
    if not labels:
        return None
    alts = "|".join(re.escape(label) for label in labels)
    m = re.search(rf"\(\s*({alts})\s*\)", predicted)
    if m:
        return m.group(1)
    m = re.search(rf"(?<![\w'])({alts})(?![\w'])", predicted)
    return m.group(1) if m else None


def grade_answer(predicted: str | None, example: Example) -> bool:
    if not predicted:
        return False
    if example.options:
        return extract_choice(predicted, example.labels) == example.gold
    gold = normalize_answer(example.gold)
    if not gold:
        return False
    return f" {gold} " in f" {normalize_answer(predicted)} "


@dataclass
class ExampleResult:
    id: str
    correct: bool
    answer: str | None
    long: bool
    strayed: bool | None = None
    recovered: bool | None = None
    fraction_read: float | None = None
    tokens_processed: int | None = None
    steps: int | None = None
    no_answer: bool = False
    error: str | None = None


@dataclass
class Report:
    method: str
    n: int
    accuracy: float
    no_answer_count: int
    per_bucket: dict[str, float | None]
    bucket_sizes: dict[str, int]
    stray_ratio: float | None = None
    recovery_rate: float | None = None
    mean_fraction_read: float | None = None
    mean_fraction_read_successful: float | None = None
    per_example: list[ExampleResult] = field(default_factory=list)
    task: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        """Fixed-width summary laid out as ``Orig. / Long`` accuracy columns."""
        def pct(x):
            return "  -  " if x is None else f"{100 * x:5.1f}"

        lines = [
            f"{'Method':<24}{'Orig. / Long':>16}{'Stray':>8}{'Recov.':>8}{'Read':>8}{'N/A':>6}",
            f"{self.method:<24}{pct(self.accuracy) + ' / ' + pct(self.per_bucket.get('long')):>16}"
            f"{pct(self.stray_ratio):>8}{pct(self.recovery_rate):>8}"
            f"{pct(self.mean_fraction_read):>8}{self.no_answer_count:>6}",
            f"n={self.n} (long: {self.bucket_sizes.get('long', 0)})",
        ]
        ref = REFERENCE_RESULTS.get(self.task, {}).get(self.method)
        if ref:
            lines.append(
                f"reference (70B live model): {ref[0]:.1f} / {ref[1]:.1f}; "
                "not expected at desk scale"
            )
        return "\n".join(lines) + "\n"


def aggregate(method: str, rows: Sequence[ExampleResult], task: str = "") -> Report:
    """Fold per-example rows into a :class:`Report`. Pure function of ``rows``."""
    n = len(rows)
    correct = sum(r.correct for r in rows)
    buckets = {"short": [r for r in rows if not r.long], "long": [r for r in rows if r.long]}
    per_bucket = {k: (sum(r.correct for r in v) / len(v) if v else None) for k, v in buckets.items()}
    report = Report(
        method=method,
        n=n,
        accuracy=correct / n if n else 0.0,
        no_answer_count=sum(r.no_answer for r in rows),
        per_bucket=per_bucket,
        bucket_sizes={k: len(v) for k, v in buckets.items()},
        per_example=list(rows),
        task=task,
    )
    navigated = [r for r in rows if r.strayed is not None]
    if navigated:
        strayed = [r for r in navigated if r.strayed]
        report.stray_ratio = len(strayed) / len(navigated)
        report.recovery_rate = sum(r.correct for r in strayed) / len(strayed) if strayed else None
        fractions = [r.fraction_read for r in navigated if r.fraction_read is not None]
        good = [r.fraction_read for r in navigated if r.fraction_read is not None and r.correct]
        report.mean_fraction_read = sum(fractions) / len(fractions) if fractions else None
        report.mean_fraction_read_successful = sum(good) / len(good) if good else None
    return report


BackendSource = Union[Backend, Callable[[Example], Backend]]


class TreeCache:
    """Trees keyed by (example id, config digest); on disk when ``root`` is set."""

    def __init__(self, root: Union[str, Path, None] = None):
        self.root = Path(root) if root else None
        self._mem: dict[tuple[str, str], MemoryTree] = {}
        if self.root:
            self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, key) -> Path:
        safe = re.sub(r"[^\w.-]", "_", key[0])
        return self.root / f"{safe}.{key[1]}.tree.json"

    def get(self, example: Example, config: Config, backend: Backend) -> MemoryTree:
        key = (example.id, _tree_digest(config))
        if key in self._mem:
            return self._mem[key]
        tree = None
        if self.root and self._path(key).is_file():
            try:
                tree = load_tree(self._path(key), example.context)
            except (MemWalkerError, ValueError, KeyError):
                tree = None
        if tree is None:
            checkpoint = self._path(key).with_suffix(".partial") if self.root else None
            tree = build_tree(example.context, config, backend, checkpoint)
            if self.root:
                save_tree(tree, self._path(key))
                if checkpoint and checkpoint.exists():
                    checkpoint.unlink()
        self._mem[key] = tree
        return tree


def _tree_digest(config: Config) -> str:
    # only construction-relevant fields key the cache
    keep = {k: v for k, v in config.to_dict().items()
            if k in ("segment_size", "max_fanout", "summary_budget", "context_window", "generation_reserve",
                     "prompt_overhead", "tokenizer", "grouping", "model", "temperature", "top_p",
                     "max_new_tokens", "seed", "template_dir")}
    return hashlib.sha256(json.dumps(keep, sort_keys=True).encode()).hexdigest()[:16]


def run_example(
    method: str,
    example: Example,
    backend: Backend,
    config: Config,
    cache: TreeCache | None = None,
    scorer=None,
) -> ExampleResult:
    long = example.context_tokens > config.long_threshold
    options = example.options_map
    try:
        if method == "memwalker":
            tree = (cache or TreeCache()).get(example, config, backend)
            result = navigate(tree, example.query, backend, config, options)
            correct = grade_answer(result.answer, example)
            m = result.metrics
            fraction = m.tokens_processed / example.context_tokens if example.context_tokens else 0.0
            return ExampleResult(
                id=example.id,
                correct=correct,
                answer=result.answer,
                long=long,
                strayed=m.strayed,
                recovered=(correct if m.strayed else None),
                fraction_read=fraction,
                tokens_processed=m.tokens_processed,
                steps=m.steps,
                no_answer=not result.answered,
            )
        runner = baseline_runner(method, backend, config, scorer) if scorer else baseline_runner(method, backend, config)
        answer = runner(example.context, example.query, options)
        return ExampleResult(
            id=example.id, correct=grade_answer(answer, example), answer=answer, long=long, no_answer=answer is None
        )
    except (MemWalkerError, AssertionError, RuntimeError) as exc:
        log.warning("example %s failed: %s", example.id, exc)
        return ExampleResult(id=example.id, correct=False, answer=None, long=long, no_answer=True, error=str(exc))


def evaluate(
    method: str,
    dataset: Sequence[Example],
    backend: BackendSource,
    config: Config,
    cache: TreeCache | None = None,
    scorer=None,
) -> Report:
    """Run ``method`` on every example and aggregate.

    ``backend`` is a shared backend or a factory called once per example;
    a factory gives each example an isolated backend.
    """
    if method not in METHODS:
        raise InvalidInput(f"unknown method {method!r}; expected one of {METHODS}")
    cache = cache or TreeCache()
    factory = backend if callable(backend) and not isinstance(backend, Backend) else (lambda ex: backend)

    def one(ex: Example) -> ExampleResult:
        return run_example(method, ex, factory(ex), config, cache, scorer)

    shared_unsafe = isinstance(backend, Backend) and not backend.concurrent_safe
    if config.parallelism > 1 and not shared_unsafe:
        with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
            rows = list(pool.map(one, dataset))
    else:
        rows = [one(ex) for ex in dataset]
    return aggregate(method, rows, config.task)


@dataclass
class SweepCell:
    segment_size: int
    max_fanout: int
    accuracy: float
    mean_height: float
    mean_nodes: float
    heights: list[int] = field(default_factory=list)
    node_counts: list[int] = field(default_factory=list)


def sweep_tree_configs(
    dataset: Sequence[Example],
    segment_sizes: Sequence[int],
    max_fanouts: Sequence[int],
    backend: BackendSource,
    config: Config,
) -> list[SweepCell]:
    if not segment_sizes or not max_fanouts:
        raise InvalidInput("sweep grids must be non-empty")
    cells = []
    for size in segment_sizes:
        for fanout in max_fanouts:
            cfg = replace(config, segment_size=size, max_fanout=fanout)
            cache = TreeCache()
            report = evaluate("memwalker", dataset, backend, cfg, cache)
            trees = list(cache._mem.values())
            heights = [t.height for t in trees]
            counts = [len(t.nodes) for t in trees]
            cells.append(
                SweepCell(
                    segment_size=size,
                    max_fanout=fanout,
                    accuracy=report.accuracy,
                    mean_height=sum(heights) / len(heights) if heights else 0.0,
                    mean_nodes=sum(counts) / len(counts) if counts else 0.0,
                    heights=heights,
                    node_counts=counts,
                )
            )
    return cells


def sweep_csv(cells: Sequence[SweepCell]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["segment_size", "max_fanout", "accuracy", "mean_height", "mean_nodes"])
    for c in cells:
        writer.writerow([c.segment_size, c.max_fanout, f"{c.accuracy:.4f}", f"{c.mean_height:.2f}", f"{c.mean_nodes:.2f}"])
    return buf.getvalue()
