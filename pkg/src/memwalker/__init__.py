"""Long-text question answering by navigating a tree of recursive summaries."""

from .backend import CallableBackend, CompletionRequest, HTTPBackend, ScriptedBackend, ScriptEntry, TraceLog
from .builder import build_tree, group_nodes
from .config import Config, load_config, task_config
from .core import Commit, Descend, MemoryTree, Revert, TreeNode, load_tree, save_tree, validate_tree
from .errors import (
    BudgetError,
    CacheMismatch,
    EndpointError,
    InvalidInput,
    MalformedRecord,
    ParseError,
    ScriptMismatch,
)
from .harness import Example, Report, evaluate, grade_answer, load_dataset, sweep_tree_configs
from .navigator import NavigationResult, navigate
from .prompts import parse_response
from .tokenization import Segment, count_tokens, split_into_segments, truncate

__all__ = [
    "BudgetError",
    "build_tree",
    "CacheMismatch",
    "CallableBackend",
    "Commit",
    "CompletionRequest",
    "Config",
    "count_tokens",
    "Descend",
    "EndpointError",
    "evaluate",
    "Example",
    "grade_answer",
    "group_nodes",
    "HTTPBackend",
    "InvalidInput",
    "load_config",
    "load_dataset",
    "load_tree",
    "MalformedRecord",
    "MemoryTree",
    "navigate",
    "NavigationResult",
    "parse_response",
    "ParseError",
    "Report",
    "Revert",
    "save_tree",
    "ScriptedBackend",
    "ScriptEntry",
    "ScriptMismatch",
    "Segment",
    "split_into_segments",
    "sweep_tree_configs",
    "task_config",
    "TraceLog",
    "TreeNode",
    "truncate",
    "validate_tree",
]

__version__ = "0.1.0"
