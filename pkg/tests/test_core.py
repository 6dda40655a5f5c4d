import json
from dataclasses import replace

import pytest

from memwalker.config import Config, task_config
from memwalker.core import MemoryTree, TreeNode, load_tree, save_tree, validate_tree
from memwalker.errors import CacheMismatch, ConfigError

from conftest import tree_from_levels


def three_segment_tree():
    return tree_from_levels(
        ["alpha one. ", "beta two. ", "gamma three."],
        [["a", "b", "c"], [("a b c", [0, 1, 2])]],
    )


def inorder_segments(tree: MemoryTree) -> list[int]:
    # recursive traversal, written separately from MemoryTree.leaves
    def walk(nid):
        node = tree.nodes[nid]
        if not node.children:
            return [node.segment_index]
        return [i for c in node.children for i in walk(c)]

    return walk(tree.root_id)


def test_well_formed_tree_is_valid():
    assert validate_tree(three_segment_tree()) == []


def test_fanout_violation():
    segs = [f"s{i} " for i in range(9)]
    tree = tree_from_levels(segs, [[f"x{i}" for i in range(9)], [("root", list(range(9)))]])
    violations = validate_tree(tree, Config(max_fanout=8))
    assert [(v.node_id, v.kind) for v in violations] == [("L2-0", "fanout")]


def test_leaf_order_violation():
    tree = tree_from_levels(
        ["alpha one. ", "beta two. ", "gamma three."],
        [["a", "b", "c"], [("a b c", [0, 2, 1])]],
    )
    assert inorder_segments(tree) == [0, 2, 1]
    violations = validate_tree(tree)
    assert [v.kind for v in violations] == ["leaf_order"]


def test_structural_violations_reported_not_raised():
    tree = three_segment_tree()
    nodes = dict(tree.nodes)
    root = nodes["L2-0"]
    nodes["L2-0"] = replace(root, children=root.children + ("ghost",))
    nodes["L1-9"] = TreeNode("L1-9", 1, "orphan", (), 0, 1)
    broken = MemoryTree(tree.root_id, nodes, tree.segments, tree.source_hash, tree.config_snapshot)
    kinds = {v.kind for v in validate_tree(broken)}
    assert {"dangling", "orphan"} <= kinds


def test_summary_budget_and_count_checked():
    tree = three_segment_tree()
    nodes = dict(tree.nodes)
    nodes["L1-0"] = replace(nodes["L1-0"], summary="word " * 50, summary_token_count=50)
    bad = MemoryTree(tree.root_id, nodes, tree.segments, tree.source_hash, tree.config_snapshot)
    kinds = [v.kind for v in validate_tree(bad, Config(summary_budget=10))]
    assert "summary_budget" in kinds


def test_leaf_root_tree_is_valid():
    tree = tree_from_levels(["only one segment"], [["short"]])
    assert tree.root.is_leaf
    assert validate_tree(tree) == []


def test_serialization_round_trip(tmp_path):
    tree = three_segment_tree()
    path = tmp_path / "tree.json"
    save_tree(tree, path)
    data = json.loads(path.read_text())
    assert set(data) == {"source_hash", "config_snapshot", "segments", "nodes", "root_id"}
    again = load_tree(path, "alpha one. beta two. gamma three.")
    assert again == tree
    assert again.dumps() == tree.dumps()


def test_source_hash_mismatch_is_error(tmp_path):
    path = tmp_path / "tree.json"
    save_tree(three_segment_tree(), path)
    with pytest.raises(CacheMismatch):
        load_tree(path, "a different document")


def test_task_presets():
    q, s, g = (task_config(t) for t in ("quality", "summscreenfd", "govreport"))
    assert (q.max_fanout, s.max_fanout, g.max_fanout) == (8, 5, 8)
    assert (q.segment_size, s.segment_size, g.segment_size) == (1000, 1000, 1200)
    assert q.effective_summary_budget == 400


@pytest.mark.parametrize(
    "kw",
    [
        dict(segment_size=3500),
        dict(max_fanout=1),
        dict(max_new_tokens=1024),
        dict(top_p=0.0),
        dict(grouping="random"),
    ],
)
def test_config_rejects_bad_values(kw):
    with pytest.raises(ConfigError):
        Config(**kw)


def test_config_unknown_keys():
    with pytest.raises(ConfigError):
        Config.from_dict({"segment_sise": 10})
