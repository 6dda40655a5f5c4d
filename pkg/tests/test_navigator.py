import pytest

from memwalker.backend import CallableBackend, ScriptedBackend, ScriptEntry
from memwalker.core import validate_tree
from memwalker.errors import InvalidInput
from memwalker.navigator import (
    Navigator,
    TrajectoryStep,
    compute_trace_metrics,
    memory_tokens,
    navigate,
    read_trajectory,
    render_transcript,
    revert_working_memory,
    update_working_memory,
    write_trajectory,
)

from conftest import (
    FIXED_CLOCK,
    MARS_LEFT_SUMMARY,
    MARS_ROOT_SUMMARY,
    MARS_OPTIONS,
    MARS_QUERY,
    small_config,
    tree_from_levels,
)
from scenarios import (
    ACCOUNTING_FIXTURES,
    GOLDEN,
    accounting_result,
    accounting_tree,
    entry,
    fold_tokens,
    randomized_navigations,
    run_mars_walk,
    mars_tree,
)

GARBAGE = "I am not sure what to do here."


def test_mars_trajectory():
    result, backend = run_mars_walk()
    assert result.answered and result.answer == "(A)" and result.reason is None
    assert result.metrics.strayed and result.metrics.steps == 5
    assert [s.node_id for s in result.trajectory] == ["L3-0", "L2-0", "L1-1", "L2-0", "L1-2"]
    assert [s.action for s in result.trajectory] == [0, 1, -1, 2, -2]
    assert backend.exhausted
    assert validate_tree(mars_tree()) == []


def test_mars_transcript_golden():
    result, _ = run_mars_walk()
    assert render_transcript(result.trajectory) == (GOLDEN / "mars_transcript.txt").read_text("utf-8")


def test_mars_working_memory_at_leaf():
    # the leaf prompt carries the summaries of the path below the root
    from conftest import MARS_RESPONSES

    script = ScriptedBackend([ScriptEntry(r, m) for m, r in MARS_RESPONSES])
    seen = []
    original = script._generate

    def spy(request):
        seen.append(request.prompt)
        return original(request)

    script._generate = spy
    Navigator(mars_tree(), script, clock=FIXED_CLOCK).navigate(MARS_QUERY, MARS_OPTIONS)
    leaf_prompt = seen[4]
    assert f"Story background information: {MARS_LEFT_SUMMARY}\nMain text:" in leaf_prompt
    assert MARS_ROOT_SUMMARY not in leaf_prompt
    assert "(A) He realized that despite human's" in leaf_prompt


def test_three_strikes_at_root(mars_tree):
    backend = ScriptedBackend([GARBAGE] * 3)
    result = navigate(mars_tree, MARS_QUERY, backend, clock=FIXED_CLOCK)
    assert not result.answered and result.reason == "invalid_streak"
    assert len(result.trajectory) == 3 and backend.exhausted
    assert all(s.error for s in result.trajectory)


def test_valid_action_resets_streak(mars_tree):
    script = [GARBAGE, GARBAGE, "Action: 0", GARBAGE, GARBAGE, "Action: 2", "Action: -2\nAnswer: (B)"]
    result = navigate(mars_tree, MARS_QUERY, ScriptedBackend(script), clock=FIXED_CLOCK)
    assert result.answer == "(B)"
    assert len(result.trajectory) == 7


def test_invalid_actions_count_as_strikes(mars_tree):
    # out-of-range child, commit at a non-leaf, revert at the root
    script = ["Action: 5", "Action: -2\nAnswer: (A)", "Action: -1"]
    result = navigate(mars_tree, MARS_QUERY, ScriptedBackend(script), clock=FIXED_CLOCK)
    assert result.reason == "invalid_streak" and len(result.trajectory) == 3


def test_single_leaf_tree():
    tree = tree_from_levels(["The answer is forty two. "], [["a number"]])
    result = navigate(tree, "What is it?", ScriptedBackend(["Action: -2\nAnswer: 42"]), clock=FIXED_CLOCK)
    assert result.answer == "42" and not result.metrics.strayed and result.metrics.steps == 1


def test_step_limit():
    tree = mars_tree()
    backend = CallableBackend(lambda r: "Action: 0" if "MOST LIKELY" in r.prompt else "Action: -1")
    cfg = tree.config.with_overrides(max_steps=10)
    result = navigate(tree, MARS_QUERY, backend, cfg, clock=FIXED_CLOCK)
    assert result.reason == "step_limit" and len(result.trajectory) == 10


def test_default_step_limit_is_three_per_node(mars_tree):
    nav = Navigator(mars_tree, ScriptedBackend([]))
    assert nav.max_steps == 3 * len(mars_tree.nodes)


def test_single_child_auto_descends():
    tree = tree_from_levels(
        ["one. ", "two. ", "three. "],
        [["s0", "s1", "s2"], [("g0", [0, 1]), ("g1", [2])], [("root", [0, 1])]],
    )
    # root -> L2-1 (single child, no prompt) -> leaf L1-2, revert climbs back to the root
    script = ["Action: 1", "Action: -1", "Action: 0", "Action: 0", "Action: -2\nAnswer: one"]
    result = navigate(tree, "Which?", ScriptedBackend(script), clock=FIXED_CLOCK)
    assert [s.node_id for s in result.trajectory] == ["L3-0", "L1-2", "L3-0", "L2-0", "L1-0"]
    assert result.trajectory[1].transition == "revert to L3-0"
    assert result.answer == "one"


def test_empty_query_rejected(mars_tree):
    with pytest.raises(InvalidInput):
        navigate(mars_tree, "  ", ScriptedBackend([]))


def test_working_memory_fixtures():
    a, b, c = entry("A"), entry("B"), entry("C")
    assert update_working_memory([a], b, 250) == [a, b]
    assert update_working_memory([a, b], c, 250) == [b, c]
    assert revert_working_memory([a, b], "B") == [a]
    assert update_working_memory([], entry("X", 300), 250) == []
    with pytest.raises(InvalidInput):
        update_working_memory([], a, -1)


@pytest.mark.parametrize("name, _, doc_tokens, tokens, fraction", ACCOUNTING_FIXTURES)
def test_token_accounting_fixtures(name, _, doc_tokens, tokens, fraction):
    trajectory, original = accounting_result(name)
    m = compute_trace_metrics(trajectory, original)
    assert m.tokens_processed == tokens == fold_tokens(trajectory)
    assert m.fraction_of_original == pytest.approx(fraction, abs=0)


def test_unique_accounting_counts_revisits_once():
    trajectory, original = accounting_result("stray")
    m = compute_trace_metrics(trajectory, original)
    assert m.strayed and m.tokens_processed_unique == 300


def test_metrics_require_steps():
    with pytest.raises(InvalidInput):
        compute_trace_metrics([], 10)


def test_no_revert_is_not_stray():
    steps = [TrajectoryStep(0, "n", "leaf", 5, "", -2, "x")]
    assert not compute_trace_metrics(steps, 10).strayed


def test_randomized_runs_respect_budgets():
    runs = 0
    for cfg, nav, result, guard in randomized_navigations(60, seed=7):
        runs += 1
        assert guard.violations == []
        assert all(size <= cfg.effective_working_memory_budget for size in nav.memory_sizes)
        assert memory_tokens(nav.state.working_memory) <= cfg.effective_working_memory_budget
        if result.trajectory:
            assert compute_trace_metrics(result.trajectory, nav.tree.source_tokens).tokens_processed == fold_tokens(
                result.trajectory
            )
        # path always follows tree edges
        path = nav.state.path
        assert path[0] == nav.tree.root_id
        assert all(nav.tree.parent(b) == a for a, b in zip(path, path[1:]))
    assert runs == 60


def test_truncation_keeps_prompts_in_window():
    cfg = small_config(segment_size=300, context_window=700, generation_reserve=128, prompt_overhead=100)
    tree = accounting_tree()
    long_query = " ".join(["why"] * 420)
    sizes = []

    def fn(req):
        from memwalker.tokenization import count_tokens

        sizes.append(count_tokens(req.prompt))
        return "Action: 0" if "MOST LIKELY" in req.prompt else "Action: -2\nAnswer: x"

    result = navigate(tree, long_query, CallableBackend(fn), cfg, clock=FIXED_CLOCK)
    assert result.answer == "x"
    leaf_parts = dict(result.trajectory[-1].parts)
    # memory is dropped first, then the segment is cut
    assert leaf_parts["memory"] == 0 and leaf_parts["segment"] < 100
    assert max(sizes) + cfg.generation_reserve <= cfg.context_window


def test_determinism():
    a, _ = run_mars_walk()
    b, _ = run_mars_walk()
    assert a == b


def test_trajectory_round_trip(tmp_path):
    result, _ = run_mars_walk()
    path = tmp_path / "t.jsonl"
    write_trajectory(path, result.trajectory)
    assert read_trajectory(path) == result.trajectory
