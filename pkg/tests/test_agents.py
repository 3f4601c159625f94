"""Tests for the refinement pipeline: evaluator, cycles, consensus,
post-processing, and the full orchestration under a scripted mock."""

import json

import numpy as np
import pytest

from textseries.agents import (
    APPROVAL_TOKEN,
    AgentMessage,
    BackendError,
    HttpBackend,
    MockBackend,
    RefinementConfig,
    RefinementItem,
    Role,
    Stage,
    Transcript,
    auto_evaluate,
    detect_period,
    inter_group_consensus,
    intra_group_cycle,
    postprocess,
    run_refinement,
    write_template_library,
    write_transcripts,
)
from textseries.metrics import seasonal_naive
from textseries.textsynth import TextDescription, extract_stats, stats_slots


def desc(text):
    return TextDescription(text=text, template_id="t", slots={}, window_ref="w")


def shifted_series():
    t = np.arange(96)
    gen = np.random.Generator(np.random.PCG64(0))
    history = np.sin(2 * np.pi * t / 24) + 0.05 * gen.standard_normal(96)
    truth = np.sin(2 * np.pi * np.arange(96, 120) / 24) + 2.0
    return history, truth


# ---------------------------------------------------------------------------
# auto_evaluate
# ---------------------------------------------------------------------------


def test_true_mean_text_beats_shifted_mean_text():
    history, truth = shifted_series()
    good = auto_evaluate("projection with a mean of 2.00", history, truth)
    bad = auto_evaluate("projection with a mean of 6.00", history, truth)
    assert good < bad


def test_no_numeric_fields_equals_plain_seasonal_naive():
    history, truth = shifted_series()
    period = detect_period(history)
    naive_mae = float(np.mean(np.abs(seasonal_naive(history, truth.size, period) - truth)))
    assert auto_evaluate("no numbers at all here", history, truth) == pytest.approx(naive_mae)


def test_perfect_text_beats_seasonal_naive_on_pure_sine():
    # short history relative to the period, so lag detection fails and the
    # text's stated periodicity carries real information
    t = np.arange(40)
    history = np.sin(2 * np.pi * t / 36)
    truth = np.sin(2 * np.pi * np.arange(40, 64) / 36)
    period = detect_period(history)
    naive_mae = float(np.mean(np.abs(seasonal_naive(history, 24, period) - truth)))
    s = extract_stats(truth, k=3)
    sl = stats_slots(s)
    perfect = (f"cyclical values recurring every 36 steps with a mean of "
               f"{sl['mean_value']} and a standard deviation of {sl['std_value']}.")
    assert auto_evaluate(perfect, history, truth) < naive_mae


def test_peak_steps_are_pinned_to_history_max():
    history = np.concatenate([np.zeros(20), [5.0], np.zeros(19)])
    truth = np.zeros(10)
    truth[3] = 5.0
    fit = auto_evaluate("flat run with peaks expected at steps 3", history, truth)
    base = auto_evaluate("flat run", history, truth)
    assert fit < base


def test_empty_history_is_error():
    with pytest.raises(ValueError, match="history"):
        auto_evaluate("text", np.array([]), np.ones(4))


def test_detect_period_finds_cycle():
    t = np.arange(200)
    x = np.sin(2 * np.pi * t / 25)
    assert detect_period(x) % 25 == 0


# ---------------------------------------------------------------------------
# intra-group cycles
# ---------------------------------------------------------------------------


def scripted(entries):
    return MockBackend([{"role": r, "content": c} for r, c in entries])


def flat_item():
    history = np.ones(48) * 3.0 + np.sin(np.arange(48) / 4.0)
    truth = np.ones(24) * 3.0 + np.sin(np.arange(48, 72) / 4.0)
    return history, truth


def test_intra_stops_on_approval_cycle_two():
    history, truth = flat_item()
    backend = scripted([
        ("scientist", "analysis 1"), ("engineer", "rewrite with a mean of 3.00"),
        ("observer", "needs work"),
        ("scientist", "analysis 2"), ("engineer", "rewrite with a mean of 3.10"),
        ("observer", f"fine {APPROVAL_TOKEN}"),
    ])
    transcript = Transcript("x")
    result = intra_group_cycle("A", desc("start"), backend,
                               lambda d: auto_evaluate(d, history, truth),
                               RefinementConfig(), transcript)
    assert result.cycles == 2
    assert result.approved
    assert len([m for m in transcript.messages if m.role == Role.ENGINEER]) == 2


def test_intra_cap_reached_without_approval():
    history, truth = flat_item()
    entries = []
    for i in range(4):
        entries += [("scientist", f"a{i}"), ("engineer", f"r{i}"), ("observer", "meh")]
    transcript = Transcript("x")
    result = intra_group_cycle("A", desc("start"), scripted(entries),
                               lambda d: auto_evaluate(d, history, truth),
                               RefinementConfig(max_intra_iters=4), transcript)
    assert result.cycles == 4
    assert not result.approved


def test_regression_rewrite_keeps_earlier_draft():
    # truth is mean-shifted, so deleting the stated mean loses real signal
    history, truth = shifted_series()
    good_text = "values hold with a mean of 2.00"
    bad_text = "the numbers were removed entirely"
    backend = scripted([
        ("scientist", "s1"), ("engineer", bad_text), ("observer", APPROVAL_TOKEN),
    ])
    transcript = Transcript("x")
    result = intra_group_cycle("A", desc(good_text), backend,
                               lambda d: auto_evaluate(d, history, truth),
                               RefinementConfig(), transcript)
    assert result.best.text == good_text  # the worse rewrite did not win


def test_best_fitness_non_increasing_across_cycles():
    history, truth = flat_item()
    rewrites = ["a mean of 3.50", "a mean of 3.05", "a mean of 9.00", "a mean of 3.01"]
    entries = []
    for r in rewrites:
        entries += [("scientist", "s"), ("engineer", r), ("observer", "continue")]
    transcript = Transcript("x")
    evaluator = lambda d: auto_evaluate(d, history, truth)
    result = intra_group_cycle("A", desc("start"), scripted(entries), evaluator,
                               RefinementConfig(max_intra_iters=4), transcript)
    best_so_far = evaluator(desc("start"))
    for f in result.fitness_per_cycle:
        best_so_far = min(best_so_far, f)
    assert evaluator(result.best) == pytest.approx(best_so_far)


# ---------------------------------------------------------------------------
# inter-group consensus
# ---------------------------------------------------------------------------


def test_identical_drafts_immediate_consensus():
    history, truth = flat_item()
    transcript = Transcript("x")
    winner, consensus = inter_group_consensus(
        desc("same"), desc("same"), scripted([]),
        lambda d: auto_evaluate(d, history, truth), RefinementConfig(), transcript)
    assert consensus
    assert winner.text == "same"
    assert all(m.stage == Stage.INTER for m in transcript.messages)


def test_mutual_accept_first_round_returns_better():
    history, truth = shifted_series()
    a = desc("draft with a mean of 2.00")
    b = desc("draft without information")
    backend = scripted([("planner", f"ours is fine {APPROVAL_TOKEN}"),
                        ("planner", f"agreed {APPROVAL_TOKEN}")])
    transcript = Transcript("x")
    winner, consensus = inter_group_consensus(
        a, b, backend, lambda d: auto_evaluate(d, history, truth),
        RefinementConfig(), transcript)
    assert consensus
    assert winner is a
    rounds = {m.iteration for m in transcript.messages if m.role == Role.PLANNER}
    assert rounds == {1}


def test_cap_disagreement_applies_fitness_tiebreak():
    history, truth = shifted_series()
    a = desc("vague draft")
    b = desc("draft with a mean of 2.00")
    entries = [("planner", "no"), ("planner", "never")] * 3
    transcript = Transcript("x")
    winner, consensus = inter_group_consensus(
        a, b, scripted(entries), lambda d: auto_evaluate(d, history, truth),
        RefinementConfig(max_inter_rounds=3), transcript)
    assert not consensus
    assert winner is b
    assert "team B" in transcript.messages[-1].content


def test_tie_goes_to_team_a():
    history, truth = flat_item()
    a, b = desc("identical fitness"), desc("identical fitness ")
    entries = [("planner", "no"), ("planner", "no")] * 3
    winner, _ = inter_group_consensus(
        a, b, scripted(entries), lambda d: auto_evaluate(d, history, truth),
        RefinementConfig(), Transcript("x"))
    assert winner is a


# ---------------------------------------------------------------------------
# postprocess
# ---------------------------------------------------------------------------


def test_postprocess_dedup_exact_and_normalized():
    texts = ["a mean of 3.00 overall", "a mean of 3.00 overall",
             "A MEAN of 4.00    overall"]
    templates, rejected = postprocess(texts, banned=[])
    assert len(templates) == 1
    assert rejected == []
    assert templates[0].body == "a {mean_value} overall".replace("{mean_value}",
                                                                 "mean of {mean_value}")


def test_postprocess_recovers_min_max_slots():
    templates, _ = postprocess(
        ["between a minimum of 310.00 and a maximum of 622.00 overall"], banned=[])
    assert templates[0].required_slots == {"min_value", "max_value"}
    assert "{min_value}" in templates[0].body


def test_postprocess_rejects_unabstracted_numerals():
    templates, rejected = postprocess(
        ["the raw level sat at 453.34 with no grammar phrase"], banned=[])
    assert templates == []
    assert len(rejected) == 1
    assert any("453.34" in r for r in rejected[0][1])


def test_postprocess_rejects_banned_names():
    templates, rejected = postprocess(
        ["the air passengers dataset shows a mean of 4.00"])
    assert templates == []
    assert "air passengers" in rejected[0][1][0]


def test_postprocess_idempotent():
    texts = ["values show a mean of 1.25 and a standard deviation of 0.50",
             "peaks occur at steps 5, 15, 25 in the window"]
    once, _ = postprocess(texts, banned=[])
    twice, _ = postprocess([t.body for t in once], banned=[])
    assert [t.body for t in once] == [t.body for t in twice]
    assert [t.required_slots for t in once] == [t.required_slots for t in twice]


# ---------------------------------------------------------------------------
# full pipeline
# ---------------------------------------------------------------------------


def pipeline_script(n_items, teams=2, approve=True):
    """Enough responses for every team cycle plus consensus per item."""
    item_words = ["alpha", "beta", "gamma", "delta"]
    entries = []
    for i in range(n_items):
        word = item_words[i % len(item_words)]
        for team in range(teams):
            entries += [
                ("scientist", f"analysis of draft {word}"),
                ("engineer", f"series {word} holds near a mean of 3.0{team}"),
                ("observer", APPROVAL_TOKEN if approve else "keep going"),
            ]
        if teams == 2:
            entries += [("planner", APPROVAL_TOKEN), ("planner", APPROVAL_TOKEN)]
    return entries


def make_items(n):
    history, truth = flat_item()
    return [RefinementItem(text=desc(f"initial text {i} with a mean of 2.50"),
                           history=history, truth=truth, item_id=f"item-{i:03d}")
            for i in range(n)]


def test_run_refinement_stage_order():
    items = make_items(1)
    outcome = run_refinement(items, scripted(pipeline_script(1)),
                             RefinementConfig(), banned=[])
    stages = [m.stage for m in outcome.transcripts[0].messages]
    order = {Stage.PLANNING: 0, Stage.INTRA: 1, Stage.INTER: 2, Stage.POST: 3}
    assert stages[0] == Stage.PLANNING
    assert stages[-1] == Stage.POST
    assert all(order[a] <= order[b] for a, b in zip(stages, stages[1:]))
    assert outcome.templates


def test_run_refinement_continues_past_backend_failure():
    items = make_items(3)
    # responses for items 0 and 1 only; item 2 starves the mock
    outcome = run_refinement(items, scripted(pipeline_script(2)),
                             RefinementConfig(), banned=[])
    statuses = [t.status for t in outcome.transcripts]
    assert statuses.count("backend_error") == 1
    assert len(outcome.refined_texts) == 2


def test_run_refinement_bit_reproducible(tmp_path):
    def run_once(path):
        outcome = run_refinement(make_items(2), scripted(pipeline_script(2)),
                                 RefinementConfig(seed=7), banned=[])
        write_transcripts(outcome.transcripts, path)
        write_template_library(outcome.templates, path.with_suffix(".lib"))
        return path.read_bytes() + path.with_suffix(".lib").read_bytes()

    a = run_once(tmp_path / "a.jsonl")
    b = run_once(tmp_path / "b.jsonl")
    assert a == b


def test_single_team_strategies_skip_inter_stage():
    items = make_items(1)
    outcome = run_refinement(items, scripted(pipeline_script(1, teams=1)),
                             RefinementConfig(strategy="single_macro"), banned=[])
    stages = {m.stage for m in outcome.transcripts[0].messages}
    assert Stage.INTER not in stages


def test_library_templates_all_validate():
    outcome = run_refinement(make_items(2), scripted(pipeline_script(2)),
                             RefinementConfig(), banned=[])
    from textseries.textsynth import validate_template
    for t in outcome.templates:
        assert validate_template(t, []).ok


def test_transcript_rejects_backward_stage():
    t = Transcript("x")
    t.append(AgentMessage(Role.MANAGER, "none", Stage.INTER, "m", 0))
    with pytest.raises(ValueError, match="stage"):
        t.append(AgentMessage(Role.MANAGER, "none", Stage.PLANNING, "m", 0))


def test_http_backend_requires_endpoint(monkeypatch):
    monkeypatch.delenv("BRIDGE_LLM_ENDPOINT", raising=False)
    with pytest.raises(BackendError, match="BRIDGE_LLM_ENDPOINT"):
        HttpBackend()


def test_mock_backend_from_script_file(tmp_path):
    path = tmp_path / "script.json"
    path.write_text(json.dumps({"responses": [
        {"role": "scientist", "content": "hello"}]}))
    backend = MockBackend.from_script_file(path)
    assert backend.complete(Role.SCIENTIST, "sys", []) == "hello"
    with pytest.raises(BackendError, match="exhausted"):
        backend.complete(Role.SCIENTIST, "sys", [])
