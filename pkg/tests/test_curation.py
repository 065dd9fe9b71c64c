import json

import jsonschema
import pytest
from hypothesis import given, settings, strategies as st

from mocoll.backends import BackendError, FunctionBackend, ScriptedBackend
from mocoll.corpus import CaptionedCase
from mocoll.curation import (
    ADVISORY_HPARAMS,
    CHAT_SFT_SCHEMA,
    TOP_R_GRID,
    CurationError,
    MemoryEntry,
    SelectionStrategy,
    VqaExample,
    curate,
    curation_config,
    emit_dataset,
    generate_memories,
    judge,
    manifest_path,
    read_dataset,
    read_memories,
    select_agent_based,
    select_top_r_rouge,
    verify_manifest,
    write_memories,
)
from mocoll.orchestrator import Backends
from mocoll.prompts import CAPTION_TRIGGER, parse_field, parse_transcript
from mocoll.simharness import FindingWorld, SimConfig, answer_is_correct, generate_world, sim_backends

STOP = '{"action": "stop"}'


def case(cid, report="the lungs are clear."):
    return CaptionedCase(cid, (f"{cid}.png",), report, "train")


def loop_agent(turns_per_case):
    """Asks ``turns_per_case[cid]`` questions, then stops; captions echo the case."""

    def fn(messages, params):
        system = messages[0].text
        cid = parse_field(system, "Case")
        n = len(parse_transcript(system))
        if messages[-1].text == CAPTION_TRIGGER:
            return f"caption {cid}"
        if n >= turns_per_case[cid]:
            return STOP
        return json.dumps({"action": "ask", "question": f"{cid} q{n + 1}?"})

    return FunctionBackend(fn)


def vqa():
    return FunctionBackend(lambda m, p: "answer: " + m[-1].text, vision=True)


def entry(answer="there is no pleural effusion.", truth="there is no pleural effusion. the heart size is normal.", cid="c"):
    return MemoryEntry(cid, ("x.png",), "What about the pleura?", answer, truth)


def keep_if_in_truth():
    def fn(messages, params):
        system = messages[0].text
        keep = parse_field(system, "Answer") in parse_field(system, "Ground truth")
        return json.dumps({"keep": keep})

    return FunctionBackend(fn)


def test_curation_defaults():
    cfg = curation_config()
    assert cfg.agent_params.temperature == 0.1 == cfg.vqa_params.temperature
    assert cfg.few_shot.strategy == "random"
    assert TOP_R_GRID == (0.5, 0.25, 0.125)


def test_two_cases_three_turns():
    cases = [case("a"), case("b")]
    mem, convs = generate_memories(cases, curation_config(k=0), Backends(loop_agent({"a": 3, "b": 3}), vqa()))
    assert len(mem) == 6
    assert all(c.caption is None for c in convs)
    assert mem[0] == MemoryEntry("a", ("a.png",), "a q1?", "answer: a q1?", "the lungs are clear.")


def test_immediate_stop_noted():
    cases = [case("a"), case("b")]
    ex, report, mem = curate(cases, curation_config(k=0), SelectionStrategy("none"), Backends(loop_agent({"a": 2, "b": 0}), vqa()))
    assert len(mem) == 2
    assert report.per_case["b"] == {"memories": 0, "selected": 0, "stop_reason": "agent_stop"}


def test_strategy_none_ratio_one():
    cases = [case("a"), case("b")]
    ex, report, mem = curate(cases, curation_config(k=0), SelectionStrategy("none"), Backends(loop_agent({"a": 2, "b": 3}), vqa()))
    assert report.selection_ratio == 1.0
    assert ex == [VqaExample.from_memory(m) for m in mem]


def test_zero_memories_error():
    with pytest.raises(CurationError):
        curate([case("a")], curation_config(k=0), SelectionStrategy("none"), Backends(loop_agent({"a": 0}), vqa()))


def test_selector_consistent_and_contradicting():
    sel = keep_if_in_truth()
    assert select_agent_based(sel, entry()) is True
    assert select_agent_based(sel, entry(answer="there is a pleural effusion.")) is False


def test_selector_parse_drop():
    agent = ScriptedBackend(["sure", "yes I would keep it"])
    assert judge(agent, entry()) == "parse_drop"
    assert select_agent_based(ScriptedBackend(["?", "?"]), entry()) is False
    assert judge(ScriptedBackend(["nope", '{"keep": true}']), entry()) == "keep"


def test_selector_prompt_carries_triple():
    agent = ScriptedBackend(['{"keep": true}'])
    judge(agent, entry())
    system = agent.calls[0][0].text
    assert parse_field(system, "Question") == "What about the pleura?"
    assert parse_field(system, "Answer") == "there is no pleural effusion."
    assert parse_field(system, "Ground truth").startswith("there is no pleural effusion.")
    assert agent.calls[0][0].role == "system"


def test_curate_counts_drops_separately():
    cases = [case(c) for c in "abc"]
    replies = {"a q1?": '{"keep": true}', "b q1?": '{"keep": false}'}

    def selector(messages, params):
        q = parse_field(messages[0].text, "Question")
        if q == "c q1?":
            raise BackendError("selector down")
        return replies[q]

    b = Backends(loop_agent({"a": 1, "b": 1, "c": 1}), vqa(), select_agent=FunctionBackend(selector))
    ex, report, _ = curate(cases, curation_config(k=0), SelectionStrategy("agent_based"), b)
    assert [e.case_id for e in ex] == ["a"]
    assert (report.rejected, report.parse_drops, report.error_drops) == (1, 0, 1)


def test_agent_always_true_equals_none():
    cases = [case(c) for c in "abcd"]
    mk = lambda: Backends(loop_agent({"a": 1, "b": 2, "c": 3, "d": 2}), vqa(), select_agent=FunctionBackend(lambda m, p: '{"keep": true}'))
    ex_agent, rep, _ = curate(cases, curation_config(k=0), SelectionStrategy("agent_based"), mk())
    ex_none, _, _ = curate(cases, curation_config(k=0), SelectionStrategy("none"), mk())
    assert ex_agent == ex_none and rep.selection_ratio == 1.0


def test_agent_always_false_zero_output():
    cases = [case(c) for c in "ab"]
    b = Backends(loop_agent({"a": 1, "b": 2}), vqa(), select_agent=FunctionBackend(lambda m, p: '{"keep": false}'))
    ex, rep, _ = curate(cases, curation_config(k=0), SelectionStrategy("agent_based"), b)
    assert ex == [] and rep.n_selected == 0
    with pytest.raises(CurationError):
        emit_dataset(ex, "unused.jsonl")


def four_case_fixture():
    truths = {c: "alpha beta gamma delta epsilon" for c in "ABCD"}
    captions = {
        "A": "alpha beta gamma delta epsilon",
        "B": "alpha beta gamma",
        "C": "alpha beta",
        "D": "zeta",
    }
    mem = [MemoryEntry(c, ("x",), f"q{i}", f"a{i}", truths[c]) for c in "ABCD" for i in range(2)]
    return mem, captions, truths


def test_top_r_keeps_two_best_cases():
    mem, captions, truths = four_case_fixture()
    kept = select_top_r_rouge(mem, captions, truths, r=0.5)
    assert {m.case_id for m in kept} == {"A", "B"}
    assert len(kept) == 4


def test_top_r_one_is_identity():
    mem, captions, truths = four_case_fixture()
    assert select_top_r_rouge(mem, captions, truths, r=1.0) == mem


def test_top_r_ties_by_case_id():
    mem = [MemoryEntry(c, ("x",), "q", "a", "same words") for c in "zyx"]
    kept = select_top_r_rouge(mem, {c: "same words" for c in "xyz"}, r=0.34)
    assert {m.case_id for m in kept} == {"x", "y"}


def test_top_r_missing_caption():
    mem, captions, truths = four_case_fixture()
    del captions["C"]
    with pytest.raises(CurationError, match="'C'"):
        select_top_r_rouge(mem, captions, truths, r=0.5)


@settings(max_examples=50, deadline=None)
@given(scores=st.lists(st.integers(0, 5), min_size=1, max_size=8))
def test_top_r_ratio_monotone(scores):
    truth = "a b c d e"
    mem, captions = [], {}
    for i, s in enumerate(scores):
        cid = f"c{i}"
        captions[cid] = " ".join("abcde"[:s]) or "z"
        mem += [MemoryEntry(cid, ("x",), f"q{j}", "a", truth) for j in range(1 + i % 3)]
    sizes = [len(select_top_r_rouge(mem, captions, r=r)) for r in (1.0, *TOP_R_GRID)]
    assert sizes == sorted(sizes, reverse=True)
    assert sizes[0] == len(mem)


def test_curate_top_r_runs_captioning():
    cases = [case("a", "caption a"), case("b", "something else")]
    ex, rep, _ = curate(cases, curation_config(k=0), SelectionStrategy("top_r_rouge", 0.5), Backends(loop_agent({"a": 1, "b": 2}), vqa()))
    assert [e.case_id for e in ex] == ["a"]
    assert rep.per_case["a"]["rouge_l"] == 1.0


def test_strategy_parse():
    assert SelectionStrategy.parse("none").kind == "none"
    assert SelectionStrategy.parse("agent").kind == "agent_based"
    s = SelectionStrategy.parse("top-r=0.25")
    assert (s.kind, s.r, str(s)) == ("top_r_rouge", 0.25, "top-r=0.25")
    for bad in ("top-r=0", "top-r=1.5", "best"):
        with pytest.raises(ValueError):
            SelectionStrategy.parse(bad)


def test_sim_perfect_selector_ratio():
    world = generate_world(FindingWorld(seed=3), 300)
    sim = SimConfig(epsilon=0.3, seed=3)
    ex, rep, mem = curate(world.captioned(), curation_config(max_questions=4, k=0), SelectionStrategy("agent_based"), sim_backends(world, sim))
    assert rep.n_memories >= 1000
    assert rep.selection_ratio == pytest.approx(0.7, abs=0.05)
    kept = {(e.case_id, e.question) for e in ex}
    for m in mem:
        assert ((m.case_id, m.question) in kept) == answer_is_correct(world, m)


def test_selection_never_edits_entries():
    world = generate_world(FindingWorld(seed=1), 30)
    ex, _, mem = curate(world.captioned(), curation_config(max_questions=3, k=0), SelectionStrategy("agent_based"), sim_backends(world, SimConfig(epsilon=0.3)))
    pool = {(m.case_id, m.image_refs, m.question, m.answer) for m in mem}
    assert all((e.case_id, e.image_refs, e.question, e.answer) in pool for e in ex)


def examples():
    return [
        VqaExample("a", ("a1.png", "a2.png"), "What about the lungs?", "The lungs are clear."),
        VqaExample("b", ("b.png",), "Any effusion?", "No pleural effusion, é."),
    ]


def test_emit_vqa_round_trip(tmp_path):
    out = tmp_path / "ds.jsonl"
    manifest = emit_dataset(examples(), out, strategy="agent")
    assert len(out.read_text(encoding="utf-8").splitlines()) == 2
    assert manifest["n_examples"] == 2 and manifest["strategy"] == "agent"
    assert json.loads(out.read_text(encoding="utf-8").splitlines()[0]) == {
        "case_id": "a", "images": ["a1.png", "a2.png"], "question": "What about the lungs?", "answer": "The lungs are clear."
    }
    assert read_dataset(out) == examples()
    assert verify_manifest(out)
    out.write_text(out.read_text() + "\n")
    assert not verify_manifest(out)


def test_manifest_hparams(tmp_path):
    emit_dataset(examples(), tmp_path / "ds.jsonl")
    manifest = json.loads(manifest_path(tmp_path / "ds.jsonl").read_text())
    hp = manifest["advisory_hparams"]
    assert hp["learning_rate"] == 3e-7 and hp["warmup_ratio"] == 0.03
    assert hp["lr_scheduler"] == "cosine"
    assert (hp["epochs_within_dataset"], hp["epochs_cross_dataset"]) == (5, 1)
    assert hp == ADVISORY_HPARAMS


def test_chat_sft_schema(tmp_path):
    out = tmp_path / "sft.jsonl"
    emit_dataset(examples(), out, "chat_sft_jsonl")
    for line in out.read_text(encoding="utf-8").splitlines():
        jsonschema.validate(json.loads(line), CHAT_SFT_SCHEMA)
    assert read_dataset(out) == examples()
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate({"case_id": "a", "images": [], "messages": []}, CHAT_SFT_SCHEMA)


def test_unknown_format(tmp_path):
    with pytest.raises(ValueError):
        emit_dataset(examples(), tmp_path / "x", "parquet")


def test_memory_file_round_trip(tmp_path):
    mem = [entry(cid="a"), entry(cid="b", answer="x")]
    write_memories(mem, tmp_path / "m.jsonl")
    rec = json.loads((tmp_path / "m.jsonl").read_text().splitlines()[0])
    assert set(rec) == {"case_id", "images", "q", "a", "ground_truth"}
    assert read_memories(tmp_path / "m.jsonl") == mem


def test_memory_invariants():
    with pytest.raises(ValueError):
        MemoryEntry("a", ("x",), "", "a", "t")
    with pytest.raises(ValueError):
        MemoryEntry("a", (), "q", "a", "t")
