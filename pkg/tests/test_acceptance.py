"""Acceptance criteria, one test each.

Every test prints a single ``PASS``/``FAIL`` line with its runtime; run with
``pytest tests/test_acceptance.py -s`` to see them.
"""

import hashlib
import json
import random
import time
from contextlib import contextmanager
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from conftest import DATA
from oracles import all_metrics_oracle
from mocoll.backends import EmbeddingIndex, FunctionBackend
from mocoll.cli import main
from mocoll.corpus import CaptionedCase, Corpus, CorpusError, VocabFilter, apply_vocab_filter, load_corpus, split_corpus
from mocoll.curation import CHAT_SFT_SCHEMA, VqaExample, emit_dataset, manifest_path, read_dataset
from mocoll.metrics import COLUMNS, score_all
from mocoll.orchestrator import Backends, OrchestratorConfig, Stop, _decision_from, run_conversation
from mocoll.prompts import CAPTION_TRIGGER, EXAMPLES_HEADER
from mocoll.retrieval import FewShotConfig, select_examples
from mocoll.simharness import AblationSetup, FindingWorld, SimConfig, run_ablation
from mocoll.text import tokenize


@contextmanager
def criterion(name, limit):
    start = time.perf_counter()
    try:
        yield
    except BaseException as exc:
        print(f"\nFAIL  {name}  ({time.perf_counter() - start:.2f}s): {type(exc).__name__}: {exc}")
        raise
    elapsed = time.perf_counter() - start
    ok = elapsed < limit
    print(f"\n{'PASS' if ok else 'FAIL'}  {name}  ({elapsed:.2f}s, limit {limit:g}s)")
    assert ok, f"{name} took {elapsed:.2f}s (limit {limit}s)"


def test_metric_oracle_suite():
    with criterion("metric oracle suite", 1.0):
        recs = [json.loads(l) for l in (DATA / "golden_fixture.jsonl").read_text().splitlines()]
        frozen = json.loads((DATA / "golden_metrics.json").read_text())
        cands = [tokenize(r["candidate"]) for r in recs]
        refs = [tokenize(r["reference"]) for r in recs]
        report = score_all(cands, refs)
        live = all_metrics_oracle(cands, refs)
        for key in COLUMNS:
            assert abs(getattr(report, key) - frozen[key]) <= 1e-9, key
            assert abs(getattr(report, key) - live[key]) <= 1e-9, key
        ident = score_all(refs, refs)
        assert ident.bleu1 == ident.bleu2 == ident.bleu3 == ident.bleu4 == ident.rouge_l == 1.0
        well = [tokenize("the heart is normal in size"), tokenize("no focal consolidation is seen"), tokenize("mild degenerative change of the spine")]
        assert score_all(well, well).cider == pytest.approx(10.0, abs=1e-12)


def test_loop_bound():
    with criterion("question-loop bound (1000 randomized runs)", 10.0):
        vqa = FunctionBackend(lambda m, p: "an answer", vision=True)
        case = CaptionedCase("c", ("c.png",), "truth")
        for seed in range(1000):
            rng = random.Random(seed)
            m = rng.randint(1, 8)
            p_stop, p_junk = rng.random() * 0.4, rng.random() * 0.2
            decisions = []

            def agent(messages, params):
                if messages[-1].text == CAPTION_TRIGGER:
                    return "caption"
                r = rng.random()
                if r < p_stop:
                    reply = '{"action": "stop"}'
                elif r < p_stop + p_junk:
                    reply = "hmm"
                else:
                    reply = json.dumps({"action": "ask", "question": f"q{rng.randint(0, 9)}"})
                d = _decision_from(reply)
                if d is not None:
                    decisions.append(d)
                return reply

            conv = run_conversation(case, OrchestratorConfig(max_questions=m), Backends(FunctionBackend(agent), vqa))
            assert len(conv.turns) <= m
            if conv.stop_reason == "agent_stop":
                assert isinstance(decisions[-1], Stop)
            elif conv.stop_reason == "max_questions":
                assert len(conv.turns) == m
            else:
                assert conv.stop_reason == "error"


def _digests(path: Path) -> dict:
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(path.iterdir())}


def test_determinism(tmp_path):
    with criterion("infer/curate byte-identical across runs and parallelism {1, 8}", 30.0):
        cfg = tmp_path / "sim.toml"
        cfg.write_text('[sim]\nn_cases = 60\nepsilon = 0.3\n[orchestrator]\nmax_questions = 4\nfew_shot_k = 3\n[curation]\nstrategy = "agent"\n')
        for command in ("infer", "curate"):
            seen = []
            for i, par in enumerate((1, 8, 1, 8)):
                out = tmp_path / f"{command}{i}"
                assert main([command, "--config", str(cfg), "--parallelism", str(par), "--out", str(out)]) == 0
                seen.append(_digests(out))
            assert all(d == seen[0] for d in seen), command


def test_retrieval_exactness():
    with criterion("retrieval exactness (200 fixtures, d=16, pool 500)", 5.0):
        rng = np.random.default_rng(2024)
        mismatches = 0
        for _ in range(200):
            mat = rng.normal(size=(501, 16))
            ids = [f"p{i:03d}" for i in range(500)]
            index = EmbeddingIndex.from_mapping({**dict(zip(ids, mat[:500])), "query": mat[500]})
            pool = [CaptionedCase(cid, (cid,), cid) for cid in ids]
            got = select_examples(CaptionedCase("query", ("q",), "q"), pool, FewShotConfig(5, "similarity"), index).case_ids
            unit = mat / np.linalg.norm(mat, axis=1, keepdims=True)
            sims = unit[:500] @ unit[500]
            want = [ids[i] for i in sorted(range(500), key=lambda i: (-sims[i], ids[i]))[:5]]
            mismatches += got != want
        assert mismatches == 0


def test_selection_ablation_trend():
    with criterion("selection ablation trend (eps=0.3, 200 cases, M=4)", 60.0):
        setup = AblationSetup(sim=SimConfig(epsilon=0.3), n_cases=200, max_questions=4)
        rows = {r["strategy"]: r for r in run_ablation("selection_strategy", ["none", "top-r=0.5", "agent"], setup).rows}
        print(f"\n  precision none={rows['none']['precision']:.4f} top-r=0.5={rows['top-r=0.5']['precision']:.4f} "
              f"agent={rows['agent']['precision']:.4f}; agent ratio={rows['agent']['selection_ratio']:.4f}")
        assert rows["agent"]["precision"] == 1.0
        assert 0.67 <= rows["none"]["precision"] <= 0.73
        assert rows["none"]["precision"] < rows["top-r=0.5"]["precision"] < rows["agent"]["precision"]
        assert 0.65 <= rows["agent"]["selection_ratio"] <= 0.75


def test_conversation_length_trend():
    with criterion("conversation-length trend (coverage policy, 4 findings)", 30.0):
        setup = AblationSetup(world=FindingWorld(n_findings_per_case=(4, 4)), sim=SimConfig(epsilon=0.0), n_cases=200)
        recall = run_ablation("conversation_length", [1, 2, 3, 4], setup).column("finding_recall")
        print(f"\n  finding recall by M: {recall}")
        assert all(a <= b for a, b in zip(recall, recall[1:]))
        assert recall[-1] == 1.0


def test_icl_plumbing():
    with criterion("few-shot plumbing (k=0 / k=5 / similarity top-5)", 5.0):
        rng = np.random.default_rng(5)
        pool = [CaptionedCase(f"p{i:02d}", (f"p{i:02d}",), f"caption number {i:02d}") for i in range(40)]
        query = CaptionedCase("query", ("q",), "query caption")
        vectors = {c.case_id: rng.normal(size=8) for c in pool + [query]}
        index = EmbeddingIndex.from_mapping(vectors)
        vqa = FunctionBackend(lambda m, p: "a", vision=True)

        def system_prompts(cfg):
            calls = []

            def agent(messages, params):
                calls.append(messages[0].text)
                return "caption" if messages[-1].text == CAPTION_TRIGGER else '{"action": "stop"}'

            conv = run_conversation(query, OrchestratorConfig(few_shot=cfg), Backends(FunctionBackend(agent), vqa, pool=pool, index=index))
            return conv, calls

        _, calls = system_prompts(FewShotConfig(k=0))
        assert all(EXAMPLES_HEADER not in s and "caption number" not in s for s in calls)

        for strategy in ("random", "similarity"):
            conv, calls = system_prompts(FewShotConfig(k=5, strategy=strategy, seed=1))
            for s in calls:
                shown = [c.report_text for c in pool if c.report_text in s]
                assert len(shown) == 5 and len(set(shown)) == 5
                assert "query caption" not in s
            if strategy == "similarity":
                q = vectors["query"] / np.linalg.norm(vectors["query"])
                sims = {c.case_id: float(vectors[c.case_id] @ q / np.linalg.norm(vectors[c.case_id])) for c in pool}
                top5 = sorted(sims, key=lambda cid: (-sims[cid], cid))[:5]
                assert list(conv.example_ids) == top5


def test_curation_round_trip(tmp_path):
    with criterion("curation round-trip (vqa_jsonl, manifest hash, chat schema)", 5.0):
        examples = [
            VqaExample(f"c{i}", tuple(f"c{i}_{j}.png" for j in range(1 + i % 4)), f"question {i}?", f"answer {i} ünïcode")
            for i in range(25)
        ]
        out = tmp_path / "vqa.jsonl"
        manifest = emit_dataset(examples, out, "vqa_jsonl", strategy="agent")
        assert read_dataset(out) == examples
        assert manifest["content_sha256"] == hashlib.sha256(out.read_bytes()).hexdigest()
        assert json.loads(manifest_path(out).read_text())["content_sha256"] == manifest["content_sha256"]
        sft = tmp_path / "sft.jsonl"
        emit_dataset(examples, sft, "chat_sft_jsonl")
        for line in sft.read_text(encoding="utf-8").splitlines():
            jsonschema.validate(json.loads(line), CHAT_SFT_SCHEMA)


def test_corpus_preprocessing(tmp_path):
    with criterion("corpus preprocessing (vocab filter, 8:2 split, image bounds)", 1.0):
        corpus = Corpus((CaptionedCase("1", ("x",), "a b", "train"), CaptionedCase("2", ("y",), "a c", "train")))
        assert apply_vocab_filter(corpus, VocabFilter(0)) == corpus
        assert [c.report_text for c in apply_vocab_filter(corpus, VocabFilter(2))] == ["a <unk>", "a <unk>"]

        ten = Corpus(tuple(CaptionedCase(f"c{i}", ("x",), "r") for i in range(10)))
        a, b = split_corpus(ten, 0.8, seed=7), split_corpus(ten, 0.8, seed=7)
        assert a == b and len(a.train) == 8 and len(a.test) == 2

        for n in (0, 5):
            path = tmp_path / f"m{n}.jsonl"
            path.write_text(json.dumps({"case_id": "bad", "images": [f"{i}.png" for i in range(n)], "finding": "f"}) + "\n")
            with pytest.raises(CorpusError):
                load_corpus(path)
            with pytest.raises(CorpusError):
                CaptionedCase("bad", tuple(f"{i}.png" for i in range(n)), "f")
