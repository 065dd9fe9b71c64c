"""Command-line entry point: ``mocoll <ingest|infer|curate|emit|evaluate|simulate>``.

Every command writes into a run directory (``<output_dir>/<command>-<hash>``,
or ``--out``) together with a ``run.json`` holding the config snapshot and
SHA-256 hashes of each output file.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional

from . import __version__
from .backends import (
    AGENT_KEY_ENV,
    VQA_KEY_ENV,
    ChatBackend,
    GenerationParams,
    RemoteBackend,
    ScriptedBackend,
    api_key,
    load_embedding_index,
    write_embedding_index,
)
from .config import ConfigError, config_hash, load_config, snapshot
from .corpus import (
    Corpus,
    CorpusError,
    VocabFilter,
    apply_vocab_filter,
    load_corpus,
    read_corpus,
    split_corpus,
    write_corpus,
)
from .curation import (
    CurationError,
    SelectionStrategy,
    VqaExample,
    curate,
    curation_config,
    emit_dataset,
    read_dataset,
    read_memories,
    write_memories,
)
from .metrics import score_texts
from .orchestrator import AllCasesFailed, Backends, ConversationLog, OrchestratorConfig, run_batch
from .prompts import PromptError, PromptSet
from .report import table_text, write_ablation, write_metrics
from .retrieval import FewShotConfig
from .simharness import (
    ABLATIONS,
    DEFAULT_GRIDS,
    DEFAULT_VOCABULARY,
    AblationSetup,
    FindingTemplate,
    FindingWorld,
    SimConfig,
    SimWorld,
    generate_world,
    run_ablation,
    sim_backends,
)

log = logging.getLogger("mocoll")

ROLE_KEYS = {"agent": AGENT_KEY_ENV, "caption": AGENT_KEY_ENV, "select": AGENT_KEY_ENV, "vqa": VQA_KEY_ENV}


# -- helpers ------------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_jsonl(path: Path, records) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def _read_jsonl(path) -> list[dict]:
    with Path(path).open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def run_dir(cfg: dict, command: str, args, *extra) -> Path:
    if args.out:
        path = Path(args.out)
    else:
        path = Path(cfg["output_dir"]) / f"{command}-{config_hash(cfg, command, *extra)[:12]}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_run_json(out: Path, command: str, cfg: dict, outputs: list[Path], **info) -> None:
    record = {
        "command": command,
        "version": __version__,
        "config": snapshot(cfg),
        **info,
        "outputs": {p.name: _sha256(p) for p in sorted(outputs)},
    }
    (out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")


def build_world(cfg: dict) -> Optional[SimWorld]:
    sim = cfg.get("sim")
    if sim is None:
        return None
    vocab = DEFAULT_VOCABULARY
    if "vocabulary" in sim:
        entries = []
        by_name = {t.name: t for t in DEFAULT_VOCABULARY}
        for item in sim["vocabulary"]:
            if isinstance(item, str):
                if item not in by_name:
                    raise ConfigError(f"sim.vocabulary: unknown finding {item!r}")
                entries.append(by_name[item])
            elif isinstance(item, dict) and set(item) == {"name", "present", "absent"}:
                entries.append(FindingTemplate(item["name"], item["present"], item["absent"]))
            else:
                raise ConfigError("sim.vocabulary entries are names or {name, present, absent} tables")
        vocab = tuple(entries)
    world = FindingWorld(
        vocabulary=vocab,
        n_findings_per_case=tuple(sim.get("n_findings", (3, 5))),
        n_images_per_case=tuple(sim.get("n_images", (1, 2))),
        seed=sim.get("world_seed", cfg["seed"]),
    )
    return generate_world(world, sim.get("n_cases", 200))


def sim_config(cfg: dict) -> SimConfig:
    sim = cfg.get("sim", {})
    return SimConfig(
        epsilon=sim.get("epsilon", 0.0),
        policy=sim.get("policy", "coverage"),
        selector_fidelity=sim.get("selector_fidelity", 1.0),
        seed=sim.get("seed", cfg["seed"]),
    )


def load_cases(cfg: dict, world: Optional[SimWorld]) -> Corpus:
    corpus_cfg = cfg["corpus"]
    if corpus_cfg.get("path"):
        corpus = read_corpus(corpus_cfg["path"], name=corpus_cfg.get("name"))
    elif world is not None:
        corpus = world.corpus()
    else:
        raise ConfigError("no corpus: set corpus.path or add a [sim] section")
    if any(c.split is None for c in corpus):
        corpus = split_corpus(corpus, corpus_cfg["split_ratio"], cfg["seed"])
    return corpus


def build_backend(role: str, cfg: dict, world, sims: Optional[Backends], trace: bool) -> Optional[ChatBackend]:
    conf = cfg.get("backends", {}).get(role)
    if conf is None:
        return None
    kind = conf.get("kind", "remote")
    if kind == "remote":
        for key in ("base_url", "model"):
            if key not in conf:
                raise ConfigError(f"backends.{role}.{key} is required for remote backends")
        return RemoteBackend(
            conf["base_url"],
            conf["model"],
            api_key(ROLE_KEYS[role]),
            name=f"{role}:{conf['model']}",
            vision=conf.get("vision", role == "vqa"),
            timeout=conf.get("timeout", 120.0),
            max_attempts=conf.get("max_attempts", 3),
            backoff=conf.get("backoff", 1.0),
            max_in_flight=conf.get("max_in_flight", 8),
            trace=trace,
        )
    if kind == "scripted":
        if "script" not in conf:
            raise ConfigError(f"backends.{role}.script is required for scripted backends")
        replies = json.loads(Path(conf["script"]).read_text(encoding="utf-8"))
        return ScriptedBackend(replies, name=f"{role}:scripted", vision=conf.get("vision", role == "vqa"))
    if kind == "sim":
        if sims is None:
            raise ConfigError(f"backends.{role}: kind 'sim' needs a [sim] section")
        return {"agent": sims.agent, "caption": sims.agent, "select": sims.selector, "vqa": sims.vqa}[role]
    raise ConfigError(f"backends.{role}.kind must be remote, scripted or sim")


def build_backends(cfg: dict, world: Optional[SimWorld], pool, trace: bool) -> Backends:
    sims = sim_backends(world, sim_config(cfg)) if world is not None else None
    agent = build_backend("agent", cfg, world, sims, trace)
    vqa = build_backend("vqa", cfg, world, sims, trace)
    if agent is None or vqa is None:
        if sims is None:
            raise ConfigError("configure backends.agent and backends.vqa")
        agent = agent or sims.agent
        vqa = vqa or sims.vqa
    index = None
    emb = cfg["orchestrator"].get("embeddings")
    if emb:
        index = load_embedding_index(emb)
    elif world is not None:
        index = world.index
    select = build_backend("select", cfg, world, sims, trace)
    if select is None and sims is not None and agent is sims.agent:
        select = sims.selector
    return Backends(
        agent=agent,
        vqa=vqa,
        caption_agent=build_backend("caption", cfg, world, sims, trace),
        select_agent=select,
        pool=tuple(pool),
        index=index,
    )


def prompt_set(cfg: dict) -> PromptSet:
    return PromptSet(**cfg.get("prompts", {}))


def model_meta(backends: Backends, max_questions: int) -> dict:
    return {
        "agent": backends.agent.name,
        "caption_agent": backends.captioner.name,
        "vqa": backends.vqa.name,
        "max_questions": max_questions,
    }


def _checkpoint(out: Path, resume: bool, meta: dict) -> ConversationLog:
    path = out / "conversations.partial.jsonl"
    if path.exists() and not resume:
        path.unlink()
    return ConversationLog(path, meta)


def _finish_checkpoint(ckpt: ConversationLog, failed) -> None:
    # the partial log is only worth keeping when some cases still need a retry
    if not failed:
        ckpt.path.unlink(missing_ok=True)


# -- commands -----------------------------------------------------------------


def cmd_ingest(args, cfg) -> int:
    corpus_cfg = cfg["corpus"]
    manifest = args.manifest or corpus_cfg.get("path")
    if not manifest:
        raise ConfigError("ingest needs --manifest or corpus.path")
    fmt = args.format or corpus_cfg["format"]
    corpus = load_corpus(manifest, fmt, name=corpus_cfg.get("name"))
    if any(c.split is None for c in corpus):
        corpus = split_corpus(corpus, corpus_cfg["split_ratio"], cfg["seed"])
    min_freq = args.min_frequency if args.min_frequency is not None else corpus_cfg["min_frequency"]
    corpus = apply_vocab_filter(corpus, VocabFilter(min_freq))
    out = run_dir(cfg, "ingest", args, manifest, fmt, min_freq)
    path = out / "corpus.jsonl"
    write_corpus(corpus, path)
    summary = {
        "n_cases": len(corpus),
        "n_train": len(corpus.train),
        "n_test": len(corpus.test),
        "dropped": corpus.drop_counts,
        "min_frequency": min_freq,
    }
    (out / "ingest_report.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    write_run_json(out, "ingest", cfg, [path, out / "ingest_report.json"], manifest=str(manifest))
    print(f"{len(corpus)} cases ({summary['n_train']} train / {summary['n_test']} test), dropped {corpus.drop_counts or 0}")
    print(out)
    return 0


def cmd_infer(args, cfg) -> int:
    world = build_world(cfg)
    corpus = load_cases(cfg, world)
    orch = cfg["orchestrator"]
    max_q = args.max_questions or orch["max_questions"]
    split = args.split or cfg["corpus"]["infer_split"]
    cases = corpus.by_split(split) if split != "all" else list(corpus)
    if not cases:
        raise CorpusError(f"no cases in split {split!r}")
    backends = build_backends(cfg, world, corpus.train, args.trace)
    params = GenerationParams(orch["temperature"], orch["max_tokens"])
    config = OrchestratorConfig(
        max_questions=max_q,
        few_shot=FewShotConfig(orch["few_shot_k"], orch["few_shot_strategy"], cfg["seed"]),
        agent_params=params,
        vqa_params=params,
        prompts=prompt_set(cfg),
    )
    if config.few_shot.k and config.few_shot.strategy == "similarity" and backends.index is None:
        raise ConfigError("similarity few-shot selection needs orchestrator.embeddings")
    out = run_dir(cfg, "infer", args, max_q, split)
    meta = model_meta(backends, max_q)
    ckpt = _checkpoint(out, args.resume, meta)
    convs = run_batch(cases, config, backends, args.parallelism or cfg["parallelism"], checkpoint=ckpt)
    conv_path, cap_path, ref_path = out / "conversations.jsonl", out / "captions.jsonl", out / "references.jsonl"
    _write_jsonl(conv_path, (c.to_record(meta) for c in convs))
    _write_jsonl(cap_path, ({"case_id": c.case_id, "caption": c.caption} for c in convs))
    _write_jsonl(ref_path, ({"case_id": c.case_id, "report": c.report_text} for c in cases))
    failed = [c.case_id for c in convs if not c.ok]
    write_run_json(out, "infer", cfg, [conv_path, cap_path, ref_path], failed_cases=len(failed), max_questions=max_q)
    _finish_checkpoint(ckpt, failed)
    stops = {}
    for c in convs:
        stops[c.stop_reason] = stops.get(c.stop_reason, 0) + 1
    print(f"{len(convs)} conversations, stop reasons {stops}, failed_cases={len(failed)}")
    print(out)
    return 0


def cmd_curate(args, cfg) -> int:
    world = build_world(cfg)
    corpus = load_cases(cfg, world)
    cur = cfg["curation"]
    strategy = SelectionStrategy.parse(args.strategy or cur["strategy"])
    fmt = args.format or cur["format"]
    max_q = args.max_questions or cur.get("max_questions") or cfg["orchestrator"]["max_questions"]
    cases = corpus.by_split(cfg["corpus"]["curate_split"])
    if not cases:
        raise CorpusError(f"no cases in split {cfg['corpus']['curate_split']!r}")
    backends = build_backends(cfg, world, cases, args.trace)
    config = curation_config(max_questions=max_q, k=cur["few_shot_k"], seed=cfg["seed"], prompts=prompt_set(cfg))
    params = GenerationParams(cur["temperature"], cfg["orchestrator"]["max_tokens"])
    config = replace(config, agent_params=params, vqa_params=params)
    out = run_dir(cfg, "curate", args, str(strategy), fmt, max_q)
    meta = model_meta(backends, max_q)
    ckpt = _checkpoint(out, args.resume, meta)
    examples, report, memories = curate(cases, config, strategy, backends, args.parallelism or cfg["parallelism"], checkpoint=ckpt)

    mem_path, rep_path = out / "memories.jsonl", out / "curation_report.json"
    write_memories(memories, mem_path)
    rep_path.write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    outputs = [mem_path, rep_path]
    if ckpt.path.exists():
        conv_path = out / "conversations.jsonl"
        by_id = ckpt.load()
        _write_jsonl(conv_path, (by_id[c.case_id].to_record(meta) for c in cases if c.case_id in by_id))
        outputs.append(conv_path)
    print(f"{report.n_memories} memories, {report.n_selected} selected ({report.selection_ratio:.1%}) with strategy {strategy}")
    if not examples:
        write_run_json(out, "curate", cfg, outputs, failed_cases=len(report.failed_cases))
        raise CurationError("selection kept no examples; nothing to emit")
    ds_path = out / "dataset.jsonl"
    emit_dataset(examples, ds_path, fmt, strategy=str(strategy), instruction=config.prompts.instruction)
    outputs += [ds_path, ds_path.with_name(ds_path.name + ".manifest.json")]
    write_run_json(out, "curate", cfg, outputs, failed_cases=len(report.failed_cases))
    _finish_checkpoint(ckpt, report.failed_cases)
    print(out)
    return 0


def cmd_emit(args, cfg) -> int:
    records = _read_jsonl(args.input)
    if not records:
        raise CurationError(f"{args.input} is empty")
    if "ground_truth" in records[0]:
        examples = [VqaExample.from_memory(m) for m in read_memories(args.input)]
    else:
        examples = read_dataset(args.input)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest = emit_dataset(examples, out, args.format, strategy=args.strategy, instruction=prompt_set(cfg).instruction)
    print(f"wrote {manifest['n_examples']} examples to {out} (sha256 {manifest['content_sha256'][:12]})")
    return 0


def _captions(path) -> dict:
    out = {}
    for rec in _read_jsonl(path):
        text = rec.get("caption", rec.get("report"))
        out[rec["case_id"]] = text or ""
    return out


def cmd_evaluate(args, cfg) -> int:
    cands = _captions(args.candidates)
    if args.references:
        refs = _captions(args.references)
    else:
        corpus = load_cases(cfg, build_world(cfg))
        refs = {c.case_id: c.report_text for c in corpus if c.case_id in cands}
    missing = sorted(set(refs) - set(cands))
    extra = sorted(set(cands) - set(refs))
    if missing or extra:
        parts = []
        if missing:
            parts.append(f"missing candidates for: {', '.join(missing)}")
        if extra:
            parts.append(f"no reference for: {', '.join(extra)}")
        raise CorpusError("; ".join(parts))
    ids = sorted(refs)
    report = score_texts([cands[i] for i in ids], [refs[i] for i in ids])
    inputs = {"candidates": _sha256(Path(args.candidates))}
    if args.references:
        inputs["references"] = _sha256(Path(args.references))
    out = run_dir(cfg, "evaluate", args, inputs)
    paths = write_metrics(report, out, figure=not args.no_figures)
    failed = sum(1 for i in ids if not cands[i])
    write_run_json(out, "evaluate", cfg, list(paths.values()), inputs=inputs, failed_cases=failed)
    print(report.to_table(), end="")
    print(out)
    return 0


def cmd_simulate(args, cfg) -> int:
    sim_cfg = cfg.get("simulate", {})
    sim_section = cfg.get("sim", {})
    kinds = args.ablation or sim_cfg.get("ablations") or list(ABLATIONS)
    for k in kinds:
        if k not in ABLATIONS:
            raise ConfigError(f"unknown ablation {k!r}")
    if args.grid and len(kinds) != 1:
        raise ConfigError("--grid needs exactly one --ablation")
    world_seed = sim_section.get("world_seed", cfg["seed"])
    world = FindingWorld(
        n_findings_per_case=tuple(sim_section.get("n_findings", (3, 5))),
        n_images_per_case=tuple(sim_section.get("n_images", (1, 2))),
        seed=world_seed,
    )
    if "vocabulary" in sim_section:
        world = replace(world, vocabulary=build_world({**cfg, "sim": {**sim_section, "n_cases": 1}}).world.vocabulary)
    setup = AblationSetup(
        world=world,
        sim=sim_config(cfg),
        n_cases=sim_cfg.get("n_cases", sim_section.get("n_cases", 200)),
        max_questions=args.max_questions or sim_cfg.get("max_questions", 4),
        parallelism=args.parallelism or cfg["parallelism"],
    )
    grids = {**DEFAULT_GRIDS, **sim_cfg.get("grids", {})}
    out = run_dir(cfg, "simulate", args, kinds, args.grid, setup.max_questions)
    outputs = []
    for kind in kinds:
        grid = args.grid.split(",") if args.grid else grids[kind]
        if kind != "selection_strategy":
            grid = [int(g) for g in grid]
        table = run_ablation(kind, grid, setup)
        outputs += list(write_ablation(table, out, figure=not args.no_figures).values())
        print(f"[{kind}]")
        print(table_text(table))
    if args.emit_world:
        sim_world = generate_world(setup.world, setup.n_cases)
        man = out / "world_manifest.jsonl"
        _write_jsonl(man, ({"case_id": c.case_id, "images": list(c.case.image_refs), "finding": c.case.report_text, "impression": ""} for c in sim_world.cases))
        emb = out / "world_embeddings.jsonl"
        write_embedding_index(sim_world.index, emb)
        hidden = out / "world_hidden.jsonl"
        _write_jsonl(hidden, ({"case_id": c.case_id, "findings": dict(c.findings)} for c in sim_world.cases))
        outputs += [man, emb, hidden]
    write_run_json(out, "simulate", cfg, outputs)
    print(out)
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON run config")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--parallelism", type=int, help="concurrent conversations / selection calls")
    common.add_argument("--trace", action="store_true", help="log backend request/response bodies")
    common.add_argument("--resume", action="store_true", help="reuse finished conversations in the run directory")
    common.add_argument("--out", help="output directory (default: run-stamped under output_dir)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mocoll", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="load, split and vocabulary-filter a manifest")
    p.add_argument("--manifest")
    p.add_argument("--format", choices=["jsonl", "csv"])
    p.add_argument("--min-frequency", type=int)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("infer", parents=[common], help="run the question/answer/caption loop")
    p.add_argument("--max-questions", type=int)
    p.add_argument("--split", choices=["train", "test", "all"])
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("curate", parents=[common], help="generate, select and emit synthetic VQA data")
    p.add_argument("--strategy", help="none | top-r=<fraction> | agent")
    p.add_argument("--format", choices=["vqa_jsonl", "chat_sft_jsonl"])
    p.add_argument("--max-questions", type=int)
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("emit", parents=[common], help="convert memories or a dataset into a fine-tuning file")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--format", choices=["vqa_jsonl", "chat_sft_jsonl"], default="chat_sft_jsonl")
    p.add_argument("--strategy", default="none", help="label recorded in the manifest")
    p.set_defaults(func=cmd_emit)

    p = sub.add_parser("evaluate", parents=[common], help="score captions with BLEU/METEOR/ROUGE-L/CIDEr-D")
    p.add_argument("--candidates", required=True, help="JSONL with case_id and caption")
    p.add_argument("--references", help="JSONL with case_id and report/caption (default: config corpus)")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("simulate", parents=[common], help="run ablations in the synthetic finding world")
    p.add_argument("--ablation", action="append", choices=list(ABLATIONS))
    p.add_argument("--grid", help="comma-separated grid for a single ablation")
    p.add_argument("--max-questions", type=int)
    p.add_argument("--emit-world", action="store_true", help="also write the world manifest and embeddings")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.trace:
        logging.getLogger("mocoll.trace").setLevel(logging.INFO)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.parallelism is not None and args.parallelism < 1:
            raise ConfigError("--parallelism must be >= 1")
        return args.func(args, cfg)
    except (ConfigError, CorpusError, CurationError, PromptError, AllCasesFailed, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
