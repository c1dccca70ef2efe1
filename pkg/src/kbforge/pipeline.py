"""Stage orchestration over a workspace directory.

Every stage writes its artifacts atomically, then a stamp recording the
configuration digest, its dependencies' stamp fingerprints, and the digest
of each output file. A stage is skipped when all three still match. The
append-only journal records one row per attempt, cached or run.

Stamps are written after outputs, so a crash mid-stage leaves no stamp and
the stage re-runs cleanly next time.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path

from .categorize import CategorizeConfig, categorize_all, corpus_from_json, corpus_to_json
from .config import WorkspaceConfig, config_digest
from .corpus import (
    CleaningLimits,
    Ticket,
    chronological_split,
    clean_ticket,
    load_tickets,
    split_manifest,
    ticket_full_text,
    ticket_to_record,
)
from .discovery import (
    DiscoveryConfig,
    category_set_from_json,
    category_set_to_json,
    discover,
)
from .evalharness import (
    EvalQuery,
    EvalScore,
    ScoredMissing,
    aggregate,
    generate_queries,
    judge_answer,
    report_to_json,
    report_to_markdown,
)
from .fsutil import (
    atomic_write_json,
    atomic_write_text,
    canonical_json,
    read_json,
    sha256_file,
    sha256_text,
)
from .gateway import Gateway, GatewayConfig, GatewayError, HttpBackend, MockBackend
from .prompts import ParseError
from .rag import (
    Document,
    GreedyCosineClusterer,
    HashedTfEmbedder,
    SearchIndex,
    answer_query,
    build_cluster_kb,
    build_index,
    build_per_ticket_kb,
    build_raw_kb,
    documents_from_articles,
    load_index,
    multi_level_answer,
    save_index,
)
from .synthesis import (
    SynthesisConfig,
    SynthesisThresholds,
    build_knowledge_base,
    load_articles,
    write_knowledge_base,
)
from .synthetic import load_mock_script, register_script

logger = logging.getLogger(__name__)

STAGES = (
    "ingest",
    "split",
    "discover",
    "categorize",
    "synthesize",
    "index",
    "gen-queries",
    "answer",
    "judge",
    "report",
)

DEPS: dict[str, tuple[str, ...]] = {
    "ingest": (),
    "split": ("ingest",),
    "discover": ("split",),
    "categorize": ("ingest", "discover"),
    "synthesize": ("ingest", "discover", "categorize"),
    "index": ("synthesize",),
    "gen-queries": ("ingest", "split"),
    "answer": ("index", "gen-queries"),
    "judge": ("ingest", "gen-queries", "answer"),
    "report": ("ingest", "synthesize", "judge"),
}

# Stages whose work goes through the model gateway.
_GATEWAY_STAGES = frozenset({"discover", "categorize", "synthesize", "gen-queries", "answer", "judge"})

KB_METHODS = ("raw", "per_ticket", "cluster", "multi_agent")


class StageError(Exception):
    pass


@dataclass(frozen=True)
class StageResult:
    stage: str
    status: str
    outputs: tuple[str, ...]
    backend_calls: int = 0


@dataclass
class CompareResult:
    report: dict
    report_path: Path
    workspace: Path
    stages: list[StageResult]

    @property
    def backend_calls(self) -> int:
        return sum(s.backend_calls for s in self.stages)


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def kb_methods_for(config: WorkspaceConfig) -> tuple[str, ...]:
    """KBs to build: the requested ones, plus what multi_level answers from."""
    wanted = set(config.methods)
    if "multi_level" in wanted:
        wanted.update(("per_ticket", "multi_agent"))
    return tuple(m for m in KB_METHODS if m in wanted)


def current_digest(config: WorkspaceConfig) -> str:
    hashes = {}
    data = Path(config.data_path)
    if not data.is_file():
        raise StageError(f"ticket data not found: {data}")
    hashes["data"] = sha256_file(data)
    if config.backend == "mock":
        script = Path(config.mock_script)
        if not script.is_file():
            raise StageError(f"mock script not found: {script}")
        hashes["mock_script"] = sha256_file(script)
    return config_digest(config, hashes)


def build_gateway(config: WorkspaceConfig, workspace: Path) -> Gateway:
    gw_config = GatewayConfig(
        requests_per_minute=config.requests_per_minute,
        max_retries=config.max_retries,
        backoff_base_ms=config.backoff_base_ms,
        cache_dir=workspace / "cache",
    )
    if config.backend == "mock":
        backend = MockBackend()
        register_script(backend, load_mock_script(config.mock_script))
        return Gateway(backend, gw_config)
    return Gateway(HttpBackend(config.endpoint_url), gw_config)


def _stamp_path(workspace: Path, stage: str) -> Path:
    return workspace / ".stamps" / f"{stage}.json"


def _load_stamp(workspace: Path, stage: str) -> dict | None:
    path = _stamp_path(workspace, stage)
    if not path.is_file():
        return None
    try:
        return read_json(path)
    except ValueError:
        logger.warning("unreadable stamp for stage %s; treating as absent", stage)
        return None


def _stamp_fingerprint(stamp: dict) -> str:
    core = {k: stamp.get(k) for k in ("stage", "config_digest", "inputs", "outputs")}
    return sha256_text(canonical_json(core))


def _outputs_fresh(workspace: Path, stamp: dict) -> bool:
    outputs = stamp.get("outputs", {})
    if not outputs:
        return False
    for rel, digest in outputs.items():
        path = workspace / rel
        if not path.is_file() or sha256_file(path) != digest:
            return False
    return True


def _append_journal(workspace: Path, row: dict) -> None:
    with open(workspace / "journal.jsonl", "a", encoding="utf-8") as fh:
        fh.write(json.dumps(row, sort_keys=True) + "\n")


def run_stage(
    stage: str,
    config: WorkspaceConfig,
    force: bool = False,
    workspace: str | Path | None = None,
) -> StageResult:
    """Execute one stage, or skip it when its stamp is still valid."""
    if stage not in DEPS:
        raise StageError(f"unknown stage {stage!r}; stages are: {', '.join(STAGES)}")
    workspace = Path(workspace) if workspace is not None else Path(config.workspace_dir)
    workspace.mkdir(parents=True, exist_ok=True)
    digest = current_digest(config)

    for dep in DEPS[stage]:
        dep_stamp = _load_stamp(workspace, dep)
        if dep_stamp is None:
            raise StageError(f"stage {stage!r} needs stage {dep!r}: run it first")
        if dep_stamp.get("config_digest") != digest and not force:
            raise StageError(
                f"stage {dep!r} was built under a different configuration; "
                f"re-run it, or pass --force to proceed anyway"
            )

    dep_prints = {
        dep: _stamp_fingerprint(_load_stamp(workspace, dep)) for dep in DEPS[stage]
    }
    stamp = _load_stamp(workspace, stage)
    if (
        not force
        and stamp is not None
        and stamp.get("config_digest") == digest
        and stamp.get("inputs") == dep_prints
        and _outputs_fresh(workspace, stamp)
    ):
        outputs = tuple(sorted(stamp.get("outputs", {})))
        _append_journal(
            workspace,
            {
                "stage": stage,
                "status": "cached",
                "config_digest": digest,
                "outputs": list(outputs),
                "backend_calls": 0,
            },
        )
        return StageResult(stage=stage, status="cached", outputs=outputs)

    started = _utc_now()
    gateway = build_gateway(config, workspace) if stage in _GATEWAY_STAGES else None
    outputs = _STAGE_FUNCS[stage](workspace, config, gateway)
    finished = _utc_now()
    backend_calls = gateway.backend_calls if gateway is not None else 0

    output_digests = {}
    for rel in sorted(outputs):
        path = workspace / rel
        if not path.is_file():
            raise StageError(f"stage {stage!r} did not produce declared output {rel!r}")
        output_digests[rel] = sha256_file(path)

    atomic_write_json(
        _stamp_path(workspace, stage),
        {
            "stage": stage,
            "config_digest": digest,
            "inputs": dep_prints,
            "outputs": output_digests,
            "started": started,
            "finished": finished,
        },
    )
    _append_journal(
        workspace,
        {
            "stage": stage,
            "status": "run",
            "config_digest": digest,
            "started": started,
            "finished": finished,
            "outputs": sorted(outputs),
            "backend_calls": backend_calls,
        },
    )
    return StageResult(
        stage=stage, status="run", outputs=tuple(sorted(outputs)), backend_calls=backend_calls
    )


def run_compare(
    config: WorkspaceConfig,
    methods: tuple[str, ...] | None = None,
    force: bool = False,
    workspace: str | Path | None = None,
) -> CompareResult:
    """Run every stage in order and return the final report."""
    if methods is not None:
        config = replace(config, methods=tuple(methods))
    workspace = Path(workspace) if workspace is not None else Path(config.workspace_dir)
    results = [run_stage(s, config, force=force, workspace=workspace) for s in STAGES]
    report_path = workspace / "eval" / "report.json"
    return CompareResult(
        report=read_json(report_path),
        report_path=report_path,
        workspace=workspace,
        stages=results,
    )


# ---------------------------------------------------------------------------
# Stage bodies. Each takes (workspace, config, gateway), writes its artifacts
# under the workspace, and returns the relative paths it wrote.


def _corpus_path(workspace: Path) -> Path:
    return workspace / "corpus" / "tickets.jsonl"


def _load_corpus(workspace: Path) -> list[Ticket]:
    result = load_tickets(_corpus_path(workspace), format="jsonl")
    if result.rejections:
        raise StageError("ingested corpus no longer round-trips; re-run ingest")
    return result.tickets


def _write_jsonl(path: Path, rows: list[dict]) -> None:
    atomic_write_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))


def _read_jsonl(path: Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def _stage_ingest(workspace: Path, config: WorkspaceConfig, gateway) -> list[str]:
    result = load_tickets(config.data_path, format=config.data_format)
    if not result.tickets:
        raise StageError(f"no valid tickets in {config.data_path}")
    limits = CleaningLimits(
        max_field_chars=config.max_field_chars, max_comments=config.max_comments
    )
    cleaned = sorted(
        (clean_ticket(t, limits) for t in result.tickets),
        key=lambda t: (t.created_at, t.id),
    )
    _write_jsonl(_corpus_path(workspace), [ticket_to_record(t) for t in cleaned])
    atomic_write_json(
        workspace / "corpus" / "rejections.json",
        [
            {"record": r.record, "reason": r.reason, "field": r.field, "ticket_id": r.ticket_id}
            for r in result.rejections
        ],
    )
    return ["corpus/tickets.jsonl", "corpus/rejections.json"]


def _stage_split(workspace: Path, config: WorkspaceConfig, gateway) -> list[str]:
    tickets = _load_corpus(workspace)
    split = chronological_split(tickets, fractions=config.split_fractions)
    atomic_write_json(workspace / "corpus" / "split.json", split_manifest(split))
    return ["corpus/split.json"]


def _discovery_config(config: WorkspaceConfig) -> DiscoveryConfig:
    return DiscoveryConfig(
        mode=config.discovery_mode,
        sample_size=config.sample_size,
        batch_size=config.discovery_batch_size,
        seed=config.seed,
        max_parallel=config.max_parallel,
        prompt_budget_chars=config.prompt_budget_chars,
        model_id=config.discovery_model,
    )


def _stage_discover(workspace: Path, config: WorkspaceConfig, gateway: Gateway) -> list[str]:
    tickets = {t.id: t for t in _load_corpus(workspace)}
    split = read_json(workspace / "corpus" / "split.json")
    train = [tickets[tid] for tid in split["train"]]
    taxonomy = discover(gateway, train, _discovery_config(config))
    atomic_write_json(workspace / "taxonomy" / "categories.json", category_set_to_json(taxonomy))
    return ["taxonomy/categories.json"]


def _stage_categorize(workspace: Path, config: WorkspaceConfig, gateway: Gateway) -> list[str]:
    tickets = _load_corpus(workspace)
    taxonomy = category_set_from_json(read_json(workspace / "taxonomy" / "categories.json"))
    categorized = categorize_all(
        gateway,
        tickets,
        taxonomy,
        CategorizeConfig(model_id=config.categorize_model, max_parallel=config.max_parallel),
    )
    atomic_write_json(workspace / "categorized" / "assignments.json", corpus_to_json(categorized))
    return ["categorized/assignments.json"]


def _synthesis_config(config: WorkspaceConfig) -> SynthesisConfig:
    return SynthesisConfig(
        model_id=config.synthesize_model,
        max_parallel=config.max_parallel,
        thresholds=SynthesisThresholds(
            standard_max=config.standard_max,
            hierarchical_min=config.hierarchical_min,
            batch_size=config.synthesis_batch_size,
        ),
        seed=config.seed,
        discovery=_discovery_config(config),
    )


def _stage_synthesize(workspace: Path, config: WorkspaceConfig, gateway: Gateway) -> list[str]:
    tickets = _load_corpus(workspace)
    corpus_chars = sum(len(ticket_full_text(t)) for t in tickets)
    if corpus_chars == 0:
        raise StageError("corpus has no text to compact")
    methods = kb_methods_for(config)
    synth_config = _synthesis_config(config)
    outputs: list[str] = []
    volume_ratio: dict[str, float] = {}
    summary: dict[str, dict] = {}

    def emit_documents(method: str, docs, failures, stats=None) -> None:
        payload = {
            "documents": [
                {"doc_id": d.doc_id, "title": d.title, "body": d.body}
                for d in sorted(docs, key=lambda d: d.doc_id)
            ],
            "failures": [
                {"category_id": f.category_id, "error": f.error} for f in failures
            ],
        }
        if stats is not None:
            payload["stats"] = stats
        atomic_write_json(workspace / "kb" / method / "documents.json", payload)
        outputs.append(f"kb/{method}/documents.json")
        volume_ratio[method] = sum(len(d.body) for d in docs) / corpus_chars
        summary[method] = {"document_count": len(docs), "failure_count": len(failures)}

    if "raw" in methods:
        emit_documents("raw", build_raw_kb(tickets), [])
    if "per_ticket" in methods:
        docs, failures = build_per_ticket_kb(gateway, tickets, synth_config)
        emit_documents("per_ticket", docs, failures)
    if "cluster" in methods:
        docs, stats, failures = build_cluster_kb(
            gateway,
            tickets,
            synth_config,
            embedder=HashedTfEmbedder(dim=config.cluster_dim),
            clusterer=GreedyCosineClusterer(threshold=config.cluster_threshold),
        )
        emit_documents("cluster", docs, failures, stats=stats)
    if "multi_agent" in methods:
        taxonomy = category_set_from_json(read_json(workspace / "taxonomy" / "categories.json"))
        categorized = corpus_from_json(read_json(workspace / "categorized" / "assignments.json"))
        kb = build_knowledge_base(gateway, categorized, taxonomy, tickets, synth_config)
        kb_dir = workspace / "kb" / "multi_agent"
        write_knowledge_base(kb, kb_dir)
        atomic_write_json(kb_dir / "taxonomy.json", category_set_to_json(kb.taxonomy))
        outputs.append("kb/multi_agent/manifest.json")
        outputs.append("kb/multi_agent/taxonomy.json")
        outputs.extend(
            f"kb/multi_agent/articles/{a.id}.md" for a in kb.articles
        )
        volume_ratio["multi_agent"] = kb.manifest["volume_ratio"]
        summary["multi_agent"] = {
            "document_count": kb.manifest["article_count"],
            "failure_count": len(kb.manifest["synthesis_failures"]),
        }
    if "multi_level" in config.methods:
        volume_ratio["multi_level"] = (
            volume_ratio["per_ticket"] + volume_ratio["multi_agent"]
        )

    atomic_write_json(
        workspace / "kb" / "built.json",
        {
            "corpus_chars": corpus_chars,
            "kb_methods": list(methods),
            "volume_ratio": volume_ratio,
            "summary": summary,
        },
    )
    outputs.append("kb/built.json")
    return outputs


def _kb_documents(workspace: Path, method: str) -> list[Document]:
    if method == "multi_agent":
        return documents_from_articles(load_articles(workspace / "kb" / "multi_agent"))
    payload = read_json(workspace / "kb" / method / "documents.json")
    return [
        Document(doc_id=d["doc_id"], title=d["title"], body=d["body"])
        for d in payload["documents"]
    ]


def _stage_index(workspace: Path, config: WorkspaceConfig, gateway) -> list[str]:
    outputs = []
    for method in kb_methods_for(config):
        docs = _kb_documents(workspace, method)
        index = build_index(docs, k1=config.bm25_k1, b=config.bm25_b)
        save_index(index, workspace / "index" / f"{method}.json")
        outputs.append(f"index/{method}.json")
    return outputs


def _stage_gen_queries(workspace: Path, config: WorkspaceConfig, gateway: Gateway) -> list[str]:
    tickets = {t.id: t for t in _load_corpus(workspace)}
    split = read_json(workspace / "corpus" / "split.json")
    eval_ids = list(split["val"]) + list(split["test"])
    if not eval_ids:
        raise StageError("val and test splits are empty; nothing to evaluate")
    eval_tickets = [tickets[tid] for tid in eval_ids]
    queries, failures = generate_queries(
        gateway, eval_tickets, config.answer_model, max_parallel=config.max_parallel
    )
    if not queries:
        raise StageError("query generation failed for every evaluation ticket")
    _write_jsonl(
        workspace / "eval" / "queries.jsonl",
        [{"ticket_id": q.ticket_id, "query_text": q.query_text} for q in queries],
    )
    atomic_write_json(
        workspace / "eval" / "query_failures.json",
        [{"ticket_id": tid, "error": err} for tid, err in failures],
    )
    return ["eval/queries.jsonl", "eval/query_failures.json"]


def _load_queries(workspace: Path) -> list[EvalQuery]:
    rows = _read_jsonl(workspace / "eval" / "queries.jsonl")
    return [EvalQuery(ticket_id=r["ticket_id"], query_text=r["query_text"]) for r in rows]


def _make_answerers(workspace: Path, config: WorkspaceConfig, gateway: Gateway) -> dict:
    indexes: dict[str, SearchIndex] = {
        m: load_index(workspace / "index" / f"{m}.json") for m in kb_methods_for(config)
    }
    answerers = {}
    for method in config.methods:
        if method == "multi_level":
            answerers[method] = lambda q: multi_level_answer(
                gateway,
                q,
                indexes["per_ticket"],
                indexes["multi_agent"],
                "per_ticket",
                "multi_agent",
                config.answer_model,
            )
        else:
            answerers[method] = lambda q, m=method: answer_query(
                gateway,
                indexes[m],
                q,
                config.answer_model,
                m,
                k=config.retrieval_k,
            )
    return answerers


def _stage_answer(workspace: Path, config: WorkspaceConfig, gateway: Gateway) -> list[str]:
    queries = _load_queries(workspace)
    if not queries:
        raise StageError("no queries to answer; gen-queries produced an empty set")
    answerers = _make_answerers(workspace, config, gateway)

    rows: list[dict] = []
    failure_rows: list[dict] = []
    for run_index in range(1, config.eval_runs + 1):
        for method in sorted(answerers):
            outcomes: dict[str, dict] = {}
            with ThreadPoolExecutor(max_workers=config.max_parallel) as pool:
                futures = {
                    pool.submit(answerers[method], q.query_text): q for q in queries
                }
                for future, query in futures.items():
                    base = {
                        "query_id": query.ticket_id,
                        "run_index": run_index,
                        "method": method,
                    }
                    try:
                        answer = future.result()
                        outcomes[query.ticket_id] = {
                            **base,
                            "answer_text": answer.answer_text,
                            "kb_label": answer.kb_label,
                            "retrieved": [
                                {"doc_id": d.doc_id, "score": d.score, "kb": d.kb}
                                for d in answer.retrieved
                            ],
                        }
                    except (GatewayError, ParseError) as exc:
                        logger.warning(
                            "answering failed: run %d %s %s: %s",
                            run_index,
                            method,
                            query.ticket_id,
                            exc,
                        )
                        outcomes[query.ticket_id] = {**base, "error": str(exc)}
            for query in queries:
                row = outcomes[query.ticket_id]
                (failure_rows if "error" in row else rows).append(row)

    _write_jsonl(workspace / "eval" / "answers.jsonl", rows)
    atomic_write_json(workspace / "eval" / "answer_failures.json", failure_rows)
    return ["eval/answers.jsonl", "eval/answer_failures.json"]


def _stage_judge(workspace: Path, config: WorkspaceConfig, gateway: Gateway) -> list[str]:
    tickets = {t.id: t for t in _load_corpus(workspace)}
    queries = {q.ticket_id: q for q in _load_queries(workspace)}
    answer_rows = _read_jsonl(workspace / "eval" / "answers.jsonl")
    failure_rows = read_json(workspace / "eval" / "answer_failures.json")

    missing_refs = sorted({r["query_id"] for r in answer_rows} - set(tickets))
    if missing_refs:
        raise StageError(f"answers reference unknown tickets: {', '.join(missing_refs)}")
    missing_queries = sorted({r["query_id"] for r in answer_rows} - set(queries))
    if missing_queries:
        raise StageError(f"answers without stored queries: {', '.join(missing_queries)}")

    score_rows: list[dict] = []
    missing_rows: list[dict] = [
        {
            "query_id": r["query_id"],
            "run_index": r["run_index"],
            "method": r["method"],
            "error": r["error"],
        }
        for r in failure_rows
    ]

    def work(row: dict) -> dict:
        judgment = judge_answer(
            gateway,
            queries[row["query_id"]].query_text,
            row["answer_text"],
            tickets[row["query_id"]],
            config.judge_model,
        )
        return {
            "query_id": row["query_id"],
            "run_index": row["run_index"],
            "method": row["method"],
            "score": judgment.score,
            "reasoning": judgment.reasoning,
        }

    outcomes: dict[int, dict] = {}
    with ThreadPoolExecutor(max_workers=config.max_parallel) as pool:
        futures = {pool.submit(work, row): i for i, row in enumerate(answer_rows)}
        for future, i in futures.items():
            row = answer_rows[i]
            try:
                outcomes[i] = future.result()
            except (GatewayError, ParseError) as exc:
                logger.warning(
                    "judging failed: run %d %s %s: %s",
                    row["run_index"],
                    row["method"],
                    row["query_id"],
                    exc,
                )
                outcomes[i] = {
                    "query_id": row["query_id"],
                    "run_index": row["run_index"],
                    "method": row["method"],
                    "error": str(exc),
                }
    for i in range(len(answer_rows)):
        row = outcomes[i]
        (missing_rows if "error" in row else score_rows).append(row)

    _write_jsonl(workspace / "eval" / "scores.jsonl", score_rows)
    _write_jsonl(workspace / "eval" / "missing.jsonl", missing_rows)
    return ["eval/scores.jsonl", "eval/missing.jsonl"]


def _stage_report(workspace: Path, config: WorkspaceConfig, gateway) -> list[str]:
    score_rows = _read_jsonl(workspace / "eval" / "scores.jsonl")
    missing_rows = _read_jsonl(workspace / "eval" / "missing.jsonl")
    if not score_rows:
        raise StageError("no scores to report; every judgment failed")
    scores = [
        EvalScore(
            query_id=r["query_id"],
            run_index=r["run_index"],
            method=r["method"],
            score=r["score"],
            reasoning=r.get("reasoning", ""),
        )
        for r in score_rows
    ]
    missing = [
        ScoredMissing(
            query_id=r["query_id"],
            run_index=r["run_index"],
            method=r["method"],
            error=r.get("error", ""),
        )
        for r in missing_rows
    ]
    report = aggregate(scores, missing, baseline=config.baseline)
    built = read_json(workspace / "kb" / "built.json")
    volume_pct = {m: built["volume_ratio"].get(m) for m in config.methods}
    payload = report_to_json(
        report,
        volume_pct=volume_pct,
        seed=config.seed,
        config_digest=current_digest(config),
    )
    atomic_write_text(
        workspace / "eval" / "report.json",
        json.dumps(payload, indent=2, sort_keys=True) + "\n",
    )
    atomic_write_text(
        workspace / "eval" / "report.md", report_to_markdown(report, volume_pct=volume_pct)
    )
    return ["eval/report.json", "eval/report.md"]


_STAGE_FUNCS = {
    "ingest": _stage_ingest,
    "split": _stage_split,
    "discover": _stage_discover,
    "categorize": _stage_categorize,
    "synthesize": _stage_synthesize,
    "index": _stage_index,
    "gen-queries": _stage_gen_queries,
    "answer": _stage_answer,
    "judge": _stage_judge,
    "report": _stage_report,
}
