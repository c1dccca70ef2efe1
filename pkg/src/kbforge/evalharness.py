"""Blind evaluation of KB-grounded answers.

Queries are generated from the title and description only, so nothing from
a ticket's comments (where resolutions live) can leak into a question. The
judge, by design, does see the full reference ticket including comments.
Scores are averaged per run, then across runs.
"""

from __future__ import annotations

import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

from .corpus import Ticket
from .gateway import ChatRequest, Gateway, GatewayError
from .prompts import ParseError, complete_structured, render
from .rag import Answer
from .stats import StatsError, TTestResult, welch_t
from .synthesis import format_ticket_block

logger = logging.getLogger(__name__)

HELPFUL_SCORES = frozenset({4, 5})
QUERY_SOFT_MIN_WORDS = 5
QUERY_SOFT_MAX_WORDS = 15
DEFAULT_RUN_COUNT = 3
DEFAULT_BASELINE = "raw"


class EvalError(Exception):
    pass


@dataclass(frozen=True)
class EvalQuery:
    ticket_id: str
    query_text: str


@dataclass(frozen=True)
class EvalScore:
    query_id: str
    run_index: int
    method: str
    score: int
    reasoning: str = ""


@dataclass(frozen=True)
class ScoredMissing:
    query_id: str
    run_index: int
    method: str
    error: str


@dataclass(frozen=True)
class MethodStats:
    mean_helpfulness: float
    std_across_runs: float
    helpful_pct: float
    score_distribution: tuple[float, float, float, float, float]
    score_count: int
    missing_count: int


@dataclass
class EvalReport:
    per_method: dict[str, MethodStats]
    pairwise: dict[str, dict]
    baseline: str | None
    run_count: int


@dataclass(frozen=True)
class EvalConfig:
    query_model_id: str = "default-model"
    judge_model_id: str = "default-model"
    runs: int = DEFAULT_RUN_COUNT
    max_parallel: int = 8

    def __post_init__(self):
        if self.runs < 1:
            raise ValueError("runs must be at least 1")
        if self.max_parallel < 1:
            raise ValueError("max_parallel must be positive")


def _trim_quotes(text: str) -> str:
    text = text.strip()
    while len(text) >= 2 and text[0] == text[-1] and text[0] in ("'", '"'):
        text = text[1:-1].strip()
    return text


def generate_query(gateway: Gateway, ticket: Ticket, model_id: str) -> EvalQuery:
    """Generate one evaluation query from the requester-visible fields.

    Only the title and description reach the prompt. The response is taken
    verbatim after trimming whitespace and surrounding quotes.
    """
    prompt = render(
        "query_generation", {"title": ticket.title, "description": ticket.description}
    )
    response = gateway.complete(ChatRequest(model_id=model_id, user_text=prompt))
    query_text = _trim_quotes(response.text)
    if not query_text:
        raise EvalError(f"empty query for ticket {ticket.id}")
    words = len(query_text.split())
    if not QUERY_SOFT_MIN_WORDS <= words <= QUERY_SOFT_MAX_WORDS:
        logger.warning(
            "query for %s runs %d words (expected %d-%d)",
            ticket.id,
            words,
            QUERY_SOFT_MIN_WORDS,
            QUERY_SOFT_MAX_WORDS,
        )
    return EvalQuery(ticket_id=ticket.id, query_text=query_text)


def generate_queries(
    gateway: Gateway,
    tickets: list[Ticket],
    model_id: str,
    max_parallel: int = 8,
) -> tuple[list[EvalQuery], list[tuple[str, str]]]:
    """Generate queries for all tickets; failed tickets are excluded."""
    ordered = sorted(tickets, key=lambda t: t.id)
    results: dict[str, EvalQuery] = {}
    failures: list[tuple[str, str]] = []
    with ThreadPoolExecutor(max_workers=max_parallel) as pool:
        futures = {pool.submit(generate_query, gateway, t, model_id): t for t in ordered}
        for future, ticket in futures.items():
            try:
                results[ticket.id] = future.result()
            except (GatewayError, ParseError, EvalError) as exc:
                logger.warning("query generation failed for %s: %s", ticket.id, exc)
                failures.append((ticket.id, str(exc)))
    return [results[t.id] for t in ordered if t.id in results], failures


def judge_answer(
    gateway: Gateway,
    question: str,
    answer_text: str,
    reference: Ticket,
    model_id: str,
):
    """Score one answer against the full reference ticket, comments included."""
    prompt = render(
        "answer_evaluation",
        {
            "question": question,
            "answer": answer_text,
            "ticket_content": format_ticket_block(reference),
        },
    )
    return complete_structured(
        gateway, ChatRequest(model_id=model_id, user_text=prompt), "judgment"
    )


def run_evaluation(
    gateway: Gateway,
    queries: list[EvalQuery],
    answerers: dict[str, Callable[[str], Answer]],
    tickets_by_id: dict[str, Ticket],
    config: EvalConfig,
) -> tuple[list[EvalScore], list[ScoredMissing]]:
    """Answer and judge every query for every method, ``runs`` times over.

    Unjudgeable items (parse failure after the repair retry, out-of-range
    score, gateway failure) are recorded as missing and excluded from the
    score rows.
    """
    if not queries:
        raise EvalError("no queries to evaluate")
    missing_refs = sorted(q.ticket_id for q in queries if q.ticket_id not in tickets_by_id)
    if missing_refs:
        raise EvalError(f"queries without reference tickets: {', '.join(missing_refs)}")

    scores: list[EvalScore] = []
    missing: list[ScoredMissing] = []
    ordered_queries = sorted(queries, key=lambda q: q.ticket_id)

    def work(run_index: int, method: str, query: EvalQuery):
        answer = answerers[method](query.query_text)
        judgment = judge_answer(
            gateway,
            query.query_text,
            answer.answer_text,
            tickets_by_id[query.ticket_id],
            config.judge_model_id,
        )
        return EvalScore(
            query_id=query.ticket_id,
            run_index=run_index,
            method=method,
            score=judgment.score,
            reasoning=judgment.reasoning,
        )

    for run_index in range(1, config.runs + 1):
        for method in sorted(answerers):
            with ThreadPoolExecutor(max_workers=config.max_parallel) as pool:
                futures = {
                    pool.submit(work, run_index, method, q): q for q in ordered_queries
                }
                outcomes: dict[str, EvalScore | ScoredMissing] = {}
                for future, query in futures.items():
                    try:
                        outcomes[query.ticket_id] = future.result()
                    except (GatewayError, ParseError, EvalError) as exc:
                        logger.warning(
                            "run %d method %s query %s unjudgeable: %s",
                            run_index,
                            method,
                            query.ticket_id,
                            exc,
                        )
                        outcomes[query.ticket_id] = ScoredMissing(
                            query_id=query.ticket_id,
                            run_index=run_index,
                            method=method,
                            error=str(exc),
                        )
            for query in ordered_queries:
                outcome = outcomes[query.ticket_id]
                if isinstance(outcome, EvalScore):
                    scores.append(outcome)
                else:
                    missing.append(outcome)
    return scores, missing


def helpful_pct(scores: list[int]) -> float:
    """Fraction of scores that are 4 or 5."""
    if not scores:
        raise EvalError("helpful_pct of empty score list")
    return sum(1 for s in scores if s in HELPFUL_SCORES) / len(scores)


def _std(values: list[float]) -> float:
    if len(values) < 2:
        return 0.0
    m = sum(values) / len(values)
    return (sum((v - m) ** 2 for v in values) / (len(values) - 1)) ** 0.5


def aggregate(
    scores: list[EvalScore],
    missing: list[ScoredMissing] | None = None,
    baseline: str | None = DEFAULT_BASELINE,
) -> EvalReport:
    """Aggregate score rows into per-method stats and baseline t-tests.

    The headline mean is the mean of per-run means; the spread is the sample
    standard deviation across run means. The score distribution and helpful
    fraction pool every score from every run. The t-test samples are
    per-query scores averaged over runs, which keeps the test unpaired but
    stable against run noise.
    """
    if not scores:
        raise EvalError("no scores to aggregate")
    missing = missing or []
    methods = sorted({s.method for s in scores})
    run_count = max(s.run_index for s in scores)

    per_method: dict[str, MethodStats] = {}
    query_means: dict[str, list[float]] = {}
    for method in methods:
        rows = [s for s in scores if s.method == method]
        run_means = []
        for run_index in range(1, run_count + 1):
            run_scores = [s.score for s in rows if s.run_index == run_index]
            if run_scores:
                run_means.append(sum(run_scores) / len(run_scores))
        pooled = [s.score for s in rows]
        counts = Counter(pooled)
        distribution = tuple(counts.get(level, 0) / len(pooled) for level in (1, 2, 3, 4, 5))
        per_method[method] = MethodStats(
            mean_helpfulness=sum(run_means) / len(run_means),
            std_across_runs=_std(run_means),
            helpful_pct=helpful_pct(pooled),
            score_distribution=distribution,
            score_count=len(pooled),
            missing_count=sum(1 for m in missing if m.method == method),
        )
        by_query: dict[str, list[int]] = {}
        for s in rows:
            by_query.setdefault(s.query_id, []).append(s.score)
        query_means[method] = [
            sum(v) / len(v) for _, v in sorted(by_query.items())
        ]

    pairwise: dict[str, dict] = {}
    if baseline in per_method:
        base_sample = query_means[baseline]
        for method in methods:
            if method == baseline:
                continue
            try:
                result = welch_t(query_means[method], base_sample)
                pairwise[method] = {
                    "vs": baseline,
                    "t": result.t,
                    "df": result.df,
                    "p_two_sided": result.p_two_sided,
                }
            except StatsError as exc:
                logger.warning("t-test %s vs %s not computed: %s", method, baseline, exc)
                pairwise[method] = {"vs": baseline, "error": str(exc)}
    elif baseline is not None:
        logger.warning("baseline method %r has no scores; skipping t-tests", baseline)

    return EvalReport(
        per_method=per_method,
        pairwise=pairwise,
        baseline=baseline if baseline in per_method else None,
        run_count=run_count,
    )


def distribution_delta(dist_a, dist_b, level: int) -> float:
    """Relative change (a - b) / a of the share of answers at one score level."""
    if not 1 <= level <= 5:
        raise EvalError(f"score level out of range 1..5: {level}")
    a = dist_a[level - 1]
    b = dist_b[level - 1]
    if a == 0:
        raise EvalError(f"distribution A has zero share at level {level}")
    return (a - b) / a


def report_to_json(
    report: EvalReport,
    volume_pct: dict[str, float] | None = None,
    seed: int | None = None,
    config_digest: str | None = None,
) -> dict:
    volume_pct = volume_pct or {}
    payload = {
        "run_count": report.run_count,
        "baseline": report.baseline,
        "methods": {
            name: {
                "mean_helpfulness": stats.mean_helpfulness,
                "std_across_runs": stats.std_across_runs,
                "helpful_pct": stats.helpful_pct,
                "score_distribution": list(stats.score_distribution),
                "score_count": stats.score_count,
                "missing_count": stats.missing_count,
                "volume_pct": volume_pct.get(name),
            }
            for name, stats in report.per_method.items()
        },
        "pairwise": report.pairwise,
    }
    if seed is not None:
        payload["seed"] = seed
    if config_digest is not None:
        payload["config_digest"] = config_digest
    return payload


def report_to_markdown(
    report: EvalReport, volume_pct: dict[str, float] | None = None
) -> str:
    """Summary table: one row per method, volume versus answer quality."""
    volume_pct = volume_pct or {}
    lines = [
        "# Evaluation Report",
        "",
        f"Runs per method: {report.run_count}",
        "",
        "| Method | KB volume (%) | Mean helpfulness (1-5) | Std dev | Helpful answers (%) |",
        "|---|---|---|---|---|",
    ]
    for name in sorted(report.per_method):
        stats = report.per_method[name]
        volume = volume_pct.get(name)
        volume_cell = f"{volume * 100:.2f}" if volume is not None else "n/a"
        lines.append(
            f"| {name} | {volume_cell} | {stats.mean_helpfulness:.2f} "
            f"| {stats.std_across_runs:.2f} | {stats.helpful_pct * 100:.2f} |"
        )
    if report.pairwise:
        lines += ["", f"Welch t-tests vs {report.baseline}:", ""]
        for name in sorted(report.pairwise):
            row = report.pairwise[name]
            if "error" in row:
                lines.append(f"- {name}: not computed ({row['error']})")
            else:
                lines.append(
                    f"- {name}: t={row['t']:.4f}, df={row['df']:.2f}, p={row['p_two_sided']:.4g}"
                )
    return "\n".join(lines) + "\n"
