"""Knowledge article synthesis from categorized ticket pools.

Pool size picks the strategy: small pools get one synthesis call, medium
pools are synthesized in batches whose partial articles are merged, and
oversized pools are subdivided into subcategories first. Comments ride along
in every synthesis prompt; resolver comments are where the fixes live.
"""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import Ticket, ticket_full_text
from .discovery import (
    Category,
    CategorySet,
    DiscoveryConfig,
    discover_subcategories,
)
from .categorize import CategorizeConfig, CategorizedCorpus, categorize_into_subcategories
from .fsutil import DIGEST_ALGORITHM, atomic_write_text, canonical_json, read_json, sha256_text
from .gateway import ChatRequest, Gateway, GatewayError
from .prompts import ParseError, render

logger = logging.getLogger(__name__)

SOFT_MAX_ARTICLE_WORDS = 500
ARTICLE_SEPARATOR = "\n\n---\n\n"


class SynthesisError(Exception):
    pass


@dataclass(frozen=True)
class SynthesisThresholds:
    standard_max: int = 10
    hierarchical_min: int = 50
    batch_size: int = 10

    def __post_init__(self):
        if not 0 < self.standard_max <= self.hierarchical_min:
            raise ValueError("need 0 < standard_max <= hierarchical_min")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


@dataclass(frozen=True)
class KnowledgeArticle:
    id: str
    category_id: str
    title: str
    body: str
    source_ticket_ids: tuple[str, ...]
    strategy: str
    word_count: int


@dataclass(frozen=True)
class SynthesisFailure:
    category_id: str
    error: str


@dataclass
class KnowledgeBase:
    articles: list[KnowledgeArticle]
    manifest: dict
    taxonomy: CategorySet


@dataclass
class SynthesisOutcome:
    articles: list[KnowledgeArticle] = field(default_factory=list)
    subcategories: list[Category] = field(default_factory=list)
    failures: list[SynthesisFailure] = field(default_factory=list)


@dataclass(frozen=True)
class SynthesisConfig:
    model_id: str = "default-model"
    max_parallel: int = 8
    thresholds: SynthesisThresholds = SynthesisThresholds()
    seed: int = 0
    discovery: DiscoveryConfig = DiscoveryConfig()


def select_strategy(pool_size: int, thresholds: SynthesisThresholds) -> str:
    """Route a pool by size: standard below 10, hierarchical above 50."""
    if pool_size < 0:
        raise ValueError("pool_size must be non-negative")
    if pool_size < thresholds.standard_max:
        return "standard"
    if pool_size <= thresholds.hierarchical_min:
        return "batch"
    return "hierarchical"


def format_ticket_block(ticket: Ticket) -> str:
    lines = [f"### Ticket {ticket.id}", f"Title: {ticket.title}"]
    if ticket.description:
        lines.append(f"Description: {ticket.description}")
    if ticket.comments:
        lines.append("Comments:")
        lines.extend(f"- [{c.author_role}] {c.body}" for c in ticket.comments)
    lines.append(f"Status: {ticket.status}")
    return "\n".join(lines)


def _ticket_data(tickets: list[Ticket]) -> str:
    return "\n\n".join(format_ticket_block(t) for t in tickets)


def _article_id(category_id: str, suffix: str = "") -> str:
    return "art-" + category_id.replace("/", "-") + suffix


_HEADING_RE = re.compile(r"^#+\s*(.+?)\s*$", re.MULTILINE)
_TITLE_LINE_RE = re.compile(r"^(?:[0-9]+\s*\.\s*)?\**\s*Title\s*\**\s*:\s*(.+?)\s*$", re.MULTILINE)


def _extract_title(body: str, fallback: str) -> str:
    match = _HEADING_RE.search(body)
    if match:
        return match.group(1).strip()
    match = _TITLE_LINE_RE.search(body)
    if match:
        return match.group(1).strip()
    return fallback


def _make_article(
    category: Category,
    body: str,
    source_ids: list[str],
    strategy: str,
    id_suffix: str = "",
) -> KnowledgeArticle:
    body = body.strip()
    if not body:
        raise SynthesisError(f"blank synthesis response for category {category.id!r}")
    word_count = len(body.split())
    if word_count > SOFT_MAX_ARTICLE_WORDS:
        logger.warning(
            "article for %r runs %d words (soft cap %d)",
            category.id,
            word_count,
            SOFT_MAX_ARTICLE_WORDS,
        )
    return KnowledgeArticle(
        id=_article_id(category.id, id_suffix),
        category_id=category.id,
        title=_extract_title(body, category.name),
        body=body,
        source_ticket_ids=tuple(source_ids),
        strategy=strategy,
        word_count=word_count,
    )


def synthesize_standard(
    gateway: Gateway,
    category: Category,
    tickets: list[Ticket],
    config: SynthesisConfig,
    strategy_label: str = "standard",
    id_suffix: str = "",
) -> KnowledgeArticle:
    """Synthesize one article from one pool in a single call."""
    if not tickets:
        raise SynthesisError(f"empty pool for category {category.id!r}")
    prompt = render(
        "knowledge_synthesis",
        {
            "category_name": category.name,
            "category_description": category.description,
            "ticket_data": _ticket_data(tickets),
        },
    )
    response = gateway.complete(ChatRequest(model_id=config.model_id, user_text=prompt))
    return _make_article(
        category, response.text, [t.id for t in tickets], strategy_label, id_suffix
    )


def synthesize_batched(
    gateway: Gateway,
    category: Category,
    tickets: list[Ticket],
    config: SynthesisConfig,
    strategy_label: str = "batch",
    id_suffix: str = "",
) -> KnowledgeArticle:
    """Synthesize per batch, then merge the partial articles into one.

    A pool that fits in a single batch needs no merge call. Failed batches
    are skipped as long as at least one survives; the merged article's
    sources are the union of the surviving batches' tickets.
    """
    if not tickets:
        raise SynthesisError(f"empty pool for category {category.id!r}")
    size = config.thresholds.batch_size
    batches = [tickets[i : i + size] for i in range(0, len(tickets), size)]

    if len(batches) == 1:
        return synthesize_standard(gateway, category, tickets, config, strategy_label, id_suffix)

    partials: list[KnowledgeArticle | None] = [None] * len(batches)
    with ThreadPoolExecutor(max_workers=min(config.max_parallel, len(batches))) as pool:
        futures = {
            pool.submit(
                synthesize_standard, gateway, category, batch, config, strategy_label, id_suffix
            ): i
            for i, batch in enumerate(batches)
        }
        for future, index in futures.items():
            try:
                partials[index] = future.result()
            except (GatewayError, ParseError, SynthesisError) as exc:
                logger.warning("batch %d for %r failed, skipping: %s", index, category.id, exc)
    survivors = [p for p in partials if p is not None]
    if not survivors:
        raise SynthesisError(f"all synthesis batches failed for category {category.id!r}")

    source_ids = [tid for article in survivors for tid in article.source_ticket_ids]
    if len(survivors) == 1:
        merged = survivors[0]
        return _make_article(category, merged.body, source_ids, strategy_label, id_suffix)

    prompt = render(
        "knowledge_merge",
        {
            "category_name": category.name,
            "category_description": category.description,
            "articles_to_merge": ARTICLE_SEPARATOR.join(a.body for a in survivors),
        },
    )
    response = gateway.complete(ChatRequest(model_id=config.model_id, user_text=prompt))
    return _make_article(category, response.text, source_ids, strategy_label, id_suffix)


def synthesize_hierarchical(
    gateway: Gateway,
    parent: Category,
    tickets: list[Ticket],
    config: SynthesisConfig,
) -> SynthesisOutcome:
    """Subdivide an oversized pool into subcategories and synthesize each.

    Tickets the subcategory pass could not place stay with the parent and
    become one extra residual article. When subcategory discovery comes back
    empty the whole pool falls back to flat batch synthesis.
    """
    outcome = SynthesisOutcome()
    subcats = discover_subcategories(gateway, parent, tickets, config.discovery)
    if not subcats.categories:
        logger.warning("no subcategories found for %r; falling back to batch", parent.id)
        outcome.articles.append(
            synthesize_batched(gateway, parent, tickets, config, strategy_label="batch")
        )
        return outcome

    outcome.subcategories.extend(subcats.categories)
    cat_config = CategorizeConfig(model_id=config.model_id, max_parallel=config.max_parallel)
    subcorpus = categorize_into_subcategories(gateway, tickets, parent, subcats, cat_config)

    by_id = {t.id: t for t in tickets}
    for subcat in subcats.categories:
        pool_ids = subcorpus.pool(subcat.id)
        pool = [by_id[tid] for tid in pool_ids]
        if not pool:
            continue
        try:
            if len(pool) < config.thresholds.standard_max:
                article = synthesize_standard(
                    gateway, subcat, pool, config, strategy_label="hierarchical"
                )
            else:
                article = synthesize_batched(
                    gateway, subcat, pool, config, strategy_label="hierarchical"
                )
            outcome.articles.append(article)
        except (GatewayError, ParseError, SynthesisError) as exc:
            logger.warning("subcategory %r synthesis failed: %s", subcat.id, exc)
            outcome.failures.append(SynthesisFailure(category_id=subcat.id, error=str(exc)))

    residual_ids = list(subcorpus.uncategorized) + [f.ticket_id for f in subcorpus.failed]
    residual = [by_id[tid] for tid in sorted(residual_ids)]
    if residual:
        try:
            outcome.articles.append(
                synthesize_batched(
                    gateway,
                    parent,
                    residual,
                    config,
                    strategy_label="hierarchical",
                    id_suffix="-residual",
                )
            )
        except (GatewayError, ParseError, SynthesisError) as exc:
            logger.warning("residual synthesis for %r failed: %s", parent.id, exc)
            outcome.failures.append(SynthesisFailure(category_id=parent.id, error=str(exc)))
    return outcome


def synthesize_for_category(
    gateway: Gateway,
    category: Category,
    tickets: list[Ticket],
    config: SynthesisConfig,
) -> SynthesisOutcome:
    strategy = select_strategy(len(tickets), config.thresholds)
    if strategy == "hierarchical":
        return synthesize_hierarchical(gateway, category, tickets, config)
    outcome = SynthesisOutcome()
    if strategy == "standard":
        outcome.articles.append(synthesize_standard(gateway, category, tickets, config))
    else:
        outcome.articles.append(synthesize_batched(gateway, category, tickets, config))
    return outcome


def _synthesis_config_digest(config: SynthesisConfig) -> str:
    payload = canonical_json(
        {
            "model_id": config.model_id,
            "seed": config.seed,
            "standard_max": config.thresholds.standard_max,
            "hierarchical_min": config.thresholds.hierarchical_min,
            "batch_size": config.thresholds.batch_size,
            "discovery_mode": config.discovery.mode,
            "discovery_batch_size": config.discovery.batch_size,
            "discovery_sample_size": config.discovery.sample_size,
        }
    )
    return sha256_text(payload)


def build_knowledge_base(
    gateway: Gateway,
    corpus: CategorizedCorpus,
    taxonomy: CategorySet,
    tickets: list[Ticket],
    config: SynthesisConfig,
) -> KnowledgeBase:
    """Synthesize articles for every categorized pool and assemble the KB.

    Tickets assigned to two categories contribute to both pools; the overlap
    is intentional and shows up in both articles' source ids. The manifest
    records per-category routing, volume accounting against the raw corpus,
    and every synthesis failure.
    """
    if not tickets:
        raise SynthesisError("cannot build a knowledge base from zero tickets")
    by_id = {t.id: t for t in tickets}
    corpus_chars = sum(len(ticket_full_text(t)) for t in tickets)
    if corpus_chars == 0:
        raise SynthesisError("corpus has no text to compact")

    top_level = [c for c in taxonomy.categories if c.parent is None]
    articles: list[KnowledgeArticle] = []
    subcategories: list[Category] = []
    failures: list[SynthesisFailure] = []
    strategy_by_category: dict[str, str] = {}

    for category in top_level:
        pool_ids = corpus.pool(category.id)
        pool = [by_id[tid] for tid in pool_ids if tid in by_id]
        if not pool:
            continue
        strategy_by_category[category.id] = select_strategy(len(pool), config.thresholds)
        try:
            outcome = synthesize_for_category(gateway, category, pool, config)
        except (GatewayError, ParseError, SynthesisError) as exc:
            logger.warning("category %r synthesis failed: %s", category.id, exc)
            failures.append(SynthesisFailure(category_id=category.id, error=str(exc)))
            continue
        articles.extend(outcome.articles)
        subcategories.extend(outcome.subcategories)
        failures.extend(outcome.failures)

    kb_chars = sum(len(a.body) for a in articles)
    manifest = {
        "article_count": len(articles),
        "category_count": len(top_level),
        "subcategory_count": len(subcategories),
        "corpus_chars": corpus_chars,
        "kb_chars": kb_chars,
        "volume_ratio": kb_chars / corpus_chars,
        "uncategorized_count": len(corpus.uncategorized),
        "failed_ticket_count": len(corpus.failed),
        "config_digest": _synthesis_config_digest(config),
        "digest_algorithm": DIGEST_ALGORITHM,
        "seed": config.seed,
        "strategy_by_category": strategy_by_category,
        "synthesis_failures": [
            {"category_id": f.category_id, "error": f.error} for f in failures
        ],
    }
    full_taxonomy = CategorySet(
        categories=tuple(top_level) + tuple(subcategories),
        provenance=taxonomy.provenance,
    )
    return KnowledgeBase(articles=articles, manifest=manifest, taxonomy=full_taxonomy)


def article_to_markdown(article: KnowledgeArticle) -> str:
    front = [
        "---",
        f"id: {article.id}",
        f"category_id: {article.category_id}",
        f"strategy: {article.strategy}",
        f"source_ticket_ids: {json.dumps(list(article.source_ticket_ids))}",
        f"title: {article.title}",
        f"word_count: {article.word_count}",
        "---",
        "",
    ]
    return "\n".join(front) + article.body + "\n"


def article_from_markdown(text: str) -> KnowledgeArticle:
    lines = text.split("\n")
    if not lines or lines[0].strip() != "---":
        raise SynthesisError("article file has no front-matter block")
    fields: dict[str, str] = {}
    body_start = None
    for i, line in enumerate(lines[1:], start=1):
        if line.strip() == "---":
            body_start = i + 1
            break
        if ":" in line:
            key, value = line.split(":", 1)
            fields[key.strip()] = value.strip()
    if body_start is None:
        raise SynthesisError("unterminated front-matter block")
    body = "\n".join(lines[body_start:]).strip()
    return KnowledgeArticle(
        id=fields["id"],
        category_id=fields["category_id"],
        title=fields.get("title", fields["id"]),
        body=body,
        source_ticket_ids=tuple(json.loads(fields.get("source_ticket_ids", "[]"))),
        strategy=fields.get("strategy", "standard"),
        word_count=int(fields.get("word_count", len(body.split()))),
    )


def write_knowledge_base(kb: KnowledgeBase, kb_dir: str | Path) -> None:
    kb_dir = Path(kb_dir)
    articles_dir = kb_dir / "articles"
    articles_dir.mkdir(parents=True, exist_ok=True)
    for article in kb.articles:
        atomic_write_text(articles_dir / f"{article.id}.md", article_to_markdown(article))
    atomic_write_text(
        kb_dir / "manifest.json", json.dumps(kb.manifest, indent=2, sort_keys=True) + "\n"
    )


def load_articles(kb_dir: str | Path) -> list[KnowledgeArticle]:
    articles_dir = Path(kb_dir) / "articles"
    out = []
    for path in sorted(articles_dir.glob("*.md")):
        out.append(article_from_markdown(path.read_text(encoding="utf-8")))
    return out


def load_manifest(kb_dir: str | Path) -> dict:
    return read_json(Path(kb_dir) / "manifest.json")
