"""Category taxonomy discovery over sampled tickets.

Batch mode samples the training split, discovers a category set per batch in
parallel, and merges the per-batch sets into one taxonomy. Iterative mode
walks the batches sequentially, feeding the running category list plus the
next batch of ticket digests through the merge prompt so each call refines
the same growing set.
"""

from __future__ import annotations

import json
import logging
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .corpus import Ticket
from .gateway import ChatRequest, Gateway, GatewayError
from .prompts import (
    MAX_PATTERNS_PER_CATEGORY,
    MAX_PATTERNS_PER_SUBCATEGORY,
    ParsedCategories,
    ParseError,
    complete_structured,
    normalize_name,
    render,
)

logger = logging.getLogger(__name__)

DIGEST_DESCRIPTION_CHARS = 400
MAX_TAXONOMY_DEPTH = 2


class DiscoveryError(Exception):
    pass


@dataclass(frozen=True)
class Category:
    id: str
    name: str
    description: str = ""
    identifying_patterns: tuple[str, ...] = ()
    parent: str | None = None


@dataclass(frozen=True)
class CategorySet:
    categories: tuple[Category, ...] = ()
    provenance: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.categories)

    def by_id(self) -> dict[str, Category]:
        return {c.id: c for c in self.categories}


@dataclass(frozen=True)
class DiscoveryConfig:
    mode: str = "batch"
    sample_size: int = 200
    batch_size: int = 50
    seed: int = 0
    max_parallel: int = 8
    prompt_budget_chars: int = 24000
    model_id: str = "default-model"

    def __post_init__(self):
        if self.mode not in ("batch", "iterative"):
            raise ValueError(f"unknown discovery mode: {self.mode!r}")
        if self.sample_size < 1 or self.batch_size < 1 or self.max_parallel < 1:
            raise ValueError("sample_size, batch_size, and max_parallel must be positive")


def slugify(name: str) -> str:
    return re.sub(r"\s+", "-", normalize_name(name))


def format_ticket_digest(ticket: Ticket) -> str:
    return f"[{ticket.id}] {ticket.title} — {ticket.description[:DIGEST_DESCRIPTION_CHARS]}"


def _digest_block(tickets: list[Ticket]) -> str:
    return "\n".join(format_ticket_digest(t) for t in tickets)


def sample_tickets(tickets: list[Ticket], n: int, seed: int) -> list[Ticket]:
    """Uniform sample without replacement, stable under seed and input order."""
    ordered = sorted(tickets, key=lambda t: (t.created_at, t.id))
    if n >= len(ordered):
        return ordered
    rng = random.Random(seed)
    picked = sorted(rng.sample(range(len(ordered)), n))
    return [ordered[i] for i in picked]


def _build_category_set(
    parsed: ParsedCategories,
    provenance: dict,
    parent: Category | None = None,
    max_patterns: int = MAX_PATTERNS_PER_CATEGORY,
) -> CategorySet:
    """Turn parsed rows into slugged categories, merging duplicate names."""
    by_slug: dict[str, Category] = {}
    order: list[str] = []
    for row in parsed.categories:
        slug = slugify(row.name)
        if not slug:
            logger.warning("dropping category with unusable name: %r", row.name[:60])
            continue
        cat_id = f"{parent.id}/{slug}" if parent else slug
        patterns = tuple(row.identifying_patterns[:max_patterns])
        if cat_id in by_slug:
            existing = by_slug[cat_id]
            merged = list(existing.identifying_patterns)
            for p in patterns:
                if p not in merged:
                    merged.append(p)
            by_slug[cat_id] = Category(
                id=cat_id,
                name=existing.name,
                description=existing.description or row.description,
                identifying_patterns=tuple(merged[:max_patterns]),
                parent=existing.parent,
            )
            logger.warning("merged duplicate category name %r into %r", row.name, cat_id)
            continue
        by_slug[cat_id] = Category(
            id=cat_id,
            name=row.name,
            description=row.description,
            identifying_patterns=patterns,
            parent=parent.id if parent else None,
        )
        order.append(cat_id)
    if not by_slug:
        provenance = dict(provenance, empty=True)
    return CategorySet(categories=tuple(by_slug[s] for s in order), provenance=provenance)


def category_payload(category_set: CategorySet) -> dict:
    """The JSON shape used when a category set is fed back into a prompt."""
    return {
        "categories": [
            {
                "name": c.name,
                "description": c.description,
                "identifying_patterns": list(c.identifying_patterns),
            }
            for c in category_set.categories
        ]
    }


def category_set_to_json(category_set: CategorySet) -> dict:
    return {
        "categories": [
            {
                "id": c.id,
                "name": c.name,
                "description": c.description,
                "identifying_patterns": list(c.identifying_patterns),
                "parent": c.parent,
            }
            for c in category_set.categories
        ],
        "provenance": category_set.provenance,
    }


def category_set_from_json(payload: dict) -> CategorySet:
    return CategorySet(
        categories=tuple(
            Category(
                id=c["id"],
                name=c["name"],
                description=c.get("description", ""),
                identifying_patterns=tuple(c.get("identifying_patterns", ())),
                parent=c.get("parent"),
            )
            for c in payload.get("categories", [])
        ),
        provenance=payload.get("provenance", {}),
    )


def _request(config: DiscoveryConfig, prompt: str) -> ChatRequest:
    return ChatRequest(model_id=config.model_id, user_text=prompt)


def discover_batch(
    gateway: Gateway,
    tickets: list[Ticket],
    config: DiscoveryConfig,
    parent: Category | None = None,
) -> CategorySet:
    """One discovery call over one batch of tickets."""
    if not tickets:
        raise DiscoveryError("cannot discover categories from an empty batch")
    if parent is None:
        prompt = render("category_discovery", {"sample_tickets": _digest_block(tickets)})
        kind, max_patterns = "categories", MAX_PATTERNS_PER_CATEGORY
    else:
        prompt = render(
            "subcategory_discovery",
            {
                "parent_category_name": parent.name,
                "parent_category_description": parent.description,
                "sample_tickets": _digest_block(tickets),
            },
        )
        kind, max_patterns = "subcategories", MAX_PATTERNS_PER_SUBCATEGORY
    parsed = complete_structured(gateway, _request(config, prompt), kind)
    provenance = {
        "mode": "batch",
        "batch_count": 1,
        "sample_size": len(tickets),
        "seed": config.seed,
    }
    return _build_category_set(parsed, provenance, parent=parent, max_patterns=max_patterns)


def merge_category_sets(
    gateway: Gateway,
    sets: list[CategorySet],
    config: DiscoveryConfig,
    parent: Category | None = None,
    max_patterns: int = MAX_PATTERNS_PER_CATEGORY,
) -> CategorySet:
    """Merge discovered sets into one, preferring a single merge call.

    A single input set is returned unchanged with no model call. When the
    serialized sets exceed the prompt budget, adjacent pairs are merged in a
    balanced tree (odd set passes through untouched) and the survivors are
    merged again until one set remains.
    """
    sets = [s for s in sets]
    if not sets:
        return CategorySet(provenance={"mode": "merge", "merged_sets": 0, "empty": True})
    if len(sets) == 1:
        return sets[0]

    payload = json.dumps([category_payload(s) for s in sets], indent=2)
    if len(payload) <= config.prompt_budget_chars:
        prompt = render("category_merge", {"category_sets_json": payload})
        parsed = complete_structured(gateway, _request(config, prompt), "categories")
        provenance = {"mode": "merge", "merged_sets": len(sets), "seed": config.seed}
        if parsed.merge_summary:
            provenance["merge_summary"] = parsed.merge_summary
        return _build_category_set(parsed, provenance, parent=parent, max_patterns=max_patterns)

    logger.warning(
        "merge payload of %d chars exceeds budget %d; merging pairwise",
        len(payload),
        config.prompt_budget_chars,
    )
    next_level: list[CategorySet] = []
    for i in range(0, len(sets), 2):
        pair = sets[i : i + 2]
        if len(pair) == 1:
            next_level.append(pair[0])
            continue
        pair_payload = json.dumps([category_payload(s) for s in pair], indent=2)
        prompt = render("category_merge", {"category_sets_json": pair_payload})
        parsed = complete_structured(gateway, _request(config, prompt), "categories")
        next_level.append(
            _build_category_set(
                parsed,
                {"mode": "merge", "merged_sets": 2, "seed": config.seed},
                parent=parent,
                max_patterns=max_patterns,
            )
        )
    return merge_category_sets(gateway, next_level, config, parent=parent, max_patterns=max_patterns)


def _batches(items: list, size: int) -> list[list]:
    return [items[i : i + size] for i in range(0, len(items), size)]


def discover(gateway: Gateway, train_tickets: list[Ticket], config: DiscoveryConfig) -> CategorySet:
    """Discover the top-level taxonomy from the training split."""
    if not train_tickets:
        raise DiscoveryError("cannot discover categories from an empty training split")
    sample = sample_tickets(train_tickets, config.sample_size, config.seed)
    batches = _batches(sample, config.batch_size)

    if config.mode == "iterative":
        return _discover_iterative(gateway, batches, sample, config)

    results: list[CategorySet | None] = [None] * len(batches)
    failed = 0
    with ThreadPoolExecutor(max_workers=min(config.max_parallel, len(batches))) as pool:
        futures = {pool.submit(discover_batch, gateway, b, config): i for i, b in enumerate(batches)}
        for future, index in futures.items():
            try:
                results[index] = future.result()
            except (GatewayError, ParseError, DiscoveryError) as exc:
                failed += 1
                logger.warning("discovery batch %d failed, skipping: %s", index, exc)
    survivors = [r for r in results if r is not None]
    if not survivors:
        raise DiscoveryError("all discovery batches failed")

    merged = merge_category_sets(gateway, survivors, config)
    provenance = {
        "mode": "batch",
        "batch_count": len(batches),
        "failed_batches": failed,
        "sample_size": len(sample),
        "seed": config.seed,
    }
    if merged.provenance.get("empty"):
        provenance["empty"] = True
    return CategorySet(categories=merged.categories, provenance=provenance)


def _discover_iterative(
    gateway: Gateway,
    batches: list[list[Ticket]],
    sample: list[Ticket],
    config: DiscoveryConfig,
) -> CategorySet:
    """Sequential refinement: every call sees the running set and new digests."""
    running = CategorySet()
    for batch in batches:
        payload = json.dumps(
            [
                category_payload(running),
                {"new_tickets": [format_ticket_digest(t) for t in batch]},
            ],
            indent=2,
        )
        prompt = render("category_merge", {"category_sets_json": payload})
        parsed = complete_structured(gateway, _request(config, prompt), "categories")
        running = _build_category_set(parsed, {"mode": "iterative"})
    provenance = {
        "mode": "iterative",
        "batch_count": len(batches),
        "sample_size": len(sample),
        "seed": config.seed,
    }
    if not running.categories:
        provenance["empty"] = True
    return CategorySet(categories=running.categories, provenance=provenance)


def discover_subcategories(
    gateway: Gateway,
    parent: Category,
    tickets: list[Ticket],
    config: DiscoveryConfig,
) -> CategorySet:
    """Discover subcategories for one oversized parent category.

    Returns an empty set when the model finds no subdivision; the caller is
    expected to fall back to flat batch synthesis in that case.
    """
    if parent.parent is not None:
        raise DiscoveryError(
            f"taxonomy depth is capped at {MAX_TAXONOMY_DEPTH}: "
            f"{parent.id!r} is already a subcategory"
        )
    sample = sample_tickets(tickets, config.sample_size, config.seed)
    batches = _batches(sample, config.batch_size)
    sets = []
    for index, batch in enumerate(batches):
        try:
            sets.append(discover_batch(gateway, batch, config, parent=parent))
        except (GatewayError, ParseError) as exc:
            logger.warning("subcategory batch %d for %r failed: %s", index, parent.id, exc)
    if not sets:
        return CategorySet(provenance={"mode": "subcategory", "parent": parent.id, "empty": True})
    merged = merge_category_sets(
        gateway, sets, config, parent=parent, max_patterns=MAX_PATTERNS_PER_SUBCATEGORY
    )
    provenance = {
        "mode": "subcategory",
        "parent": parent.id,
        "batch_count": len(batches),
        "sample_size": len(sample),
        "seed": config.seed,
    }
    if not merged.categories:
        provenance["empty"] = True
    return CategorySet(categories=merged.categories, provenance=provenance)
