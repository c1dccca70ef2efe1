"""Assign tickets to discovered categories with full accounting.

Every input ticket ends up in exactly one bucket: assigned (one or two
categories), uncategorized (the model returned no usable assignment), or
failed (the call or parse failed even after the repair retry). Fan-out is
bounded and the result is independent of worker scheduling.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .corpus import Ticket
from .discovery import Category, CategorySet
from .gateway import ChatRequest, Gateway, GatewayError
from .prompts import ParseError, complete_structured, normalize_name, render

logger = logging.getLogger(__name__)


class CategorizeError(Exception):
    pass


@dataclass(frozen=True)
class Assignment:
    ticket_id: str
    category_id: str
    reasoning: str = ""
    level: str = "category"


@dataclass(frozen=True)
class FailedTicket:
    ticket_id: str
    error: str


@dataclass
class CategorizedCorpus:
    assignments: list[Assignment] = field(default_factory=list)
    uncategorized: list[str] = field(default_factory=list)
    failed: list[FailedTicket] = field(default_factory=list)

    def assigned_ids(self) -> set[str]:
        return {a.ticket_id for a in self.assignments}

    def pool(self, category_id: str) -> list[str]:
        return [a.ticket_id for a in self.assignments if a.category_id == category_id]


@dataclass(frozen=True)
class CategorizeConfig:
    model_id: str = "default-model"
    max_parallel: int = 8

    def __post_init__(self):
        if self.max_parallel < 1:
            raise ValueError("max_parallel must be positive")


def format_category_list(categories: list[Category]) -> str:
    lines = []
    for c in categories:
        line = f"- {c.name}: {c.description}" if c.description else f"- {c.name}"
        if c.identifying_patterns:
            line += f" (patterns: {', '.join(c.identifying_patterns)})"
        lines.append(line)
    return "\n".join(lines)


def resolve_category_name(name: str, categories: list[Category]) -> Category | None:
    """Match a model-returned name to a category, or None.

    Exact match on the normalized name wins; otherwise a unique containment
    match (either direction) is accepted. Two or more candidates is treated
    as no match so an ambiguous answer never lands in the wrong bucket.
    """
    norm = normalize_name(name)
    if not norm:
        return None
    for c in categories:
        if normalize_name(c.name) == norm:
            return c
    candidates = []
    for c in categories:
        cat_norm = normalize_name(c.name)
        if norm in cat_norm or cat_norm in norm:
            candidates.append(c)
    if len(candidates) == 1:
        return candidates[0]
    if len(candidates) > 1:
        logger.warning(
            "ambiguous category name %r matches %s; dropping",
            name[:60],
            ", ".join(c.id for c in candidates),
        )
    return None


def categorize_ticket(
    gateway: Gateway,
    ticket: Ticket,
    categories: list[Category],
    config: CategorizeConfig,
) -> list[Assignment]:
    """Assign one ticket to up to two top-level categories."""
    if not categories:
        raise CategorizeError("taxonomy is empty")
    prompt = render(
        "ticket_categorization",
        {
            "title": ticket.title,
            "description": ticket.description,
            "categories": format_category_list(categories),
        },
    )
    parsed = complete_structured(
        gateway, ChatRequest(model_id=config.model_id, user_text=prompt), "assignments"
    )
    assignments: list[Assignment] = []
    seen: set[str] = set()
    for row in parsed.assignments:
        category = resolve_category_name(row.category_name, categories)
        if category is None:
            logger.warning(
                "ticket %s: unresolvable category name %r", ticket.id, row.category_name[:60]
            )
            continue
        if category.id in seen:
            continue
        seen.add(category.id)
        assignments.append(
            Assignment(
                ticket_id=ticket.id,
                category_id=category.id,
                reasoning=row.reasoning,
                level="category",
            )
        )
    return assignments


def categorize_into_subcategory(
    gateway: Gateway,
    ticket: Ticket,
    parent: Category,
    subcategories: list[Category],
    config: CategorizeConfig,
) -> list[Assignment]:
    """Assign one ticket to at most one subcategory of ``parent``."""
    if not subcategories:
        raise CategorizeError(f"no subcategories under {parent.id!r}")
    prompt = render(
        "subcategory_categorization",
        {
            "title": ticket.title,
            "description": ticket.description,
            "parent_category_name": parent.name,
            "parent_category_description": parent.description,
            "subcategories": format_category_list(subcategories),
        },
    )
    parsed = complete_structured(
        gateway, ChatRequest(model_id=config.model_id, user_text=prompt), "assignments"
    )
    for row in parsed.assignments:
        category = resolve_category_name(row.category_name, subcategories)
        if category is None:
            logger.warning(
                "ticket %s: unresolvable subcategory name %r", ticket.id, row.category_name[:60]
            )
            continue
        return [
            Assignment(
                ticket_id=ticket.id,
                category_id=category.id,
                reasoning=row.reasoning,
                level="subcategory",
            )
        ]
    return []


def _run_over_tickets(tickets: list[Ticket], max_parallel: int, work) -> CategorizedCorpus:
    """Fan work out over tickets and assemble results in ticket-id order."""
    ordered = sorted(tickets, key=lambda t: t.id)
    outcomes: dict[str, list[Assignment] | FailedTicket] = {}
    with ThreadPoolExecutor(max_workers=max_parallel) as pool:
        futures = {pool.submit(work, t): t for t in ordered}
        for future, ticket in futures.items():
            try:
                outcomes[ticket.id] = future.result()
            except (GatewayError, ParseError) as exc:
                outcomes[ticket.id] = FailedTicket(ticket_id=ticket.id, error=str(exc))

    corpus = CategorizedCorpus()
    for ticket in ordered:
        outcome = outcomes[ticket.id]
        if isinstance(outcome, FailedTicket):
            corpus.failed.append(outcome)
            logger.warning("ticket %s failed categorization: %s", ticket.id, outcome.error)
        elif outcome:
            corpus.assignments.extend(outcome)
        else:
            corpus.uncategorized.append(ticket.id)
    return corpus


def categorize_all(
    gateway: Gateway,
    tickets: list[Ticket],
    category_set: CategorySet,
    config: CategorizeConfig,
) -> CategorizedCorpus:
    """Categorize every ticket against the top-level taxonomy."""
    top_level = [c for c in category_set.categories if c.parent is None]
    if not top_level:
        raise CategorizeError("taxonomy has no top-level categories")
    return _run_over_tickets(
        tickets,
        config.max_parallel,
        lambda t: categorize_ticket(gateway, t, top_level, config),
    )


def categorize_into_subcategories(
    gateway: Gateway,
    tickets: list[Ticket],
    parent: Category,
    subcategory_set: CategorySet,
    config: CategorizeConfig,
) -> CategorizedCorpus:
    """Route a parent category's pool into its subcategories.

    Tickets with no usable assignment land in ``uncategorized`` and form the
    parent's residual pool.
    """
    subs = list(subcategory_set.categories)
    if not subs:
        raise CategorizeError(f"no subcategories under {parent.id!r}")
    return _run_over_tickets(
        tickets,
        config.max_parallel,
        lambda t: categorize_into_subcategory(gateway, t, parent, subs, config),
    )


def corpus_to_json(corpus: CategorizedCorpus) -> dict:
    return {
        "assignments": [
            {
                "ticket_id": a.ticket_id,
                "category_id": a.category_id,
                "reasoning": a.reasoning,
                "level": a.level,
            }
            for a in corpus.assignments
        ],
        "uncategorized": list(corpus.uncategorized),
        "failed": [{"ticket_id": f.ticket_id, "error": f.error} for f in corpus.failed],
    }


def corpus_from_json(payload: dict) -> CategorizedCorpus:
    return CategorizedCorpus(
        assignments=[
            Assignment(
                ticket_id=a["ticket_id"],
                category_id=a["category_id"],
                reasoning=a.get("reasoning", ""),
                level=a.get("level", "category"),
            )
            for a in payload.get("assignments", [])
        ],
        uncategorized=list(payload.get("uncategorized", [])),
        failed=[
            FailedTicket(ticket_id=f["ticket_id"], error=f.get("error", ""))
            for f in payload.get("failed", [])
        ],
    )
