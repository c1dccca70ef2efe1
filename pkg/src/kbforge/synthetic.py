"""Seeded synthetic ticket corpus plus the mock script that drives it.

The generator interleaves a handful of themed topics over a timeline and
keeps three vocabularies apart on purpose: title/description words, comment
words, and the scripted query words. Comments never share long substrings
with the fields query generation sees.

``build_mock_rules`` derives substring rules for every call the pipeline
will make over a given corpus. Patterns are computed from the template
bodies at runtime (the text right around a placeholder plus the inserted
value), so each rule matches exactly one prompt kind and, where needed,
exactly one ticket or category.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from pathlib import Path

from .corpus import Comment, Ticket, ticket_full_text, ticket_to_record
from .discovery import slugify
from .fsutil import atomic_write_text
from .gateway import MockBackend
from .prompts import TEMPLATE_PLACEHOLDERS, template_body

BASE_TIME = datetime(2025, 1, 6, 9, 0, 0, tzinfo=timezone.utc)
DEFAULT_TOPIC_SIZE = 20

METHODS = ("raw", "per_ticket", "cluster", "multi_agent", "multi_level")

SCORE_SCHEDULES: dict[str, tuple[int, ...]] = {
    "raw": (3, 2, 3, 1, 3, 2, 4, 2),
    "per_ticket": (3, 4, 3, 2, 3, 4, 3, 3),
    "cluster": (3, 3, 2, 3, 4, 3, 3, 3),
    "multi_agent": (4, 5, 4, 3, 4, 4, 5, 4),
    "multi_level": (4, 4, 3, 4, 4, 5, 3, 4),
}

ANSWER_TEXTS: dict[str, str] = {
    "raw": "ANSWER-RAW Closest raw ticket thread, quoted as found.",
    "per_ticket": "ANSWER-PT Steps taken from the matching ticket digest.",
    "cluster": "ANSWER-CL Steps drawn from the grouped cluster digest.",
    "multi_agent": "ANSWER-MA Guidance from the synthesized category article.",
    "multi_level": "ANSWER-ML Combined view from ticket digests and category articles.",
}

SUBCATEGORY_SUFFIXES = ("Intake", "Recovery")


@dataclass(frozen=True)
class Topic:
    name: str
    description: str
    identifying_patterns: tuple[str, ...]
    variants: tuple[str, ...]
    query_phrase: str
    follow_up: str
    fix_phrase: str


DEFAULT_TOPICS: tuple[Topic, ...] = (
    Topic(
        name="Dock Scheduling",
        description="Inbound trailer appointment slot conflict at the dock gate",
        identifying_patterns=("dock", "gate", "appointment"),
        variants=(
            "gate window overrun",
            "slot clash on ramp",
            "trailer queue backlog",
            "appointment grid drift",
        ),
        query_phrase="dock gate appointment slot",
        follow_up="Yard crew still waiting on the planner refresh",
        fix_phrase="Remapped the yard planner shard and purged stale reservations",
    ),
    Topic(
        name="Invoice Mismatch",
        description="Supplier invoice total disagrees with the purchase order amount",
        identifying_patterns=("invoice", "purchase order", "amount"),
        variants=(
            "three way match failure",
            "tax line variance",
            "currency rounding gap",
            "duplicate billing entry",
        ),
        query_phrase="supplier invoice purchase order",
        follow_up="Finance bot raised the same alert overnight",
        fix_phrase="Reissued the ledger correction run and updated the payable register",
    ),
    Topic(
        name="Customs Clearance",
        description="Shipment held at the border broker pending declaration documents",
        identifying_patterns=("customs", "border", "declaration"),
        variants=(
            "tariff code rejection",
            "missing commercial docs",
            "broker console timeout",
            "duty calculation stall",
        ),
        query_phrase="customs border declaration",
        follow_up="Trade desk ack received but the freeze persists",
        fix_phrase="Refiled the packet through the trade desk and confirmed release",
    ),
    Topic(
        name="Label Printing",
        description="Shipping label batch fails to render at the pack station printer",
        identifying_patterns=("label", "printer", "barcode"),
        variants=(
            "barcode smudge defect",
            "zpl template fault",
            "printer spooler jam",
            "label size drift",
        ),
        query_phrase="label printer batch render",
        follow_up="Floor team reports the device buffer filling again",
        fix_phrase="Rolled the firmware patch and cleared the device buffer",
    ),
    Topic(
        name="Inventory Sync",
        description="Stock counts diverge between the warehouse system and the storefront feed",
        identifying_patterns=("inventory", "stock", "sync"),
        variants=(
            "negative on hand count",
            "phantom stock rows",
            "cycle count skew",
            "feed lag spike",
        ),
        query_phrase="warehouse stock count sync",
        follow_up="Overnight reconciliation job skipped the delta again",
        fix_phrase="Replayed the reconciliation job and rebuilt the snapshot table",
    ),
    Topic(
        name="Carrier Onboarding",
        description="New freight carrier cannot activate credentials for the booking portal",
        identifying_patterns=("carrier", "credentials", "booking"),
        variants=(
            "api key handshake loop",
            "rate card upload stuck",
            "insurance doc expiry",
            "scac identifier bounce",
        ),
        query_phrase="carrier booking portal credentials",
        follow_up="Partner still sees the login wall on retry",
        fix_phrase="Provisioned fresh tokens and allowlisted the partner endpoint",
    ),
)


def make_corpus(
    seed: int = 0,
    topic_sizes: tuple[int, ...] | None = None,
    topics: tuple[Topic, ...] | None = None,
) -> tuple[list[Ticket], list[Topic]]:
    """Build an interleaved ticket corpus, one hour apart, topics cycling.

    ``topic_sizes[i]`` tickets are drawn from ``topics[i]``; the default is
    six topics of twenty tickets each. The seed only varies which title
    phrase each ticket gets, never the topic layout.
    """
    topics = tuple(topics) if topics is not None else DEFAULT_TOPICS
    sizes = tuple(topic_sizes) if topic_sizes is not None else (DEFAULT_TOPIC_SIZE,) * len(topics)
    if len(sizes) > len(topics):
        raise ValueError(f"need {len(sizes)} topics, have {len(topics)}")
    if any(s < 0 for s in sizes):
        raise ValueError("topic sizes must be non-negative")
    topics = topics[: len(sizes)]

    rng = random.Random(seed)
    remaining = list(sizes)
    ordinal_in_topic = [0] * len(sizes)
    tickets: list[Ticket] = []
    i = 0
    while any(remaining):
        for t_idx, left in enumerate(remaining):
            if not left:
                continue
            topic = topics[t_idx]
            k = ordinal_in_topic[t_idx]
            tid = f"T{i + 1:04d}"
            variant = topic.variants[rng.randrange(len(topic.variants))]
            tickets.append(
                Ticket(
                    id=tid,
                    title=f"{topic.name} {tid} {variant}",
                    created_at=BASE_TIME + timedelta(hours=i),
                    description=(
                        f"{topic.description} for {tid}; raised by the site team this week."
                    ),
                    comments=(
                        Comment(
                            body=f"{topic.follow_up}; attempt {k % 4 + 2} shows the same result.",
                            author_role="requester",
                        ),
                        Comment(
                            body=f"{topic.fix_phrase}; verified on rotation {k}.",
                            author_role="resolver",
                        ),
                    ),
                    status="resolved",
                )
            )
            remaining[t_idx] -= 1
            ordinal_in_topic[t_idx] += 1
            i += 1
    return tickets, list(topics)


def ticket_topic(ticket: Ticket, topics: list[Topic]) -> Topic:
    for topic in topics:
        if ticket.title.startswith(topic.name + " "):
            return topic
    raise ValueError(f"ticket {ticket.id} matches no topic")


def ticket_ordinal(ticket: Ticket) -> int:
    return int(ticket.id[1:]) - 1


def scripted_query(ticket: Ticket, topics: list[Topic]) -> str:
    topic = ticket_topic(ticket, topics)
    return f"How to fix {topic.query_phrase} issue {ticket.id}?"


def scripted_score(method: str, ticket: Ticket) -> int:
    schedule = SCORE_SCHEDULES[method]
    return schedule[ticket_ordinal(ticket) % len(schedule)]


def subcategory_names(topic: Topic) -> tuple[str, ...]:
    return tuple(f"{topic.name} {suffix}" for suffix in SUBCATEGORY_SUFFIXES)


def ma_article_body(topic: Topic) -> str:
    return "\n".join(
        [
            f"# MA Guide: {topic.name}",
            "",
            "Common Issues",
            f"- Recurring {topic.query_phrase} requests logged by site operators.",
            f"- {topic.variants[0]} and {topic.variants[1]} patterns repeat across the pool.",
            "",
            "Tips for Resolution",
            f"- {topic.fix_phrase}.",
            "- Confirm the change with the requesting site before closing.",
            "",
            "Resources",
            f"- Internal runbook index, section {slugify(topic.name)}.",
            "",
            "KB-MA",
        ]
    )


def subcat_article_body(subcat_name: str, topic: Topic) -> str:
    return "\n".join(
        [
            f"# MA Guide: {subcat_name}",
            "",
            f"Narrow guidance for {topic.query_phrase} work in the {subcat_name.lower()} lane.",
            f"- {topic.fix_phrase}.",
            "",
            "KB-MA",
        ]
    )


def pt_article_body(ticket: Ticket, topic: Topic) -> str:
    return "\n".join(
        [
            f"# PT Digest {ticket.id}",
            "",
            f"Single ticket summary for {ticket.title}.",
            f"Working path: {topic.fix_phrase.lower()}.",
            "",
            "KB-PT",
        ]
    )


def cluster_article_body(label: int, member_topics: list[Topic]) -> str:
    phrases = ", ".join(sorted({t.query_phrase for t in member_topics}))
    return "\n".join(
        [
            f"# Cluster Digest {label}",
            "",
            f"Grouped remediation notes covering {phrases}.",
            "",
            "KB-CL",
        ]
    )


def _judgment_text(score: int, method: str, ticket_id: str) -> str:
    return "\n".join(
        [
            f"1. Helpfulness Score (1-5): {score}",
            f"2. Reasoning: Scripted check of the {method} answer for {ticket_id}.",
            "3. Missing Information: None noted.",
            "4. Improvement Suggestions: None.",
        ]
    )


def _categories_payload(topics: list[Topic], merged: bool) -> str:
    payload: dict = {
        "categories": [
            {
                "name": t.name,
                "description": t.description,
                "identifying_patterns": list(t.identifying_patterns),
            }
            for t in topics
        ]
    }
    if merged:
        payload["merge_summary"] = "Scripted union of the batch taxonomies."
    return json.dumps(payload, indent=2)


def _subcategories_payload(topic: Topic) -> str:
    return json.dumps(
        {
            "subcategories": [
                {
                    "name": name,
                    "description": f"{suffix} handling within {topic.name.lower()}.",
                    "identifying_patterns": list(topic.identifying_patterns[:2]),
                    "parent_category": topic.name,
                }
                for name, suffix in zip(subcategory_names(topic), SUBCATEGORY_SUFFIXES)
            ]
        },
        indent=2,
    )


def _subcategory_merge_payload(topic: Topic) -> str:
    return json.dumps(
        {
            "categories": [
                {
                    "name": name,
                    "description": f"{suffix} handling within {topic.name.lower()}.",
                    "identifying_patterns": list(topic.identifying_patterns[:2]),
                }
                for name, suffix in zip(subcategory_names(topic), SUBCATEGORY_SUFFIXES)
            ],
            "merge_summary": "Scripted subcategory union.",
        },
        indent=2,
    )


def _assignment_payload(key: str, name: str, ticket_id: str) -> str:
    return json.dumps(
        {
            "assignments": [
                {key: name, "reasoning": f"Scripted routing for {ticket_id}."}
            ]
        }
    )


def _before(template: str, placeholder: str, width: int = 80) -> str:
    """Template text immediately before a placeholder, same-prompt contiguous."""
    body = template_body(template)
    idx = body.index("{" + placeholder + "}")
    segment = body[max(0, idx - width) : idx]
    cut = segment.rfind("}")
    segment = segment[cut + 1 :] if cut != -1 else segment
    if len(segment) < 8:
        raise ValueError(f"anchor before {placeholder!r} in {template!r} too short")
    return segment


def _after(template: str, placeholder: str, width: int = 40) -> str:
    body = template_body(template)
    token = "{" + placeholder + "}"
    idx = body.index(token) + len(token)
    segment = body[idx : idx + width]
    cut = segment.find("{")
    segment = segment[:cut] if cut != -1 else segment
    if len(segment) < 8:
        raise ValueError(f"anchor after {placeholder!r} in {template!r} too short")
    return segment


def _fingerprint(template: str, min_len: int = 16) -> str:
    """A line unique to one template body, used for kind-level rules."""
    body = template_body(template)
    others = [template_body(n) for n in TEMPLATE_PLACEHOLDERS if n != template]
    for line in body.splitlines():
        line = line.strip()
        if len(line) >= min_len and "{" not in line and all(line not in o for o in others):
            return line
    raise ValueError(f"no distinct line found for template {template!r}")


def build_mock_rules(
    tickets: list[Ticket],
    topics: list[Topic],
    embed_dim: int = 256,
    cluster_threshold: float = 0.5,
) -> list[dict]:
    """Substring rules covering every pipeline call over this corpus.

    Rule order matters in four places: subcategory merges must precede the
    generic merge rule, judge rules must precede answer rules, the
    multi-level junction must precede the per-marker answer rules, and the
    unmarked answer rule must come last.
    """
    from .rag import GreedyCosineClusterer, HashedTfEmbedder
    import numpy as np

    ordered = sorted(tickets, key=lambda t: t.id)
    rules: list[dict] = []

    def add(pattern: str, response: str) -> None:
        rules.append({"pattern": pattern, "response": response})

    after_desc_cat = _after("ticket_categorization", "description")
    after_desc_sub = _after("subcategory_categorization", "description")
    after_desc_query = _after("query_generation", "description")
    for ticket in ordered:
        topic = ticket_topic(ticket, topics)
        add(
            ticket.description + after_desc_cat,
            _assignment_payload("category", topic.name, ticket.id),
        )
        subcat = subcategory_names(topic)[ticket_ordinal(ticket) % 2]
        add(
            ticket.description + after_desc_sub,
            _assignment_payload("subcategory", subcat, ticket.id),
        )
        add(ticket.description + after_desc_query, scripted_query(ticket, topics))

    synth_name = _before("knowledge_synthesis", "category_name")
    synth_tail = _after("knowledge_synthesis", "category_name")
    merge_name = _before("knowledge_merge", "category_name")
    merge_tail = _after("knowledge_merge", "category_name")
    for ticket in ordered:
        topic = ticket_topic(ticket, topics)
        add(synth_name + ticket.title + synth_tail, pt_article_body(ticket, topic))

    embedder = HashedTfEmbedder(dim=embed_dim)
    clusterer = GreedyCosineClusterer(threshold=cluster_threshold)
    vectors = np.stack([embedder.embed(ticket_full_text(t)) for t in ordered])
    labels = clusterer.cluster(vectors)
    members: dict[int, list[Ticket]] = {}
    for ticket, label in zip(ordered, labels):
        if label >= 0:
            members.setdefault(label, []).append(ticket)
    for label in sorted(members):
        member_topics = [ticket_topic(t, topics) for t in members[label]]
        body = cluster_article_body(label, member_topics)
        cluster_name = f"Ticket Cluster {label}"
        add(synth_name + cluster_name + synth_tail, body)
        add(merge_name + cluster_name + merge_tail, body)

    for topic in topics:
        for subcat in subcategory_names(topic):
            body = subcat_article_body(subcat, topic)
            add(synth_name + subcat + synth_tail, body)
            add(merge_name + subcat + merge_tail, body)
        add(synth_name + topic.name + synth_tail, ma_article_body(topic))
        add(merge_name + topic.name + merge_tail, ma_article_body(topic))

    subdisc_name = _before("subcategory_discovery", "parent_category_name")
    subdisc_tail = _after("subcategory_discovery", "parent_category_name")
    for topic in topics:
        add(subdisc_name + topic.name + subdisc_tail, _subcategories_payload(topic))
        first_subcat = subcategory_names(topic)[0]
        add(json.dumps({"name": first_subcat})[1:-1], _subcategory_merge_payload(topic))

    add(_fingerprint("category_discovery"), _categories_payload(topics, merged=False))
    add(_fingerprint("category_merge"), _categories_payload(topics, merged=True))

    between_question_answer = _after("answer_evaluation", "question")
    for ticket in ordered:
        query = scripted_query(ticket, topics)
        for method in METHODS:
            marker = ANSWER_TEXTS[method].split()[0]
            add(
                query + between_question_answer + marker,
                _judgment_text(scripted_score(method, ticket), method, ticket.id),
            )

    answer_tail = _before("answer_generation", "question")
    add("KB-PT\n\n## MA Guide: ", ANSWER_TEXTS["multi_level"])
    add("KB-MA" + answer_tail, ANSWER_TEXTS["multi_agent"])
    add("KB-PT" + answer_tail, ANSWER_TEXTS["per_ticket"])
    add("KB-CL" + answer_tail, ANSWER_TEXTS["cluster"])
    add(answer_tail, ANSWER_TEXTS["raw"])

    seen = set()
    for rule in rules:
        if rule["pattern"] in seen:
            raise ValueError(f"duplicate mock rule pattern: {rule['pattern'][:60]!r}")
        seen.add(rule["pattern"])
    return rules


def register_script(backend: MockBackend, rules: list[dict]) -> None:
    for rule in rules:
        backend.register_rule(
            rule["pattern"],
            rule["response"],
            int(rule.get("failures_before_success", 0)),
        )


def write_corpus(path: str | Path, tickets: list[Ticket]) -> None:
    lines = [json.dumps(ticket_to_record(t), sort_keys=True) for t in tickets]
    atomic_write_text(Path(path), "\n".join(lines) + "\n")


def write_mock_script(path: str | Path, rules: list[dict]) -> None:
    atomic_write_text(Path(path), json.dumps({"rules": rules}, indent=2) + "\n")


def load_mock_script(path: str | Path) -> list[dict]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    rules = payload.get("rules")
    if not isinstance(rules, list):
        raise ValueError(f"mock script {path} has no 'rules' array")
    for rule in rules:
        if not isinstance(rule, dict) or "pattern" not in rule or "response" not in rule:
            raise ValueError(f"mock script {path}: each rule needs pattern and response")
    return rules


def make_bundle(
    data_dir: str | Path,
    seed: int = 0,
    topic_sizes: tuple[int, ...] | None = None,
) -> dict[str, str]:
    """Write the corpus and its mock script; returns the two paths."""
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    tickets, topics = make_corpus(seed=seed, topic_sizes=topic_sizes)
    tickets_path = data_dir / "tickets.jsonl"
    script_path = data_dir / "mock_rules.json"
    write_corpus(tickets_path, tickets)
    write_mock_script(script_path, build_mock_rules(tickets, topics))
    return {"tickets": str(tickets_path), "mock_script": str(script_path)}
