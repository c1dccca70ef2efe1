"""Prompt templates and structured-output parsing.

Templates ship as plain text resources under ``kbforge/templates/`` and are
rendered by substituting ``{placeholder}`` slots. Literal braces elsewhere in
a template (JSON examples in the output-format sections) pass through
untouched, so substitution is a single pass over known placeholder names
rather than ``str.format``.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, replace
from importlib import resources

from .gateway import ChatRequest, Gateway

logger = logging.getLogger(__name__)

TEMPLATE_PLACEHOLDERS: dict[str, frozenset[str]] = {
    "category_discovery": frozenset({"sample_tickets"}),
    "category_merge": frozenset({"category_sets_json"}),
    "subcategory_discovery": frozenset(
        {"parent_category_name", "parent_category_description", "sample_tickets"}
    ),
    "ticket_categorization": frozenset({"title", "description", "categories"}),
    "subcategory_categorization": frozenset(
        {"title", "description", "parent_category_name", "parent_category_description", "subcategories"}
    ),
    "knowledge_synthesis": frozenset({"category_name", "category_description", "ticket_data"}),
    "knowledge_merge": frozenset({"category_name", "category_description", "articles_to_merge"}),
    "query_generation": frozenset({"title", "description"}),
    "answer_evaluation": frozenset({"question", "answer", "ticket_content"}),
    "answer_generation": frozenset({"articles", "question"}),
}

TEMPLATE_NAMES = tuple(sorted(TEMPLATE_PLACEHOLDERS))

MAX_PATTERNS_PER_CATEGORY = 15
MAX_PATTERNS_PER_SUBCATEGORY = 10
MAX_ASSIGNMENTS_PER_TICKET = 2
SOFT_MAX_NAME_WORDS = 5
SOFT_MAX_DESCRIPTION_WORDS = 50

REPAIR_SUFFIX = "Your previous response was not valid JSON. Return ONLY the JSON object."

_PLACEHOLDER_RE = re.compile(r"\{([a-z_]+)\}")
_FENCE_RE = re.compile(r"```[a-zA-Z0-9_-]*")
_SCORE_RE = re.compile(r"Helpfulness\s+Score[^:\n]*:\s*\**\s*(-?[0-9]+(?:\.[0-9]+)?)", re.IGNORECASE)


class PromptError(Exception):
    pass


class UnknownTemplateError(PromptError):
    pass


class MissingPlaceholderError(PromptError):
    pass


class ParseError(PromptError):
    pass


@dataclass(frozen=True)
class ParsedCategory:
    name: str
    description: str
    identifying_patterns: tuple[str, ...]
    parent_name: str | None = None


@dataclass(frozen=True)
class ParsedCategories:
    categories: tuple[ParsedCategory, ...]
    merge_summary: str | None = None


@dataclass(frozen=True)
class ParsedAssignment:
    category_name: str
    reasoning: str


@dataclass(frozen=True)
class ParsedAssignments:
    assignments: tuple[ParsedAssignment, ...]


@dataclass(frozen=True)
class ParsedJudgment:
    score: int
    reasoning: str
    missing_information: str = ""
    suggestions: str = ""


def template_body(name: str) -> str:
    if name not in TEMPLATE_PLACEHOLDERS:
        raise UnknownTemplateError(f"unknown template: {name!r}")
    text = resources.files("kbforge").joinpath(f"templates/{name}.txt").read_text("utf-8")
    return text.removesuffix("\n")


def all_template_bodies() -> dict[str, str]:
    return {name: template_body(name) for name in TEMPLATE_NAMES}


def render(name: str, values: dict) -> str:
    """Fill a template's placeholder slots with the given values.

    Missing required placeholders raise; unused extra keys are logged and
    ignored. Values are inserted verbatim in a single pass, so a value that
    happens to contain ``{other_slot}`` text is never re-substituted.
    """
    body = template_body(name)
    required = TEMPLATE_PLACEHOLDERS[name]
    missing = sorted(required - set(values))
    if missing:
        raise MissingPlaceholderError(f"template {name!r} missing placeholder(s): {', '.join(missing)}")
    extra = sorted(set(values) - required)
    if extra:
        logger.warning("template %r ignoring extra placeholder(s): %s", name, ", ".join(extra))
    return _PLACEHOLDER_RE.sub(
        lambda m: str(values[m.group(1)]) if m.group(1) in required else m.group(0),
        body,
    )


def extract_json_block(text: str) -> str:
    """Return the first balanced ``{...}`` region, ignoring code fences.

    Brace balance is tracked outside JSON string literals so braces inside
    quoted values do not confuse the scan.
    """
    cleaned = _FENCE_RE.sub("", text)
    start = cleaned.find("{")
    while start != -1:
        depth = 0
        in_string = False
        escaped = False
        for i in range(start, len(cleaned)):
            ch = cleaned[i]
            if in_string:
                if escaped:
                    escaped = False
                elif ch == "\\":
                    escaped = True
                elif ch == '"':
                    in_string = False
                continue
            if ch == '"':
                in_string = True
            elif ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    return cleaned[start : i + 1]
        start = cleaned.find("{", start + 1)
    raise ParseError("no balanced JSON object found in response")


def _load_payload(text: str) -> dict:
    block = extract_json_block(text)
    try:
        payload = json.loads(block)
    except json.JSONDecodeError as exc:
        raise ParseError(f"extracted block is not valid JSON: {exc.msg}") from exc
    if not isinstance(payload, dict):
        raise ParseError("top-level JSON value is not an object")
    return payload


def normalize_name(text: str) -> str:
    """Lowercase, strip punctuation, and collapse whitespace for matching."""
    lowered = re.sub(r"[^0-9a-z\s]+", " ", text.lower())
    return re.sub(r"\s+", " ", lowered).strip()


def _soft_check_category(name: str, description: str) -> None:
    if len(name.split()) > SOFT_MAX_NAME_WORDS:
        logger.warning("category name exceeds %d words: %r", SOFT_MAX_NAME_WORDS, name[:60])
    if len(description.split()) > SOFT_MAX_DESCRIPTION_WORDS:
        logger.warning(
            "category description exceeds %d words for %r", SOFT_MAX_DESCRIPTION_WORDS, name[:60]
        )


def _parse_category_payload(text: str, primary_key: str, max_patterns: int) -> ParsedCategories:
    payload = _load_payload(text)
    items = payload.get(primary_key)
    if items is None:
        fallback = "categories" if primary_key == "subcategories" else "subcategories"
        items = payload.get(fallback)
        if items is not None:
            logger.warning("expected key %r, parsing %r instead", primary_key, fallback)
    if not isinstance(items, list):
        raise ParseError(f"payload has no {primary_key!r} array")

    categories = []
    for item in items:
        if not isinstance(item, dict):
            logger.warning("skipping non-object category entry")
            continue
        name = item.get("name")
        if not isinstance(name, str) or not name.strip():
            logger.warning("skipping category with missing or empty name")
            continue
        name = name.strip()
        description = item.get("description")
        description = description.strip() if isinstance(description, str) else ""
        raw_patterns = item.get("identifying_patterns")
        patterns: list[str] = []
        if isinstance(raw_patterns, list):
            for p in raw_patterns:
                if isinstance(p, str) and p.strip() and p.strip() not in patterns:
                    patterns.append(p.strip())
        if len(patterns) > max_patterns:
            logger.warning(
                "clipping identifying_patterns for %r from %d to %d",
                name[:60],
                len(patterns),
                max_patterns,
            )
            patterns = patterns[:max_patterns]
        parent = item.get("parent_category")
        parent = parent.strip() if isinstance(parent, str) and parent.strip() else None
        _soft_check_category(name, description)
        categories.append(
            ParsedCategory(
                name=name,
                description=description,
                identifying_patterns=tuple(patterns),
                parent_name=parent,
            )
        )

    summary = payload.get("merge_summary")
    summary = summary.strip() if isinstance(summary, str) and summary.strip() else None
    return ParsedCategories(categories=tuple(categories), merge_summary=summary)


def _parse_assignments(text: str) -> ParsedAssignments:
    payload = _load_payload(text)
    items = payload.get("assignments")
    if not isinstance(items, list):
        raise ParseError("payload has no 'assignments' array")
    assignments = []
    for item in items:
        if not isinstance(item, dict):
            logger.warning("skipping non-object assignment entry")
            continue
        name = None
        for key in ("category", "subcategory", "category_name"):
            value = item.get(key)
            if isinstance(value, str) and value.strip():
                name = value.strip()
                break
        if name is None:
            logger.warning("skipping assignment with no category name")
            continue
        reasoning = item.get("reasoning")
        reasoning = reasoning.strip() if isinstance(reasoning, str) else ""
        assignments.append(ParsedAssignment(category_name=name, reasoning=reasoning))
    if len(assignments) > MAX_ASSIGNMENTS_PER_TICKET:
        logger.warning(
            "truncating %d assignments to %d", len(assignments), MAX_ASSIGNMENTS_PER_TICKET
        )
        assignments = assignments[:MAX_ASSIGNMENTS_PER_TICKET]
    return ParsedAssignments(assignments=tuple(assignments))


def _section(text: str, label: str) -> str:
    match = re.search(
        rf"{label}\s*:\s*(.*?)(?=\n\s*[0-9]+\s*\.|\Z)", text, re.IGNORECASE | re.DOTALL
    )
    return match.group(1).strip() if match else ""


def _parse_judgment(text: str) -> ParsedJudgment:
    match = _SCORE_RE.search(text)
    if not match:
        raise ParseError("no 'Helpfulness Score' line found in judgment")
    raw = float(match.group(1))
    if raw != int(raw):
        raise ParseError(f"helpfulness score is not an integer: {raw}")
    score = int(raw)
    if not 1 <= score <= 5:
        raise ParseError(f"helpfulness score out of range 1..5: {score}")
    return ParsedJudgment(
        score=score,
        reasoning=_section(text, "Reasoning"),
        missing_information=_section(text, "Missing Information"),
        suggestions=_section(text, "Improvement Suggestions"),
    )


def parse_structured(kind: str, text: str):
    """Parse a model response into one of the structured result shapes.

    ``kind`` selects the expected payload: ``categories`` and
    ``subcategories`` return :class:`ParsedCategories` (pattern lists clipped
    to 15 and 10 entries respectively), ``assignments`` returns at most two
    :class:`ParsedAssignment` rows, and ``judgment`` pulls the integer score
    plus prose sections from the numbered evaluation format.
    """
    if kind == "categories":
        return _parse_category_payload(text, "categories", MAX_PATTERNS_PER_CATEGORY)
    if kind == "subcategories":
        return _parse_category_payload(text, "subcategories", MAX_PATTERNS_PER_SUBCATEGORY)
    if kind == "assignments":
        return _parse_assignments(text)
    if kind == "judgment":
        return _parse_judgment(text)
    raise PromptError(f"unknown parse kind: {kind!r}")


def complete_structured(gateway: Gateway, request: ChatRequest, kind: str):
    """Call the model and parse, retrying once with a repair instruction."""
    response = gateway.complete(request)
    try:
        return parse_structured(kind, response.text)
    except ParseError as first_error:
        logger.warning("parse failed (%s); retrying with repair instruction", first_error)
        repaired = replace(request, user_text=f"{request.user_text}\n\n{REPAIR_SUFFIX}")
        retry = gateway.complete(repaired)
        try:
            return parse_structured(kind, retry.text)
        except ParseError as exc:
            raise ParseError(f"unparseable after repair retry: {exc}") from exc
