"""Prompt grammar: control tokens, line-oriented rendering, and parsing.

Every module prompt is plain text, one element per line:

    persona: <memory line>          (memory-knowledge prompts only)
    user: <turn> / bot: <turn>      (dialogue context, oldest first)
    A. <item>                       (guided block, retry only)
    document: <retrieved text>      (knowledge prompts only)
    knowledge: / entity: / memory:  (generated fields, response prompt only)
    __control-token__               (last line; absent for response prompts)

The guided block sits directly below the context; the response prompt keeps
the fixed field order knowledge, entity, memory so identical inputs always
produce identical prompt bytes.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .metrics import tokenize

IS_SEARCH_REQUIRED = "__is-search-required__"
DO_SEARCH = "__do-search__"
DO_NOT_SEARCH = "__do-not-search__"
GENERATE_QUERY = "__generate-query__"
GENERATE_KNOWLEDGE = "__generate-knowledge__"
GENERATE_ENTITY_KNOWLEDGE = "__generate-entity-knowledge__"
GENERATE_MEMORY_KNOWLEDGE = "__generate-memory-knowledge__"

CONTROL_TOKENS = (
    IS_SEARCH_REQUIRED,
    DO_SEARCH,
    DO_NOT_SEARCH,
    GENERATE_QUERY,
    GENERATE_KNOWLEDGE,
    GENERATE_ENTITY_KNOWLEDGE,
    GENERATE_MEMORY_KNOWLEDGE,
)

GUIDED_FORMATS = ("alpha_list", "bulleted", "answer_choices")
_ANSWER_CHOICES_HEADER = "Answer Choices:"

_ALPHA_ITEM = re.compile(r"^[A-Z]{1,2}\.\s+(.*)$")
_BULLET_ITEM = re.compile(r"^-\s+(.*)$")


def _alpha_label(i: int) -> str:
    """A, B, ..., Z, AA, AB, ... for guided item labels."""
    label = ""
    i += 1
    while i > 0:
        i, rem = divmod(i - 1, 26)
        label = chr(ord("A") + rem) + label
    return label


def render_guided_block(items: list[str], fmt: str = "alpha_list") -> str:
    """Render guided items one per line; no extra prose beyond the chosen format."""
    if fmt == "alpha_list":
        lines = [f"{_alpha_label(i)}. {item}" for i, item in enumerate(items)]
    elif fmt == "bulleted":
        lines = [f"- {item}" for item in items]
    elif fmt == "answer_choices":
        lines = [_ANSWER_CHOICES_HEADER]
        lines += [f"{_alpha_label(i)}. {item}" for i, item in enumerate(items)]
    else:
        raise ValueError(f"unknown guided prompt format: {fmt!r}")
    return "\n".join(lines)


def render_context(turns: list[tuple[str, str]]) -> list[str]:
    return [f"{speaker}: {text}" for speaker, text in turns]


def _assemble(lines: list[str], control: str | None) -> str:
    if control is not None:
        lines = lines + [control]
    return "\n".join(lines)


def render_decision_prompt(turns, guided: str | None = None) -> str:
    lines = render_context(turns)
    if guided:
        lines.append(guided)
    return _assemble(lines, IS_SEARCH_REQUIRED)


def render_query_prompt(turns, guided: str | None = None) -> str:
    lines = render_context(turns)
    if guided:
        lines.append(guided)
    return _assemble(lines, GENERATE_QUERY)


def render_knowledge_prompt(
    turns, documents: list[str], guided: str | None = None
) -> str:
    lines = render_context(turns)
    if guided:
        lines.append(guided)
    lines += [f"document: {doc}" for doc in documents]
    return _assemble(lines, GENERATE_KNOWLEDGE)


def render_entity_prompt(turns, guided: str | None = None) -> str:
    lines = render_context(turns)
    if guided:
        lines.append(guided)
    return _assemble(lines, GENERATE_ENTITY_KNOWLEDGE)


def render_memory_prompt(turns, memory: list[str], guided: str | None = None) -> str:
    lines = [f"persona: {line}" for line in memory]
    lines += render_context(turns)
    if guided:
        lines.append(guided)
    return _assemble(lines, GENERATE_MEMORY_KNOWLEDGE)


def render_response_prompt(
    turns,
    search_knowledge: str | None = None,
    entity_knowledge: str | None = None,
    memory_knowledge: str | None = None,
    guided: str | None = None,
) -> str:
    lines = render_context(turns)
    if search_knowledge:
        lines.append(f"knowledge: {search_knowledge}")
    if entity_knowledge:
        lines.append(f"entity: {entity_knowledge}")
    if memory_knowledge:
        lines.append(f"memory: {memory_knowledge}")
    if guided:
        lines.append(guided)
    return _assemble(lines, None)


def truncate_tokens(text: str, budget: int) -> str:
    """Clip text to at most ``budget`` canonical tokens."""
    tokens = tokenize(text)
    if len(tokens) <= budget:
        return text
    return " ".join(tokens[:budget])


@dataclass
class ParsedPrompt:
    """Structured view of a rendered prompt, as the toy backend sees it."""

    turns: list[tuple[str, str]] = field(default_factory=list)
    persona: list[str] = field(default_factory=list)
    documents: list[str] = field(default_factory=list)
    knowledge: list[str] = field(default_factory=list)
    guided_items: list[str] = field(default_factory=list)
    control: str | None = None

    @property
    def last_user_turn(self) -> str:
        for speaker, text in reversed(self.turns):
            if speaker == "user":
                return text
        return ""

    def context_tokens(self) -> set[str]:
        tokens: set[str] = set()
        for _, text in self.turns:
            tokens.update(tokenize(text))
        return tokens


_PREFIXES = (
    ("user: ", "turn_user"),
    ("bot: ", "turn_bot"),
    ("persona: ", "persona"),
    ("document: ", "document"),
    ("knowledge: ", "knowledge"),
    ("entity: ", "knowledge"),
    ("memory: ", "knowledge"),
)


def parse_prompt(text: str) -> ParsedPrompt:
    parsed = ParsedPrompt()
    for line in text.splitlines():
        line = line.rstrip()
        if not line or line == _ANSWER_CHOICES_HEADER:
            continue
        if line in CONTROL_TOKENS:
            parsed.control = line
            continue
        matched = False
        for prefix, kind in _PREFIXES:
            if line.startswith(prefix):
                payload = line[len(prefix) :]
                if kind == "turn_user":
                    parsed.turns.append(("user", payload))
                elif kind == "turn_bot":
                    parsed.turns.append(("bot", payload))
                elif kind == "persona":
                    parsed.persona.append(payload)
                elif kind == "document":
                    parsed.documents.append(payload)
                else:
                    parsed.knowledge.append(payload)
                matched = True
                break
        if matched:
            continue
        item = _ALPHA_ITEM.match(line) or _BULLET_ITEM.match(line)
        if item:
            parsed.guided_items.append(item.group(1))
    return parsed
