"""Dialogue datapoints and JSON-lines dataset ingestion.

Dataset schema, one object per line:

    {"id": ..., "task": ..., "context": [{"speaker": "user"|"bot", "text": ...}],
     "target": ..., "memory": [...],
     "query_gold": ...,      (optional, module-wise eval fixtures only)
     "knowledge_gold": ...}  (optional)
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

SPEAKERS = ("user", "bot")


@dataclass(frozen=True)
class Example:
    id: str
    task: str
    context: tuple[tuple[str, str], ...]
    target: str
    memory: tuple[str, ...] = ()
    query_gold: str | None = None
    knowledge_gold: str | None = None

    def __post_init__(self) -> None:
        if not self.context:
            raise ValueError(f"example {self.id!r}: context must be nonempty")
        if not self.target.strip():
            raise ValueError(f"example {self.id!r}: target must be nonempty")
        for speaker, _ in self.context:
            if speaker not in SPEAKERS:
                raise ValueError(f"example {self.id!r}: unknown speaker {speaker!r}")

    def to_dict(self) -> dict:
        record = {
            "id": self.id,
            "task": self.task,
            "context": [{"speaker": s, "text": t} for s, t in self.context],
            "target": self.target,
            "memory": list(self.memory),
        }
        if self.query_gold is not None:
            record["query_gold"] = self.query_gold
        if self.knowledge_gold is not None:
            record["knowledge_gold"] = self.knowledge_gold
        return record


def example_from_dict(raw: dict) -> Example:
    return Example(
        id=str(raw["id"]),
        task=str(raw["task"]),
        context=tuple((turn["speaker"], turn["text"]) for turn in raw["context"]),
        target=str(raw["target"]),
        memory=tuple(raw.get("memory") or ()),
        query_gold=raw.get("query_gold"),
        knowledge_gold=raw.get("knowledge_gold"),
    )


def load_dataset(path: str | Path) -> list[Example]:
    """Load and validate a dataset file; duplicate ids are rejected."""
    examples: list[Example] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{line_no}: invalid JSON: {exc}") from exc
            try:
                example = example_from_dict(raw)
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{line_no}: bad example: {exc}") from exc
            if example.id in seen:
                raise ValueError(f"{path}:{line_no}: duplicate example id {example.id!r}")
            seen.add(example.id)
            examples.append(example)
    if not examples:
        raise ValueError(f"{path}: dataset is empty")
    return examples


def save_dataset(examples: list[Example], path: str | Path) -> None:
    from .retrieval import atomic_write_lines

    atomic_write_lines(path, [json.dumps(e.to_dict()) for e in examples])
