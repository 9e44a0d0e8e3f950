"""Modular inference graph: search decision, query, knowledge, response.

Execution order per instance is decide_search -> (query -> retrieve ->
search knowledge) -> entity knowledge -> memory knowledge -> response; each
step conditions only on the context and earlier steps, so instances may run
concurrently while a single instance stays sequential.

End-to-end mode never reads gold intermediate labels; module-wise mode
feeds each module the gold upstream fields so modules can be scored in
isolation.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from . import prompts
from .backend import Backend, GenerationRequest
from .dataset import Example
from .retrieval import Bm25Index, Document, retrieve
from .rng import stable_int

DO_SEARCH = "do_search"
DO_NOT_SEARCH = "do_not_search"

END_TO_END = "end_to_end"
MODULE_WISE = "module_wise"


class EmptyGenerationError(RuntimeError):
    """A module that must produce text produced an empty string."""


@dataclass
class IntermediateSteps:
    """Latent bundle for one instance; search fields are all-or-none."""

    search_decision: str = DO_NOT_SEARCH
    query: str | None = None
    doc_ids: list[str] | None = None
    search_knowledge: str | None = None
    entity_knowledge: str | None = None
    memory_knowledge: str | None = None

    def validate(self) -> None:
        searched = self.search_decision == DO_SEARCH
        present = (
            self.query is not None,
            self.doc_ids is not None,
            self.search_knowledge is not None,
        )
        if searched and not all(present):
            raise ValueError("do_search requires query, doc_ids and search_knowledge")
        if not searched and any(present):
            raise ValueError("search fields must be absent without do_search")

    def to_dict(self) -> dict:
        return {
            "search_decision": self.search_decision,
            "query": self.query,
            "doc_ids": self.doc_ids,
            "search_knowledge": self.search_knowledge,
            "entity_knowledge": self.entity_knowledge,
            "memory_knowledge": self.memory_knowledge,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "IntermediateSteps":
        return cls(
            search_decision=raw["search_decision"],
            query=raw.get("query"),
            doc_ids=list(raw["doc_ids"]) if raw.get("doc_ids") is not None else None,
            search_knowledge=raw.get("search_knowledge"),
            entity_knowledge=raw.get("entity_knowledge"),
            memory_knowledge=raw.get("memory_knowledge"),
        )


@dataclass
class InferenceTrace:
    example_id: str
    steps: IntermediateSteps
    response: str
    candidates: list[str]
    prompt_hashes: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "example_id": self.example_id,
            "steps": self.steps.to_dict(),
            "response": self.response,
            "candidates": self.candidates,
            "prompt_hashes": self.prompt_hashes,
        }


@dataclass
class ModuleMask:
    """Per-task enablement of the optional knowledge modules."""

    search: bool = True
    entity: bool = True
    memory: bool = True

    @classmethod
    def from_names(cls, names: list[str]) -> "ModuleMask":
        known = {"search", "entity", "memory"}
        unknown = set(names) - known
        if unknown:
            raise ValueError(f"unknown module names: {sorted(unknown)}")
        return cls(**{name: name in names for name in known})


def _hash_prompt(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


class InferencePipeline:
    """Stateless orchestration of the module graph over one backend."""

    def __init__(
        self,
        backend: Backend,
        index: Bm25Index | None = None,
        documents: dict[str, Document] | None = None,
        mask: ModuleMask | None = None,
        docs_per_query: int = 5,
        doc_token_budget: int = 120,
        temperature: float = 1.0,
        top_p: float = 0.9,
        max_tokens: int = 32,
        seed: int = 0,
    ) -> None:
        self.backend = backend
        self.index = index
        self.documents = documents or {}
        self.mask = mask or ModuleMask()
        self.docs_per_query = docs_per_query
        self.doc_token_budget = doc_token_budget
        self.temperature = temperature
        self.top_p = top_p
        self.max_tokens = max_tokens
        self.seed = seed
        self.counters: dict[str, int] = {}

    def _bump(self, counter: str) -> None:
        self.counters[counter] = self.counters.get(counter, 0) + 1

    def _gen(
        self,
        prompt: str,
        control: str | None,
        seed_parts: tuple,
        n: int = 1,
        temperature: float | None = None,
    ) -> list[str]:
        req = GenerationRequest(
            prompt=prompt,
            control=control,
            n=n,
            temperature=self.temperature if temperature is None else temperature,
            top_p=self.top_p,
            max_tokens=self.max_tokens,
            seed=stable_int(self.seed, *seed_parts),
        )
        return self.backend.generate(req).texts

    # --- modules ----------------------------------------------------------

    def decide_search(
        self, example: Example, guided: str | None = None, seed_salt: object = 0
    ) -> str:
        prompt = prompts.render_decision_prompt(example.context, guided)
        raw = self._gen(
            prompt, prompts.IS_SEARCH_REQUIRED, ("decide", example.id, seed_salt)
        )[0]
        if prompts.DO_NOT_SEARCH in raw:
            return DO_NOT_SEARCH
        if prompts.DO_SEARCH in raw:
            return DO_SEARCH
        self._bump("unparseable_decision")
        return DO_NOT_SEARCH

    def generate_query(
        self, example: Example, guided: str | None = None, seed_salt: object = 0
    ) -> str:
        prompt = prompts.render_query_prompt(example.context, guided)
        raw = self._gen(prompt, prompts.GENERATE_QUERY, ("query", example.id, seed_salt))[0]
        from .metrics import normalize

        query = normalize(raw)
        if not query:
            raise EmptyGenerationError(f"empty query for example {example.id!r}")
        return query

    def generate_search_knowledge(
        self,
        example: Example,
        docs: list[Document],
        guided: str | None = None,
        seed_salt: object = 0,
    ) -> str:
        if not docs:
            raise ValueError("knowledge generation requires retrieved documents")
        doc_texts = [
            prompts.truncate_tokens(f"{d.title} | {d.body}", self.doc_token_budget)
            for d in docs
        ]
        prompt = prompts.render_knowledge_prompt(example.context, doc_texts, guided)
        raw = self._gen(
            prompt, prompts.GENERATE_KNOWLEDGE, ("knowledge", example.id, seed_salt)
        )[0]
        if not raw.strip():
            raise EmptyGenerationError(f"empty knowledge for example {example.id!r}")
        return raw.strip()

    def generate_entity_knowledge(
        self, example: Example, guided: str | None = None, seed_salt: object = 0
    ) -> str | None:
        prompt = prompts.render_entity_prompt(example.context, guided)
        raw = self._gen(
            prompt, prompts.GENERATE_ENTITY_KNOWLEDGE, ("entity", example.id, seed_salt)
        )[0]
        return raw.strip() or None

    def generate_memory_knowledge(
        self, example: Example, guided: str | None = None, seed_salt: object = 0
    ) -> str | None:
        if not example.memory:
            return None
        prompt = prompts.render_memory_prompt(example.context, list(example.memory), guided)
        raw = self._gen(
            prompt, prompts.GENERATE_MEMORY_KNOWLEDGE, ("memory", example.id, seed_salt)
        )[0]
        return raw.strip() or None

    def generate_response(
        self,
        example: Example,
        steps: IntermediateSteps,
        guided: str | None = None,
        n: int = 1,
        seed_salt: object = 0,
        temperature: float | None = None,
    ) -> list[str]:
        steps.validate()
        prompt = self.render_response_prompt(example, steps, guided)
        return self._gen(
            prompt, None, ("response", example.id, seed_salt), n=n, temperature=temperature
        )

    def render_response_prompt(
        self, example: Example, steps: IntermediateSteps, guided: str | None = None
    ) -> str:
        return prompts.render_response_prompt(
            example.context,
            search_knowledge=steps.search_knowledge,
            entity_knowledge=steps.entity_knowledge,
            memory_knowledge=steps.memory_knowledge,
            guided=guided,
        )

    # --- full graph ----------------------------------------------------------

    def run_steps(
        self,
        example: Example,
        guided: str | None = None,
        mode: str = END_TO_END,
        seed_salt: object = 0,
    ) -> tuple[IntermediateSteps, dict[str, str]]:
        """Run all intermediate modules, returning steps and prompt hashes."""
        if mode not in (END_TO_END, MODULE_WISE):
            raise ValueError(f"unknown inference mode: {mode!r}")
        steps = IntermediateSteps()
        hashes: dict[str, str] = {}
        hashes["decision"] = _hash_prompt(
            prompts.render_decision_prompt(example.context, guided)
        )
        decision = (
            self.decide_search(example, guided, seed_salt)
            if self.mask.search
            else DO_NOT_SEARCH
        )
        if decision == DO_SEARCH and self.index is not None:
            query = self.generate_query(example, guided, seed_salt)
            hashes["query"] = _hash_prompt(
                prompts.render_query_prompt(example.context, guided)
            )
            retrieval_query = query
            if mode == MODULE_WISE and example.query_gold:
                retrieval_query = example.query_gold
            result = retrieve(self.index, retrieval_query, self.docs_per_query)
            docs = [self.documents[d] for d in result.doc_ids() if d in self.documents]
            if docs:
                knowledge = self.generate_search_knowledge(example, docs, guided, seed_salt)
                steps.search_decision = DO_SEARCH
                steps.query = query
                steps.doc_ids = result.doc_ids()
                steps.search_knowledge = knowledge
            else:
                # Retrieval found nothing usable: fall back to the no-search path.
                self._bump("retrieval_empty")
        if self.mask.entity:
            steps.entity_knowledge = self.generate_entity_knowledge(example, guided, seed_salt)
            hashes["entity"] = _hash_prompt(
                prompts.render_entity_prompt(example.context, guided)
            )
        if self.mask.memory:
            steps.memory_knowledge = self.generate_memory_knowledge(example, guided, seed_salt)
        steps.validate()
        return steps, hashes

    def run_inference(
        self,
        example: Example,
        mode: str = END_TO_END,
        guided: str | None = None,
        n_responses: int = 1,
        seed_salt: object = 0,
        temperature: float | None = None,
    ) -> InferenceTrace:
        steps, hashes = self.run_steps(example, guided, mode, seed_salt)
        response_steps = steps
        if mode == MODULE_WISE and example.knowledge_gold and steps.search_decision == DO_SEARCH:
            response_steps = IntermediateSteps(**{**steps.to_dict(), "search_knowledge": example.knowledge_gold})
            response_steps.doc_ids = steps.doc_ids
        candidates = self.generate_response(
            example, response_steps, guided, n=n_responses,
            seed_salt=seed_salt, temperature=temperature,
        )
        hashes["response"] = _hash_prompt(
            self.render_response_prompt(example, response_steps, guided)
        )
        return InferenceTrace(
            example_id=example.id,
            steps=steps,
            response=candidates[0],
            candidates=candidates,
            prompt_hashes=hashes,
        )


def write_traces(traces: list[InferenceTrace], path: str | Path) -> None:
    from .retrieval import atomic_write_lines

    atomic_write_lines(path, [json.dumps(t.to_dict()) for t in traces])


def read_traces(path: str | Path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                records.append(json.loads(line))
    return records
