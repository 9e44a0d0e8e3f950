"""Similarity-gated bootstrapping with guided-prompt retry.

One bootstrap instance: run inference, sample K responses, keep the best
against the ground truth; if the gate fails, append the failure to the
example's response set, rebuild the guided prompt from recent failures plus
the ground truth, and retry once with the guidance in the prompt. Records
that pass the gate store only (context, intermediate steps, response); the
guided prompt text is never part of any training input.

Every ablation arm is a config choice: `guidance` picks the retry flavor
(full history + ground truth, history only, ground truth only, or no retry),
`history_source` can swap in random gold responses, and `selection` can
invert the best-of-K choice.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from . import prompts
from .backend import BackendError, TrainingPair
from .dataset import Example
from .metrics import DEFAULT_METRIC, similarity
from .pipeline import (
    DO_SEARCH,
    EmptyGenerationError,
    InferencePipeline,
    IntermediateSteps,
)
from .retrieval import Document, atomic_write_lines
from .rng import stable_int, substream

GUIDANCE_MODES = ("guided", "guided_nogt", "gt_only", "no_retry")

ACCEPTED = "accepted"
ACCEPTED_VIA_GUIDANCE = "accepted_via_guidance"
REJECTED = "rejected"
ABORTED = "aborted"


@dataclass
class ResponseSet:
    """Recent unmatched responses for one example, oldest first, capped at H."""

    example_id: str
    ground_truth: str
    unmatched: list[str] = field(default_factory=list)

    def append(self, response: str, cap: int) -> None:
        self.unmatched.append(response)
        while len(self.unmatched) > cap:
            self.unmatched.pop(0)

    def to_dict(self) -> dict:
        return {
            "example_id": self.example_id,
            "ground_truth": self.ground_truth,
            "unmatched": list(self.unmatched),
        }


class ResponseSetStore:
    """All response sets of a run, persisted as JSON-lines keyed by example id."""

    def __init__(self) -> None:
        self._sets: dict[str, ResponseSet] = {}

    def get_or_create(self, example: Example) -> ResponseSet:
        rs = self._sets.get(example.id)
        if rs is None:
            rs = ResponseSet(example_id=example.id, ground_truth=example.target)
            self._sets[example.id] = rs
        return rs

    def __len__(self) -> int:
        return len(self._sets)

    def values(self):
        return self._sets.values()

    def save(self, path: str | Path) -> None:
        lines = [
            json.dumps(self._sets[key].to_dict())
            for key in sorted(self._sets)
        ]
        atomic_write_lines(path, lines)

    @classmethod
    def load(cls, path: str | Path) -> "ResponseSetStore":
        store = cls()
        with open(path, encoding="utf-8") as handle:
            for line in handle:
                if not line.strip():
                    continue
                raw = json.loads(line)
                store._sets[raw["example_id"]] = ResponseSet(
                    example_id=raw["example_id"],
                    ground_truth=raw["ground_truth"],
                    unmatched=list(raw["unmatched"]),
                )
        return store


@dataclass(frozen=True)
class GuidedPrompt:
    """Shuffled guidance items plus their rendered block."""

    items: tuple[str, ...]
    rendering: str
    fmt: str = "alpha_list"


def build_guided_prompt(
    rs: ResponseSet,
    seed: int,
    fmt: str = "alpha_list",
    include_ground_truth: bool = True,
    history: list[str] | None = None,
) -> GuidedPrompt:
    """Assemble and shuffle the guidance items; deterministic under ``seed``.

    ``history`` overrides the response-set contents (used by the
    random-responses ablation); the ground truth is included at most once.
    """
    items = list(rs.unmatched if history is None else history)
    if include_ground_truth and rs.ground_truth not in items:
        items.append(rs.ground_truth)
    if not items:
        raise ValueError("guided prompt needs at least one item")
    substream("guided-shuffle", seed).shuffle(items)
    return GuidedPrompt(tuple(items), prompts.render_guided_block(items, fmt), fmt)


def match_gate(y: str, y_ref: str, b: float, metric: str = DEFAULT_METRIC) -> bool:
    """True iff similarity strictly exceeds the threshold."""
    if not 0.0 <= b <= 1.0:
        raise ValueError("threshold must be in [0, 1]")
    return similarity(y, y_ref, metric) > b


def select_best_of_k(
    candidates: list[str],
    y_ref: str,
    metric: str = DEFAULT_METRIC,
    objective: str = "best",
) -> tuple[str, float, int]:
    """Candidate with the highest (or, for 'worst', lowest) similarity.

    Ties break toward the lowest candidate index.
    """
    if not candidates:
        raise ValueError("candidate list is empty")
    if objective not in ("best", "worst"):
        raise ValueError(f"unknown selection objective: {objective!r}")
    scores = [similarity(c, y_ref, metric) for c in candidates]
    pick = max if objective == "best" else min
    best_index = pick(range(len(candidates)), key=lambda i: (scores[i], -i))
    return candidates[best_index], scores[best_index], best_index


@dataclass
class BootstrapRecord:
    example_id: str
    iteration: int
    steps: IntermediateSteps
    response: str
    similarity: float
    via_guided: bool

    def to_dict(self) -> dict:
        return {
            "example_id": self.example_id,
            "iteration": self.iteration,
            "steps": self.steps.to_dict(),
            "response": self.response,
            "similarity": self.similarity,
            "via_guided": self.via_guided,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "BootstrapRecord":
        return cls(
            example_id=raw["example_id"],
            iteration=raw["iteration"],
            steps=IntermediateSteps.from_dict(raw["steps"]),
            response=raw["response"],
            similarity=raw["similarity"],
            via_guided=raw["via_guided"],
        )


@dataclass
class RunConfig:
    """All knobs of the self-improving loop."""

    seed: int = 0
    k: int = 5
    h: int = 4
    n0: int = 200
    growth: float = 0.1
    lr: float = 0.5
    metric: str = DEFAULT_METRIC
    default_threshold: float = 0.4
    task_thresholds: dict[str, float] = field(default_factory=dict)
    guidance: str = "guided"
    history_source: str = "own"
    selection: str = "best"
    retry_regenerates_steps: bool = True
    retry_samples: int = 1
    prompt_format: str = "alpha_list"
    attempt_budget_factor: int = 20
    batch_size: int = 16

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.h < 0:
            raise ValueError("h must be >= 0")
        if self.n0 < 1:
            raise ValueError("n0 must be >= 1")
        if self.growth < 0:
            raise ValueError("growth must be >= 0")
        if self.guidance not in GUIDANCE_MODES:
            raise ValueError(f"unknown guidance mode: {self.guidance!r}")
        if self.history_source not in ("own", "random_gold"):
            raise ValueError(f"unknown history source: {self.history_source!r}")
        if self.selection not in ("best", "worst"):
            raise ValueError(f"unknown selection: {self.selection!r}")
        if self.prompt_format not in prompts.GUIDED_FORMATS:
            raise ValueError(f"unknown prompt format: {self.prompt_format!r}")
        if self.guidance == "guided_nogt" and self.h < 1 and self.history_source == "own":
            raise ValueError("guided_nogt needs h >= 1 to have anything to show")
        for task, value in self.task_thresholds.items():
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"threshold for task {task!r} out of [0, 1]")

    @property
    def retry_enabled(self) -> bool:
        return self.guidance != "no_retry"

    @property
    def include_ground_truth(self) -> bool:
        return self.guidance in ("guided", "gt_only")

    @property
    def include_history(self) -> bool:
        return self.guidance in ("guided", "guided_nogt")

    def threshold_for(self, task: str) -> float:
        return self.task_thresholds.get(task, self.default_threshold)


def schedule_sample_count(t: int, config: RunConfig) -> int:
    """Bootstrap target for iteration ``t``: base size plus linear growth."""
    if t < 0:
        raise ValueError("iteration index must be >= 0")
    return int(round(config.n0 * (1 + config.growth * t)))


@dataclass
class BootstrapOutcome:
    status: str
    record: BootstrapRecord | None = None
    first_similarity: float = 0.0


def _guidance_history(
    config: RunConfig,
    rs: ResponseSet,
    dataset: list[Example],
    example: Example,
    rng,
) -> list[str] | None:
    if not config.include_history:
        return []
    if config.history_source == "random_gold":
        pool = [e.target for e in dataset if e.id != example.id]
        rng.shuffle(pool)
        return pool[: config.h]
    return None  # use the response set's own unmatched responses


def bootstrap_instance(
    pipeline: InferencePipeline,
    example: Example,
    rs: ResponseSet,
    config: RunConfig,
    iteration: int,
    attempt: int,
    dataset: list[Example] | None = None,
) -> BootstrapOutcome:
    """Run one gated bootstrap attempt, retrying once with guidance."""
    threshold = config.threshold_for(example.task)
    salt = ("it", iteration, "at", attempt)
    try:
        trace = pipeline.run_inference(
            example, n_responses=config.k, seed_salt=stable_int(*salt)
        )
        best, score, _ = select_best_of_k(
            trace.candidates, example.target, config.metric, config.selection
        )
        if score > threshold:
            record = BootstrapRecord(
                example.id, iteration, trace.steps, best, score, via_guided=False
            )
            return BootstrapOutcome(ACCEPTED, record, score)

        rs.append(best, config.h)
        if not config.retry_enabled:
            return BootstrapOutcome(REJECTED, first_similarity=score)

        guide_rng = substream(config.seed, "guide", iteration, attempt)
        history = _guidance_history(config, rs, dataset or [], example, guide_rng)
        guided = build_guided_prompt(
            rs,
            seed=stable_int(config.seed, "shuffle", iteration, attempt),
            fmt=config.prompt_format,
            include_ground_truth=config.include_ground_truth,
            history=history,
        )
        retry_salt = stable_int(*salt, "retry")
        if config.retry_regenerates_steps:
            retry_trace = pipeline.run_inference(
                example,
                guided=guided.rendering,
                n_responses=config.retry_samples,
                seed_salt=retry_salt,
            )
            retry_steps = retry_trace.steps
            retry_candidates = retry_trace.candidates
        else:
            retry_steps = trace.steps
            retry_candidates = pipeline.generate_response(
                example,
                trace.steps,
                guided=guided.rendering,
                n=config.retry_samples,
                seed_salt=retry_salt,
            )
        retry_best, retry_score, _ = select_best_of_k(
            retry_candidates, example.target, config.metric, config.selection
        )
        if retry_score > threshold:
            record = BootstrapRecord(
                example.id, iteration, retry_steps, retry_best, retry_score,
                via_guided=True,
            )
            return BootstrapOutcome(ACCEPTED_VIA_GUIDANCE, record, score)
        rs.append(retry_best, config.h)
        return BootstrapOutcome(REJECTED, first_similarity=score)
    except (BackendError, EmptyGenerationError):
        return BootstrapOutcome(ABORTED)


def expand_training_pairs(
    record: BootstrapRecord,
    example: Example,
    documents: dict[str, Document],
    doc_token_budget: int = 120,
) -> list[TrainingPair]:
    """One training pair per generated factor; inputs carry no guidance."""
    steps = record.steps
    pairs = [
        TrainingPair(
            prompts.render_decision_prompt(example.context),
            prompts.DO_SEARCH if steps.search_decision == DO_SEARCH else prompts.DO_NOT_SEARCH,
        )
    ]
    if steps.search_decision == DO_SEARCH:
        pairs.append(
            TrainingPair(prompts.render_query_prompt(example.context), steps.query)
        )
        doc_texts = [
            prompts.truncate_tokens(
                f"{documents[d].title} | {documents[d].body}", doc_token_budget
            )
            for d in (steps.doc_ids or [])
            if d in documents
        ]
        pairs.append(
            TrainingPair(
                prompts.render_knowledge_prompt(example.context, doc_texts),
                steps.search_knowledge,
            )
        )
    if steps.entity_knowledge:
        pairs.append(
            TrainingPair(
                prompts.render_entity_prompt(example.context), steps.entity_knowledge
            )
        )
    if steps.memory_knowledge:
        pairs.append(
            TrainingPair(
                prompts.render_memory_prompt(example.context, list(example.memory)),
                steps.memory_knowledge,
            )
        )
    pairs.append(
        TrainingPair(
            prompts.render_response_prompt(
                example.context,
                search_knowledge=steps.search_knowledge,
                entity_knowledge=steps.entity_knowledge,
                memory_knowledge=steps.memory_knowledge,
            ),
            record.response,
        )
    )
    return pairs


@dataclass
class IterationStats:
    iteration: int
    n_target: int
    attempted: int = 0
    accepted: int = 0
    accepted_via_guidance: int = 0
    rejected: int = 0
    aborted: int = 0
    budget_exhausted: bool = False
    pipeline_counters: dict[str, int] = field(default_factory=dict)

    @property
    def bootstrapping_rate(self) -> float:
        return self.accepted / self.attempted if self.attempted else 0.0

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "n_target": self.n_target,
            "attempted": self.attempted,
            "accepted": self.accepted,
            "accepted_via_guidance": self.accepted_via_guidance,
            "rejected": self.rejected,
            "aborted": self.aborted,
            "budget_exhausted": self.budget_exhausted,
            "bootstrapping_rate": self.bootstrapping_rate,
            "pipeline_counters": dict(sorted(self.pipeline_counters.items())),
        }


def run_iteration(
    pipeline: InferencePipeline,
    dataset: list[Example],
    store: ResponseSetStore,
    config: RunConfig,
    iteration: int,
    out_dir: str | Path,
) -> tuple[Path, str, IterationStats]:
    """One full self-improving iteration: bootstrap, persist, finetune.

    Samples datapoints uniformly with replacement until the iteration's
    record target is met or the attempt budget runs out, then finetunes the
    backend on the expanded per-module training pairs.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    out_dir = Path(out_dir)
    n_target = schedule_sample_count(iteration, config)
    budget = config.attempt_budget_factor * n_target
    sampler = substream(config.seed, "sample", iteration)
    by_id = {e.id: e for e in dataset}
    stats = IterationStats(iteration=iteration, n_target=n_target)
    records: list[BootstrapRecord] = []

    while len(records) < n_target and stats.attempted < budget:
        stats.attempted += 1
        example = dataset[sampler.randrange(len(dataset))]
        rs = store.get_or_create(example)
        outcome = bootstrap_instance(
            pipeline, example, rs, config, iteration, stats.attempted, dataset
        )
        if outcome.status == ACCEPTED:
            stats.accepted += 1
            records.append(outcome.record)
        elif outcome.status == ACCEPTED_VIA_GUIDANCE:
            stats.accepted += 1
            stats.accepted_via_guidance += 1
            records.append(outcome.record)
        elif outcome.status == REJECTED:
            stats.rejected += 1
        else:
            stats.aborted += 1
    stats.budget_exhausted = len(records) < n_target
    stats.pipeline_counters = dict(pipeline.counters)

    bootstrap_path = out_dir / f"bootstrap_iter{iteration:03d}.jsonl"
    atomic_write_lines(bootstrap_path, [json.dumps(r.to_dict()) for r in records])

    pairs: list[TrainingPair] = []
    for record in records:
        pairs.extend(
            expand_training_pairs(
                record,
                by_id[record.example_id],
                pipeline.documents,
                pipeline.doc_token_budget,
            )
        )
    version = pipeline.backend.version
    for start in range(0, len(pairs), config.batch_size):
        version = pipeline.backend.finetune(
            pairs[start : start + config.batch_size], config.lr
        )
    return bootstrap_path, version, stats


def read_bootstrap_file(path: str | Path) -> list[BootstrapRecord]:
    records = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                records.append(BootstrapRecord.from_dict(json.loads(line)))
    return records
