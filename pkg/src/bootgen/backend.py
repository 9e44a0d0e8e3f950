"""Generative backend abstraction: a learnable toy model and a wire client.

Both implementations satisfy the same small interface (`generate`,
`finetune`, `version`), so the engine runs unchanged against either. The toy
backend is fully deterministic: its output is a pure function of (state
version, request), which makes whole training runs reproducible byte for
byte.

Toy generation policy, per sample:
  * search-decision requests answer from memory when trained, otherwise a
    seeded coin flip between the two decision tokens;
  * other requests copy a salient span from the prompt with probability
    ``copy_bias``, otherwise sample from the memory table by
    prompt-signature nearest neighbor with temperature softmax, falling back
    to copying on a memory miss.

"Salient" is control-dependent: query and entity requests keep the content
tokens of the latest user turn, knowledge requests pick the document
sentence that best matches it, and response requests treat guided items as
answer candidates: tokens agreeing across several items win, then items
fully grounded in the generated knowledge, then a plain window copy. Guided
items also leak directly into query and knowledge copies with small
probability, reproducing the prompt-echo pathology at desk scale (that is
what ``copy_bias`` exists to exercise).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Protocol

import requests

from . import prompts
from .metrics import tokenize
from .rng import substream

#: Function words ignored when extracting salient spans from user turns.
STOPWORDS = frozenset(
    """a an the is are was were who whom whose what when where which why how
    tell me do does did you your know can could would should please i we they
    it its this that about say says said""".split()
)

#: Function words stripped from the edges of an extracted answer span.
EDGE_TRIM = STOPWORDS | frozenset(
    "by in at on of and to for from with into over under".split()
)

GREEDY_TEMPERATURE = 1e-6


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    control: str | None = None
    n: int = 1
    temperature: float = 1.0
    top_p: float = 0.9
    max_tokens: int = 32
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")


@dataclass(frozen=True)
class GenerationResult:
    texts: list[str]


@dataclass(frozen=True)
class TrainingPair:
    input: str
    target: str

    def __post_init__(self) -> None:
        if not self.target.strip():
            raise ValueError("training target must be nonempty")


class Backend(Protocol):
    @property
    def version(self) -> str: ...

    def generate(self, req: GenerationRequest) -> GenerationResult: ...

    def finetune(self, pairs: list[TrainingPair], lr: float) -> str: ...


class BackendError(RuntimeError):
    """Backend unavailable or returned a malformed reply."""


@dataclass
class ToyPolicy:
    """Knobs of the toy generation policy (defaults tuned for desk runs)."""

    guided_pick_query: float = 0.8
    guided_pick_knowledge: float = 0.15
    grounded_pick: float = 0.5
    window_min: int = 8
    window_max: int = 12
    short_guess: float = 0.05
    query_max_tokens: int = 6
    entity_max_tokens: int = 6
    consensus_max_tokens: int = 8
    nn_min_overlap: float = 0.34
    sentence_jitter: float = 2.0
    search_prior: float = 0.5


_RESPONSE_KEY = "__response__"


class ToyBackend:
    """Deterministic, finetunable memory-table model.

    The memory maps (control token, signature of the latest user turn) to
    weighted response candidates; finetuning adds an lr-sized increment to
    the trained target's weight, so its sampling probability strictly rises.
    """

    def __init__(
        self,
        seed: int = 0,
        copy_bias: float = 0.5,
        policy: ToyPolicy | None = None,
    ) -> None:
        if not 0.0 <= copy_bias <= 1.0:
            raise ValueError("copy_bias must be in [0, 1]")
        self.seed = seed
        self.copy_bias = copy_bias
        self.policy = policy or ToyPolicy()
        self._version = 0
        # memory[control_key][signature tuple] -> {target: weight > 0}
        self._memory: dict[str, dict[tuple[str, ...], dict[str, float]]] = {}
        # token -> signatures containing it, per control (nearest-neighbor index)
        self._sig_index: dict[str, dict[str, set[tuple[str, ...]]]] = {}

    # --- interface ----------------------------------------------------------

    @property
    def version(self) -> str:
        return str(self._version)

    def generate(self, req: GenerationRequest) -> GenerationResult:
        parsed = prompts.parse_prompt(req.prompt)
        texts = []
        for i in range(req.n):
            rng = substream(
                "toy-gen", self.seed, self._version, req.seed, i,
                req.prompt, req.control, req.n, req.temperature, req.top_p,
            )
            text = self._generate_one(req, parsed, rng)
            tokens = text.split()
            if len(tokens) > req.max_tokens:
                text = " ".join(tokens[: req.max_tokens])
            texts.append(text)
        return GenerationResult(texts)

    def finetune(self, pairs: list[TrainingPair], lr: float) -> str:
        if not pairs:
            raise ValueError("finetune requires at least one training pair")
        if lr <= 0:
            raise ValueError("learning rate must be > 0")
        for pair in pairs:
            control_key, signature = self._input_key(pair.input)
            table = self._memory.setdefault(control_key, {})
            candidates = table.setdefault(signature, {})
            candidates[pair.target] = candidates.get(pair.target, 0.0) + lr
            index = self._sig_index.setdefault(control_key, {})
            for token in signature:
                index.setdefault(token, set()).add(signature)
        self._version += 1
        return self.version

    # --- probability probe (tests and analyses) ------------------------------

    def response_probability(self, input_text: str, target: str) -> float:
        """Sampling probability of ``target`` for this input at temperature 1."""
        control_key, signature = self._input_key(input_text)
        candidates = self._lookup(control_key, signature)
        if not candidates:
            return 0.0
        probs = _softmax(candidates, temperature=1.0)
        return probs.get(target, 0.0)

    # --- persistence ----------------------------------------------------------

    def state_dict(self) -> dict:
        memory = []
        for control_key in sorted(self._memory):
            for signature in sorted(self._memory[control_key]):
                candidates = self._memory[control_key][signature]
                memory.append(
                    {
                        "control": control_key,
                        "signature": list(signature),
                        "candidates": {t: candidates[t] for t in sorted(candidates)},
                    }
                )
        return {
            "seed": self.seed,
            "copy_bias": self.copy_bias,
            "version": self._version,
            "policy": asdict(self.policy),
            "memory": memory,
        }

    def save(self, path: str | Path) -> None:
        from .retrieval import atomic_write_lines

        atomic_write_lines(path, [json.dumps(self.state_dict(), sort_keys=True)])

    @classmethod
    def load(cls, path: str | Path) -> "ToyBackend":
        with open(path, encoding="utf-8") as handle:
            state = json.loads(handle.read())
        backend = cls(
            seed=state["seed"],
            copy_bias=state["copy_bias"],
            policy=ToyPolicy(**state["policy"]),
        )
        backend._version = state["version"]
        for entry in state["memory"]:
            signature = tuple(entry["signature"])
            table = backend._memory.setdefault(entry["control"], {})
            table[signature] = dict(entry["candidates"])
            index = backend._sig_index.setdefault(entry["control"], {})
            for token in signature:
                index.setdefault(token, set()).add(signature)
        return backend

    # --- internals -------------------------------------------------------------

    def _input_key(self, input_text: str) -> tuple[str, tuple[str, ...]]:
        parsed = prompts.parse_prompt(input_text)
        return self._key(parsed.control, parsed)

    def _key(
        self, control: str | None, parsed: prompts.ParsedPrompt
    ) -> tuple[str, tuple[str, ...]]:
        control_key = control or _RESPONSE_KEY
        source = parsed.last_user_turn
        if not source:
            # No dialogue structure: sign the whole prompt.
            source = parsed_text_fallback(parsed)
        return control_key, tuple(sorted(set(tokenize(source))))

    def _lookup(
        self, control_key: str, signature: tuple[str, ...]
    ) -> dict[str, float] | None:
        table = self._memory.get(control_key)
        if not table:
            return None
        exact = table.get(signature)
        if exact:
            return exact
        index = self._sig_index.get(control_key, {})
        candidates: set[tuple[str, ...]] = set()
        for token in signature:
            candidates.update(index.get(token, ()))
        best_key = None
        best_score = 0.0
        sig_set = set(signature)
        for key in sorted(candidates):
            key_set = set(key)
            union = len(sig_set | key_set)
            if union == 0:
                continue
            score = len(sig_set & key_set) / union
            if score > best_score:
                best_score, best_key = score, key
        if best_key is not None and best_score >= self.policy.nn_min_overlap:
            return table[best_key]
        return None

    def _generate_one(
        self,
        req: GenerationRequest,
        parsed: prompts.ParsedPrompt,
        rng,
    ) -> str:
        control_key, signature = self._key(req.control, parsed)
        if req.control == prompts.IS_SEARCH_REQUIRED:
            candidates = self._lookup(control_key, signature)
            if candidates:
                return _sample(candidates, req, rng)
            if rng.random() < self.policy.search_prior:
                return prompts.DO_SEARCH
            return prompts.DO_NOT_SEARCH
        if rng.random() < self.copy_bias:
            return self._copy(req.control, parsed, rng)
        candidates = self._lookup(control_key, signature)
        if candidates:
            return _sample(candidates, req, rng)
        return self._copy(req.control, parsed, rng)

    def _copy(self, control: str | None, parsed: prompts.ParsedPrompt, rng) -> str:
        if control == prompts.GENERATE_QUERY:
            return self._copy_query(parsed, rng)
        if control == prompts.GENERATE_KNOWLEDGE:
            return self._copy_knowledge(parsed, rng)
        if control == prompts.GENERATE_ENTITY_KNOWLEDGE:
            return self._salient_user_span(parsed, self.policy.entity_max_tokens)
        if control == prompts.GENERATE_MEMORY_KNOWLEDGE:
            return self._copy_memory_line(parsed, rng)
        return self._copy_response(parsed, rng)

    def _salient_user_span(self, parsed: prompts.ParsedPrompt, cap: int) -> str:
        tokens = tokenize(parsed.last_user_turn)
        content = [t for t in tokens if t not in STOPWORDS]
        if not content:
            content = tokens
        return " ".join(content[:cap]) if content else ""

    def _copy_query(self, parsed: prompts.ParsedPrompt, rng) -> str:
        if parsed.guided_items and rng.random() < self.policy.guided_pick_query:
            line = rng.choice(parsed.guided_items)
            tokens = tokenize(line)
            if len(tokens) <= self.policy.query_max_tokens:
                return " ".join(tokens)
            start = rng.randrange(len(tokens) - self.policy.query_max_tokens + 1)
            return " ".join(tokens[start : start + self.policy.query_max_tokens])
        span = self._salient_user_span(parsed, self.policy.query_max_tokens)
        return span or "search"

    def _copy_knowledge(self, parsed: prompts.ParsedPrompt, rng) -> str:
        if parsed.guided_items and rng.random() < self.policy.guided_pick_knowledge:
            return rng.choice(parsed.guided_items)
        sentences = []
        for doc in parsed.documents:
            sentences.extend(_split_sentences(doc))
        if sentences:
            reference = set(tokenize(parsed.last_user_turn))
            best, best_score = None, -1.0
            for sentence in sentences:
                overlap = len(reference & set(tokenize(sentence)))
                score = overlap + rng.random() * self.policy.sentence_jitter
                if score > best_score:
                    best, best_score = sentence, score
            return best or ""
        return self._window_span(tokenize(parsed.last_user_turn), rng)

    def _copy_memory_line(self, parsed: prompts.ParsedPrompt, rng) -> str:
        if not parsed.persona:
            return ""
        reference = set(tokenize(parsed.last_user_turn))
        best, best_score = parsed.persona[0], -1.0
        for line in parsed.persona:
            score = len(reference & set(tokenize(line))) + rng.random()
            if score > best_score:
                best, best_score = line, score
        return best

    def _copy_response(self, parsed: prompts.ParsedPrompt, rng) -> str:
        if parsed.guided_items:
            agreed = self._consensus(parsed)
            if agreed:
                return agreed
            if rng.random() < self.policy.grounded_pick:
                grounded = self._grounded_run(parsed)
                if grounded:
                    return grounded
        source = tokenize(parsed.knowledge[0]) if parsed.knowledge else None
        if not source:
            source = tokenize(parsed.last_user_turn)
        return self._window_span(source, rng, allow_short=True)

    def _consensus(self, parsed: prompts.ParsedPrompt) -> str:
        """Core the guided items agree on, beyond what the context already says.

        Takes the longest run of cross-item tokens in the most recent item
        carrying any, then strips function words off its edges.
        """
        token_lines: list[list[str]] = [tokenize(item) for item in parsed.guided_items]
        counts: dict[str, int] = {}
        for line in token_lines:
            for token in set(line):
                counts[token] = counts.get(token, 0) + 1
        context = parsed.context_tokens()
        agreed = {t for t, c in counts.items() if c >= 2 and t not in context}
        if not agreed:
            return ""
        for line in reversed(token_lines):
            if not agreed & set(line):
                continue
            runs: list[list[str]] = []
            current: list[str] = []
            for token in line:
                if token in agreed:
                    current.append(token)
                elif current:
                    runs.append(current)
                    current = []
            if current:
                runs.append(current)
            best = max(runs, key=len)
            trimmed = _trim_edges(best)
            text = trimmed or best
            return " ".join(text[: self.policy.consensus_max_tokens])
        return ""

    def _grounded_run(self, parsed: prompts.ParsedPrompt) -> str:
        """Tightest guided-item span that the generated knowledge vouches for.

        Per item: keep tokens present in the knowledge fields but absent
        from the context, take the longest run, trim function-word edges;
        the shortest such span across items wins.
        """
        pool: set[str] = set()
        for line in parsed.knowledge:
            pool.update(tokenize(line))
        if not pool:
            return ""
        context = parsed.context_tokens()
        spans: list[str] = []
        for item in parsed.guided_items:
            line = tokenize(item)
            runs: list[list[str]] = []
            current: list[str] = []
            for token in line:
                if token in pool and token not in context:
                    current.append(token)
                elif current:
                    runs.append(current)
                    current = []
            if current:
                runs.append(current)
            if not runs:
                continue
            trimmed = _trim_edges(max(runs, key=len))
            if trimmed:
                spans.append(" ".join(trimmed))
        if not spans:
            return ""
        spans.sort(key=lambda s: (len(s.split()), s))
        return spans[0]

    def _window_span(self, tokens: list[str], rng, allow_short: bool = False) -> str:
        if not tokens:
            return ""
        if allow_short and rng.random() < self.policy.short_guess:
            width = rng.randint(2, 3)
        else:
            width = rng.randint(self.policy.window_min, self.policy.window_max)
        width = min(width, len(tokens))
        start = rng.randrange(len(tokens) - width + 1)
        return " ".join(tokens[start : start + width])


def _trim_edges(tokens: list[str]) -> list[str]:
    start, end = 0, len(tokens)
    while start < end and tokens[start] in EDGE_TRIM:
        start += 1
    while end > start and tokens[end - 1] in EDGE_TRIM:
        end -= 1
    return tokens[start:end]


def parsed_text_fallback(parsed: prompts.ParsedPrompt) -> str:
    parts = [text for _, text in parsed.turns]
    parts.extend(parsed.knowledge)
    parts.extend(parsed.documents)
    parts.extend(parsed.persona)
    return " ".join(parts)


def _split_sentences(text: str) -> list[str]:
    out = []
    for chunk in text.split("."):
        chunk = chunk.strip()
        if chunk:
            out.append(chunk)
    return out


def _softmax(candidates: dict[str, float], temperature: float) -> dict[str, float]:
    peak = max(candidates.values())
    raw = {t: math.exp((w - peak) / temperature) for t, w in candidates.items()}
    total = sum(raw.values())
    return {t: v / total for t, v in raw.items()}


def _sample(candidates: dict[str, float], req: GenerationRequest, rng) -> str:
    if req.temperature <= GREEDY_TEMPERATURE:
        # Greedy: highest weight, ascending-lexicographic tie-break.
        return min(candidates, key=lambda t: (-candidates[t], t))
    probs = _softmax(candidates, req.temperature)
    ordered = sorted(probs.items(), key=lambda item: (-item[1], item[0]))
    kept: list[tuple[str, float]] = []
    cumulative = 0.0
    for target, prob in ordered:
        kept.append((target, prob))
        cumulative += prob
        if cumulative >= req.top_p:
            break
    total = sum(p for _, p in kept)
    draw = rng.random() * total
    running = 0.0
    for target, prob in kept:
        running += prob
        if draw <= running:
            return target
    return kept[-1][0]


def toy_backend_new(seed: int = 0, copy_bias: float = 0.5, **policy_overrides) -> ToyBackend:
    """Fresh toy backend with optional policy overrides by field name."""
    policy = ToyPolicy(**policy_overrides) if policy_overrides else None
    return ToyBackend(seed=seed, copy_bias=copy_bias, policy=policy)


class WireBackend:
    """HTTP client for the generation wire protocol.

    Works with any requests-compatible session (including in-process test
    clients). Retries transient transport failures up to ``retries`` times
    with a short linear backoff.
    """

    def __init__(
        self,
        base_url: str,
        session=None,
        timeout: float = 30.0,
        retries: int = 2,
    ) -> None:
        self.base_url = base_url.rstrip("/")
        self.session = session if session is not None else requests.Session()
        self.timeout = timeout
        self.retries = retries

    def _request(self, method: str, path: str, payload: dict | None = None):
        url = self.base_url + path
        last_error: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                if method == "GET":
                    response = self.session.get(url, timeout=self.timeout)
                else:
                    response = self.session.post(url, json=payload, timeout=self.timeout)
            except Exception as exc:  # transport-level failure
                last_error = exc
                time.sleep(0.05 * (attempt + 1))
                continue
            if response.status_code != 200:
                raise BackendError(
                    f"{method} {path} -> {response.status_code}: {response.text[:200]}"
                )
            try:
                return response.json()
            except ValueError as exc:
                raise BackendError(f"{method} {path}: non-JSON reply") from exc
        raise BackendError(f"{method} {path}: {last_error}") from last_error

    @property
    def version(self) -> str:
        return str(self._request("GET", "/health")["version"])

    def generate(self, req: GenerationRequest) -> GenerationResult:
        body = asdict(req)
        data = self._request("POST", "/generate", body)
        texts = data.get("texts")
        if not isinstance(texts, list) or len(texts) != req.n:
            raise BackendError(f"/generate returned {len(texts or [])} texts, wanted {req.n}")
        return GenerationResult([str(t) for t in texts])

    def finetune(self, pairs: list[TrainingPair], lr: float) -> str:
        body = {"pairs": [asdict(p) for p in pairs], "lr": lr}
        data = self._request("POST", "/finetune", body)
        return str(data["version"])
