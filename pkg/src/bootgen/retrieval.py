"""BM25 inverted index over a local document corpus.

The index is immutable after build, so concurrent retrieval is safe. Corpus
files are JSON-lines with fields ``doc_id``, ``title``, ``body``; persisted
indexes are JSON-lines with a format header on the first line.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from .metrics import tokenize

K1 = 1.2
B = 0.75

INDEX_FORMAT = "bootgen-bm25"
INDEX_VERSION = 1


@dataclass(frozen=True)
class Document:
    doc_id: str
    title: str
    body: str

    def __post_init__(self) -> None:
        if not self.body.strip():
            raise ValueError(f"document {self.doc_id!r} has an empty body")

    @property
    def text(self) -> str:
        return f"{self.title} {self.body}".strip()


@dataclass(frozen=True)
class RetrievalResult:
    """Ranked (doc_id, score) pairs, scores non-increasing, ties by doc_id."""

    ranked: list[tuple[str, float]]

    def doc_ids(self) -> list[str]:
        return [doc_id for doc_id, _ in self.ranked]

    def __len__(self) -> int:
        return len(self.ranked)


class Bm25Index:
    """Inverted index with BM25 scoring (k1=1.2, b=0.75)."""

    def __init__(
        self,
        postings: dict[str, list[tuple[str, int]]],
        doc_lengths: dict[str, int],
    ) -> None:
        self.postings = postings
        self.doc_lengths = doc_lengths
        self.n_docs = len(doc_lengths)
        self.avgdl = sum(doc_lengths.values()) / self.n_docs
        self._tf = {term: dict(plist) for term, plist in postings.items()}
        for term, by_doc in self._tf.items():
            for doc_id in by_doc:
                if doc_id not in doc_lengths:
                    raise ValueError(f"posting for {term!r} names unknown doc {doc_id!r}")

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        return math.log(1 + (self.n_docs - df + 0.5) / (df + 0.5))

    def score(self, query_terms: list[str], doc_id: str) -> float:
        """BM25 score of one document; unique query terms, sorted for stable sums."""
        doc_len = self.doc_lengths[doc_id]
        norm = K1 * (1 - B + B * doc_len / self.avgdl)
        total = 0.0
        for term in sorted(set(query_terms)):
            tf = self._tf.get(term, {}).get(doc_id, 0)
            if tf == 0:
                continue
            total += self.idf(term) * (tf * (K1 + 1)) / (tf + norm)
        return total


def build_index(corpus: list[Document]) -> Bm25Index:
    """Build the inverted index; deterministic for a given corpus ordering."""
    if not corpus:
        raise ValueError("cannot index an empty corpus")
    doc_lengths: dict[str, int] = {}
    postings: dict[str, list[tuple[str, int]]] = {}
    for doc in corpus:
        if doc.doc_id in doc_lengths:
            raise ValueError(f"duplicate doc_id: {doc.doc_id!r}")
        tokens = tokenize(doc.text)
        doc_lengths[doc.doc_id] = len(tokens)
        for term, count in sorted(Counter(tokens).items()):
            postings.setdefault(term, []).append((doc.doc_id, count))
    return Bm25Index(postings, doc_lengths)


def retrieve(index: Bm25Index, query: str, k: int = 5) -> RetrievalResult:
    """Top-k documents by BM25; fewer than k when fewer score above zero."""
    if k < 1:
        raise ValueError("k must be >= 1")
    terms = tokenize(query)
    if not terms:
        raise ValueError("query is empty after normalization")
    candidates: set[str] = set()
    for term in set(terms):
        candidates.update(doc_id for doc_id, _ in index.postings.get(term, ()))
    scored = [(doc_id, index.score(terms, doc_id)) for doc_id in candidates]
    scored = [(doc_id, score) for doc_id, score in scored if score > 0.0]
    scored.sort(key=lambda item: (-item[1], item[0]))
    return RetrievalResult(scored[:k])


# --- corpus and index files -------------------------------------------------


def load_corpus(path: str | Path) -> list[Document]:
    docs = []
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
                docs.append(Document(raw["doc_id"], raw.get("title", ""), raw["body"]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{line_no}: bad corpus record: {exc}") from exc
    return docs


def save_corpus(docs: list[Document], path: str | Path) -> None:
    atomic_write_lines(
        path,
        [
            json.dumps({"doc_id": d.doc_id, "title": d.title, "body": d.body})
            for d in docs
        ],
    )


def save_index(index: Bm25Index, path: str | Path) -> None:
    header = json.dumps(
        {
            "format": INDEX_FORMAT,
            "version": INDEX_VERSION,
            "n_docs": index.n_docs,
            "doc_lengths": index.doc_lengths,
        },
        sort_keys=True,
    )
    lines = [header]
    for term in sorted(index.postings):
        lines.append(json.dumps({"term": term, "postings": index.postings[term]}))
    atomic_write_lines(path, lines)


def load_index(path: str | Path) -> Bm25Index:
    with open(path, encoding="utf-8") as handle:
        header = json.loads(handle.readline())
        if header.get("format") != INDEX_FORMAT:
            raise ValueError(f"{path}: not a {INDEX_FORMAT} file")
        if header.get("version") != INDEX_VERSION:
            raise ValueError(f"{path}: unsupported index version {header.get('version')}")
        postings: dict[str, list[tuple[str, int]]] = {}
        for line in handle:
            if not line.strip():
                continue
            raw = json.loads(line)
            postings[raw["term"]] = [(doc, count) for doc, count in raw["postings"]]
    return Bm25Index(postings, dict(header["doc_lengths"]))


def atomic_write_lines(path: str | Path, lines: list[str]) -> None:
    """Write a text file via temp-file-then-rename so readers never see partials."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as handle:
            for line in lines:
                handle.write(line + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
