"""Deterministic synthetic QA task over a toy 100-document corpus.

Each document states one attribution fact ("the astrolabe was crafted by
hans lippershey in the old quarter of veridale") padded with a distractor
sentence that overlaps the question wording as strongly as the fact line
does (so untrained knowledge extraction has to guess) and a low-overlap
filler. Questions come in four paraphrase templates per fact; the test
split holds the fourth paraphrase of facts whose other three phrasings are
in train, so generalization is nearest-phrasing rather than memorization.

Targets are always two tokens and never appear in the question.
"""

from __future__ import annotations

from dataclasses import dataclass

from .dataset import Example
from .retrieval import Document
from .rng import substream

TASK_NAME = "synthqa"

RELATIONS = ("crafted", "designed", "built", "restored", "invented")

OBJECTS = (
    # instruments
    "telescope", "astrolabe", "compass", "sundial", "quadrant", "sextant",
    "chronometer", "barometer", "theodolite", "seismograph", "stethoscope",
    "kaleidoscope", "periscope", "hygrometer", "anemometer", "altimeter",
    "gyroscope", "metronome", "microscope", "telegraph", "phonograph",
    "typewriter", "calculator", "abacus",
    # music
    "harpsichord", "accordion", "mandolin", "zither", "ocarina", "bassoon",
    "piccolo", "marimba", "celesta", "theremin", "glockenspiel", "dulcimer",
    "lute", "lyre", "fiddle", "banjo", "bugle", "cornet", "tuba", "oboe",
    "viola", "cello",
    # structures
    "lighthouse", "observatory", "planetarium", "carousel", "fountain",
    "clocktower", "windmill", "monastery", "amphitheater", "viaduct",
    "arboretum", "conservatory", "chapel", "citadel", "atrium", "pavilion",
    "rotunda", "colonnade", "aqueduct", "belfry", "cloister", "gazebo",
    "granary", "forge",
    # works and objects
    "ballad", "overture", "nocturne", "symphony", "concerto", "waltz",
    "serenade", "cantata", "rhapsody", "madrigal", "anthem", "prelude",
    "sonata", "fresco", "mosaic", "tapestry", "statue", "obelisk", "mural",
    "triptych", "locket", "chalice", "goblet", "scepter", "diadem", "amulet",
    "lantern", "loom", "kiln", "gramophone",
)

FIRST_NAMES = (
    "hans", "marta", "felix", "ingrid", "viktor", "selma", "anton", "freya",
    "casper", "liesel", "bruno", "astrid", "emil", "greta", "oskar", "helga",
    "rudolf", "karin", "stefan", "vera",
)

LAST_NAMES = (
    "lippershey", "gutenberg", "brahe", "vermeer", "eriksen", "lindqvist",
    "moreau", "okafor", "tanaka", "kowalski", "petrov", "almeida", "vasquez",
    "donati", "halloran", "nakamura", "bergstrom", "ivanov", "deluca", "soriano",
)

CITIES = (
    "veridale", "ostenburg", "karlshaven", "brindemoor", "tessarino",
    "valdorra", "quenby", "mirefold", "santelmo", "drevnik", "aldgate",
    "pellworth", "norvik", "ilvermoor",
)

QUARTERS = (
    "old", "upper", "lower", "eastern", "western", "northern", "southern",
    "riverside",
)

QUESTION_TEMPLATES = (
    "who {rel} the {obj}?",
    "tell me who {rel} the {obj}.",
    "do you know who {rel} the {obj}?",
    "i wonder who {rel} the {obj}.",
)

N_DOCS = 100
#: Facts 0..TEST_FACTS-1 hold their fourth paraphrase out as test data.
TEST_FACTS = 50


@dataclass(frozen=True)
class Fact:
    doc_id: str
    obj: str
    relation: str
    answer: str
    quarter: str
    city: str

    @property
    def sentence(self) -> str:
        return (
            f"the {self.obj} was {self.relation} by {self.answer} "
            f"in the {self.quarter} quarter of {self.city}"
        )

    @property
    def distractor(self) -> str:
        return f"many visitors ask about the {self.relation} {self.obj} on every tour"

    @property
    def filler(self) -> str:
        return f"records about the {self.obj} fill the {self.city} archive halls"

    @property
    def query(self) -> str:
        return f"{self.relation} {self.obj}"


def make_facts(seed: int = 0) -> list[Fact]:
    rng = substream("synthetic-facts", seed)
    objects = list(OBJECTS)
    assert len(set(objects)) == len(objects) >= N_DOCS
    rng.shuffle(objects)
    name_pairs = [(f, l) for f in FIRST_NAMES for l in LAST_NAMES]
    rng.shuffle(name_pairs)
    facts = []
    for i in range(N_DOCS):
        first, last = name_pairs[i]
        facts.append(
            Fact(
                doc_id=f"doc{i:03d}",
                obj=objects[i],
                relation=RELATIONS[i % len(RELATIONS)],
                answer=f"{first} {last}",
                quarter=QUARTERS[rng.randrange(len(QUARTERS))],
                city=CITIES[rng.randrange(len(CITIES))],
            )
        )
    return facts


def make_corpus(facts: list[Fact]) -> list[Document]:
    return [
        Document(
            doc_id=fact.doc_id,
            title=fact.obj,
            body=f"{fact.sentence}. {fact.distractor}. {fact.filler}.",
        )
        for fact in facts
    ]


def _example(fact: Fact, template_idx: int) -> Example:
    question = QUESTION_TEMPLATES[template_idx].format(rel=fact.relation, obj=fact.obj)
    return Example(
        id=f"q-{fact.doc_id}-t{template_idx}",
        task=TASK_NAME,
        context=(("user", question),),
        target=fact.answer,
        query_gold=fact.query,
        knowledge_gold=fact.sentence,
    )


def make_splits(facts: list[Fact]) -> tuple[list[Example], list[Example]]:
    """200 train / 50 test; every test fact has three train paraphrases."""
    train: list[Example] = []
    test: list[Example] = []
    for i, fact in enumerate(facts):
        if i < TEST_FACTS:
            train.extend(_example(fact, t) for t in (0, 1, 2))
            test.append(_example(fact, 3))
        else:
            train.append(_example(fact, 0))
    return train, test


def make_task(seed: int = 0) -> tuple[list[Document], list[Example], list[Example]]:
    facts = make_facts(seed)
    corpus = make_corpus(facts)
    train, test = make_splits(facts)
    return corpus, train, test
