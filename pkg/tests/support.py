"""Shared fixtures: the Bristol-magazine case study and a disjoint-facts recall corpus."""

from __future__ import annotations

import json
from pathlib import Path

from decomprag.config import PipelineConfig
from decomprag.environment import QuestionInstance
from decomprag.gateway import BackendSpec, ScriptTable
from decomprag.metrics import GoldAnswerSet
from decomprag.retrieval import Passage, ingest_corpus

# --- case study --------------------------------------------------------------

BRISTOL_QUESTION = "Piers Bizony has written articles for which magazine based in Bristol, UK?"
BRISTOL_DECOMPOSITION = (
    "### Q1: What magazines has Piers Bizony written articles for?\n"
    "### Q2: Among the magazines mentioned in #1, which one is based in Bristol, UK?"
)
BRISTOL_STEP1_ANSWER = "The Independent, BBC Focus, Wired"
BRISTOL_FINAL = "BBC Focus"

BRISTOL_PASSAGES = [
    Passage("bizony", "Piers Bizony", "Piers Bizony is a British science journalist who has written articles for The Independent, BBC Focus and Wired."),
    Passage("focus", "BBC Focus", "BBC Focus is a monthly science magazine published in Bristol, UK."),
    Passage("wired", "Wired", "Wired is a monthly magazine published in San Francisco."),
    Passage("independent", "The Independent", "The Independent is a British newspaper based in London."),
    Passage("bristol", "Bristol", "Bristol is a city in South West England on the River Avon."),
]


def bristol_question() -> QuestionInstance:
    return QuestionInstance("bristol-1", BRISTOL_QUESTION, GoldAnswerSet(("BBC Focus",)), "hotpotqa")


def bristol_decomposer(text: str = BRISTOL_DECOMPOSITION) -> BackendSpec:
    return BackendSpec.scripted(
        {"match": [{"contains": [BRISTOL_QUESTION], "responses": [text]}]}, model="decomposer"
    )


def bristol_reader() -> BackendSpec:
    return BackendSpec.scripted(
        {
            "match": [
                {"contains": ["For the question:"], "responses": [BRISTOL_FINAL]},
                {"contains": ["'What magazines has Piers Bizony written articles for?'"], "responses": [BRISTOL_STEP1_ANSWER]},
                {"contains": ["which one is based in Bristol, UK?'"], "responses": ["BBC Focus"]},
            ]
        },
        model="reader",
    )


def bristol_corpus():
    corpus, _ = ingest_corpus(BRISTOL_PASSAGES)
    return corpus


# --- disjoint facts ----------------------------------------------------------

# Each question needs two facts that sit in different passages. The bridge
# passage shares no token with the original question, so a single retrieval
# over the question never surfaces it.
DISJOINT = [
    {
        "id": "zorblax",
        "question": "Which country is the birthplace of the director of Zorblax?",
        "gold": "Veltria",
        "decomposition": "### Q1: Who directed Zorblax?\n### Q2: Where was #1 born?",
        "step1": "Quentin Mardle",
    },
    {
        "id": "quillon",
        "question": "Which country is the birthplace of the director of Quillon Dawn?",
        "gold": "Ostravia",
        "decomposition": "### Q1: Who directed Quillon Dawn?\n### Q2: Where was #1 born?",
        "step1": "Hesper Doyle",
    },
]

DISJOINT_PASSAGES = [
    Passage("film-zorblax", "Zorblax", "Zorblax is a film by director Quentin Mardle."),
    Passage("person-mardle", "Quentin Mardle", "Quentin Mardle was born in Veltria."),
    Passage("film-quillon", "Quillon Dawn", "Quillon Dawn is a film by director Hesper Doyle."),
    Passage("person-doyle", "Hesper Doyle", "Hesper Doyle was born in Ostravia."),
    Passage("d1", "Film directors", "A film director is the person who directs the making of a film."),
    Passage("d2", "Country", "A country is a distinct part of the world, such as a state or nation."),
    Passage("d3", "Birthplace", "The birthplace of a person is the place where they were born, often a country or city."),
]


def disjoint_questions() -> list[QuestionInstance]:
    return [QuestionInstance(d["id"], d["question"], GoldAnswerSet((d["gold"],)), "custom") for d in DISJOINT]


def disjoint_backends() -> tuple[BackendSpec, BackendSpec]:
    decomposer = BackendSpec.scripted(
        {"match": [{"contains": [d["question"]], "responses": [d["decomposition"]]} for d in DISJOINT]},
        model="decomposer",
    )
    rules = []
    for d in DISJOINT:
        rules.append({"contains": ["For the question:", d["question"]], "responses": [d["gold"]]})
    for d in DISJOINT:
        directed = d["decomposition"].splitlines()[0].split(": ", 1)[1]
        rules.append({"contains": [f"'{directed}'"], "responses": [d["step1"]]})
        rules.append({"contains": [f"'Where was {d['step1']} born?'"], "responses": [d["gold"]]})
    return decomposer, BackendSpec.scripted({"match": rules}, model="reader")


def disjoint_config(**kw) -> PipelineConfig:
    return PipelineConfig(k=kw.pop("k", 2), **kw)


# --- files -------------------------------------------------------------------


def write_passages(path: Path, passages) -> Path:
    with open(path, "w", encoding="utf-8") as f:
        for p in passages:
            f.write(json.dumps({"id": p.id, "title": p.title, "text": p.body}) + "\n")
    return path


def write_questions(path: Path, questions) -> Path:
    with open(path, "w", encoding="utf-8") as f:
        for q in questions:
            f.write(json.dumps({"id": q.id, "question": q.question, "answer": list(q.gold.aliases)}) + "\n")
    return path
