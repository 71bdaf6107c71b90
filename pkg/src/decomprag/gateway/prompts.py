"""Prompt templates for decomposition, sub-question answering and final synthesis."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence

# Line lists keep the original trailing spaces of the templates intact.
DECOMPOSE_TEMPLATE = "\n".join([
    "Please break down the given question into multiple specific sub-questions that address individual components of the original question.",
    "Please generate the decomposed sub-questions for the below question. The sub-question should be labeled with a reference to previous answers (e.g., #1) when needed. For example, #1 means the answer for decomposed question 1. ",
    "",
    "Here are two examples:",
    "[[Begin of the Example 1]]",
    "## Question: ",
    "What is the average winter daytime temperature in the region containing Richmond, in the state where WXBX is located?",
    "",
    "## Decomposed Question:",
    "### Q1: Which state is WXBX located?",
    "### Q2: In which of #1 's regions is Richmond?",
    "### Q3: What is the average winter daytime temperature in #2?",
    "[[End of the Example 1]]",
    "",
    "[[Begin of the Example 2]]",
    "## Question: ",
    "How long was the place where the Yongle Emperor greeted the person to whom the edict was addressed the capitol of the area where Guangling District was located?",
    "",
    "## Decomposed Question:",
    "### Q1: Who was the edict addressed to?",
    "### Q2: Where did the Yongle Emperor greet #1 ?  ",
    "### Q3: Where does Guangling District locate?",
    "### Q4: How long had #2 been the capital city of #3 ?",
    "[[End of the Example 2]]",
    "Now, decompose the following question:",
    "## Question: ",
    "{question}",
    "",
    "## Decomposed Question:",
    "",
])

SUBANSWER_TEMPLATE = "\n".join([
    "You have the following context passages:",
    "{context}",
    "",
    "Please answer the question '{subquestion}' with a short span using the context as reference. ",
    "If no answer is found in the context, use your own knowledge.",
    "Do not give any explanation. Your answer needs to be as short as possible.",
])

FINAL_ANSWER_TEMPLATE = "\n".join([
    "For the question: {question}",
    "",
    "We have the following decomposed sub-questions and sub-answers:",
    "{qa_block}",
    "",
    "Based on these, provide the final concise answer to the original question. Do not give an explanation.",
])

HISTORY_HEADER = "Previous sub-questions and answers:"
PASSAGE_SEPARATOR = "\n\n"

_SLOT = re.compile(r"\{(question|context|subquestion|qa_block)\}")


class PromptError(ValueError):
    pass


def fill(template: str, **slots: str) -> str:
    """Single-pass slot substitution; braces inside slot values are left alone."""

    def sub(m: re.Match) -> str:
        name = m.group(1)
        if name not in slots:
            raise PromptError(f"no value for slot {{{name}}}")
        return slots[name]

    return _SLOT.sub(sub, template)


@dataclass(frozen=True)
class PromptBundle:
    decompose_template: str = DECOMPOSE_TEMPLATE
    subanswer_template: str = SUBANSWER_TEMPLATE
    final_answer_template: str = FINAL_ANSWER_TEMPLATE

    def render_decompose(self, question: str) -> str:
        if not question.strip():
            raise PromptError("question is empty")
        return fill(self.decompose_template, question=question)

    def render_subanswer(self, subquestion: str, passages: Sequence = (), history: Sequence[tuple[str, str]] = ()) -> str:
        prompt = fill(self.subanswer_template, context=format_context(passages), subquestion=subquestion)
        if history:
            prompt += f"\n\n{HISTORY_HEADER}\n{format_qa_block(history)}"
        return prompt

    def render_final(self, question: str, qa_pairs: Sequence[tuple[str, str]]) -> str:
        if not qa_pairs:
            raise PromptError("final-answer prompt needs at least one sub-question/answer pair")
        return fill(self.final_answer_template, question=question, qa_block=format_qa_block(qa_pairs))


DEFAULT_PROMPTS = PromptBundle()


def format_passage(passage) -> str:
    return f"{passage.title}\n{passage.body}" if passage.title else passage.body


def format_context(passages: Sequence) -> str:
    """Passages in rank order, title line then body, blank line between passages."""
    return PASSAGE_SEPARATOR.join(format_passage(p) for p in passages)


def format_qa_block(qa_pairs: Sequence[tuple[str, str]]) -> str:
    return "\n".join(f"Q{t}: {q}\nA{t}: {a}" for t, (q, a) in enumerate(qa_pairs, start=1))


def render_decompose_prompt(question, prompts: PromptBundle = DEFAULT_PROMPTS) -> str:
    text = question if isinstance(question, str) else question.question
    return prompts.render_decompose(text)


def render_subanswer_prompt(
    subquestion: str,
    passages: Sequence = (),
    history: Sequence[tuple[str, str]] = (),
    prompts: PromptBundle = DEFAULT_PROMPTS,
) -> str:
    return prompts.render_subanswer(subquestion, passages, history)


def render_final_prompt(question, qa_pairs: Sequence[tuple[str, str]], prompts: PromptBundle = DEFAULT_PROMPTS) -> str:
    text = question if isinstance(question, str) else question.question
    return prompts.render_final(text, qa_pairs)
