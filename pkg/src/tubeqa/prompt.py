"""Grounding prompt built from a question and its answer."""

from __future__ import annotations

from dataclasses import dataclass

TEMPLATE = "{question} Track the {answer}"


class PromptError(ValueError):
    pass


@dataclass(frozen=True)
class Prompt:
    text: str
    question: str
    answer: str | None
    answer_source: str | None = None


def compose(question: str, answer: str, answer_source: str | None = None) -> Prompt:
    """Join ``question`` and ``answer`` as ``"<question> Track the <answer>"``.

    Strings are used verbatim; only the emptiness checks look at stripped text.
    """
    if not question or not question.strip():
        raise PromptError("empty question")
    if answer is None or not answer.strip():
        raise PromptError("empty answer: stage 1 must supply one")
    return Prompt(TEMPLATE.format(question=question, answer=answer), question, answer, answer_source)


def question_only(question: str) -> Prompt:
    """Prompt without the answer suffix, used for the ablation runs."""
    if not question or not question.strip():
        raise PromptError("empty question")
    return Prompt(question, question, None, None)
