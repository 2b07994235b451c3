"""Passkey prompt templates shared by the corpus generator and the evaluator."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class PasskeyTemplate:
    """Blocks are joined with ``sep``: preamble, fillers, key line, fillers, question.

    ``key_line`` contains ``{key}`` placeholders. An empty preamble is skipped.
    """

    name: str
    preamble: str
    filler: str
    key_line: str
    question: str
    sep: str

    def render(self, key: int, n_before: int, n_after: int) -> str:
        blocks = [self.preamble] if self.preamble else []
        blocks += [self.filler] * n_before
        blocks.append(self.key_line.format(key=key))
        blocks += [self.filler] * n_after
        blocks.append(self.question)
        return self.sep.join(blocks)


STANDARD = PasskeyTemplate(
    name="standard",
    preamble=(
        "There is an important info hidden inside a lot of irrelevant text. "
        "Find it and memorize them. I will quiz you about the important information there."
    ),
    filler="The grass is green. The sky is blue. The sun is yellow. Here we go. There and back again.",
    key_line="The pass key is {key}. Remember it. {key} is the pass key.",
    question="What is the pass key?",
    sep="\n",
)

# Compact variant matching the `keyvalue` training episodes, so a desk model
# trained on 64-token windows meets the same surface form at longer lengths.
DESK = PasskeyTemplate(
    name="desk",
    preamble="",
    filler="the grass is green. the sky is blue.",
    key_line="key {key}.",
    question="key?",
    sep=" ",
)

FILLER_SENTENCES = (
    "the grass is green.",
    "the sky is blue.",
    "the sun is yellow.",
    "here we go.",
    "there and back again.",
)

TEMPLATES = {t.name: t for t in (STANDARD, DESK)}

PASSKEY_MIN, PASSKEY_MAX = 10000, 99999
