"""Compare a predicted answer with the gold answer.

Multiple-choice rule table (version 1), first rule that yields a verdict wins:

==  ==========================  =================================================
#   rule                        example → label
==  ==========================  =================================================
1   standalone label            ``"B"``, ``"(b)"``, ``"B."`` → B
2   "answer is <label>"         ``"The answer is (b)."`` → B; two different labels → none
3   unique option text          ``"... it is medulloblastoma"`` → option whose text occurs
==  ==========================  =================================================

Rule 3 matches option texts on word boundaries after normalisation and
ignores a matched text contained in a longer matched text; if more than one
option remains the prediction is ambiguous and does not match. Open answers
are compared by normalised exact equality.
"""

from __future__ import annotations

import re
import unicodedata
from typing import Sequence

MATCH_RULES_VERSION = 1
YES_NO_MAYBE = ("yes", "no", "maybe")

_ANSWER_IS = re.compile(
    r"answer\s*(?:is|:)\s*:?\s*(?:option\s+)?[\(\[]?([A-Za-z0-9]+)[\)\]]?(?=\s*(?:$|[.,;:!\n)]))",
    re.IGNORECASE,
)
_ANSWER_PREFIX = re.compile(r"^.*?\banswer\s*(?:is|:)\s*:?\s*", re.IGNORECASE | re.DOTALL)


def normalize_text(text: str) -> str:
    """Case-fold, turn punctuation into spaces, collapse whitespace."""
    text = unicodedata.normalize("NFKC", text).casefold()
    text = "".join(" " if unicodedata.category(ch).startswith("P") else ch for ch in text)
    return " ".join(text.split())


def _labels(options: Sequence[tuple[str, str]]) -> dict[str, str]:
    return {label.casefold(): label for label, _ in options}


def extract_choice(predicted: str, options: Sequence[tuple[str, str]]) -> str | None:
    """Option label named by ``predicted``, or None when absent or ambiguous."""
    labels = _labels(options)
    stripped = predicted.strip().strip("()[]{}.:*\"' \t\n").casefold()
    if stripped in labels:
        return labels[stripped]

    named = {labels[m.group(1).casefold()] for m in _ANSWER_IS.finditer(predicted)
             if m.group(1).casefold() in labels}
    if len(named) == 1:
        return named.pop()
    if len(named) > 1:
        return None

    norm = f" {normalize_text(predicted)} "
    hits = []
    for label, text in options:
        t = normalize_text(text)
        if t and f" {t} " in norm:
            hits.append((label, t))
    hits = [(l, t) for l, t in hits if not any(t != o and f" {t} " in f" {o} " for _, o in hits)]
    if len({l for l, _ in hits}) == 1:
        return hits[0][0]
    return None


def strip_answer_prefix(predicted: str) -> str:
    """``"The answer is aspirin."`` → ``"aspirin."``; text without the phrase is unchanged."""
    m = _ANSWER_PREFIX.match(predicted.strip())
    return predicted.strip()[m.end():] if m else predicted.strip()


def effective_options(options: Sequence[tuple[str, str]] | None, gold_text: str | None):
    """Options to match against; yes/no/maybe golds without options get a 3-way choice."""
    if options:
        return list(options)
    if gold_text is not None and normalize_text(gold_text) in YES_NO_MAYBE:
        return [(w, w) for w in YES_NO_MAYBE]
    return None


def gold_label(options: Sequence[tuple[str, str]], label: str | None, text: str | None) -> str | None:
    labels = _labels(options)
    if label is not None and label.casefold() in labels:
        return labels[label.casefold()]
    if text is not None:
        for l, t in options:
            if normalize_text(t) == normalize_text(text):
                return l
    return None


def match_answer(predicted: str, gold_label_: str | None = None, gold_text: str | None = None,
                 options: Sequence[tuple[str, str]] | None = None) -> bool:
    opts = effective_options(options, gold_text)
    if opts:
        want = gold_label(opts, gold_label_, gold_text)
        got = extract_choice(predicted, opts)
        return want is not None and got is not None and got.casefold() == want.casefold()
    if gold_text is None:
        return False
    a, b = normalize_text(predicted), normalize_text(gold_text)
    return bool(a) and a == b
