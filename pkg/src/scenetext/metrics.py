"""Text-accuracy metrics and evaluation-protocol helpers.

Strings are compared as sequences of Unicode scalar values (Python str
iteration order), with no normalization, so combining marks count as
separate symbols on both sides of a comparison.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .attention import DEFAULT_WORDLIST
from .errors import EvalError


def levenshtein(a: str, b: str) -> int:
    """Edit distance with unit costs, two-row dynamic program."""
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[len(b)]


def norm_edit(a: str, b: str) -> float:
    """Length-normalized edit similarity in [0, 1].

    1 - distance / max(len); two empty strings compare as identical (1.0).
    """
    longest = max(len(a), len(b))
    if longest == 0:
        return 1.0
    return 1.0 - levenshtein(a, b) / longest


@dataclass(frozen=True)
class EvalRecord:
    """One evaluation row: what was asked for vs what was read back."""

    ground_truth: str
    recognized: str
    norm_edit: float
    exact: bool

    @classmethod
    def from_pair(cls, ground_truth: str, recognized: str) -> "EvalRecord":
        return cls(
            ground_truth=ground_truth,
            recognized=recognized,
            norm_edit=norm_edit(ground_truth, recognized),
            exact=ground_truth == recognized,
        )


def accuracy(records) -> float:
    """Fraction of exact matches. Raises on an empty record list."""
    records = list(records)
    if not records:
        raise EvalError("cannot compute accuracy of zero records")
    return sum(r.exact for r in records) / len(records)


def mean_norm_edit(records) -> float:
    records = list(records)
    if not records:
        raise EvalError("cannot compute mean similarity of zero records")
    return sum(r.norm_edit for r in records) / len(records)


def augment_prompt(prompt: str, text: str, wordlist=DEFAULT_WORDLIST) -> str:
    """Weave the target text into the prompt as a reading clause.

    Inserts "that reads '<text>'" right after the first wordlist word in
    the prompt ("A sign on the street" becomes "A sign that reads 'OPEN'
    on the street"); with no wordlist word present the clause is appended
    after a comma. Empty text leaves the prompt unchanged.
    """
    if not text:
        return prompt
    clause = f"that reads '{text}'"
    best = None
    for word in wordlist:
        m = re.search(rf"\b{re.escape(word)}\b", prompt, flags=re.IGNORECASE)
        if m and (best is None or m.start() < best.start()):
            best = m
    if best is None:
        return f"{prompt}, {clause}"
    return f"{prompt[: best.end()]} {clause}{prompt[best.end():]}"


def sample_vocab(words, min_len: int = 5, n: int | None = None, seed: int = 0) -> list[str]:
    """Deterministically draw n distinct words of at least min_len symbols.

    Length is counted in Unicode scalar values, consistent with the edit
    metrics. Raises when the filtered vocabulary is too small.
    """
    words = list(words)
    eligible = [w for w in words if len(w) >= min_len]
    if n is None:
        n = len(eligible)
    if n > len(eligible):
        raise EvalError(
            f"requested {n} words but only {len(eligible)} of {len(words)} "
            f"have at least {min_len} symbols"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(eligible))
    return [eligible[i] for i in order[:n]]
