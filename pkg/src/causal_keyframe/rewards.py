"""Answer, cycle-consistency, counterfactual and composite rewards."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import InputError
from .records import QuestionInstance

log = logging.getLogger(__name__)

SOFTMAX_FLOOR = 1e-8

_LETTER_PATTERNS = [
    re.compile(r"\(([A-Z])\)"),
    re.compile(r"\b(?:[Aa]nswer|[Oo]ption)\s*(?:is|:)?\s*\(?([A-Z])\b"),
    re.compile(r"^\s*([A-Z])\s*(?:[.):,\]]|$)"),
]


def parse_option(answer_text: str, question: QuestionInstance) -> Optional[int]:
    """Index of the option named in ``answer_text``, or None.

    A bare or parenthesized letter is tried first, then an exact
    (case-insensitive) match against the option texts.
    """
    text = (answer_text or "").strip()
    n = question.option_count
    for pattern in _LETTER_PATTERNS:
        for match in pattern.finditer(text):
            letter = match.group(1).upper()
            idx = ord(letter) - ord("A")
            if 0 <= idx < n:
                return idx
    cleaned = text.lower().strip(" .")
    for idx, option in enumerate(question.options):
        if cleaned == option.lower().strip(" ."):
            return idx
    return None


def answer_reward(answer_text: str, question: QuestionInstance) -> int:
    parsed = parse_option(answer_text, question)
    if parsed is None:
        log.info("unparseable answer %r scored 0", answer_text)
        return 0
    return int(parsed == question.correct_index)


def cycle_reward(question_elements: frozenset[str], answer_elements: frozenset[str]) -> float:
    """IoU of the two element sets; two empty sets score 0."""
    union = question_elements | answer_elements
    if not union:
        return 0.0
    return len(question_elements & answer_elements) / len(union)


def smoothed_softmax(logits: Sequence[float], floor: float = SOFTMAX_FLOOR) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    p = np.exp(z - z.max())
    p /= p.sum()
    p = np.maximum(p, floor)
    return p / p.sum()


def counterfactual_reward(o: Sequence[float], o_prime: Sequence[float], cap: Optional[float] = None) -> float:
    """KL(softmax(o) || softmax(o')) with floored, renormalized probabilities."""
    o = np.asarray(o, dtype=np.float64)
    o_prime = np.asarray(o_prime, dtype=np.float64)
    if o.shape != o_prime.shape or o.ndim != 1:
        raise InputError(f"logit vectors must have equal length, got {o.shape} and {o_prime.shape}")
    p, q = smoothed_softmax(o), smoothed_softmax(o_prime)
    kl = float(np.sum(p * (np.log(p) - np.log(q))))
    kl = max(kl, 0.0)
    if cap is not None:
        kl = min(kl, cap)
    return kl


@dataclass(frozen=True)
class RewardBreakdown:
    r_ans: int
    r_cycle: float
    r_cf: float
    total: float

    def to_json(self) -> dict:
        return {"r_ans": self.r_ans, "r_cycle": self.r_cycle, "r_cf": self.r_cf, "total": self.total}


def composite_reward(r_ans: int, r_cycle: float, r_cf: float, lambda1: float = 0.5, lambda2: float = 0.5) -> RewardBreakdown:
    if lambda1 < 0 or lambda2 < 0:
        raise InputError("reward weights must be non-negative")
    return RewardBreakdown(r_ans, r_cycle, r_cf, r_ans + lambda1 * r_cycle + lambda2 * r_cf)
