"""Subset samplers over the candidate pool.

Positions are pool positions (0..M-1), not video frame indices.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .policy import sequential_log_prob

log = logging.getLogger(__name__)


class SelectionKind(str, enum.Enum):
    SAMPLED = "sampled"
    COUNTERFACTUAL = "counterfactual"
    TOPK = "topk"


@dataclass(frozen=True)
class Selection:
    ordered_indices: tuple[int, ...]
    kind: SelectionKind
    log_prob: Optional[float] = None

    @property
    def set_view(self) -> frozenset[int]:
        return frozenset(self.ordered_indices)

    def __len__(self) -> int:
        return len(self.ordered_indices)

    def temporal(self) -> tuple[int, ...]:
        return tuple(sorted(self.ordered_indices))

    def to_json(self) -> dict:
        return {"order": list(self.ordered_indices), "kind": self.kind.value, "log_prob": self.log_prob}


def rng_for(master_seed: int, *path: int) -> np.random.Generator:
    """Independent generator for a (master seed, episode, member, purpose, ...) path."""
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), *map(int, path)]))


def _draw_weights(scores: np.ndarray, what: str) -> np.ndarray:
    w = np.asarray(scores, dtype=np.float64)
    total = w.sum()
    if not total > 0:
        log.warning("%s weights are all zero; sampling uniformly", what)
        return np.full(len(w), 1.0 / len(w))
    return w / total


def _sequential_draw(weights: np.ndarray, k: int, rng: np.random.Generator) -> tuple[int, ...]:
    w = weights.copy()
    picks = []
    for _ in range(min(k, len(w))):
        mass = w.sum()
        if mass <= 0:
            # remaining weight exhausted; continue uniformly over what is left
            left = np.flatnonzero(~np.isin(np.arange(len(w)), picks))
            i = int(left[int(rng.integers(len(left)))])
        else:
            u = rng.random() * mass
            i = int(np.searchsorted(np.cumsum(w), u, side="right"))
            i = min(i, len(w) - 1)
            while w[i] <= 0:  # guard against landing on an exhausted slot at the edge
                i -= 1
        picks.append(i)
        w[i] = 0.0
    return tuple(picks)


def sample_subset(scores: Sequence[float], k: int, rng: np.random.Generator) -> Selection:
    """Draw ``min(k, M)`` positions one at a time, proportional to remaining score."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("cannot sample from an empty pool")
    w = _draw_weights(scores, "selection")
    order = _sequential_draw(w, k, rng)
    return Selection(order, SelectionKind.SAMPLED, sequential_log_prob(w, order))


def invert_policy(scores: Sequence[float]) -> np.ndarray:
    """Counterfactual weights ``(1 - s_i) / sum_j (1 - s_j)``."""
    s = np.asarray(scores, dtype=np.float64)
    if np.any(s < 0) or np.any(s > 1):
        raise ValueError("scores must lie in [0, 1]")
    inv = 1.0 - s
    total = inv.sum()
    if not total > 0:
        log.warning("all selection scores equal 1; counterfactual policy falls back to uniform")
        return np.full(len(s), 1.0 / len(s))
    return inv / total


def sample_counterfactual(scores: Sequence[float], k: int, rng: np.random.Generator) -> Selection:
    w = invert_policy(scores)
    order = _sequential_draw(w, k, rng)
    return Selection(order, SelectionKind.COUNTERFACTUAL, sequential_log_prob(w, order))


def top_k_select(scores: Sequence[float], k: int) -> Selection:
    """The ``k`` highest scores (earlier position wins ties), in temporal order."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    s = np.asarray(scores, dtype=np.float64)
    ranked = sorted(range(len(s)), key=lambda i: (-s[i], i))[:k]
    return Selection(tuple(sorted(ranked)), SelectionKind.TOPK, None)
