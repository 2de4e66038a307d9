"""Deterministic video-QA episodes with a planted causal chain.

Every episode has ``necessary_count`` frames that jointly decide the answer
and ``distractor_count`` frames that look like the question but carry no
causal weight. The option-logit model rewards only full coverage of the
necessary frames, so each of them is individually indispensable.

Element vocabulary: ``obj**`` ids are objects that can be named by a
question; ``evt*`` ids are events that only appear in necessary frames.
Element vectors are fixed per ``master_seed`` and shared by all episodes.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, fields
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, InputError
from .records import Episode, FrameRecord, GroundTruth, QuestionInstance

OPTION_LETTERS = "ABCDEFGHIJKLMNOPQRSTUVWXYZ"

# Sub-stream tags for SeedSequence entropy.
_ELEMENT_STREAM = 0xE1
_EPISODE_STREAM = 0xE2
_MAX_REGENERATIONS = 1000


@dataclass(frozen=True)
class SyntheticSpec:
    total_frames: int = 16
    pool_target: int = 16
    necessary_count: int = 3
    distractor_count: int = 5
    option_count: int = 5
    feature_dim: int = 32
    feature_noise_sigma: float = 0.05
    full_coverage_bonus: float = 4.0
    coverage_slope: float = 1.0
    distractor_logit: float = 2.0
    element_universe_size: int = 48
    event_element_count: int = 1
    target_element_count: int = 4
    background_target_rate: float = 0.5
    master_seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        c, n_d = self.necessary_count, self.distractor_count
        if c < 1:
            raise ConfigError(f"necessary_count must be >= 1, got {c}")
        if n_d < 0:
            raise ConfigError(f"distractor_count must be >= 0, got {n_d}")
        if self.total_frames < 1 or c + n_d > self.total_frames:
            raise ConfigError(
                f"necessary_count + distractor_count ({c + n_d}) exceeds total_frames ({self.total_frames})"
            )
        if not 1 <= self.pool_target <= self.total_frames:
            raise ConfigError(f"pool_target must be in [1, total_frames], got {self.pool_target}")
        if not 2 <= self.option_count <= len(OPTION_LETTERS):
            raise ConfigError(f"option_count must be in [2, 26], got {self.option_count}")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be >= 1")
        if not (self.feature_noise_sigma >= 0 and math.isfinite(self.feature_noise_sigma)):
            raise ConfigError("feature_noise_sigma must be finite and >= 0")
        b1, b2, d = self.full_coverage_bonus, self.coverage_slope, self.distractor_logit
        if not (b1 + b2 > d > b2):
            raise ConfigError(
                f"logit constants must satisfy bonus + slope > distractor_logit > slope, got {b1}, {b2}, {d}"
            )
        if self.target_element_count < 2:
            raise ConfigError("target_element_count must be >= 2 so a strict non-empty subset exists")
        if self.event_element_count < 1:
            raise ConfigError("event_element_count must be >= 1")
        # Distractor options need fresh objects; background frames need at least one.
        needed = self.target_element_count + max(
            self.target_element_count - self.target_element_count // 2, 1
        )
        if self.object_element_count < needed:
            raise ConfigError(
                f"element_universe_size too small: need at least {needed} object elements "
                f"plus {self.event_element_count} event elements"
            )
        if not 0.0 <= self.background_target_rate <= 1.0:
            raise ConfigError("background_target_rate must be in [0, 1]")
        if not 0 <= self.master_seed < 2**64:
            raise ConfigError("master_seed must be a 64-bit unsigned integer")

    @property
    def object_element_count(self) -> int:
        return self.element_universe_size - self.event_element_count

    def object_ids(self) -> list[str]:
        return [f"obj{i:02d}" for i in range(self.object_element_count)]

    def event_ids(self) -> list[str]:
        return [f"evt{i}" for i in range(self.event_element_count)]

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "SyntheticSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown synthetic spec fields: {sorted(unknown)}")
        return cls(**obj)


@lru_cache(maxsize=64)
def _element_table(master_seed: int, dim: int, universe: tuple[str, ...]) -> dict[str, np.ndarray]:
    table = {}
    for pos, name in enumerate(universe):
        rng = np.random.default_rng([master_seed, _ELEMENT_STREAM, pos])
        v = rng.standard_normal(dim)
        v /= np.linalg.norm(v)
        v.setflags(write=False)
        table[name] = v
    return table


def element_vectors(spec: SyntheticSpec) -> dict[str, np.ndarray]:
    """Fixed unit vector for every element id in the element universe."""
    universe = tuple(spec.object_ids() + spec.event_ids())
    return _element_table(spec.master_seed, spec.feature_dim, universe)


def _embed(names: Iterable[str], table: dict[str, np.ndarray]) -> np.ndarray:
    total = np.sum([table[n] for n in sorted(names)], axis=0)
    return total / np.linalg.norm(total)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def _has_distractor_trap(frames: Sequence[FrameRecord], q_feat: np.ndarray, truth: GroundTruth) -> bool:
    if not truth.distractor_indices:
        return False
    sims = {f.index: _cosine(f.feature, q_feat) for f in frames}
    best_distractor = max(sims[i] for i in truth.distractor_indices)
    worst_necessary = min(sims[i] for i in truth.necessary_indices)
    return best_distractor > worst_necessary


def _draw_episode(spec: SyntheticSpec, rng: np.random.Generator, table: dict[str, np.ndarray]):
    objects = spec.object_ids()
    events = spec.event_ids()
    n_t = spec.target_element_count

    target = sorted(rng.choice(objects, size=n_t, replace=False).tolist())
    target_set = frozenset(target)
    others = [o for o in objects if o not in target_set]

    positions = rng.permutation(spec.total_frames)
    necessary = sorted(int(i) for i in positions[: spec.necessary_count])
    distractors = sorted(
        int(i) for i in positions[spec.necessary_count : spec.necessary_count + spec.distractor_count]
    )
    nec_set, dis_set = set(necessary), set(distractors)

    frames = []
    for idx in range(spec.total_frames):
        tags: dict[str, float] = {}
        if idx in nec_set:
            # strict, non-empty subset of the target elements, detected weakly
            size = int(rng.integers(1, n_t))
            for name in sorted(rng.choice(target, size=size, replace=False).tolist()):
                tags[name] = float(rng.uniform(0.7, 0.8))
            tags[str(rng.choice(events))] = float(rng.uniform(0.7, 1.0))
        elif idx in dis_set:
            for name in target:
                tags[name] = float(rng.uniform(0.9, 1.0))
        else:
            size = int(rng.integers(1, 4))
            for name in sorted(rng.choice(others, size=min(size, len(others)), replace=False).tolist()):
                tags[name] = float(rng.uniform(0.3, 1.0))
            # some background frames glimpse one target element
            if rng.random() < spec.background_target_rate:
                tags[str(rng.choice(target))] = float(rng.uniform(0.4, 0.95))
        feature = _embed(tags, table)
        if spec.feature_noise_sigma > 0:
            feature = feature + rng.normal(0.0, spec.feature_noise_sigma, size=spec.feature_dim)
        frames.append(FrameRecord(index=idx, feature=feature, element_tags=tags))

    half = n_t // 2
    option_sets = [target_set]
    while len(option_sets) < spec.option_count:
        shared = rng.choice(target, size=half, replace=False).tolist()
        fresh = rng.choice(others, size=n_t - half, replace=False).tolist()
        candidate = frozenset(shared + fresh)
        if candidate not in option_sets:
            option_sets.append(candidate)
    correct = int(rng.integers(spec.option_count))
    wrong = option_sets[1:]
    ordered = wrong[:correct] + [target_set] + wrong[correct:]

    question = QuestionInstance(
        text="Which group of things takes part in the event that decides the outcome?",
        options=[", ".join(sorted(s)) for s in ordered],
        option_elements=ordered,
        correct_index=correct,
        question_feature=_embed(target, table),
    )
    truth = GroundTruth(
        necessary_indices=frozenset(necessary),
        distractor_indices=frozenset(distractors),
        target_elements=target_set,
    )
    return frames, question, truth


def generate_episode(spec: SyntheticSpec, episode_seed: int) -> Episode:
    """Build one episode; identical ``(spec, episode_seed)`` gives identical output.

    Draws that fail the distractor-trap property are redrawn from the next
    attempt sub-stream; the number of redraws is kept on the episode.
    """
    spec.validate()
    if not 0 <= episode_seed < 2**64:
        raise ConfigError("episode_seed must be a 64-bit unsigned integer")
    table = element_vectors(spec)
    for attempt in range(_MAX_REGENERATIONS):
        rng = np.random.default_rng([spec.master_seed, _EPISODE_STREAM, episode_seed, attempt])
        frames, question, truth = _draw_episode(spec, rng, table)
        if spec.distractor_count == 0 or _has_distractor_trap(frames, question.question_feature, truth):
            return Episode(
                episode_id=f"syn-{episode_seed}",
                frames=frames,
                question=question,
                truth=truth,
                seed=episode_seed,
                regenerations=attempt,
            )
    raise ConfigError(f"could not satisfy the distractor trap after {_MAX_REGENERATIONS} attempts")


def generate_dataset(spec: SyntheticSpec, count: int, split: str = "train") -> list[Episode]:
    """``count`` episodes whose seeds are derived from the master seed and split name."""
    return [generate_episode(spec, episode_seed_for(spec, split, n)) for n in range(count)]


def episode_seed_for(spec: SyntheticSpec, split: str, n: int) -> int:
    split_tag = int.from_bytes(split.encode()[:8].ljust(8, b"\0"), "little")
    ss = np.random.SeedSequence([spec.master_seed, split_tag, n])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def coverage(selected: Iterable[int], truth: GroundTruth) -> tuple[int, int]:
    """(hits, necessary_count) of a selection."""
    return len(set(selected) & truth.necessary_indices), len(truth.necessary_indices)


def synthetic_option_logits(
    selected: Iterable[int], truth: GroundTruth, question: QuestionInstance, spec: SyntheticSpec
) -> np.ndarray:
    hits, c = coverage(selected, truth)
    logits = np.full(question.option_count, spec.distractor_logit, dtype=np.float64)
    full = 1.0 if hits == c else 0.0
    logits[question.correct_index] = spec.full_coverage_bonus * full + spec.coverage_slope * (hits / c)
    return logits


def argmax_option(logits: np.ndarray) -> int:
    """Highest-logit option; ties go to the lowest index."""
    return int(np.argmax(logits))


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - np.max(x))
    return e / e.sum()


@dataclass(frozen=True)
class SubsetRow:
    subset: tuple[int, ...]
    r_ans: int
    correct_probability: float


def brute_force_subset_table(
    frame_indices: Sequence[int],
    truth: GroundTruth,
    question: QuestionInstance,
    spec: SyntheticSpec,
    k: int,
    max_subsets: int = 10**6,
) -> list[SubsetRow]:
    """Score every size-``k`` subset of the pool by enumeration.

    Rows are sorted by correct-option probability, descending, with ties in
    lexicographic subset order.
    """
    pool = sorted(int(i) for i in frame_indices)
    if not truth.necessary_indices:
        raise ConfigError("ground truth has no necessary frames")
    if not 1 <= k <= len(pool):
        raise InputError(f"k must be in [1, {len(pool)}], got {k}")
    if math.comb(len(pool), k) > max_subsets:
        raise InputError(f"C({len(pool)}, {k}) exceeds the enumeration bound {max_subsets}")
    rows = []
    for subset in itertools.combinations(pool, k):
        logits = synthetic_option_logits(subset, truth, question, spec)
        r_ans = int(argmax_option(logits) == question.correct_index)
        prob = float(_softmax(logits)[question.correct_index])
        rows.append(SubsetRow(subset, r_ans, prob))
    rows.sort(key=lambda r: (-r.correct_probability, r.subset))
    return rows


def write_episodes(episodes: Iterable[Episode], path: str | Path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for ep in episodes:
            fh.write(json.dumps(ep.to_json(), sort_keys=True) + "\n")
            n += 1
    return n


def read_episodes(path: str | Path) -> Iterator[Episode]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield Episode.from_json(json.loads(line))
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise InputError(f"{path}:{lineno}: malformed episode record ({exc})") from exc
