"""Plain data records passed between modules."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InputError


@dataclass
class FrameRecord:
    """One frame of a video, sampled at 1 fps.

    ``element_tags`` maps element id to detection confidence and is only
    populated for synthetic videos. ``image_path`` points at real media when
    available and is used by the HTTP oracle to attach images.
    """

    index: int
    feature: np.ndarray
    element_tags: dict[str, float] = field(default_factory=dict)
    image_path: Optional[str] = None

    def __post_init__(self):
        self.feature = np.asarray(self.feature, dtype=np.float64)
        if self.index < 0:
            raise InputError(f"frame index must be >= 0, got {self.index}")
        if self.feature.ndim != 1 or not np.all(np.isfinite(self.feature)):
            raise InputError(f"frame {self.index}: feature must be a finite vector")
        for name, conf in self.element_tags.items():
            if not 0.0 <= conf <= 1.0:
                raise InputError(f"frame {self.index}: confidence for {name!r} outside [0, 1]")

    def to_json(self) -> dict:
        out = {
            "index": self.index,
            "feature": [float(v) for v in self.feature],
            "element_tags": [[k, float(v)] for k, v in self.element_tags.items()],
        }
        if self.image_path is not None:
            out["image_path"] = self.image_path
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "FrameRecord":
        return cls(
            index=int(obj["index"]),
            feature=np.asarray(obj["feature"], dtype=np.float64),
            element_tags={k: float(v) for k, v in obj.get("element_tags", [])},
            image_path=obj.get("image_path"),
        )


@dataclass
class QuestionInstance:
    text: str
    options: list[str]
    option_elements: list[frozenset[str]]
    correct_index: int
    question_feature: np.ndarray

    def __post_init__(self):
        self.question_feature = np.asarray(self.question_feature, dtype=np.float64)
        self.option_elements = [frozenset(e) for e in self.option_elements]
        if len(self.options) < 2:
            raise InputError("a question needs at least two options")
        if len(self.option_elements) != len(self.options):
            raise InputError("option_elements must have one entry per option")
        if not 0 <= self.correct_index < len(self.options):
            raise InputError(f"correct_index {self.correct_index} out of range")
        if not np.all(np.isfinite(self.question_feature)):
            raise InputError("question_feature must be finite")

    @property
    def option_count(self) -> int:
        return len(self.options)

    def to_json(self) -> dict:
        return {
            "text": self.text,
            "options": list(self.options),
            "option_elements": [sorted(e) for e in self.option_elements],
            "correct_index": self.correct_index,
            "question_feature": [float(v) for v in self.question_feature],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "QuestionInstance":
        return cls(
            text=obj["text"],
            options=list(obj["options"]),
            option_elements=[frozenset(e) for e in obj["option_elements"]],
            correct_index=int(obj["correct_index"]),
            question_feature=np.asarray(obj["question_feature"], dtype=np.float64),
        )


@dataclass
class GroundTruth:
    """Planted causal structure of a synthetic episode."""

    necessary_indices: frozenset[int]
    distractor_indices: frozenset[int]
    target_elements: frozenset[str]

    def __post_init__(self):
        self.necessary_indices = frozenset(int(i) for i in self.necessary_indices)
        self.distractor_indices = frozenset(int(i) for i in self.distractor_indices)
        self.target_elements = frozenset(self.target_elements)
        if not self.necessary_indices:
            raise InputError("ground truth needs at least one necessary frame")
        if self.necessary_indices & self.distractor_indices:
            raise InputError("necessary and distractor frames overlap")

    def to_json(self) -> dict:
        return {
            "necessary_indices": sorted(self.necessary_indices),
            "distractor_indices": sorted(self.distractor_indices),
            "target_elements": sorted(self.target_elements),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GroundTruth":
        return cls(
            necessary_indices=frozenset(obj["necessary_indices"]),
            distractor_indices=frozenset(obj["distractor_indices"]),
            target_elements=frozenset(obj["target_elements"]),
        )


@dataclass
class Episode:
    """A video-question pair, with ground truth when it is synthetic."""

    episode_id: str
    frames: list[FrameRecord]
    question: QuestionInstance
    truth: Optional[GroundTruth] = None
    seed: Optional[int] = None
    regenerations: int = 0

    def to_json(self) -> dict:
        return {
            "schema_version": 1,
            "episode_id": self.episode_id,
            "seed": self.seed,
            "regenerations": self.regenerations,
            "frames": [f.to_json() for f in self.frames],
            "question": self.question.to_json(),
            "truth": None if self.truth is None else self.truth.to_json(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Episode":
        if obj.get("schema_version") != 1:
            raise InputError(f"unsupported episode schema {obj.get('schema_version')!r}")
        truth = obj.get("truth")
        return cls(
            episode_id=str(obj["episode_id"]),
            frames=[FrameRecord.from_json(f) for f in obj["frames"]],
            question=QuestionInstance.from_json(obj["question"]),
            truth=None if truth is None else GroundTruth.from_json(truth),
            seed=obj.get("seed"),
            regenerations=int(obj.get("regenerations", 0)),
        )
