"""Request/reply records shared by every oracle backend."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Protocol

import numpy as np

from ..errors import InputError, KeyframeError
from ..records import Episode


class OracleError(KeyframeError):
    """The oracle could not produce a reply."""

    def __init__(self, message: str, episode_id=None):
        if episode_id is not None:
            message = f"{message} (episode {episode_id})"
        super().__init__(message)
        self.episode_id = episode_id


class RequestKind(str, enum.Enum):
    ANSWER = "answer"
    LOGITS = "logits"
    ELEMENTS_FROM_QUESTION = "elements_from_question"
    ELEMENTS_FROM_ANSWER = "elements_from_answer"


@dataclass(frozen=True)
class OracleRequest:
    """One oracle call. ``frame_indices`` are video frame indices, temporally sorted."""

    kind: RequestKind
    episode: Episode
    frame_indices: tuple[int, ...] = ()
    answer_text: Optional[str] = None
    temperature: float = 0.0

    def __post_init__(self):
        if self.temperature < 0:
            raise InputError("decode temperature must be >= 0")
        if self.kind is RequestKind.ELEMENTS_FROM_ANSWER:
            if self.frame_indices:
                raise InputError("elements_from_answer requests must not carry frames")
            if self.answer_text is None:
                raise InputError("elements_from_answer requests need answer_text")
        elif not self.frame_indices:
            raise InputError(f"{self.kind.value} requests need at least one frame")

    def frames(self):
        by_index = {f.index: f for f in self.episode.frames}
        return [by_index[i] for i in self.frame_indices]


@dataclass
class OracleReply:
    text: str = ""
    logits: Optional[np.ndarray] = None
    elements: Optional[frozenset[str]] = None
    latency_ms: float = 0.0
    backend: str = ""
    approximate_logits: bool = False
    request_id: Optional[str] = None

    def __post_init__(self):
        if self.logits is not None:
            self.logits = np.asarray(self.logits, dtype=np.float64)
            if not np.all(np.isfinite(self.logits)):
                raise InputError("oracle logits must be finite")


class Oracle(Protocol):
    backend_id: str

    def query(self, request: OracleRequest) -> OracleReply: ...
