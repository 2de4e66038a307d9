"""Candidate pool construction: target elements, detection, pre-selection."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import InputError
from .records import Episode, FrameRecord, QuestionInstance

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.7
EXTRACTION_FRAMES = 8

# (frame, elements) -> max detection confidence of any element in the frame
Detector = Callable[[FrameRecord, frozenset], float]


def normalize_elements(raw: Iterable[str]) -> frozenset[str]:
    """Lowercase, strip, drop empties and duplicates."""
    out = set()
    for item in raw:
        name = " ".join(str(item).split()).lower()
        if name:
            out.add(name)
    return frozenset(out)


_LIST_MARKER = re.compile(r"^\s*(?:(?:[-*\u2022]+|\(?\d+[.)]|\(?[a-z][.)](?=\s))\s*)+")


def parse_elements(text: str) -> frozenset[str]:
    """Element set from a free-text list ("1. dog\n2. red ball", "dog, ball")."""
    items = []
    for chunk in re.split(r"[,;\n]", text or ""):
        chunk = _LIST_MARKER.sub("", chunk).strip().strip(".:\"'`")
        items.append(chunk)
    return normalize_elements(items)


@dataclass(frozen=True)
class Detection:
    frame_index: int
    element: str
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise InputError(f"detection confidence {self.confidence} outside [0, 1]")


@dataclass
class CandidatePool:
    frames: list[FrameRecord]
    detection_scores: list[float]
    question: Optional[QuestionInstance] = None
    fallback: bool = False

    def __post_init__(self):
        if not self.frames:
            raise InputError("candidate pool must not be empty")
        idx = [f.index for f in self.frames]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise InputError("pool frames must be in strictly increasing temporal order")

    @property
    def indices(self) -> list[int]:
        return [f.index for f in self.frames]

    def __len__(self) -> int:
        return len(self.frames)

    def features(self) -> np.ndarray:
        return np.stack([f.feature for f in self.frames])


def uniform_indices(total: int, count: int) -> list[int]:
    """``count`` evenly spaced positions in ``range(total)`` (stride total/count)."""
    if count >= total:
        return list(range(total))
    return [int(i * total // count) for i in range(count)]


def tag_detector(frame: FrameRecord, elements: frozenset) -> float:
    """Synthetic detector: reads confidences straight from the frame's tags."""
    return max((frame.element_tags.get(e, 0.0) for e in elements), default=0.0)


class DetectionTable:
    """Detector backed by precomputed detections (e.g. loaded from a file)."""

    def __init__(self, detections: Iterable[Detection]):
        self._conf: dict[tuple[int, str], float] = {}
        for d in detections:
            key = (d.frame_index, " ".join(d.element.split()).lower())
            self._conf[key] = max(self._conf.get(key, 0.0), d.confidence)

    def __call__(self, frame: FrameRecord, elements: frozenset) -> float:
        return max((self._conf.get((frame.index, e), 0.0) for e in elements), default=0.0)


def extract_target_elements(oracle, episode: Episode) -> frozenset[str]:
    """Ask the oracle which visual elements the question is about.

    The oracle sees ``min(8, len(video))`` uniformly spaced frames.
    """
    from .oracles.base import OracleRequest, RequestKind

    if not episode.frames:
        raise InputError(f"episode {episode.episode_id}: video has no frames")
    picks = uniform_indices(len(episode.frames), EXTRACTION_FRAMES)
    request = OracleRequest(
        kind=RequestKind.ELEMENTS_FROM_QUESTION,
        episode=episode,
        frame_indices=tuple(episode.frames[i].index for i in picks),
    )
    reply = oracle.query(request)
    return normalize_elements(reply.elements if reply.elements is not None else [])


def build_pool(
    frames: Sequence[FrameRecord],
    elements: frozenset[str],
    m: int,
    threshold: float = DEFAULT_THRESHOLD,
    detector: Detector = tag_detector,
    question: Optional[QuestionInstance] = None,
) -> CandidatePool:
    """Keep frames whose detection score clears ``threshold``; at most ``m``.

    Overflow keeps the top-``m`` by score (earlier frame wins a tie). With
    no qualifying frame, ``m`` uniformly spaced frames are used instead.
    """
    if not frames:
        raise InputError("cannot build a pool from an empty video")
    if m < 1:
        raise InputError(f"pool size must be >= 1, got {m}")
    if not 0.0 <= threshold <= 1.0:
        raise InputError(f"threshold must be in [0, 1], got {threshold}")

    scores = [float(detector(f, elements)) if elements else 0.0 for f in frames]
    qualifying = [i for i, s in enumerate(scores) if s >= threshold]
    fallback = False
    if not qualifying or not elements:
        log.warning("no frame passed detection threshold %.2f; using uniform fallback", threshold)
        keep = uniform_indices(len(frames), m)
        fallback = True
    else:
        qualifying.sort(key=lambda i: (-scores[i], frames[i].index))
        keep = qualifying[:m]
    keep.sort(key=lambda i: frames[i].index)
    return CandidatePool(
        frames=[frames[i] for i in keep],
        detection_scores=[scores[i] for i in keep],
        question=question,
        fallback=fallback,
    )


def pool_for_episode(
    episode: Episode, elements: frozenset[str], m: int, threshold: float = DEFAULT_THRESHOLD,
    detector: Detector = tag_detector,
) -> CandidatePool:
    return build_pool(episode.frames, elements, m, threshold, detector, episode.question)


# -- precomputed features for real videos ------------------------------------


def write_feature_matrix(path: str | Path, features: np.ndarray, fps: float = 1.0) -> None:
    """Write ``<path>`` (little-endian float32, row-major) plus ``<path>.json``."""
    arr = np.ascontiguousarray(features, dtype="<f4")
    if arr.ndim != 2:
        raise InputError("feature matrix must be 2-D")
    path = Path(path)
    arr.tofile(path)
    sidecar = {"rows": int(arr.shape[0]), "dim": int(arr.shape[1]), "fps": float(fps)}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, sort_keys=True))


def read_feature_matrix(path: str | Path) -> tuple[np.ndarray, float]:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    try:
        rows, dim, fps = int(meta["rows"]), int(meta["dim"]), float(meta["fps"])
    except KeyError as exc:
        raise InputError(f"{path}.json: missing sidecar field {exc}") from exc
    data = np.fromfile(path, dtype="<f4")
    if data.size != rows * dim:
        raise InputError(f"{path}: expected {rows}x{dim} floats, found {data.size}")
    return data.reshape(rows, dim).astype(np.float64), fps


def read_detections(path: str | Path) -> list[Detection]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out.append(Detection(int(obj["frame_index"]), str(obj["element"]), float(obj["confidence"])))
            except (KeyError, ValueError, TypeError) as exc:
                raise InputError(f"{path}:{lineno}: malformed detection ({exc})") from exc
    return out


def frames_from_features(features: np.ndarray, fps: float = 1.0) -> list[FrameRecord]:
    """Frame records for a feature matrix; rows are subsampled to 1 fps."""
    step = max(int(round(fps)), 1)
    return [FrameRecord(index=i // step, feature=features[i]) for i in range(0, len(features), step)]
