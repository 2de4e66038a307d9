"""Oracle that answers from an episode's planted ground truth."""

from __future__ import annotations

from ..errors import InputError
from ..rewards import parse_option
from ..synthetic_env import OPTION_LETTERS, SyntheticSpec, argmax_option, synthetic_option_logits
from .base import OracleReply, OracleRequest, RequestKind


class SyntheticOracle:
    """Pure function of (request, ground truth, spec)."""

    backend_id = "synthetic"

    def __init__(self, spec: SyntheticSpec):
        self.spec = spec

    def query(self, request: OracleRequest) -> OracleReply:
        episode = request.episode
        truth = episode.truth
        if truth is None:
            raise InputError(f"episode {episode.episode_id} has no ground truth for the synthetic oracle")
        question = episode.question
        kind = request.kind
        if kind in (RequestKind.ANSWER, RequestKind.LOGITS):
            logits = synthetic_option_logits(request.frame_indices, truth, question, self.spec)
            letter = OPTION_LETTERS[argmax_option(logits)]
            return OracleReply(text=letter, logits=logits, backend=self.backend_id)
        if kind is RequestKind.ELEMENTS_FROM_QUESTION:
            elements = truth.target_elements
        else:
            chosen = parse_option(request.answer_text or "", question)
            elements = frozenset() if chosen is None else question.option_elements[chosen]
        return OracleReply(text=", ".join(sorted(elements)), elements=frozenset(elements), backend=self.backend_id)
