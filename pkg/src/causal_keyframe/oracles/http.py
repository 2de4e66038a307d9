"""Oracle client for OpenAI-compatible chat-completions endpoints.

Templates live in ``prompts/<kind>.txt`` and use ``string.Template``
placeholders:

    $question      question text
    $options       one "(A) text" line per option
    $frame_count   number of attached frames
    $timestamps    comma-separated frame times, e.g. "3s, 7s"
    $answer        the answer being explained (elements_from_answer only)

``logits`` requests render the ``answer`` template and additionally ask for
per-token log-probabilities.
"""

from __future__ import annotations

import base64
import dataclasses
import logging
import math
import mimetypes
import os
import string
import threading
import time
import uuid
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import httpx
import numpy as np

from ..errors import InputError
from ..pool import parse_elements
from ..rewards import parse_option
from ..synthetic_env import OPTION_LETTERS
from .base import OracleError, OracleReply, OracleRequest, RequestKind

log = logging.getLogger(__name__)

TOKEN_ENV = "CAUSAL_KEYFRAME_API_KEY"
PROMPTS_DIR = Path(__file__).parent / "prompts"
LOGPROB_FLOOR = 1e-8


class HttpOracleError(OracleError):
    pass


class OracleTransportError(HttpOracleError):
    """Connection could not be made or was dropped."""


class OracleStatusError(HttpOracleError):
    def __init__(self, status: int, body: str, episode_id=None):
        super().__init__(f"endpoint returned HTTP {status}: {body[:200]}", episode_id)
        self.status = status


class OracleTimeoutError(HttpOracleError):
    pass


class OracleParseError(HttpOracleError):
    """The reply body did not follow the chat-completions schema."""


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model: str
    api_key: Optional[str] = None
    timeout_s: float = 60.0
    max_retries: int = 2
    backoff_s: float = 0.5
    max_in_flight: int = 4
    min_interval_s: float = 0.0
    top_logprobs: int = 20
    templates_dir: Optional[str] = None

    def __post_init__(self):
        if self.timeout_s <= 0 or self.max_retries < 0 or self.max_in_flight < 1:
            raise InputError("invalid endpoint configuration")

    @classmethod
    def from_settings(cls, settings, groups: int = 4) -> "EndpointConfig":
        """Build from trainer settings; the token env var wins over the file."""
        fields = {f.name for f in dataclasses.fields(cls)}
        values = {k: v for k, v in dataclasses.asdict(settings).items() if k in fields}
        values["api_key"] = os.environ.get(TOKEN_ENV) or values.get("api_key")
        if values.get("max_in_flight") is None:
            values["max_in_flight"] = groups
        return cls(**values)


def load_templates(directory: Optional[str | Path] = None) -> dict[str, string.Template]:
    directory = Path(directory) if directory else PROMPTS_DIR
    out = {}
    for name in ("elements_from_question", "answer", "elements_from_answer"):
        path = directory / f"{name}.txt"
        if not path.exists():
            raise InputError(f"missing prompt template {path}")
        out[name] = string.Template(path.read_text(encoding="utf-8"))
    return out


def _encode_image(path: str) -> dict:
    mime = mimetypes.guess_type(path)[0] or "image/jpeg"
    data = base64.b64encode(Path(path).read_bytes()).decode("ascii")
    return {"type": "image_url", "image_url": {"url": f"data:{mime};base64,{data}"}}


def build_messages(request: OracleRequest, templates: dict[str, string.Template]) -> list[dict]:
    question = request.episode.question
    frames = request.frames()
    name = "answer" if request.kind is RequestKind.LOGITS else request.kind.value
    text = templates[name].safe_substitute(
        question=question.text,
        options="\n".join(f"({OPTION_LETTERS[i]}) {opt}" for i, opt in enumerate(question.options)),
        frame_count=len(frames),
        timestamps=", ".join(f"{f.index}s" for f in frames),
        answer=request.answer_text or "",
    )
    content: list[dict] = [{"type": "text", "text": text}]
    content.extend(_encode_image(f.image_path) for f in frames if f.image_path)
    return [{"role": "user", "content": content}]


def _clean_token(token: str) -> str:
    return token.strip().strip("().[]:")


def extract_option_logits(logprobs: Any, option_count: int) -> Optional[np.ndarray]:
    """Log-probabilities of the option letters, renormalized over options.

    Uses the top-logprob list of the first generated token that is an option
    letter. Returns None when the reply carries no usable log-probabilities.
    """
    if not isinstance(logprobs, dict):
        return None
    content = logprobs.get("content") or []
    letters = tuple(OPTION_LETTERS[:option_count])
    for entry in content:
        if _clean_token(str(entry.get("token", ""))) not in letters:
            continue
        probs = np.zeros(option_count)
        candidates = list(entry.get("top_logprobs") or []) + [entry]
        for cand in candidates:
            tok = _clean_token(str(cand.get("token", "")))
            lp = cand.get("logprob")
            if tok in letters and isinstance(lp, (int, float)) and math.isfinite(lp):
                i = letters.index(tok)
                probs[i] = max(probs[i], math.exp(lp))
        if probs.sum() <= 0:
            return None
        probs = np.maximum(probs / probs.sum(), LOGPROB_FLOOR)
        return np.log(probs / probs.sum())
    return None


def one_hot_logits(index: Optional[int], option_count: int) -> np.ndarray:
    z = np.zeros(option_count)
    if index is not None:
        z[index] = 1.0
    return z


class HttpOracle:
    """Thread-safe client; at most ``max_in_flight`` requests run at once."""

    backend_id = "http"

    def __init__(self, config: EndpointConfig, client: Optional[httpx.Client] = None):
        self.config = config
        self.templates = load_templates(config.templates_dir)
        self._client = client or httpx.Client(timeout=config.timeout_s)
        self._slots = threading.BoundedSemaphore(config.max_in_flight)
        self._rate_lock = threading.Lock()
        self._next_send = 0.0

    def close(self) -> None:
        self._client.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _wait_turn(self) -> None:
        if self.config.min_interval_s <= 0:
            return
        with self._rate_lock:
            now = time.monotonic()
            wait = self._next_send - now
            self._next_send = max(now, self._next_send) + self.config.min_interval_s
        if wait > 0:
            time.sleep(wait)

    def _headers(self, request_id: str, kind: RequestKind) -> dict:
        headers = {"Content-Type": "application/json", "X-Request-ID": request_id, "X-Oracle-Kind": kind.value}
        if self.config.api_key:
            headers["Authorization"] = f"Bearer {self.config.api_key}"
        return headers

    def payload(self, request: OracleRequest) -> dict:
        body = {
            "model": self.config.model,
            "messages": build_messages(request, self.templates),
            "temperature": request.temperature,
        }
        if request.kind is RequestKind.LOGITS:
            body["logprobs"] = True
            body["top_logprobs"] = self.config.top_logprobs
        return body

    def _post(self, body: dict, request_id: str, kind: RequestKind, episode_id) -> httpx.Response:
        url = self.config.base_url.rstrip("/") + "/chat/completions"
        attempt = 0
        while True:
            self._wait_turn()
            try:
                with self._slots:
                    return self._client.post(url, json=body, headers=self._headers(request_id, kind))
            except httpx.TimeoutException as exc:
                raise OracleTimeoutError(f"no reply within {self.config.timeout_s}s: {exc}", episode_id) from exc
            except httpx.TransportError as exc:
                if attempt >= self.config.max_retries:
                    raise OracleTransportError(f"transport failure after {attempt + 1} attempts: {exc}", episode_id) from exc
                delay = self.config.backoff_s * 2**attempt
                log.warning("request %s failed (%s); retrying in %.2fs", request_id, exc, delay)
                time.sleep(delay)
                attempt += 1

    def query(self, request: OracleRequest) -> OracleReply:
        episode = request.episode
        request_id = uuid.uuid4().hex
        started = time.perf_counter()
        response = self._post(self.payload(request), request_id, request.kind, episode.episode_id)
        latency = (time.perf_counter() - started) * 1000.0
        if not 200 <= response.status_code < 300:
            raise OracleStatusError(response.status_code, response.text, episode.episode_id)
        echoed = response.headers.get("X-Request-ID")
        if echoed is not None and echoed != request_id:
            raise OracleParseError(f"reply correlation id {echoed} does not match {request_id}", episode.episode_id)
        try:
            choice = response.json()["choices"][0]
            text = choice["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise OracleParseError(f"malformed chat-completions body: {exc}", episode.episode_id) from exc
        if not isinstance(text, str):
            raise OracleParseError("message content is not a string", episode.episode_id)

        elements, logits, approximate = None, None, False
        kind = request.kind
        if kind in (RequestKind.ELEMENTS_FROM_QUESTION, RequestKind.ELEMENTS_FROM_ANSWER):
            elements = parse_elements(text)
        elif kind is RequestKind.LOGITS:
            n = episode.question.option_count
            logits = extract_option_logits(choice.get("logprobs"), n)
            if logits is None:
                log.info("request %s: no option log-probabilities; using one-hot logits", request_id)
                logits = one_hot_logits(parse_option(text, episode.question), n)
                approximate = True
        log.debug("request %s kind=%s latency=%.1fms", request_id, kind.value, latency)
        return OracleReply(
            text=text.strip(),
            logits=logits,
            elements=elements,
            latency_ms=latency,
            backend=self.backend_id,
            approximate_logits=approximate,
            request_id=request_id,
        )
