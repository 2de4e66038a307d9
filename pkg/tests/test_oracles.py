import base64
import math
import time

import numpy as np
import pytest

from causal_keyframe.errors import InputError
from causal_keyframe.oracles import OracleRequest, RequestKind, SyntheticOracle
from causal_keyframe.oracles.http import (
    TOKEN_ENV,
    EndpointConfig,
    HttpOracle,
    OracleParseError,
    OracleStatusError,
    OracleTimeoutError,
    OracleTransportError,
    extract_option_logits,
)
from causal_keyframe.records import FrameRecord
from causal_keyframe.trainer import HttpSettings

from stub_server import StubServer


@pytest.fixture
def stub():
    with StubServer() as server:
        yield server


def make_oracle(stub, **overrides):
    options = dict(base_url=stub.base_url, model="stub-model", api_key="secret", timeout_s=2.0, backoff_s=0.01)
    options.update(overrides)
    return HttpOracle(EndpointConfig(**options))


def request(episode, kind, frames=(0, 1), answer_text=None):
    if kind is RequestKind.ELEMENTS_FROM_ANSWER:
        frames = ()
    return OracleRequest(kind=kind, episode=episode, frame_indices=tuple(frames), answer_text=answer_text)


# -- request records -------------------------------------------------------------


def test_request_invariants(small_episode):
    with pytest.raises(InputError):
        OracleRequest(RequestKind.ELEMENTS_FROM_ANSWER, small_episode, (0,), answer_text="A")
    with pytest.raises(InputError):
        OracleRequest(RequestKind.ELEMENTS_FROM_ANSWER, small_episode)
    with pytest.raises(InputError):
        OracleRequest(RequestKind.ANSWER, small_episode)
    with pytest.raises(InputError):
        OracleRequest(RequestKind.ANSWER, small_episode, (0,), temperature=-1)
    assert OracleRequest(RequestKind.ANSWER, small_episode, (0,)).temperature == 0.0


# -- synthetic backend ---------------------------------------------------------------


def test_synthetic_answers(small_spec, small_episode):
    oracle = SyntheticOracle(small_spec)
    t, q = small_episode.truth, small_episode.question
    full = oracle.query(request(small_episode, RequestKind.ANSWER, sorted(t.necessary_indices)))
    assert full.text == "ABCDE"[q.correct_index]
    assert len(full.logits) == q.option_count
    partial = oracle.query(request(small_episode, RequestKind.ANSWER, sorted(t.necessary_indices)[:1]))
    assert partial.text == ("A" if q.correct_index != 0 else "B")
    els = oracle.query(request(small_episode, RequestKind.ELEMENTS_FROM_QUESTION))
    assert els.elements == t.target_elements
    back = oracle.query(request(small_episode, RequestKind.ELEMENTS_FROM_ANSWER, answer_text=full.text))
    assert back.elements == q.option_elements[q.correct_index]


def test_synthetic_is_pure(small_spec, small_episode):
    oracle = SyntheticOracle(small_spec)
    r = request(small_episode, RequestKind.LOGITS, (0, 3))
    a, b = oracle.query(r), oracle.query(r)
    assert a.text == b.text and np.array_equal(a.logits, b.logits)


# -- HTTP backend ----------------------------------------------------------------------


def test_answer_round_trip(stub, small_episode):
    with make_oracle(stub) as oracle:
        reply = oracle.query(request(small_episode, RequestKind.ANSWER))
    assert reply.text == "The answer is (B)."
    assert reply.backend == "http" and reply.latency_ms >= 0 and reply.request_id
    body, headers = stub.state.requests[0], stub.state.headers[0]
    assert body["model"] == "stub-model"
    assert body["temperature"] == 0.0
    assert body["messages"][0]["role"] == "user"
    assert "logprobs" not in body
    assert headers["Authorization"] == "Bearer secret"
    assert headers["X-Oracle-Kind"] == "answer"
    prompt = body["messages"][0]["content"][0]["text"]
    assert small_episode.question.text in prompt and "(A)" in prompt


def test_logits_with_logprobs(stub, small_episode):
    with make_oracle(stub) as oracle:
        reply = oracle.query(request(small_episode, RequestKind.LOGITS))
    assert stub.state.requests[0]["logprobs"] is True
    assert not reply.approximate_logits
    n = small_episode.question.option_count
    p = np.exp(np.array([-1.9, -0.2, -3.0]))
    p /= p.sum()
    expected = np.full(n, 1e-8)
    expected[:3] = p
    expected /= expected.sum()
    np.testing.assert_allclose(reply.logits, np.log(expected), atol=1e-9)
    assert abs(np.exp(reply.logits).sum() - 1) < 1e-9
    assert np.argmax(reply.logits) == 1


def test_logits_fallback_without_logprobs(stub, small_episode):
    stub.state.mode = "no_logprobs"
    with make_oracle(stub) as oracle:
        reply = oracle.query(request(small_episode, RequestKind.LOGITS))
    assert reply.approximate_logits
    np.testing.assert_array_equal(reply.logits, [0, 1, 0, 0, 0][: small_episode.question.option_count])


def test_element_kinds_round_trip(stub, small_episode):
    with make_oracle(stub) as oracle:
        q = oracle.query(request(small_episode, RequestKind.ELEMENTS_FROM_QUESTION))
        a = oracle.query(request(small_episode, RequestKind.ELEMENTS_FROM_ANSWER, answer_text="(B)"))
    assert q.elements == a.elements == frozenset({"dog", "red ball"})
    assert stub.state.headers[1]["X-Oracle-Kind"] == "elements_from_answer"
    assert "(B)" in stub.state.requests[1]["messages"][0]["content"][0]["text"]


def test_timeout_is_distinct_and_not_retried(stub, small_episode):
    stub.state.delay_s = 1.0
    with make_oracle(stub, timeout_s=0.2) as oracle:
        with pytest.raises(OracleTimeoutError):
            oracle.query(request(small_episode, RequestKind.ANSWER))
    assert len(stub.state.requests) == 1


def test_transport_errors_are_retried(stub, small_episode):
    stub.state.mode = "flaky"
    stub.state.failures_left = 2
    with make_oracle(stub, max_retries=2) as oracle:
        reply = oracle.query(request(small_episode, RequestKind.ANSWER))
    assert reply.text == "The answer is (B)."
    assert len(stub.state.requests) == 3


def test_retries_are_bounded(stub, small_episode):
    stub.state.mode = "drop"
    with make_oracle(stub, max_retries=2) as oracle:
        with pytest.raises(OracleTransportError):
            oracle.query(request(small_episode, RequestKind.ANSWER))
    assert len(stub.state.requests) == 3


def test_backoff_grows_exponentially(stub, small_episode):
    stub.state.mode = "drop"
    started = time.perf_counter()
    with make_oracle(stub, max_retries=2, backoff_s=0.1) as oracle:
        with pytest.raises(OracleTransportError):
            oracle.query(request(small_episode, RequestKind.ANSWER))
    assert time.perf_counter() - started >= 0.1 + 0.2


def test_status_error_not_retried(stub, small_episode):
    stub.state.mode = "status500"
    with make_oracle(stub) as oracle:
        with pytest.raises(OracleStatusError) as info:
            oracle.query(request(small_episode, RequestKind.ANSWER))
    assert info.value.status == 500
    assert len(stub.state.requests) == 1


def test_unparseable_body(stub, small_episode):
    stub.state.mode = "garbage"
    with make_oracle(stub) as oracle:
        with pytest.raises(OracleParseError):
            oracle.query(request(small_episode, RequestKind.ANSWER))


def test_connection_refused_is_transport_error(small_episode):
    config = EndpointConfig(base_url="http://127.0.0.1:9/v1", model="m", max_retries=1, backoff_s=0.01)
    with HttpOracle(config) as oracle:
        with pytest.raises(OracleTransportError):
            oracle.query(request(small_episode, RequestKind.ANSWER))


def test_in_flight_limit(stub, small_episode):
    from concurrent.futures import ThreadPoolExecutor

    stub.state.delay_s = 0.2
    with make_oracle(stub, max_in_flight=2) as oracle:
        with ThreadPoolExecutor(max_workers=6) as ex:
            replies = list(ex.map(lambda _: oracle.query(request(small_episode, RequestKind.ANSWER)), range(6)))
    assert len({r.request_id for r in replies}) == 6
    assert stub.state.max_in_flight <= 2


def test_rate_limit_spacing(stub, small_episode):
    with make_oracle(stub, min_interval_s=0.1) as oracle:
        started = time.perf_counter()
        for _ in range(3):
            oracle.query(request(small_episode, RequestKind.ANSWER))
    assert time.perf_counter() - started >= 0.2


def test_images_attached_as_base64(stub, small_episode, tmp_path):
    img = tmp_path / "f0.png"
    img.write_bytes(b"\x89PNG fake")
    small_episode.frames[0] = FrameRecord(0, small_episode.frames[0].feature, {}, image_path=str(img))
    with make_oracle(stub) as oracle:
        oracle.query(request(small_episode, RequestKind.ANSWER, (0, 1)))
    parts = stub.state.requests[0]["messages"][0]["content"]
    images = [p for p in parts if p["type"] == "image_url"]
    assert len(images) == 1
    url = images[0]["image_url"]["url"]
    assert url.startswith("data:image/png;base64,")
    assert base64.b64decode(url.split(",", 1)[1]) == b"\x89PNG fake"


def test_token_env_override(monkeypatch):
    monkeypatch.setenv(TOKEN_ENV, "from-env")
    cfg = EndpointConfig.from_settings(HttpSettings(api_key="from-file"), groups=4)
    assert cfg.api_key == "from-env" and cfg.max_in_flight == 4
    monkeypatch.delenv(TOKEN_ENV)
    assert EndpointConfig.from_settings(HttpSettings(api_key="from-file")).api_key == "from-file"


def test_extract_option_logits_edge_cases():
    assert extract_option_logits(None, 3) is None
    assert extract_option_logits({"content": [{"token": "hello", "logprob": -0.1}]}, 3) is None
    z = extract_option_logits({"content": [{"token": "C", "logprob": math.log(0.5), "top_logprobs": []}]}, 3)
    assert np.argmax(z) == 2 and abs(np.exp(z).sum() - 1) < 1e-9
