import numpy as np
import pytest

from causal_keyframe.errors import InputError
from causal_keyframe.records import Episode, FrameRecord, GroundTruth, QuestionInstance


def test_frame_validation():
    with pytest.raises(InputError):
        FrameRecord(-1, np.zeros(2))
    with pytest.raises(InputError):
        FrameRecord(0, np.array([0.0, np.nan]))
    with pytest.raises(InputError):
        FrameRecord(0, np.zeros(2), {"a": 1.5})


def test_question_validation():
    with pytest.raises(InputError):
        QuestionInstance("q", ["only"], [set()], 0, np.zeros(2))
    with pytest.raises(InputError):
        QuestionInstance("q", ["a", "b"], [set(), set()], 2, np.zeros(2))
    with pytest.raises(InputError):
        QuestionInstance("q", ["a", "b"], [set()], 0, np.zeros(2))


def test_truth_validation():
    with pytest.raises(InputError):
        GroundTruth(frozenset({1}), frozenset({1}), frozenset())


def test_episode_round_trip(small_episode):
    back = Episode.from_json(small_episode.to_json())
    assert back.to_json() == small_episode.to_json()
    assert back.truth.necessary_indices == small_episode.truth.necessary_indices
    np.testing.assert_array_equal(back.frames[0].feature, small_episode.frames[0].feature)


def test_image_path_preserved():
    f = FrameRecord(3, np.ones(2), image_path="/tmp/x.jpg")
    assert FrameRecord.from_json(f.to_json()).image_path == "/tmp/x.jpg"
