import numpy as np
import pytest

from rng import STREAM_DYNAMICS, STREAM_INITIAL, replica_rng, replica_rngs


def test_same_key_same_stream():
    a = replica_rng(42, 3, STREAM_DYNAMICS).random(8)
    b = replica_rng(42, 3, STREAM_DYNAMICS).random(8)
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("other", [(43, 3, STREAM_DYNAMICS), (42, 4, STREAM_DYNAMICS), (42, 3, STREAM_INITIAL)])
def test_distinct_keys_give_distinct_streams(other):
    a = replica_rng(42, 3, STREAM_DYNAMICS).random(8)
    b = replica_rng(*other).random(8)
    assert not np.array_equal(a, b)


def test_replica_list_matches_single_draws():
    rngs = replica_rngs(7, 4)
    assert len(rngs) == 4
    np.testing.assert_array_equal(rngs[2].random(5), replica_rng(7, 2).random(5))


def test_negative_keys_rejected():
    with pytest.raises(ValueError):
        replica_rng(-1)
    with pytest.raises(ValueError):
        replica_rng(1, -2)
