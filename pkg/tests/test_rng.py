import numpy as np
import pytest

from signfed.rng import Purpose, client_stream, round_seed, stream


def test_streams_reproducible():
    a = stream(5, Purpose.SGD, 3, 2).random(4)
    b = stream(5, Purpose.SGD, 3, 2).random(4)
    np.testing.assert_array_equal(a, b)


def test_streams_distinct_per_key():
    keys = [(5, Purpose.SGD, 3, 2), (6, Purpose.SGD, 3, 2), (5, Purpose.SIGN, 3, 2),
            (5, Purpose.SGD, 4, 2), (5, Purpose.SGD, 3, 3)]
    draws = {tuple(stream(*k).integers(0, 2**62, 3)) for k in keys}
    assert len(draws) == len(keys)


def test_client_stream_offsets_server():
    np.testing.assert_array_equal(client_stream(1, Purpose.NOISE, 2, 0).random(3),
                                  stream(1, Purpose.NOISE, 2, 1).random(3))


def test_round_seed():
    assert round_seed(1, 2) == round_seed(1, 2)
    assert round_seed(1, 2) != round_seed(1, 3)
    assert 0 <= round_seed(1, 2) < 2**64


def test_negative_keys_rejected():
    with pytest.raises(ValueError):
        stream(-1, Purpose.INIT)
