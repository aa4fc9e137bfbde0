import numpy as np
import pytest

from sdgt.rng import RNG_VERSION, STREAMS, make_rng, stream_id


def test_same_key_same_draws():
    a = make_rng(3, "data", 1, 2).standard_normal(16)
    b = make_rng(3, "data", 1, 2).standard_normal(16)
    assert np.array_equal(a, b)


@pytest.mark.parametrize("other", [(4, "data", 1, 2), (3, "sampling", 1, 2), (3, "data", 1, 3), (3, "data", 1)])
def test_any_key_change_gives_new_stream(other):
    a = make_rng(3, "data", 1, 2).standard_normal(16)
    assert not np.array_equal(a, make_rng(*other).standard_normal(16))


def test_stream_ids_distinct():
    assert len({stream_id(s) for s in STREAMS}) == len(STREAMS)
    assert RNG_VERSION == 1


def test_philox_backend():
    assert isinstance(make_rng(0, "init").bit_generator, np.random.Philox)


def test_frozen_draw():
    # guards against silent changes to the key layout
    assert make_rng(0, "topology").integers(2**31) == 950282822
    np.testing.assert_array_equal(make_rng(0, "data").standard_normal(2),
                                  [0.009400985811206648, -0.2025023035986598])


def test_negative_seed_rejected():
    with pytest.raises(ValueError):
        make_rng(-1, "data")
