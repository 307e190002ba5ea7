import numpy as np
import pytest

from rate_index import RateIndex, fenwick_add, fenwick_build, fenwick_find


def _pick(index: RateIndex, u: float) -> int:
    return int(fenwick_find(index.tree, index.weights, u * index.total))


def _set(index: RateIndex, i: int, w: float) -> None:
    delta = w - index.weights[i]
    index.weights[i] = w
    fenwick_add(index.tree, i, delta)
    index.total += delta


def test_find_inverts_cumulative_rates():
    index = RateIndex(np.array([1.0, 0.0, 2.0, 1.0]))
    assert index.total == 4.0
    assert [_pick(index, u) for u in (0.0, 0.2, 0.25, 0.3, 0.74, 0.8, 0.999)] == [0, 0, 2, 2, 2, 3, 3]


def test_find_never_lands_on_empty_site():
    index = RateIndex(np.array([0.0, 0.0, 1.0, 0.0, 0.0]))
    assert {_pick(index, u) for u in np.linspace(0.0, 0.999, 50)} == {2}
    # a total that overshoots the tree still ends on the live site
    assert int(fenwick_find(index.tree, index.weights, 1.5)) == 2


def test_find_frequencies_follow_weights():
    weights = np.array([0.5, 3.0, 0.0, 1.5, 5.0])
    index = RateIndex(weights)
    u = np.random.default_rng(11).random(40_000)
    counts = np.bincount([_pick(index, v) for v in u], minlength=5)
    np.testing.assert_allclose(counts / u.size, weights / weights.sum(), atol=0.01)
    assert counts[2] == 0


def test_add_keeps_tree_consistent():
    index = RateIndex(np.ones(13))
    for i, w in [(0, 4.0), (7, 0.0), (12, 2.5), (7, 1.25)]:
        _set(index, i, w)
    np.testing.assert_allclose(index.tree, fenwick_build(index.weights))
    assert index.total == pytest.approx(index.exact_total())


def test_rebuild_removes_drift():
    rng = np.random.default_rng(5)
    index = RateIndex(rng.random(64))
    for _ in range(5_000):
        _set(index, int(rng.integers(64)), float(rng.random() * 1e3))
    index.since_rebuild = 5_000
    drift = index.rebuild()
    assert drift < 1e-9
    assert index.total == index.exact_total()
    assert index.since_rebuild == 0


def test_weights_are_copied():
    weights = np.ones(4)
    index = RateIndex(weights)
    _set(index, 0, 3.0)
    assert weights[0] == 1.0


def test_invalid_rates():
    with pytest.raises(ValueError):
        RateIndex(np.array([1.0, -0.5]))
