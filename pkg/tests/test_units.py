import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unitbt import units as U
from unitbt.errors import ContractError, DegenerateInputError, DimensionError, EmptyInputError


def test_one_second_gives_fifty_frames():
    assert U.extract_frames(np.zeros(16000)).shape == (50, U.DEFAULT_FEATURE_DIM)


def test_partial_window_dropped():
    assert U.extract_frames(np.zeros(639)).shape[0] == 1


def test_constant_frame_mean():
    assert U.extract_frames(np.full(320, 0.37))[0, 0] == pytest.approx(0.37, abs=1e-15)


def test_short_waveform_rejected():
    with pytest.raises(EmptyInputError):
        U.extract_frames(np.zeros(319))


def test_extract_frames_deterministic(rng):
    x = rng.normal(size=3200)
    assert U.extract_frames(x).tobytes() == U.extract_frames(x.copy()).tobytes()


def test_kmeans_single_cluster_is_mean(rng):
    X = rng.normal(size=(40, 3))
    cb = U.kmeans_fit(X, 1)
    np.testing.assert_allclose(cb.centroids[0], X.mean(axis=0), atol=1e-12)


def test_kmeans_two_blobs(rng):
    a = rng.normal(-10, 0.5, size=(100, 2))
    b = rng.normal(10, 0.5, size=(100, 2))
    cb = U.kmeans_fit(np.vstack([a, b]), 2, seed=3)
    cents = sorted(cb.centroids.tolist())
    assert np.abs(np.array(cents[0]) - a.mean(axis=0)).max() < 0.1
    assert np.abs(np.array(cents[1]) - b.mean(axis=0)).max() < 0.1


@pytest.mark.parametrize("seed", range(20))
def test_kmeans_inertia_non_increasing(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(60, 4)) + rng.integers(0, 3, size=(60, 1)) * 3
    hist: list[float] = []
    U.kmeans_fit(X, 5, iters=30, seed=seed, history=hist)
    assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))


def test_kmeans_deterministic(rng):
    X = rng.normal(size=(80, 5))
    a = U.kmeans_fit(X, 6, seed=11)
    b = U.kmeans_fit(X, 6, seed=11)
    assert a.centroids.tobytes() == b.centroids.tobytes()


def test_kmeans_too_few_distinct_frames():
    X = np.array([[0.0, 1.0]] * 5 + [[2.0, 3.0]] * 5)
    with pytest.raises(DegenerateInputError):
        U.kmeans_fit(X, 3)


def test_quantize_centroid_maps_to_itself(rng):
    cb = U.KMeansCodebook(rng.normal(size=(10, 4)))
    assert U.quantize(cb.centroids[7], cb)[0] == 7


def test_quantize_tie_goes_to_lowest_index():
    cb = U.KMeansCodebook(np.array([[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]]))
    assert U.quantize(np.array([[0.0, 0.0], [1.0, 0.0]]), cb).tolist() == [0, 0]


def test_quantize_fixed_point(rng):
    cb = U.KMeansCodebook(rng.normal(size=(6, 3)))
    z = U.quantize(rng.normal(size=(50, 3)), cb)
    np.testing.assert_array_equal(U.quantize(cb.centroids[z], cb), z)


def test_quantize_matches_brute_force(rng):
    cb = U.KMeansCodebook(rng.normal(size=(9, 5)))
    F = rng.normal(size=(200, 5))
    expect = [min(range(9), key=lambda k: (float(np.sum((f - cb.centroids[k]) ** 2)), k)) for f in F]
    z = U.quantize(F, cb)
    assert z.tolist() == expect
    assert z.max() < cb.K


def test_quantize_dim_mismatch(rng):
    with pytest.raises(DimensionError):
        U.quantize(rng.normal(size=(3, 4)), U.KMeansCodebook(rng.normal(size=(2, 5))))
    assert issubclass(DimensionError, ValueError)


def test_codebook_round_trip(tmp_path, rng):
    cb = U.KMeansCodebook(rng.normal(size=(4, 3)))
    cb.save(tmp_path / "cb.ubtc")
    back = U.KMeansCodebook.load(tmp_path / "cb.ubtc")
    assert back.centroids.tobytes() == cb.centroids.tobytes()


def test_reduce_worked_example():
    r = U.reduce([1, 1, 2, 2, 2, 3, 4, 4])
    assert r.units == (1, 2, 3, 4)
    assert r.durations == (2, 3, 1, 2)


def test_reduce_single():
    assert U.reduce([5]) == U.ReducedUnits((5,), (1,))


def test_reduce_empty():
    with pytest.raises(EmptyInputError):
        U.reduce([])


def test_expand_worked_example():
    assert U.expand((1, 2, 3, 4), (2, 3, 1, 2)).tolist() == [1, 1, 2, 2, 2, 3, 4, 4]


def test_expand_unit_durations_is_identity():
    assert U.expand(U.ReducedUnits((3, 1, 3), (1, 1, 1))).tolist() == [3, 1, 3]


@pytest.mark.parametrize("bad", [(2, 0), (2, -1)])
def test_expand_rejects_bad_durations(bad):
    with pytest.raises(ContractError):
        U.expand((1, 2), bad)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(0, 99), min_size=1, max_size=200))
def test_expand_reduce_round_trip(z):
    r = U.reduce(z)
    assert U.expand(r).tolist() == z
    assert sum(r.durations) == len(z)
    assert all(d >= 1 for d in r.durations)
    assert all(a != b for a, b in zip(r.units, r.units[1:]))


@st.composite
def reduced_units(draw):
    n = draw(st.integers(1, 40))
    units = [draw(st.integers(0, 20))]
    for _ in range(n - 1):
        units.append(draw(st.integers(0, 20).filter(lambda u, prev=units[-1]: u != prev)))
    durs = draw(st.lists(st.integers(1, 6), min_size=n, max_size=n))
    return U.ReducedUnits(tuple(units), tuple(durs))


@settings(max_examples=200, deadline=None)
@given(reduced_units())
def test_reduce_expand_round_trip(r):
    assert U.reduce(U.expand(r)) == r
