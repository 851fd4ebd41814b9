import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from fedbucket.errors import CorruptPayloadError, DegenerateRangeError, InputError
from fedbucket.quant import (
    Codebook, QsgdLayerUpdate, QuantisedLayerUpdate, bq_codebook, bu_codebook, decode,
    decode_with_table, encode, index_width, qsgd_decode, qsgd_encode, update_stats)


def test_index_width():
    assert [index_width(L) for L in (1, 2, 3, 4, 5, 64, 65, 128, 2 ** 20)] == [0, 1, 2, 2, 3, 6, 7, 7, 20]
    with pytest.raises(InputError):
        index_width(0)


def test_bu_boundaries_are_equally_spaced():
    cb = bu_codebook(-1.0, 3.0, 4)
    np.testing.assert_array_equal(cb.boundaries, [-1, 0, 1, 2, 3])
    np.testing.assert_array_equal(cb.midpoints, [-0.5, 0.5, 1.5, 2.5])
    assert cb.levels == 4 and cb.lo == -1 and cb.hi == 3


def test_bu_endpoints_are_exact():
    cb = bu_codebook(0.1, 0.7, 3)
    assert cb.boundaries[0] == 0.1 and cb.boundaries[-1] == 0.7


def test_degenerate_ranges():
    with pytest.raises(DegenerateRangeError):
        bu_codebook(1.0, 1.0, 8)
    with pytest.raises(DegenerateRangeError):
        bq_codebook(np.full(10, 2.0), 8)
    with pytest.raises(InputError):
        bu_codebook(0, np.inf, 4)
    with pytest.raises(InputError):
        Codebook([0.0, 0.0, 1.0])


def test_bucket_convention():
    # buckets are (b_j, b_j+1], the first also closed at b_0; outside values clamp
    cb = Codebook([0.0, 1.0, 2.0, 3.0])
    v = [-5, 0.0, 0.5, 1.0, 1.0000001, 2.0, 3.0, 9.0]
    assert encode(v, cb).indices.tolist() == [0, 0, 0, 0, 1, 1, 2, 2]


def test_encode_rejects_nan():
    with pytest.raises(InputError):
        encode([0.1, np.nan], bu_codebook(0, 1, 4))


def test_bq_equal_mass_on_distinct_samples():
    x = np.random.default_rng(0).standard_normal(10_000)
    cb = bq_codebook(x, 16)
    counts = np.bincount(encode(x, cb).indices, minlength=16)
    assert cb.levels == 16
    assert counts.max() - counts.min() <= 2


def test_bq_matches_linear_quantiles():
    x = np.array([0.0, 1.0, 2.0, 10.0])
    cb = bq_codebook(x, 2)
    # h = (n-1) p = 1.5 -> halfway between 1 and 2
    np.testing.assert_allclose(cb.boundaries, [0.0, 1.5, 10.0])


def test_bq_merges_repeated_quantiles():
    x = np.concatenate([np.zeros(90), np.linspace(1, 2, 10)])
    cb = bq_codebook(x, 10)
    assert cb.levels < 10
    assert np.all(np.diff(cb.boundaries) > 0)


def test_decode_checks_levels_and_indices():
    cb = bu_codebook(0, 1, 4)
    with pytest.raises(CorruptPayloadError):
        decode(QuantisedLayerUpdate(np.array([0, 4], np.uint32), 4), cb)
    with pytest.raises(CorruptPayloadError):
        decode(QuantisedLayerUpdate(np.array([0], np.uint32), 8), cb)
    assert decode_with_table(QuantisedLayerUpdate(np.array([1, 0]), 2), [5.0, 7.0]).tolist() == [7.0, 5.0]


def test_bucket_edges_within_rounding_of_bound():
    # values sitting exactly on an edge can exceed the real-valued bound by the
    # rounding of the edges and mid-points, a few ulps at the scale of the range
    rng = np.random.default_rng(11)
    for _ in range(200):
        lo = rng.uniform(-10, 10)
        hi = lo + 10 ** rng.uniform(-4, 2)
        L = int(rng.integers(2, 4097))
        cb = bu_codebook(lo, hi, L)
        v = cb.boundaries
        err = np.abs(decode(encode(v, cb), cb) - v)
        ulp = np.spacing(max(abs(lo), abs(hi)))
        assert (err <= (hi - lo) / (2 * L) + 2 * ulp).all()


@settings(max_examples=200, deadline=None)
@given(st.floats(-1e3, 1e3), st.floats(1e-3, 1e3), st.integers(1, 4096), st.integers(0, 2 ** 32 - 1))
def test_distortion_bound_property(lo, width, levels, seed):
    hi = lo + width
    cb = bu_codebook(lo, hi, levels)
    assume(cb.levels == levels)
    v = np.random.default_rng(seed).uniform(lo, hi, 256)
    err = np.abs(decode(encode(v, cb), cb) - v)
    assert (err <= (hi - lo) / (2 * levels) * (1 + 1e-12) + np.spacing(np.abs(v).max())).all()


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=200), st.integers(1, 64))
def test_encode_is_monotone(values, levels):
    assume(min(values) < max(values))
    cb = bq_codebook(values, levels)
    v = np.sort(np.asarray(values))
    idx = encode(v, cb).indices
    assert np.all(np.diff(idx.astype(np.int64)) >= 0)
    assert idx.max() < cb.levels


def test_codebook_digest_tracks_boundaries():
    a, b = bu_codebook(0, 1, 4), bu_codebook(0, 1, 4)
    assert a == b and a.digest() == b.digest()
    assert a.digest() != bu_codebook(0, 1.0000001, 4).digest()


def test_qsgd_zero_vector():
    q = qsgd_encode(np.zeros(5), 4, 0)
    assert q.norm == 0
    assert qsgd_decode(q, 4).tolist() == [0.0] * 5


def test_qsgd_magnitudes_in_range():
    u = np.random.default_rng(1).standard_normal(1000)
    for s in (1, 3, 64):
        q = qsgd_encode(u, s, 5)
        assert q.magnitudes.max() <= s
        d = qsgd_decode(q, s)
        assert np.all(np.sign(d[d != 0]) == np.sign(u[d != 0]))
        # each coordinate lands on one of the two grid points around it
        r = s * np.abs(u) / np.float64(q.norm)
        assert np.all((q.magnitudes == np.floor(r)) | (q.magnitudes == np.ceil(r)))


def test_qsgd_is_seeded():
    u = np.random.default_rng(2).standard_normal(50)
    a, b = qsgd_encode(u, 8, 3), qsgd_encode(u, 8, 3)
    assert np.array_equal(a.magnitudes, b.magnitudes)


def test_qsgd_decode_rejects_bad_payloads():
    q = QsgdLayerUpdate(np.float32(1), np.zeros(2, bool), np.array([1, 9], np.uint32), 8)
    with pytest.raises(CorruptPayloadError):
        qsgd_decode(q, 8)
    with pytest.raises(CorruptPayloadError):
        qsgd_decode(qsgd_encode([1.0, 2.0], 4, 0), 8)


def test_update_stats_against_moments():
    x = np.array([1.0, 2.0, 3.0, 4.0, 10.0])
    s = update_stats(x)
    m = x.mean()
    var = ((x - m) ** 2).sum() / 5
    kurt = ((x - m) ** 4).sum() / 5 / var ** 2 - 3
    assert s.range == 9 and s.variance == pytest.approx(var) and s.excess_kurtosis == pytest.approx(kurt)
    assert update_stats(np.ones(4)).excess_kurtosis == 0.0
