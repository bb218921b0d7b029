import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tpconv.data import (
    SeriesRecord, SyntheticConfig, TimeMap, batchify, generate_synthetic, generate_synthetic_classification,
    generate_synthetic_step_classification, normalize_times, read_ndjson, rbf_weights, record_to_line, split,
    synthetic_curves, write_ndjson,
)
from tpconv.errors import ConfigError, ParseError, ValidationError
from tpconv.numerics import Rng


@pytest.fixture(scope="module")
def synthetic():
    return generate_synthetic(SyntheticConfig(), Rng(0))


def test_synthetic_counts(synthetic):
    assert len(synthetic) == 1000
    assert len({r.id for r in synthetic}) == 1000
    for r in synthetic:
        assert r.length == 20 and r.m == 1
        assert r.observed.sum() == 20
        assert len(np.unique(r.times)) == 20
        assert np.all((r.times >= 0) & (r.times <= 1))


def test_synthetic_points_lie_on_curve():
    cfg = SyntheticConfig(n_samples=5)
    recs = generate_synthetic(cfg, Rng(3))
    curves = synthetic_curves(cfg, Rng(3))
    for r in recs:
        grid, curve = curves[r.id]
        idx = np.searchsorted(grid, r.times)
        np.testing.assert_array_equal(curve[idx], r.values[0])


def test_narrow_bandwidth_tends_to_nearest_reference():
    cfg = SyntheticConfig(n_samples=1, rbf_bandwidth=1e6, n_observed=100)
    rng = Rng(11)
    ref_values = Rng(11).normal(0.0, 1.0, (10,))
    rec = generate_synthetic(cfg, rng)[0]
    ref_t = np.linspace(0, 1, 10)
    nearest = np.abs(rec.times[:, None] - ref_t[None, :]).argmin(axis=1)
    # grid points exactly midway between references are ties; skip them
    gaps = np.sort(np.abs(rec.times[:, None] - ref_t[None, :]), axis=1)
    clear = gaps[:, 1] - gaps[:, 0] > 1e-3
    np.testing.assert_allclose(rec.values[0, clear], ref_values[nearest[clear]], atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-3, 1e7), st.lists(st.floats(-5, 5), min_size=1, max_size=30))
def test_rbf_weights_partition_of_unity(bandwidth, ts):
    w = rbf_weights(ts, np.linspace(0, 1, 10), bandwidth)
    assert np.all(w >= 0)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)


def test_generators_are_deterministic(tmp_path):
    a, b = tmp_path / "a.ndjson", tmp_path / "b.ndjson"
    write_ndjson(generate_synthetic(SyntheticConfig(n_samples=50), Rng(5)), a)
    write_ndjson(generate_synthetic(SyntheticConfig(n_samples=50), Rng(5)), b)
    assert a.read_bytes() == b.read_bytes()
    c1 = generate_synthetic_classification(40, Rng(2))
    c2 = generate_synthetic_classification(40, Rng(2))
    assert [record_to_line(r) for r in c1] == [record_to_line(r) for r in c2]


def test_classification_balance():
    recs = generate_synthetic_classification(1000, Rng(0))
    labels = np.array([r.label for r in recs])
    assert (labels == 0).sum() == 500 and (labels == 1).sum() == 500
    assert all(r.length == 20 for r in recs)


def test_clean_classes_separable_by_spectrum():
    recs = generate_synthetic_classification(200, Rng(4), grid_len=100, n_observed=100, noise=0.0)
    feats, labels = [], []
    for r in recs:
        spec = np.abs(np.fft.rfft(r.values[0]))
        feats.append(spec[3] - spec[2])
        labels.append(r.label)
    feats, labels = np.array(feats), np.array(labels)
    assert feats[labels == 1].min() > 0 > feats[labels == 0].max()


def test_step_labels_follow_slope():
    recs = generate_synthetic_step_classification(20, Rng(6), noise=0.0)
    for r in recs:
        assert r.step_labels.shape == (20,)
        assert set(np.unique(r.step_labels)) <= {0, 1}
    steps = np.concatenate([r.step_labels for r in recs])
    assert 0.3 < steps.mean() < 0.7


def test_normalize_examples():
    recs = [SeriesRecord("a", [0.0, 0.5, 1.0], [[1, 2, 3]], [[1, 1, 1]])]
    out, tm = normalize_times(recs)
    np.testing.assert_array_equal(out[0].times, recs[0].times)
    hours = [SeriesRecord("h", [0.0, 24.0, 48.0], [[1, 2, 3]], [[1, 1, 1]])]
    out, tm = normalize_times(hours)
    np.testing.assert_array_equal(out[0].times, [0.0, 0.5, 1.0])
    assert np.max(np.abs(tm.invert(out[0].times) - hours[0].times)) < 1e-12
    flat, tm = normalize_times([SeriesRecord("f", [3.0, 3.0], [[1, 2]], [[1, 1]])])
    np.testing.assert_array_equal(flat[0].times, 0.0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=20))
def test_time_map_round_trip(ts):
    ts = np.sort(ts)
    tm = TimeMap(float(ts.min()), float(ts.max()))
    if tm.hi > tm.lo:
        assert np.max(np.abs(tm.invert(tm.apply(ts)) - ts)) <= 1e-12 * max(1.0, np.abs(ts).max())


def test_split_sizes_and_disjointness(synthetic):
    tr, va, te = split(synthetic, [0.64, 0.16, 0.20], Rng(0))
    assert (len(tr), len(va), len(te)) == (640, 160, 200)
    ids = [r.id for r in tr + va + te]
    assert sorted(ids) == sorted(r.id for r in synthetic)
    tr2, _, _ = split(synthetic, [0.64, 0.16, 0.20], Rng(0))
    assert [r.id for r in tr2] == [r.id for r in tr]


def test_split_errors(synthetic):
    with pytest.raises(ConfigError):
        split(synthetic, [0.5, 0.2, 0.2], Rng(0))
    with pytest.raises(ConfigError):
        split(synthetic[:3], [0.9, 0.05, 0.05], Rng(0))


def test_batchify_padding():
    recs = [
        SeriesRecord("a", [0.0, 0.1, 0.2, 0.3], np.ones((2, 4)), np.ones((2, 4))),
        SeriesRecord("b", [0.0, 0.5], np.ones((2, 2)), np.ones((2, 2))),
    ]
    (batch,) = batchify(recs, 8)
    assert batch.values.shape == (2, 2, 4)
    assert batch.observed[1, :, 2:].sum() == 0
    np.testing.assert_array_equal(batch.times[1, 2:], 0.5)
    assert list(batch.valid_len) == [4, 2]
    (eq,) = batchify(recs[:1] * 3, 8)
    assert eq.observed.sum() == 3 * 8


def test_ndjson_round_trip(tmp_path, synthetic):
    recs = synthetic[:30] + generate_synthetic_classification(4, Rng(1)) + generate_synthetic_step_classification(3, Rng(1))
    path = tmp_path / "d.ndjson"
    write_ndjson(recs, path)
    back = read_ndjson(path)
    assert len(back) == len(recs)
    for a, b in zip(recs, back):
        assert record_to_line(a) == record_to_line(b)
        assert a.times.tobytes() == b.times.tobytes()
        assert a.values.tobytes() == b.values.tobytes()


def _write_lines(path, objs):
    path.write_text("".join(json.dumps(o) + "\n" for o in objs))


def test_ndjson_errors(tmp_path):
    good = {"id": "x", "times": [0, 1], "values": [[1, 2]], "observed": [[1, 1]]}
    p = tmp_path / "bad.ndjson"
    _write_lines(p, [good, dict(good, times=[1, 0], id="rev")])
    with pytest.raises(ValidationError, match="times not sorted") as exc:
        read_ndjson(p)
    assert "rev" in str(exc.value)
    _write_lines(p, [good, {k: v for k, v in good.items() if k != "observed"}])
    with pytest.raises(ParseError, match="line 2"):
        read_ndjson(p)
    p.write_text(json.dumps(good) + "\n{not json\n")
    with pytest.raises(ParseError, match="line 2"):
        read_ndjson(p)
    _write_lines(p, [dict(good, observed=[[1, 0]])])
    with pytest.raises(ValidationError, match="stored as 0.0"):
        read_ndjson(p)


def test_synthetic_config_validation():
    with pytest.raises(ConfigError, match="n_observed"):
        SyntheticConfig(n_observed=200)
    with pytest.raises(ConfigError, match="rbf_bandwidth"):
        SyntheticConfig(rbf_bandwidth=0)
    with pytest.raises(ConfigError, match="split"):
        SyntheticConfig(split=[0.7, 0.2])
