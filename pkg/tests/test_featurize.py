import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from canadv import canlog, featurize
from canadv.canlog import CanFrame, TrafficClass
from canadv.featurize import Dataset, Split

import oracles


def test_interval_feature_is_scaled_difference():
    frames = [CanFrame(1.000, 0x545, 0, b""), CanFrame(1.010, 0x545, 0, b"")]
    d = featurize.extract_features(frames, interval_cap=1.0)
    assert d.features[0, featurize.INTERVAL_COL] == 1.0
    assert d.features[1, featurize.INTERVAL_COL] == pytest.approx(0.010, abs=1e-12)


def test_id_bits_msb_first():
    d = featurize.extract_features([CanFrame(0.0, 0x545, 0, b"")])
    assert "".join(str(int(b)) for b in d.features[0, featurize.ID_BITS]) == "10101000101"


def test_first_seen_gets_cap_value():
    d = featurize.extract_features([CanFrame(0.0, 0x100, 0, b""), CanFrame(0.5, 0x200, 0, b"")], interval_cap=0.2)
    assert list(d.features[:, featurize.INTERVAL_COL]) == [1.0, 1.0]


def test_interval_clamped_at_cap():
    frames = [CanFrame(0.0, 7, 0, b""), CanFrame(5.0, 7, 0, b"")]
    assert featurize.extract_features(frames, interval_cap=2.0).features[1, -1] == 1.0


def test_unsorted_input_is_ordering_error():
    with pytest.raises(featurize.OrderingError):
        featurize.extract_features([CanFrame(1.0, 1, 0, b""), CanFrame(0.5, 1, 0, b"")])


def test_features_match_text_oracle_on_synthetic_log():
    profile = canlog.default_profiles(3, frames_per_class=150)[0]
    frames = canlog.synthesize(profile)
    d = featurize.extract_features(frames, 0.5, profile.vehicle_name)
    np.testing.assert_array_equal(d.features, oracles.feature_matrix(frames, 0.5))
    assert d.features.shape == (len(frames), 77)
    assert np.all((d.features >= 0) & (d.features <= 1))
    bits = np.r_[0:11, 12:76]
    assert set(np.unique(d.features[:, bits])) <= {0.0, 1.0}
    np.testing.assert_array_equal(d.labels, [int(f.label) for f in frames])


frame_list = st.lists(
    st.tuples(st.floats(0, 0.5), st.integers(0, 0x7FF), st.binary(max_size=8)), min_size=1, max_size=40
)


@given(frame_list)
@settings(max_examples=100, deadline=None)
def test_features_in_unit_range_and_match_oracle(items):
    t, frames = 0.0, []
    for dt, cid, payload in items:
        t += dt
        frames.append(CanFrame(t, cid, len(payload), payload))
    d = featurize.extract_features(frames, 0.25)
    assert np.all((d.features >= 0) & (d.features <= 1))
    np.testing.assert_allclose(d.features, oracles.feature_matrix(frames, 0.25), rtol=0, atol=1e-12)


def _dataset(counts, seed=0):
    """Rows carry their own index in the payload bits so partitions can be checked."""
    labels = np.repeat(np.arange(4), counts)
    x = np.zeros((len(labels), 77))
    for i in range(len(labels)):
        x[i, 12:44] = [int(b) for b in format(i, "032b")]
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(labels))
    return Dataset("toy", Split.FULL, x[order], labels[order])


def _row_ids(d):
    return {int("".join(str(int(v)) for v in row[12:44]), 2) for row in d.features}


def test_balance_to_min_count():
    b = featurize.balance(_dataset([100, 40, 60, 50]), seed=1)
    assert list(b.class_counts()) == [40, 40, 40, 40] and len(b) == 160


def test_balance_already_balanced_only_permutes():
    d = _dataset([10, 10, 10, 10])
    b = featurize.balance(d, seed=5)
    assert _row_ids(b) == _row_ids(d)
    assert list(b.class_counts()) == [10] * 4


def test_balance_deterministic():
    d = _dataset([30, 20, 25, 22])
    a, b = featurize.balance(d, 9), featurize.balance(d, 9)
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_balance_missing_class_names_it():
    with pytest.raises(featurize.BalanceError, match="FUZZY"):
        featurize.balance(_dataset([5, 5, 0, 5]), 0)


def test_split_stratified_arithmetic():
    b = featurize.balance(_dataset([40, 40, 40, 40]), 0)
    tr, te = featurize.split(b, 0.8, seed=3)
    assert (len(tr), len(te)) == (128, 32)
    assert list(tr.class_counts()) == [32] * 4 and list(te.class_counts()) == [8] * 4
    assert tr.split is Split.TRAIN and te.split is Split.TEST


def test_split_errors():
    d = _dataset([5, 1, 5, 5])
    with pytest.raises(featurize.SplitError):
        featurize.split(d, 0.8, 0)
    with pytest.raises(featurize.SplitError):
        featurize.split(_dataset([5] * 4), 1.0, 0)


@given(st.lists(st.integers(2, 40), min_size=4, max_size=4), st.floats(0.05, 0.95), st.integers(0, 2**64 - 1))
@settings(max_examples=60, deadline=None)
def test_balance_then_split_is_partition(counts, fraction, seed):
    d = _dataset(counts)
    b = featurize.balance(d, seed)
    m = min(counts)
    assert list(b.class_counts()) == [m] * 4
    assert _row_ids(b) <= _row_ids(d)
    tr, te = featurize.split(b, fraction, seed)
    assert not (_row_ids(tr) & _row_ids(te))
    assert _row_ids(tr) | _row_ids(te) == _row_ids(b)
    assert list(tr.class_counts()) == [int(np.floor(fraction * m))] * 4
    tr2, _ = featurize.split(b, fraction, seed)
    np.testing.assert_array_equal(tr.features, tr2.features)


def test_dataset_invariants():
    with pytest.raises(ValueError):
        Dataset("v", Split.FULL, np.zeros((2, 76)), [0, 1])
    with pytest.raises(ValueError):
        Dataset("v", Split.FULL, np.zeros((2, 77)), [0])
    with pytest.raises(ValueError):
        Dataset("v", Split.FULL, np.full((1, 77), np.nan), [0])
    with pytest.raises(ValueError):
        Dataset("v", Split.FULL, np.zeros((1, 77)), [4])
    d = _dataset([2] * 4)
    with pytest.raises(ValueError):
        d.features[0, 0] = 1.0


def test_dataset_container_round_trip(tmp_path):
    d = featurize.split(featurize.balance(_dataset([9, 8, 7, 6]), 2), 0.5, 4)[1]
    d = Dataset(d.vehicle, d.split, d.features * 0.37, d.labels, d.provenance, 123, {"k": 1})
    path = tmp_path / "d.cds"
    featurize.save_dataset(d, path)
    back = featurize.load_dataset(path)
    assert back.features.tobytes() == d.features.tobytes()
    np.testing.assert_array_equal(back.labels, d.labels)
    assert (back.vehicle, back.split, back.provenance, back.seed, back.meta) == (
        d.vehicle, d.split, d.provenance, d.seed, d.meta
    )
    blob = path.read_bytes()
    featurize.save_dataset(back, path)
    assert path.read_bytes() == blob


def test_dataset_container_rejects_other_kinds_and_truncation():
    d = _dataset([2] * 4)
    buf = io.BytesIO()
    featurize.save_dataset(d, buf)
    blob = buf.getvalue()
    with pytest.raises(featurize.container.ContainerError):
        featurize.decode_dataset(blob, kind="checkpoint")
    with pytest.raises(featurize.container.TruncatedError):
        featurize.load_dataset(blob[:-5])
