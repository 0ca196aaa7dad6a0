import gzip
import struct
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedmlp import data as D
from fedmlp.model import Hyperparams, ProtoContext, init_params, loss_and_grad, logits_of, sgd_step


def _rows(ds):
    return Counter(tuple(map(float, f)) + (int(y),) for f, y in zip(ds.features, ds.labels))


def _balanced(num_classes, per_class, d=3, seed=0):
    return D.synth_blobs(num_classes, d, per_class, 0.5, seed)


# -- synth_blobs ---------------------------------------------------------------

def test_synth_blobs_size_bookkeeping():
    ds = D.synth_blobs(2, 2, 1, 0.1, 7)
    assert len(ds) == 2
    assert set(ds.labels.tolist()) == {0, 1}


def test_synth_blobs_deterministic():
    a = D.synth_blobs(3, 4, 10, 0.3, 7)
    b = D.synth_blobs(3, 4, 10, 0.3, 7)
    assert a.features.tobytes() == b.features.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()


@pytest.mark.parametrize("args", [(1, 2, 3, 0.1), (3, 2, 0, 0.1), (3, 2, 3, 0.0)])
def test_synth_blobs_rejects_bad_sizes(args):
    with pytest.raises(ValueError):
        D.synth_blobs(*args, seed=0)


def test_synth_blobs_separable_by_trained_model():
    ds = D.synth_blobs(4, 8, 50, 0.05, 3)
    params = init_params(8, 64, 32, 4, 0)
    velocity = params.zeros_like()
    hyper = Hyperparams()
    for _ in range(200):
        _, grads = loss_and_grad(params, ds.features, ds.labels, ProtoContext(), hyper)
        params, velocity = sgd_step(params, grads, velocity, hyper)
    acc = (logits_of(params, ds.features).argmax(1) == ds.labels).mean()
    assert acc >= 0.99


def test_dataset_invariants_enforced():
    with pytest.raises(ValueError):
        D.LabeledDataset(np.zeros((3, 2)), np.array([0, 1]), 2)
    with pytest.raises(ValueError):
        D.LabeledDataset(np.zeros((2, 2)), np.array([0, 2]), 2)
    with pytest.raises(ValueError):
        D.LabeledDataset(np.zeros((2, 0)), np.array([0, 1]), 2)


# -- IDX / CSV ingestion -------------------------------------------------------

def test_load_idx_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, (10, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, 10, 10, dtype=np.uint8)
    D.write_idx(images, labels, tmp_path / "img", tmp_path / "lab")
    ds = D.load_idx(tmp_path / "img", tmp_path / "lab")
    assert ds.features.shape == (10, 784)
    assert np.array_equal(ds.features, images.reshape(10, -1) / 255.0)
    assert ds.features.min() >= 0 and ds.features.max() <= 1
    assert np.array_equal(ds.labels, labels)


def test_load_idx_gzip(tmp_path):
    images = np.arange(2 * 4, dtype=np.uint8).reshape(2, 2, 2)
    labels = np.array([0, 1], dtype=np.uint8)
    D.write_idx(images, labels, tmp_path / "img", tmp_path / "lab")
    for name in ("img", "lab"):
        (tmp_path / f"{name}.gz").write_bytes(gzip.compress((tmp_path / name).read_bytes()))
    ds = D.load_idx(tmp_path / "img.gz", tmp_path / "lab.gz")
    assert ds.features.shape == (2, 4)


def test_load_idx_mnist_training_shape(tmp_path):
    # full-size file in the published MNIST training layout
    n = 60000
    labels = (np.arange(n) % 10).astype(np.uint8)
    images = np.zeros((n, 28, 28), dtype=np.uint8)
    D.write_idx(images, labels, tmp_path / "train-images-idx3-ubyte", tmp_path / "train-labels-idx1-ubyte")
    assert (tmp_path / "train-images-idx3-ubyte").stat().st_size == 47040016
    assert (tmp_path / "train-labels-idx1-ubyte").stat().st_size == 60008
    ds = D.load_idx(tmp_path / "train-images-idx3-ubyte", tmp_path / "train-labels-idx1-ubyte")
    assert len(ds) == 60000 and ds.dim == 784
    assert set(ds.labels.tolist()) == set(range(10))


def test_load_idx_bad_magic(tmp_path):
    images = np.zeros((2, 2, 2), dtype=np.uint8)
    D.write_idx(images, np.zeros(2, dtype=np.uint8), tmp_path / "img", tmp_path / "lab")
    # a labels file carrying the image magic
    with pytest.raises(D.IdxMagicError):
        D.load_idx(tmp_path / "img", tmp_path / "img")


def test_load_idx_length_mismatch(tmp_path):
    D.write_idx(np.zeros((10, 2, 2), np.uint8), np.zeros(9, np.uint8), tmp_path / "img", tmp_path / "lab")
    with pytest.raises(D.IdxLengthMismatchError):
        D.load_idx(tmp_path / "img", tmp_path / "lab")


def test_load_idx_truncated(tmp_path):
    D.write_idx(np.zeros((10, 2, 2), np.uint8), np.zeros(10, np.uint8), tmp_path / "img", tmp_path / "lab")
    raw = (tmp_path / "img").read_bytes()
    (tmp_path / "img").write_bytes(raw[:-5])
    with pytest.raises(D.IdxTruncatedError):
        D.load_idx(tmp_path / "img", tmp_path / "lab")
    (tmp_path / "lab").write_bytes(struct.pack(">I", D.IDX_LABEL_MAGIC))
    with pytest.raises(D.IdxTruncatedError):
        D.load_idx(tmp_path / "img", tmp_path / "lab")


def test_parse_errors_are_distinct():
    assert len({D.IdxMagicError, D.IdxLengthMismatchError, D.IdxTruncatedError}) == 3
    for cls in (D.IdxMagicError, D.IdxLengthMismatchError, D.IdxTruncatedError):
        assert issubclass(cls, D.IdxFormatError)


def test_load_csv(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("f0,label,f1\n0.5,1,2.0\n-1,0,3\n")
    ds = D.load_csv(path)
    assert ds.class_count == 2
    assert ds.labels.tolist() == [1, 0]
    assert ds.features.tolist() == [[0.5, 2.0], [-1.0, 3.0]]


# -- long tail -----------------------------------------------------------------

def test_longtail_gamma_one_keeps_everything():
    ds = _balanced(4, 25)
    out = D.apply_longtail(ds, 1.0, 0)
    assert out.class_counts().tolist() == [25] * 4


def test_longtail_three_class_profile():
    # 100 * 0.5**(i/2) for i = 0, 1, 2 -> 100, 70.71, 50
    expected = [int(np.floor(100 * 0.5 ** (i / 2) + 0.5)) for i in range(3)]
    assert expected == [100, 71, 50]
    out = D.apply_longtail(_balanced(3, 100), 0.5, 1)
    assert out.class_counts().tolist() == expected


def test_longtail_rejects_bad_gamma():
    with pytest.raises(ValueError):
        D.apply_longtail(_balanced(3, 10), 0.0, 0)


def test_longtail_single_class_unchanged():
    ds = D.LabeledDataset(np.ones((5, 2)), np.zeros(5, dtype=np.int64), 1)
    assert D.apply_longtail(ds, 0.1, 0) is ds


@settings(max_examples=50, deadline=None)
@given(k=st.integers(2, 8), n=st.integers(5, 200), gamma=st.floats(0.01, 1.0), seed=st.integers(0, 2**32 - 1))
def test_longtail_monotone_and_ratio(k, n, gamma, seed):
    out = D.apply_longtail(_balanced(k, n), gamma, seed)
    counts = out.class_counts()
    assert all(a >= b for a, b in zip(counts, counts[1:]))
    assert abs(counts[-1] / counts[0] - gamma) <= 2 / n
    assert len(D.apply_longtail(_balanced(k, n), gamma, seed)) == len(out)


# -- sharding ------------------------------------------------------------------

def test_sharding_example_enumerated():
    ds = _balanced(4, 50)
    parts = D.partition_sharding(ds, 4, 2, seed=3)
    assert [len(p) for p in parts] == [50] * 4
    for p in parts:
        assert len(p.label_set()) <= 2
    assert sum((_rows(p) for p in parts), Counter()) == _rows(ds)


def test_sharding_single_partition_is_sorted_dataset():
    ds = _balanced(3, 7)
    (part,) = D.partition_sharding(ds, 1, 3, seed=0)
    order = np.argsort(ds.labels, kind="stable")
    # 21 samples, 3 shards of 7: nothing dropped, shards come back in permuted order
    assert _rows(part) == _rows(ds)
    shards = sorted(tuple(part.labels[i * 7:(i + 1) * 7]) for i in range(3))
    assert shards == sorted(tuple(ds.labels[order][i * 7:(i + 1) * 7]) for i in range(3))


def test_sharding_whole_grid_in_one_partition():
    ds = _balanced(3, 8)
    (part,) = D.partition_sharding(ds, 1, len(ds), seed=5)
    assert _rows(part) == _rows(ds)


def test_sharding_deterministic():
    ds = _balanced(5, 40)
    a = D.partition_sharding(ds, 5, 3, 11)
    b = D.partition_sharding(ds, 5, 3, 11)
    assert all(x.features.tobytes() == y.features.tobytes() for x, y in zip(a, b))


def test_sharding_remainder_dropped_from_tail():
    ds = _balanced(3, 10)  # 30 samples, 4 shards of 7, 2 dropped from the label-sorted tail
    parts = D.partition_sharding(ds, 2, 2, seed=0)
    got = sum((_rows(p) for p in parts), Counter())
    order = np.argsort(ds.labels, kind="stable")[:28]
    assert got == _rows(ds.subset(order))


def test_sharding_too_few_samples():
    with pytest.raises(ValueError):
        D.partition_sharding(_balanced(2, 2), 3, 2, 0)


# -- Dirichlet -----------------------------------------------------------------

def test_dirichlet_proportions_on_simplex():
    props = D.dirichlet_proportions(10, 7, 0.3, 5)
    assert np.all(np.abs(props.sum(axis=1) - 1) < 1e-9)


def test_largest_remainder_exact():
    counts = D.largest_remainder(np.array([0.5, 0.3, 0.2]), 4)
    assert counts.sum() == 4
    assert counts.tolist() == [2, 1, 1]


def test_dirichlet_conservation():
    ds = _balanced(6, 37)
    parts = D.partition_dirichlet(ds, 9, 0.2, 4)
    assert sum((_rows(p) for p in parts), Counter()) == _rows(ds)


def test_dirichlet_concentration_bound():
    # independent oracle: normalised Gamma(1000) draws; the empirical deviation of a
    # 1000-sample split stays well inside 15 over 200 seeds
    worst_oracle = 0.0
    for seed in range(200):
        g = np.random.default_rng(10_000 + seed).gamma(1000.0, size=10)
        worst_oracle = max(worst_oracle, float(np.abs(1000 * g / g.sum() - 100).max()))
    assert worst_oracle + 1 < 15

    ds = D.LabeledDataset(np.zeros((2000, 1)), np.repeat([0, 1], 1000), 2)
    for seed in range(100):
        parts = D.partition_dirichlet(ds, 10, 1000.0, seed)
        for p in parts:
            assert np.all(np.abs(p.class_counts() - 100) <= 15)


# -- task streams ----------------------------------------------------------------

def _streams(M=4, T=3, seed=0):
    ds = _balanced(6, 40, seed=seed)
    parts = D.partition_sharding(ds, M * T, 2, seed)
    return D.build_task_streams(parts, M, T, 0.2, seed)


def test_task_streams_default_grid():
    ds = _balanced(10, 100)
    parts = D.partition_sharding(ds, 100, 2, 0)
    streams = D.build_task_streams(parts, 20, 5, 0.2, 0)
    assert len(streams) == 20
    assert all(s.num_tasks == 5 for s in streams)


def test_task_streams_cumulative_counts():
    for s in _streams():
        assert len(s.cumulative_tests[2]) == sum(len(t) for t in s.tests[:3])
        for t in range(1, s.num_tasks):
            assert not (_rows(s.cumulative_tests[t - 1]) - _rows(s.cumulative_tests[t]))


def test_task_streams_seen_classes():
    for s in _streams():
        for t in range(s.num_tasks):
            union = frozenset().union(*(task.label_set() for task in s.tasks[: t + 1]))
            assert s.seen_classes[t] == union
        assert all(a <= b for a, b in zip(s.seen_classes, s.seen_classes[1:]))


def test_task_streams_round_robin_and_test_labels():
    ds = _balanced(6, 40)
    parts = D.partition_sharding(ds, 12, 2, 0)
    streams = D.build_task_streams(parts, 4, 3, 0.2, 0)
    for s in streams:
        for t in range(3):
            part = parts[t * 4 + s.client_id]
            assert _rows(s.tasks[t]) + _rows(s.tests[t]) == _rows(part)
            assert s.tests[t].label_set() <= s.tasks[t].label_set()


def test_task_streams_count_mismatch():
    parts = D.partition_sharding(_balanced(4, 20), 5, 1, 0)
    with pytest.raises(ValueError):
        D.build_task_streams(parts, 2, 3, 0.2, 0)


def test_balanced_test_set_equal_per_class():
    streams = _streams()
    bal = D.balanced_test_set(streams, 0)
    counts = bal.class_counts()
    present = counts[counts > 0]
    assert len(set(present.tolist())) == 1
