import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from flame.data import (DataFormatError, Dataset, ModalityGen, ModalitySequence, Sample, StageSpec,
                        StreamConfig, SyntheticTaskParams, TaskSpec, batch_iter, load_idx, make_synthetic_task,
                        mnist_task, parse_idx, write_idx)
from flame.numerics.linalg import sym_eig


def _tokens(ds, m):
    return np.concatenate([s.inputs[m].values for s in ds.samples if s.inputs[m].present])


def _cov(x):
    xc = x - x.mean(axis=0)
    return xc.T @ xc / len(x)


def _task(rank, dim, n=64, noise=0.0, seed=0, length=(3, 9), **kw):
    gen = ModalityGen("x", dim, rank, length, noise=noise)
    return make_synthetic_task(SyntheticTaskParams("t", (gen,), n_samples=n, **kw), seed)


# ------------------------------------------------------------------ types

def test_modality_sequence_invariants():
    with pytest.raises(ValueError):
        ModalitySequence("m", np.array([[np.nan]]), np.zeros(1))
    with pytest.raises(ValueError):
        ModalitySequence("m", np.zeros((2, 1)), np.array([1.0, 0.0]))
    with pytest.raises(ValueError):
        ModalitySequence("m", np.zeros((1, 1)), np.zeros(1), present=False)
    absent = ModalitySequence.absent("m", 3)
    assert absent.length == 0 and absent.dim == 3 and not absent.present


def test_task_spec_needs_modalities():
    with pytest.raises(ValueError):
        TaskSpec("t", ())
    assert TaskSpec("t", ("a",), "multiclass", 4).n_outputs == 4
    assert TaskSpec("t", ("a",)).n_outputs == 1


def test_samples_only_use_task_modalities():
    _, ds = make_synthetic_task(SyntheticTaskParams(
        "t", (ModalityGen("a", 4, 2, 5, missing_rate=0.5), ModalityGen("b", 3, 1, 4, missing_rate=0.5)),
        n_samples=40), seed=3)
    for s in ds.samples:
        assert set(s.inputs) <= set(ds.task.modalities)
        assert any(x.present for x in s.inputs.values())


# ------------------------------------------------------------------ generator

def test_rank_above_dim_rejected():
    with pytest.raises(ValueError):
        _task(rank=5, dim=4)


def test_noiseless_rank_one_has_single_nonzero_eigenvalue():
    _, ds = _task(rank=1, dim=4)
    vals = sym_eig(_cov(_tokens(ds, "x"))).values
    assert vals[0] > 1e-3
    assert np.all(np.abs(vals[1:]) < 1e-10)


@given(rank=st.integers(1, 6), extra=st.integers(0, 4), seed=st.integers(0, 10_000))
def test_noiseless_rank_equals_intrinsic_rank(rank, extra, seed):
    _, ds = _task(rank=rank, dim=rank + extra, n=32, seed=seed)
    vals = sym_eig(_cov(_tokens(ds, "x"))).values
    assert np.all(np.abs(vals[rank:]) < 1e-10)
    assert vals[rank - 1] > 1e-10


def test_noisy_rank_eight_concentrates_in_top_eight():
    _, ds = _task(rank=8, dim=64, n=512, noise=0.01, length=(8, 16))
    vals = sym_eig(_cov(_tokens(ds, "x"))).values
    assert vals[:8].sum() >= 0.99 * vals.sum()


def test_shared_generator_tasks_are_linearly_probeable():
    gen = ModalityGen("x", 16, 4, 6, latent_key="shared")
    for label_key in ("rule-a", "rule-b"):
        _, ds = make_synthetic_task(SyntheticTaskParams(label_key, (gen,), n_samples=400,
                                                        label_key=label_key), seed=1)
        x = np.c_[ds.latents, np.ones(len(ds))]
        y = ds.labels() * 2.0 - 1.0
        w, *_ = np.linalg.lstsq(x, y, rcond=None)
        assert np.mean((x @ w > 0) == (y > 0)) > 0.9


def test_label_rules_differ_across_keys():
    gen = ModalityGen("x", 8, 4, 4, latent_key="shared")
    ya = make_synthetic_task(SyntheticTaskParams("a", (gen,), 200, label_key="ka"), 0)[1].labels()
    yb = make_synthetic_task(SyntheticTaskParams("a", (gen,), 200, label_key="kb"), 0)[1].labels()
    assert np.mean(ya != yb) > 0.1


def test_shared_latent_key_shares_mixing_matrix():
    g1 = ModalityGen("x", 6, 2, 3, noise=0.0, latent_key="k")
    g2 = ModalityGen("y", 6, 2, 3, noise=0.0, latent_key="k")
    _, d1 = make_synthetic_task(SyntheticTaskParams("a", (g1,), 20), 0)
    _, d2 = make_synthetic_task(SyntheticTaskParams("b", (g2,), 20), 0)
    # tokens of both tasks live in the same 2-dimensional column space
    both = np.concatenate([_tokens(d1, "x"), _tokens(d2, "y")])
    assert np.linalg.matrix_rank(both, tol=1e-9) == 2


@given(seed=st.integers(0, 2**31 - 1))
def test_generator_is_deterministic(seed):
    a = _task(rank=2, dim=4, n=8, noise=0.1, seed=seed)[1]
    b = _task(rank=2, dim=4, n=8, noise=0.1, seed=seed)[1]
    for sa, sb in zip(a.samples, b.samples):
        assert sa.inputs["x"].values.tobytes() == sb.inputs["x"].values.tobytes()
        assert sa.inputs["x"].timestamps.tobytes() == sb.inputs["x"].timestamps.tobytes()
        assert int(sa.label) == int(sb.label)


def test_timestamps_sorted_and_lengths_in_range():
    _, ds = _task(rank=2, dim=4, n=50, length=(2, 7))
    lengths = {s.inputs["x"].length for s in ds.samples}
    assert lengths <= set(range(2, 8)) and len(lengths) > 1


@pytest.mark.parametrize("objective,k", [("multiclass", 4), ("multilabel", 3)])
def test_label_shapes(objective, k):
    _, ds = _task(rank=2, dim=4, n=30, objective=objective, n_classes=k)
    y = ds.labels()
    if objective == "multiclass":
        assert y.shape == (30,) and set(y) <= set(range(k))
    else:
        assert y.shape == (30, k) and set(np.unique(y)) <= {0, 1}


# ------------------------------------------------------------------ IDX

def test_idx_image_example():
    raw = struct.pack(">IIII", 0x803, 1, 2, 2) + bytes([0, 255, 128, 0])
    np.testing.assert_allclose(parse_idx(raw), [[[0.0, 1.0], [128 / 255, 0.0]]])
    assert parse_idx(raw)[0, 1, 0] == pytest.approx(0.50196, abs=1e-5)


def test_idx_label_example():
    raw = struct.pack(">II", 0x801, 3) + bytes([7, 2, 1])
    np.testing.assert_array_equal(parse_idx(raw), [7, 2, 1])


@pytest.mark.parametrize("raw", [
    struct.pack(">II", 0x12345678, 1) + b"\x00",
    b"\x00\x00",
    struct.pack(">I", 0x803) + b"\x00\x00",
    struct.pack(">II", 0x801, 5) + bytes([1, 2]),
])
def test_idx_format_errors(raw):
    with pytest.raises(DataFormatError):
        parse_idx(raw)


@given(st.lists(st.integers(0, 255), min_size=1, max_size=20))
def test_idx_round_trip_bytes(tmp_path_factory, labels):
    path = tmp_path_factory.mktemp("idx") / "labels.idx"
    write_idx(path, np.array(labels, dtype=np.uint8))
    first = path.read_bytes()
    back = load_idx(path)
    write_idx(path, back.astype(np.uint8))
    assert path.read_bytes() == first
    np.testing.assert_array_equal(back, labels)


def test_mnist_task_builds_two_modalities(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (6, 28, 28), dtype=np.uint8)
    labels = np.array([0, 1, 2, 1, 0, 1], dtype=np.uint8)
    write_idx(tmp_path / "i", imgs)
    write_idx(tmp_path / "l", labels)
    spec, ds = mnist_task(tmp_path / "i", tmp_path / "l", classes=[0, 1])
    assert spec.objective == "binary" and len(ds) == 5
    s = ds.samples[0]
    assert s.inputs["rows"].values.shape == (28, 28)
    assert s.inputs["colsum"].values.shape == (28, 1)
    np.testing.assert_allclose(s.inputs["rows"].values, imgs[0] / 255.0)
    np.testing.assert_allclose(s.inputs["colsum"].values[:, 0], (imgs[0] / 255.0).sum(axis=0) / 28)


# ------------------------------------------------------------------ batching and streams

def _dummy(n):
    spec = TaskSpec("d", ("x",))
    s = Sample({"x": ModalitySequence("x", np.zeros((1, 1)), np.zeros(1))}, np.int64(0))
    return Dataset(spec, [s] * n)


def test_batch_sizes_keep_short_tail():
    assert [len(b) for b in batch_iter(_dummy(5), 2, seed=0)] == [2, 2, 1]


def test_batches_are_a_permutation_and_deterministic():
    a = list(batch_iter(_dummy(9), 4, seed=7, epoch=2))
    b = list(batch_iter(_dummy(9), 4, seed=7, epoch=2))
    assert a == b
    assert sorted(i for batch in a for i in batch) == list(range(9))


def test_different_seeds_change_order():
    orders = {tuple(i for b in batch_iter(_dummy(6), 6, seed=s) for i in b) for s in range(20)}
    assert len(orders) > 1


def test_empty_dataset_and_bad_batch_size():
    assert list(batch_iter(_dummy(0), 3, seed=0)) == []
    with pytest.raises(ValueError):
        list(batch_iter(_dummy(3), 0, seed=0))


def test_stream_config_rejects_duplicates_and_bad_rank():
    with pytest.raises(ValueError):
        StreamConfig((StageSpec(("a",)), StageSpec(("a", "b"))))
    with pytest.raises(ValueError):
        StreamConfig((StageSpec(("a",), rank=0),))
    assert len(StreamConfig((StageSpec(("a",)), StageSpec(("b",)))).stages) == 2
