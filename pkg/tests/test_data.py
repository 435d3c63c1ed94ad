import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from fedharness.core import ContractViolation, RngStream
from fedharness.data import (Dataset, DomainSpec, FlipSpec, InfeasiblePartition, PartitionSpec, SyntheticSpec,
                             TriggerSpec, apply_domain, apply_flip, apply_trigger, class_means, dirichlet_partition,
                             gen_synthetic, load_dataset, poison_dataset, save_dataset)
from fedharness.metrics import top1_accuracy
from fedharness.model import Batch, ModelSpec, loss_and_grad


def _fit_full_batch(spec, ds, steps=1500, lr=0.5):
    p = np.zeros(spec.num_params)
    for _ in range(steps):
        _, g = loss_and_grad(spec, p, Batch(ds.features, ds.labels))
        p = p - lr * g
    return p


def test_counts_per_class():
    ds = gen_synthetic(SyntheticSpec(num_classes=10, samples_per_class=500), RngStream(0))
    assert len(ds) == 5000
    assert np.array_equal(ds.label_histogram(), np.full(10, 500))


def test_class_means_evenly_spaced():
    m = class_means(10, 16, 4.0)
    gaps = [np.linalg.norm(m[c] - m[(c + 1) % 10]) for c in range(10)]
    assert np.allclose(gaps, 4.0)
    assert np.all(m[:, 2:] == 0.0)
    assert np.allclose(m.mean(axis=0), 0.0, atol=1e-12)


def test_noise_free_limit_is_separable():
    spec = SyntheticSpec(num_classes=10, input_dim=4, samples_per_class=20, noise_std=1e-9)
    ds = gen_synthetic(spec, RngStream(1))
    model = ModelSpec("logistic", 4, 10)
    p = _fit_full_batch(model, ds, steps=3000, lr=0.5)
    assert top1_accuracy(model, p, ds) == 1.0


def test_separation_four_is_learnable():
    # binary case: the ring puts ten classes within 0.5 points of the 0.95 bar
    spec = SyntheticSpec(num_classes=2, input_dim=16, samples_per_class=1000, class_separation=4.0)
    train = gen_synthetic(spec, RngStream(0).derive("train"))
    test = gen_synthetic(spec, RngStream(0).derive("test"))
    model = ModelSpec("logistic", 16, 2)
    assert top1_accuracy(model, _fit_full_batch(model, train), test) >= 0.95


def test_single_client_gets_everything():
    labels = np.repeat(np.arange(3), 7)
    parts = dirichlet_partition(labels, PartitionSpec(1, 0.5, 1), RngStream(0))
    assert len(parts) == 1 and np.array_equal(parts[0], np.arange(21))


def _proportions(labels, parts, C):
    return [np.bincount(labels[p], minlength=C) / p.size for p in parts]


def test_large_beta_matches_global_mix():
    labels = np.repeat(np.arange(10), 2000)
    for seed in range(20):
        parts = dirichlet_partition(labels, PartitionSpec(10, 1000.0, 10), RngStream(seed))
        for prop in _proportions(labels, parts, 10):
            assert np.abs(prop - 0.1).max() <= 0.05


def _mean_entropy(labels, parts, C):
    ent = []
    for prop in _proportions(labels, parts, C):
        nz = prop[prop > 0]
        ent.append(-(nz * np.log(nz)).sum())
    return float(np.mean(ent))


def test_small_beta_lowers_label_entropy():
    labels = np.repeat(np.arange(10), 500)
    for seed in range(20):
        skewed = dirichlet_partition(labels, PartitionSpec(10, 0.1, 1), RngStream(seed))
        flat = dirichlet_partition(labels, PartitionSpec(10, 1000.0, 1), RngStream(seed))
        assert _mean_entropy(labels, skewed, 10) < _mean_entropy(labels, flat, 10)


@given(st.sampled_from([0.05, 0.3, 1.0, 50.0]), st.integers(2, 12), st.integers(0, 10_000))
def test_partition_is_exact_cover(beta, M, seed):
    labels = np.random.default_rng(seed).integers(0, 5, 400)
    parts = dirichlet_partition(labels, PartitionSpec(M, beta, 1), RngStream(seed))
    joined = np.concatenate(parts)
    assert joined.size == labels.size
    assert np.array_equal(np.sort(joined), np.arange(labels.size))


def test_partition_minimum_enforced_or_refused():
    labels = np.repeat(np.arange(4), 50)
    parts = dirichlet_partition(labels, PartitionSpec(5, 0.5, 10), RngStream(3))
    assert min(p.size for p in parts) >= 10
    with pytest.raises(InfeasiblePartition):
        dirichlet_partition(labels, PartitionSpec(5, 0.5, 41), RngStream(3), max_retries=5)


def test_flip_identity_at_zero():
    y = np.arange(100) % 10
    out, log = apply_flip(y, FlipSpec("symmetric", 0.0), RngStream(0), 10)
    assert np.array_equal(out, y) and not log.flipped.any()


def test_pair_flip_moves_to_next_class():
    y = np.arange(1000) % 10
    out, log = apply_flip(y, FlipSpec("pair", 1.0), RngStream(0), 10)
    assert np.array_equal(out, (y + 1) % 10)
    assert np.array_equal(log.original, y)


def test_symmetric_flip_matrix():
    C, eps = 10, 0.5
    # each off-diagonal entry of the symmetric flip matrix is eps / (C - 1)
    assert eps / (C - 1) == pytest.approx(0.0556, abs=5e-5)
    y = np.arange(100_000) % C
    out, log = apply_flip(y, FlipSpec("symmetric", eps), RngStream(9), C)
    assert abs(np.mean(out == y) - 0.5) <= 0.01
    assert np.all(out[log.flipped] != y[log.flipped])
    M = np.zeros((C, C))
    np.add.at(M, (y, out), 1)
    expected = np.where(np.eye(C, dtype=bool), 1 - eps, eps / (C - 1)) * M.sum(axis=1, keepdims=True)
    chi2 = ((M - expected) ** 2 / expected).sum()
    assert stats.chi2.sf(chi2, C * (C - 1)) > 0.001


def test_trigger_examples():
    x = np.array([[5.0, 5.0]])
    off = TriggerSpec(np.zeros(2), np.array([9.0, 9.0]))
    full = TriggerSpec(np.ones(2), np.array([9.0, 9.0]))
    half = TriggerSpec(np.array([1.0, 0.0]), np.array([9.0, 9.0]))
    assert np.array_equal(apply_trigger(x, off), x)
    assert np.array_equal(apply_trigger(x, full), [[9.0, 9.0]])
    assert np.array_equal(apply_trigger(np.array([5.0, 5.0]), half), [9.0, 5.0])
    with pytest.raises(ContractViolation):
        TriggerSpec(np.array([0.5, 0.0]), np.zeros(2))


def _toy(seed=0, n=60, d=4):
    gen = np.random.default_rng(seed)
    return Dataset(gen.standard_normal((n, d)), gen.integers(0, 3, n), 3)


def test_domain_identity_and_involution():
    ds = _toy()
    same = apply_domain(ds, DomainSpec(0.0, 1.0, np.zeros(4)))
    assert np.array_equal(same.features, ds.features)
    flip = DomainSpec(math.pi, 1.0, None)
    back = apply_domain(apply_domain(ds, flip), flip)
    assert np.allclose(back.features, ds.features, atol=1e-9)


def test_domain_keeps_labels():
    ds = _toy(1)
    out = apply_domain(ds, DomainSpec(0.7, 1.3, np.full(4, 2.0)))
    assert np.array_equal(out.label_histogram(), ds.label_histogram())
    assert np.array_equal(out.labels, ds.labels)


def test_domain_rotation_plane_validated():
    with pytest.raises(ContractViolation):
        DomainSpec(0.1, plane=(2, 2))
    with pytest.raises(ContractViolation):
        apply_domain(_toy(d=2), DomainSpec(0.3))


@given(st.floats(-3.2, 3.2), st.floats(0.2, 3.0), st.floats(-5, 5), st.integers(0, 2))
def test_domain_commutes_with_label_subsetting(angle, scale, offset, cls):
    ds = _toy(2)
    spec = DomainSpec(angle, scale, np.full(4, offset))
    idx = np.flatnonzero(ds.labels == cls)
    assert np.array_equal(apply_domain(ds.subset(idx), spec).features, apply_domain(ds, spec).subset(idx).features)


def test_poison_counts():
    ds = Dataset(np.zeros((100, 4)), np.arange(100) % 4, 4)
    trig = TriggerSpec.on_dims(4, (3,), 7.0, target_class=2, poison_fraction=0.5)
    out, rows = poison_dataset(ds, trig, RngStream(0), return_indices=True)
    assert rows.size == 50
    assert np.all(out.labels[rows] == 2) and np.all(out.features[rows, 3] == 7.0)
    untouched = np.setdiff1d(np.arange(100), rows)
    assert np.array_equal(out.features[untouched], ds.features[untouched])


def test_poison_extremes():
    ds = _toy(3)
    none = poison_dataset(ds, TriggerSpec.on_dims(4, (0,), 1.0, poison_fraction=0.0), RngStream(0))
    assert np.array_equal(none.features, ds.features) and np.array_equal(none.labels, ds.labels)
    every = poison_dataset(ds, TriggerSpec.on_dims(4, (0,), 1.0, target_class=1, poison_fraction=1.0), RngStream(0))
    assert np.all(every.labels == 1)


def test_dataset_file_round_trip(tmp_path):
    ds = gen_synthetic(SyntheticSpec(num_classes=3, input_dim=5, samples_per_class=4), RngStream(2))
    path = tmp_path / "d.txt"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert np.array_equal(back.features, ds.features) and np.array_equal(back.labels, ds.labels)
    assert back.num_classes == 3
    path.write_text("garbage\n")
    with pytest.raises(ContractViolation):
        load_dataset(path)
