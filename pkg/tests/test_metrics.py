import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from fedharness.core import ContractViolation, RngStream
from fedharness.data import Dataset, DomainSpec, SyntheticSpec, TriggerSpec, apply_domain, gen_synthetic
from fedharness.metrics import (accuracy_consistency, backdoor_success, contribution_match, degradation,
                                leave_one_out, mean_cross_client, ood_accuracy, shapley_exact, top1_accuracy)
from fedharness.model import ModelSpec

SPEC = ModelSpec("logistic", 2, 2)
# class 0 iff x0 > x1
DIAG = np.array([1.0, -1.0, -1.0, 1.0, 0.0, 0.0])


def test_accuracy_counts():
    X = np.array([[2.0, 0.0], [0.0, 2.0], [3.0, 1.0], [1.0, 3.0]])
    assert top1_accuracy(SPEC, DIAG, Dataset(X, np.array([0, 1, 0, 1]), 2)) == 1.0
    assert top1_accuracy(SPEC, DIAG, Dataset(X, np.array([0, 1, 0, 0]), 2)) == 0.75
    with pytest.raises(ContractViolation):
        top1_accuracy(SPEC, DIAG, Dataset(np.zeros((0, 2)), np.zeros(0, dtype=int), 2))


def test_random_params_are_at_chance():
    # one draw of random weights favours a few classes, so single draws scatter by about 0.06;
    # the chance level holds for the average over draws
    spec = ModelSpec("logistic", 16, 10)
    ds = gen_synthetic(SyntheticSpec(samples_per_class=1000), RngStream(0))
    accs = [top1_accuracy(spec, np.random.default_rng(s).uniform(-1, 1, spec.num_params), ds) for s in range(200)]
    assert abs(np.mean(accs) - 0.1) <= 0.02


def test_mean_cross_client():
    assert mean_cross_client([0.5]) == 0.5
    assert mean_cross_client({0: 0.4, 1: 0.6}) == pytest.approx(0.5)
    vals = np.random.default_rng(0).uniform(size=10)
    assert mean_cross_client(vals) == pytest.approx(sum(vals) / 10, abs=1e-15)
    with pytest.raises(ContractViolation):
        mean_cross_client([])


def test_ood_identity_and_extreme_shift():
    spec = ModelSpec("logistic", 16, 10)
    means = gen_synthetic(SyntheticSpec(samples_per_class=1, noise_std=1e-9), RngStream(0))
    # nearest-mean classifier: weights are the class means, bias -|mu|^2 / 2
    W = means.features[np.argsort(means.labels)].T
    p = np.concatenate([W.ravel(), -0.5 * (W ** 2).sum(axis=0)])
    for seed in range(5):
        test = gen_synthetic(SyntheticSpec(samples_per_class=200), RngStream(seed))
        same = apply_domain(test, DomainSpec(0.0, 1.0, None))
        assert ood_accuracy(spec, p, same) == top1_accuracy(spec, p, test)
        far = apply_domain(test, DomainSpec(0.0, 1.0, np.full(16, 1e3)))
        assert np.array_equal(far.labels, test.labels)
        assert ood_accuracy(spec, p, far) <= 0.1 + 0.1


def test_degradation_signed():
    assert degradation(0.9, 0.7) == pytest.approx(0.2)
    assert degradation(0.7, 0.9) == pytest.approx(-0.2)
    assert degradation(0.4, 0.4) == 0.0


@given(st.floats(0, 1), st.floats(0, 1))
def test_degradation_antisymmetric(a, b):
    assert degradation(a, b) == -degradation(b, a)


def test_backdoor_success_counts():
    trig = TriggerSpec.on_dims(2, (0,), 0.0, target_class=1)
    X = np.column_stack([np.zeros(12), np.r_[np.ones(7), -np.ones(3), np.ones(2)]])
    y = np.r_[np.zeros(10, dtype=int), np.ones(2, dtype=int)]
    # with x0 zeroed, DIAG predicts class 1 iff x1 > 0: 7 hits among the 10 non-target rows
    assert backdoor_success(SPEC, DIAG, Dataset(X, y, 2), trig) == pytest.approx(0.7)
    always = np.array([0.0, 0.0, 0.0, 0.0, -1.0, 1.0])
    never = np.array([0.0, 0.0, 0.0, 0.0, 1.0, -1.0])
    assert backdoor_success(SPEC, always, Dataset(X, y, 2), trig) == 1.0
    assert backdoor_success(SPEC, never, Dataset(X, y, 2), trig) == 0.0
    assert backdoor_success(SPEC, DIAG, Dataset(X[10:], y[10:], 2), trig) is None


def test_leave_one_out_examples():
    w1, w2 = np.array([1.0, 3.0]), np.array([5.0, -1.0])
    assert np.array_equal(leave_one_out((w1 + w2) / 2, w1, 0.5), w2)
    assert np.array_equal(leave_one_out(w1, w2, 0.0), w1)
    assert leave_one_out(w1, w1, 1.0) is None
    with pytest.raises(ContractViolation):
        leave_one_out(w1, w2, -0.1)


@given(st.integers(2, 8), st.integers(0, 10_000))
def test_leave_one_out_equals_reaggregation(M, seed):
    gen = np.random.default_rng(seed)
    W = gen.standard_normal((M, 5))
    a = gen.dirichlet(np.ones(M))
    w = a @ W
    i = int(gen.integers(M))
    rest = np.delete(np.arange(M), i)
    want = (a[rest] / a[rest].sum()) @ W[rest]
    assert np.allclose(leave_one_out(w, W[i], a[i]), want, rtol=1e-10, atol=1e-10)


def test_contribution_match_examples():
    a = np.array([0.2, 0.3, 0.5])
    assert contribution_match(3 * a, a) == pytest.approx(1.0)
    assert contribution_match(-a, a) == pytest.approx(-1.0)
    assert contribution_match(np.array([1.0, -1.0, 0.0]), np.array([0.5, 0.5, 0.0])) == pytest.approx(0.0)
    assert contribution_match(np.zeros(3), a) is None
    with pytest.raises(ContractViolation):
        contribution_match(np.ones(2), a)


def test_consistency_examples():
    assert accuracy_consistency([0.7, 0.7, 0.7]) == 0.0
    assert accuracy_consistency({"a": 0.0, "b": 1.0}) == pytest.approx(50.0)
    vals = np.random.default_rng(1).uniform(size=10)
    assert accuracy_consistency(vals) == pytest.approx(100 * oracles.population_std(vals), rel=1e-12)


def test_shapley_axioms():
    sym = shapley_exact(lambda S: len(S) ** 2, 4)
    assert np.allclose(sym, sym[0])
    c = np.array([0.1, 0.5, -0.2, 0.3])
    add = shapley_exact(lambda S: sum(c[i] for i in S), 4, rho=2.0)
    assert np.allclose(add, 2.0 * c)


@given(st.integers(1, 5), st.integers(0, 10_000), st.floats(0.1, 3.0))
def test_shapley_matches_permutation_oracle_and_is_efficient(M, seed, rho):
    gen = np.random.default_rng(seed)
    table = {}

    def v(S):
        key = frozenset(S)
        if key not in table:
            table[key] = float(gen.uniform())
        return table[key]

    nu = shapley_exact(v, M, rho)
    assert np.allclose(nu, oracles.shapley_by_permutations(v, M, rho), atol=1e-12)
    assert math.fsum(nu) == pytest.approx(rho * (v(frozenset(range(M))) - v(frozenset())), abs=1e-9)


def test_shapley_null_player():
    base = {0: 0.3, 1: 0.5}
    nu = shapley_exact(lambda S: sum(base.get(i, 0.0) for i in S) + 0.1 * (0 in S and 1 in S), 3)
    assert nu[2] == 0.0


def test_shapley_evaluates_each_coalition_once():
    calls = []
    shapley_exact(lambda S: calls.append(S) or 0.0, 5)
    assert len(calls) == 32 and len(set(calls)) == 32


def test_shapley_limits():
    with pytest.raises(ContractViolation):
        shapley_exact(lambda S: 0.0, 13)
    with pytest.raises(ContractViolation):
        shapley_exact(lambda S: 0.0, 0)
