import numpy as np
import pytest

from fedharness.client import (ClientState, LocalConfig, local_train_backdoor, local_train_fedprox,
                               local_train_scaffold, local_train_sgd, poison_row_mask, scaffold_control_delta)
from fedharness.core import ContractViolation, RngStream
from fedharness.data import Dataset, TriggerSpec
from fedharness.model import Batch, ModelSpec, init_params, loss_and_grad

SPEC = ModelSpec("logistic", 6, 3)


def _state(n=40, seed=0, cid=0):
    gen = np.random.default_rng(seed)
    return ClientState(cid, 1.0, Dataset(gen.standard_normal((n, 6)), gen.integers(0, 3, n), 3))


def _w0():
    return init_params(SPEC, RngStream(5))


def test_one_full_batch_step_is_plain_gradient_descent():
    st = _state()
    cfg = LocalConfig(epochs=1, batch_size=len(st.data), lr=0.3, momentum=0.0, weight_decay=0.0)
    w0 = _w0()
    up = local_train_sgd(SPEC, w0, st, cfg, RngStream(0))
    _, g = loss_and_grad(SPEC, w0, Batch(st.data.features, st.data.labels))
    assert np.allclose(up.new_params, w0 - 0.3 * g, atol=1e-14)
    assert np.array_equal(up.delta, up.new_params - w0)
    assert up.steps == 1 and up.num_samples == 40


def test_zero_lr_leaves_params():
    up = local_train_sgd(SPEC, _w0(), _state(), LocalConfig(lr=0.0), RngStream(0))
    assert not up.delta.any()


def test_step_count():
    up = local_train_sgd(SPEC, _w0(), _state(n=50), LocalConfig(epochs=3, batch_size=16), RngStream(0))
    assert up.steps == 3 * 4


def test_same_stream_same_update():
    a = local_train_sgd(SPEC, _w0(), _state(), LocalConfig(), RngStream(3))
    b = local_train_sgd(SPEC, _w0(), _state(), LocalConfig(), RngStream(3))
    assert np.array_equal(a.new_params, b.new_params)
    assert a.broadcast_hash == b.broadcast_hash


def test_empty_client_is_skipped():
    st = ClientState(4, 0.0, Dataset(np.zeros((0, 6)), np.zeros(0, dtype=int), 3))
    up = local_train_sgd(SPEC, _w0(), st, LocalConfig(), RngStream(0))
    assert up.skipped and up.num_samples == 0 and not up.delta.any()


def test_fedprox_zero_mu_is_sgd():
    cfg = LocalConfig(epochs=2)
    a = local_train_sgd(SPEC, _w0(), _state(), cfg, RngStream(1))
    b = local_train_fedprox(SPEC, _w0(), _state(), cfg, 0.0, RngStream(1))
    assert np.array_equal(a.new_params, b.new_params)


def test_fedprox_pull_shrinks_drift():
    cfg = LocalConfig(epochs=5, lr=0.1, momentum=0.0)
    free = np.linalg.norm(local_train_sgd(SPEC, _w0(), _state(), cfg, RngStream(1)).delta)
    held = [np.linalg.norm(local_train_fedprox(SPEC, _w0(), _state(), cfg, mu, RngStream(1)).delta)
            for mu in (0.1, 1.0, 1e6)]
    assert free > held[0] > held[1] > held[2]
    assert held[2] < 1e-4
    with pytest.raises(ContractViolation):
        local_train_fedprox(SPEC, _w0(), _state(), cfg, -1.0, RngStream(1))


def test_scaffold_zero_variates_is_sgd():
    cfg = LocalConfig(epochs=2)
    a = local_train_sgd(SPEC, _w0(), _state(), cfg, RngStream(1))
    b = local_train_scaffold(SPEC, _w0(), _state(), cfg, np.zeros(SPEC.num_params), RngStream(1))
    assert np.array_equal(a.new_params, b.new_params)
    assert b.control_delta is not None


def test_scaffold_variate_refresh_formula():
    gen = np.random.default_rng(0)
    c_i, c, x, y = (gen.standard_normal(4) for _ in range(4))
    got = scaffold_control_delta(c_i, c, x, y, lr=0.1, steps=7)
    assert np.allclose(got, -c + (x - y) / 0.7)
    with_m = scaffold_control_delta(c_i, c, x, y, lr=0.1, steps=7, momentum=0.5)
    assert np.allclose(with_m, -c + (x - y) / 1.4)


def test_scaffold_full_batch_variate_recovers_gradient():
    # one full-batch step without momentum: the refreshed variate is the local gradient
    st = _state()
    cfg = LocalConfig(epochs=1, batch_size=len(st.data), lr=0.2, momentum=0.0, weight_decay=0.0,
                      optimizer="scaffold")
    w0 = _w0()
    up = local_train_scaffold(SPEC, w0, st, cfg, np.zeros(SPEC.num_params), RngStream(0))
    _, g = loss_and_grad(SPEC, w0, Batch(st.data.features, st.data.labels))
    assert np.allclose(up.control_delta, g, atol=1e-12)


def test_backdoor_zero_lambda_matches_clean_training():
    trig = TriggerSpec.on_dims(6, (4, 5), 3.0, target_class=0, poison_fraction=0.5, lam=0.0)
    cfg = LocalConfig(epochs=2)
    a = local_train_sgd(SPEC, _w0(), _state(), cfg, RngStream(2))
    b = local_train_backdoor(SPEC, _w0(), _state(), cfg, trig, RngStream(2))
    assert np.array_equal(a.new_params, b.new_params)


def test_backdoor_sees_triggered_copies_only():
    trig = TriggerSpec.on_dims(6, (5,), 9.0, target_class=1, poison_fraction=0.25, lam=1.0)
    seen = []

    def hook(x, tx):
        seen.append((x.copy(), tx.copy()))

    st = _state()
    local_train_backdoor(SPEC, _w0(), st, LocalConfig(epochs=1, batch_size=8), trig, RngStream(2), hook=hook)
    assert sum(x.shape[0] for x, _ in seen) == 10
    for x, tx in seen:
        assert np.all(tx[:, 5] == 9.0)
        assert np.array_equal(tx[:, :5], x[:, :5])


def test_poison_row_mask_size():
    trig = TriggerSpec.on_dims(6, (0,), 1.0, poison_fraction=0.3)
    assert poison_row_mask(101, trig, RngStream(0)).sum() == 30
    assert poison_row_mask(10, trig, RngStream(0)).sum() == 3


def test_local_config_validation():
    with pytest.raises(ContractViolation):
        LocalConfig(momentum=1.0)
    with pytest.raises(ContractViolation):
        LocalConfig(optimizer="adam")
    with pytest.raises(ContractViolation):
        LocalConfig(batch_size=0)
