"""Local training: plain SGD (FedAvg), FedProx, SCAFFOLD and the backdoor mixed objective."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import ContractViolation, RngStream, as_vector
from .data import Dataset, TriggerSpec, apply_trigger
from .model import Batch, ModelSpec, loss_and_grad

OPTIMIZERS = ("sgd", "fedprox", "scaffold")


@dataclass(frozen=True)
class LocalConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    optimizer: str = "sgd"
    mu: float = 0.01
    server_lr: float = 0.25

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractViolation("epochs and batch_size must be >= 1")
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0 or self.mu < 0:
            raise ContractViolation("lr, momentum, weight_decay and mu must be non-negative")
        if self.momentum >= 1:
            raise ContractViolation("momentum must be < 1")
        if self.optimizer not in OPTIMIZERS:
            raise ContractViolation(f"unknown optimizer {self.optimizer!r}")


@dataclass
class ClientState:
    client_id: int
    weight: float
    data: Dataset
    control_variate: np.ndarray | None = None


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    new_params: np.ndarray
    delta: np.ndarray
    num_samples: int
    control_delta: np.ndarray | None = None
    steps: int = 0
    broadcast_hash: str = ""
    skipped: bool = False

    def __post_init__(self):
        if self.new_params.shape != self.delta.shape:
            raise ContractViolation("delta and new_params must have the same dimension")

    def with_delta(self, delta, broadcast) -> "ClientUpdate":
        """Copy of this update whose delta is replaced (used by model-poisoning attacks)."""
        delta = as_vector(delta)
        return ClientUpdate(
            self.client_id, as_vector(np.asarray(broadcast) + delta), delta, self.num_samples,
            self.control_delta, self.steps, self.broadcast_hash, self.skipped,
        )


def params_hash(params) -> str:
    return hashlib.sha256(np.ascontiguousarray(params, dtype=np.float64).tobytes()).hexdigest()[:16]


def _make_update(state, broadcast, w, steps, control_delta=None) -> ClientUpdate:
    new_params = as_vector(w)
    delta = as_vector(new_params - broadcast)
    return ClientUpdate(state.client_id, new_params, delta, len(state.data), control_delta, steps,
                        params_hash(broadcast))


def _skipped(state, broadcast) -> ClientUpdate:
    zero = as_vector(np.zeros_like(broadcast))
    return ClientUpdate(state.client_id, as_vector(broadcast), zero, 0, None, 0, params_hash(broadcast), True)


def _run_local(spec: ModelSpec, broadcast, data: Dataset, cfg: LocalConfig, rng: RngStream, *,
               prox_mu: float = 0.0, correction=None, trigger: TriggerSpec | None = None,
               poison_rows=None, hook: Callable | None = None):
    """Shuffled mini-batch SGD with momentum and weight decay; returns (params, step count).

    The proximal pull towards ``broadcast`` is applied implicitly, so any
    ``prox_mu`` is stable. ``correction`` is added to every raw gradient
    before momentum. Momentum buffers start at zero every call.
    """
    w = np.array(broadcast, dtype=np.float64)
    anchor = np.asarray(broadcast, dtype=np.float64)
    decay = cfg.weight_decay * (~spec.bias_mask())
    buf = np.zeros_like(w)
    gen = rng.generator()
    n = len(data)
    X, y = data.features, data.labels
    use_trigger = trigger is not None and trigger.lam > 0 and poison_rows is not None
    steps = 0
    for _ in range(cfg.epochs):
        order = gen.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, g = loss_and_grad(spec, w, Batch(X[idx], y[idx]))
            if use_trigger:
                sel = idx[poison_rows[idx]]
                if sel.size:
                    trig_x = apply_trigger(X[sel], trigger)
                    if hook is not None:
                        hook(X[sel], trig_x)
                    _, gt = loss_and_grad(spec, w, Batch(trig_x, np.full(sel.size, trigger.target_class)))
                    g = g + trigger.lam * gt
            if correction is not None:
                g = g + correction
            g = g + decay * w
            buf = cfg.momentum * buf + g
            w = w - cfg.lr * buf
            if prox_mu:
                w = (w + (cfg.lr * prox_mu) * anchor) / (1.0 + cfg.lr * prox_mu)
            steps += 1
    return w, steps


def local_train_sgd(spec, broadcast, state: ClientState, cfg: LocalConfig, rng: RngStream) -> ClientUpdate:
    if len(state.data) == 0:
        return _skipped(state, broadcast)
    w, steps = _run_local(spec, broadcast, state.data, cfg, rng)
    return _make_update(state, broadcast, w, steps)


def local_train_fedprox(spec, broadcast, state: ClientState, cfg: LocalConfig, mu: float,
                        rng: RngStream) -> ClientUpdate:
    if mu < 0:
        raise ContractViolation("FedProx mu must be non-negative")
    if len(state.data) == 0:
        return _skipped(state, broadcast)
    w, steps = _run_local(spec, broadcast, state.data, cfg, rng, prox_mu=mu)
    return _make_update(state, broadcast, w, steps)


def scaffold_control_delta(c_i, c_global, broadcast, w_final, lr: float, steps: int,
                           momentum: float = 0.0) -> np.ndarray:
    """Option-II variate refresh ``c_i' - c_i`` with ``c_i' = c_i - c + (x - y_i) / (lr_eff * K)``.

    Heavy-ball momentum stretches each step to ``lr / (1 - momentum)`` once it
    has warmed up, so that is the step size used to turn the displacement back
    into an average gradient.
    """
    lr_eff = lr / (1.0 - momentum)
    c_new = c_i - c_global + (np.asarray(broadcast) - np.asarray(w_final)) / (lr_eff * steps)
    return c_new - c_i


def local_train_scaffold(spec, broadcast, state: ClientState, cfg: LocalConfig, c_global,
                         rng: RngStream) -> ClientUpdate:
    if len(state.data) == 0:
        return _skipped(state, broadcast)
    c_i = state.control_variate
    if c_i is None:
        c_i = np.zeros(spec.num_params)
    c_global = np.asarray(c_global, dtype=np.float64)
    if c_i.shape != (spec.num_params,) or c_global.shape != (spec.num_params,):
        raise ContractViolation("control variates must have the model dimension")
    w, steps = _run_local(spec, broadcast, state.data, cfg, rng, correction=c_global - c_i)
    if cfg.lr > 0:
        control_delta = scaffold_control_delta(c_i, c_global, broadcast, w, cfg.lr, steps, cfg.momentum)
    else:
        control_delta = np.zeros(spec.num_params)
    return _make_update(state, broadcast, w, steps, as_vector(control_delta))


def poison_row_mask(n: int, trig: TriggerSpec, rng: RngStream) -> np.ndarray:
    """Fixed mask of ``round(poison_fraction * n)`` local rows that receive triggered copies."""
    k = int(math.floor(trig.poison_fraction * n + 0.5))
    mask = np.zeros(n, dtype=bool)
    mask[rng.generator().permutation(n)[:k]] = True
    return mask


def local_train_backdoor(spec, broadcast, state: ClientState, cfg: LocalConfig, trig: TriggerSpec,
                         rng: RngStream, hook: Callable | None = None) -> ClientUpdate:
    """Clean cross-entropy plus ``lam`` times cross-entropy on triggered copies labelled with the target.

    The shuffling stream is the same one plain training uses, so ``lam == 0``
    reproduces :func:`local_train_sgd` bit for bit.
    """
    if len(state.data) == 0:
        return _skipped(state, broadcast)
    rows = poison_row_mask(len(state.data), trig, rng.derive("poison_rows"))
    w, steps = _run_local(spec, broadcast, state.data, cfg, rng, trigger=trig, poison_rows=rows, hook=hook)
    return _make_update(state, broadcast, w, steps)
