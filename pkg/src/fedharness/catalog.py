"""Built-in scenarios.

Each entry is a set of overrides on the default config. Desk-scale values
that differ from the image-scale protocol are set here, not in the
dataclass defaults: random-noise sigma, the CRFL clip radius and the
near-IID partition used for backdoor runs.
"""

from __future__ import annotations

import math
from dataclasses import replace

from .aggregate import AggregatorSpec
from .attack import AttackSpec
from .data import PartitionSpec
from .engine import DomainsConfig, ExperimentConfig

LABEL_SKEW_BETAS = (1.0, 0.5, 0.3, 0.1)
EVIL_FRACTIONS = (0.2, 0.4)
BYZANTINE_ATTACKS = {
    "pair_flip": dict(kind="data_flip", flip_mode="pair", epsilon=0.5),
    "sym_flip": dict(kind="data_flip", flip_mode="symmetric", epsilon=0.5),
    "random_noise": dict(kind="random_noise", sigma=300.0),
    "lie": dict(kind="lie", z=1.5),
    "min_max": dict(kind="min_max"),
    "min_sum": dict(kind="min_sum"),
}
FOUR_DOMAINS = DomainsConfig(
    rotations=(0.0, math.pi / 8, math.pi / 4, 3 * math.pi / 8),
    scales=(1.0, 1.2, 0.8, 1.1),
    offsets=(0.0, 0.5, -0.5, 0.25),
)
# sources differ only in scale and offset; the held-out domain is also rotated
SHIFTED_TARGET = DomainsConfig(
    rotations=(0.0, 0.0, 0.0, math.pi / 4),
    scales=(1.0, 1.2, 0.8, 1.0),
    offsets=(0.0, 0.5, -0.5, 0.0),
    held_out=3,
)
NEAR_IID = PartitionSpec(num_clients=10, beta=1000.0, min_samples_per_client=10)
BACKDOOR = AttackSpec(kind="backdoor", evil_fraction=0.2, trigger_dims=(12, 13, 14, 15), trigger_value=6.0,
                      target_class=0, poison_fraction=0.5, lam=1.0)
CRFL_DESK = AggregatorSpec(crfl=True, crfl_rho=1.5, crfl_sigma=0.01)


def _build() -> dict:
    base = ExperimentConfig()
    out = {}

    def add(name, description, **overrides):
        out[name] = (description, replace(base, scenario=name, **overrides))

    add("label_skew_default", "Dirichlet label skew, beta 0.5, FedAvg with mean aggregation")
    for beta in LABEL_SKEW_BETAS:
        add(f"label_skew_beta{beta}", f"Dirichlet label skew, beta {beta}",
            partition=replace(base.partition, beta=beta))
    add("label_skew_iid", "near-IID control (beta 1000)", partition=NEAR_IID)
    add("label_skew_fedprox", "label skew, beta 0.5, FedProx local objective",
        local=replace(base.local, optimizer="fedprox"))
    add("label_skew_scaffold", "label skew, beta 0.5, SCAFFOLD control variates",
        local=replace(base.local, optimizer="scaffold"))
    add("domain_skew", "four synthetic feature domains, clients spread across all of them",
        domains=FOUR_DOMAINS, metrics=("cross_client", "consistency", "contribution"))
    add("out_client_shift", "four domains, the rotated last one held out as the unseen client",
        domains=SHIFTED_TARGET, metrics=("cross_client", "ood", "consistency"))
    for attack, params in BYZANTINE_ATTACKS.items():
        for frac in EVIL_FRACTIONS:
            add(f"byzantine_{attack}_u{int(round(frac * 100))}",
                f"{attack} adversaries at evil fraction {frac}, mean aggregation",
                attack=AttackSpec(evil_fraction=frac, **params), metrics=("cross_client", "degradation"))
    add("backdoor_fedavg", "trigger backdoor, evil fraction 0.2, plain FedAvg",
        partition=NEAR_IID, attack=BACKDOOR, metrics=("cross_client", "backdoor"))
    add("backdoor_crfl", "trigger backdoor with CRFL norm clipping and noise",
        partition=NEAR_IID, attack=BACKDOOR, aggregator=CRFL_DESK, metrics=("cross_client", "backdoor"))
    add("backdoor_rlr", "trigger backdoor with the robust learning-rate rule",
        partition=NEAR_IID, attack=BACKDOOR, aggregator=AggregatorSpec(kind="rlr"),
        metrics=("cross_client", "backdoor"))
    return out


SCENARIOS = _build()


def scenario_names() -> list[str]:
    return list(SCENARIOS)


def get_scenario(name: str) -> ExperimentConfig:
    """Resolved config for a built-in scenario; KeyError if unknown."""
    return SCENARIOS[name][1]


def describe(name: str) -> str:
    return SCENARIOS[name][0]
