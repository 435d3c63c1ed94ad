from dataclasses import replace

import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedharness.catalog import EVIL_FRACTIONS, LABEL_SKEW_BETAS, get_scenario, scenario_names
from fedharness.config import ConfigError, config_to_dict, emit_config, parse_config, parse_mapping
from fedharness.engine import ExperimentConfig


def test_minimal_config_resolves_to_scenario():
    assert parse_config('scenario = "label_skew_default"') == get_scenario("label_skew_default")


def test_no_scenario_uses_defaults():
    cfg = parse_config("rounds = 10\n")
    assert cfg == replace(ExperimentConfig(), rounds=10)


def test_dotted_overrides():
    cfg = parse_config('scenario = "label_skew_default"\npartition.beta = 0.3\nattack.kind = "lie"\n'
                       'attack.evil_fraction = 0.2\nmetrics = ["cross_client", "degradation"]\n')
    assert cfg.partition.beta == 0.3 and cfg.attack.kind == "lie"
    assert cfg.metrics == ("cross_client", "degradation")
    assert cfg.partition.num_clients == 10


def _errors(text):
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    return exc.value.errors


def test_negative_beta_names_key():
    errs = _errors("partition.beta = -1.0")
    assert len(errs) == 1 and errs[0].startswith("partition.beta:")


def test_every_problem_reported_with_path():
    errs = _errors('rounds = "ten"\nlocal.lr = -0.1\nbogus.key = 1\naggregator.kind = "krum"\n')
    heads = sorted(e.split(":")[0] for e in errs)
    assert heads == ["aggregator.kind", "bogus.key", "local.lr", "rounds"]


def test_type_strictness():
    assert _errors("local.epochs = 1.5")[0].startswith("local.epochs: expected int")
    assert _errors("aggregator.crfl = 1")[0].startswith("aggregator.crfl: expected bool")
    assert _errors("rounds = true")[0].startswith("rounds: expected int")
    assert _errors("local.lr = nan")[0] == "local.lr: must be finite"
    assert _errors('domains.rotations = [0.0, "x"]')[0].startswith("domains.rotations[1]")
    assert parse_config("local.lr = 1").local.lr == 1.0


def test_cross_field_errors():
    errs = _errors("rounds = 7\neval_every = 2\n")
    assert any(e.startswith("eval_every") for e in errs)
    errs = _errors('metrics = ["ood"]')
    assert any("held_out" in e for e in errs)
    assert any("unknown metric" in e for e in _errors('metrics = ["speed"]'))
    assert any("unknown scenario" in e for e in _errors('scenario = "nope"'))


def test_syntax_and_missing_file(tmp_path):
    assert "syntax" in _errors("rounds = = 3")[0]
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "absent.toml")


def test_file_input(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text('scenario = "label_skew_beta0.1"\n')
    assert parse_config(path).partition.beta == 0.1
    assert parse_config(str(path)).partition.beta == 0.1


@pytest.mark.parametrize("name", scenario_names())
def test_every_scenario_round_trips(name):
    cfg = get_scenario(name)
    text = emit_config(cfg)
    assert parse_config(text) == cfg
    assert parse_mapping(config_to_dict(cfg)) == cfg


@given(st.floats(0.01, 100.0), st.integers(1, 50), st.sampled_from(["mean", "trimmed", "rfa", "multi_krum"]))
def test_emitted_overrides_round_trip(beta, rounds, kind):
    cfg = parse_config(f'partition.beta = {beta!r}\nrounds = {rounds}\neval_every = 1\naggregator.kind = "{kind}"\n')
    assert parse_config(emit_config(cfg)) == cfg


def test_catalog_covers_grid():
    names = scenario_names()
    for beta in LABEL_SKEW_BETAS:
        assert f"label_skew_beta{beta}" in names
    assert 0.1 in LABEL_SKEW_BETAS and 0.4 in EVIL_FRACTIONS
    assert "byzantine_lie_u40" in names and get_scenario("byzantine_lie_u40").attack.evil_fraction == 0.4
    assert get_scenario("domain_skew").domains.count == 4
    with pytest.raises(KeyError):
        get_scenario("nope")
