"""Flat experiment configs: parsing, validation and emission.

A config is TOML restricted to top-level scalars and dotted section keys::

    scenario = "label_skew_default"
    rounds = 30
    partition.beta = 0.3
    attack.kind = "random_noise"

Keys left out take their value from the named scenario, or from the
built-in defaults when no scenario (or ``"custom"``) is given. Unknown keys, type mismatches
and constraint violations are collected and reported together, each with
its key path.
"""

from __future__ import annotations

import math
from dataclasses import fields, replace
from pathlib import Path

import tomli

from .aggregate import AGGREGATOR_KINDS, AggregatorSpec
from .attack import ATTACK_KINDS, AttackSpec
from .client import OPTIMIZERS, LocalConfig
from .core import ContractViolation
from .data import PartitionSpec, SyntheticSpec
from .engine import METRICS, DomainsConfig, EvalConfig, ExperimentConfig, validate
from .model import MODEL_KINDS, ModelSpec

SECTIONS = {
    "model": ModelSpec,
    "data": SyntheticSpec,
    "partition": PartitionSpec,
    "domains": DomainsConfig,
    "local": LocalConfig,
    "attack": AttackSpec,
    "aggregator": AggregatorSpec,
    "eval": EvalConfig,
}
TOP_LEVEL = ("scenario", "rounds", "eval_every", "client_weighting", "metrics", "master_seed")

# element types of tuple-valued keys; keys whose default is None
TUPLE_ELEMS = {
    "domains.rotations": float,
    "domains.scales": float,
    "domains.offsets": float,
    "attack.trigger_dims": int,
    "metrics": str,
}
OPTIONAL_INT = {"aggregator.f"}


class ConfigError(ValueError):
    """Config could not be parsed or failed validation. ``errors`` lists every problem."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


def _between(lo, hi, lo_open=False, hi_open=False):
    def check(v):
        return (v > lo if lo_open else v >= lo) and (v < hi if hi_open else v <= hi)
    return check


def _one_of(options):
    return lambda v: v in options, f"must be one of {', '.join(options)}"


_pos = (lambda v: v > 0, "must be > 0")
_nonneg = (lambda v: v >= 0, "must be >= 0")
_ge1 = (lambda v: v >= 1, "must be >= 1")
_ge2 = (lambda v: v >= 2, "must be >= 2")

RULES = {
    "model.kind": _one_of(MODEL_KINDS),
    "model.input_dim": _ge1,
    "model.num_classes": _ge2,
    "model.hidden_dim": _ge1,
    "data.num_classes": _ge2,
    "data.input_dim": _ge1,
    "data.samples_per_class": _ge1,
    "data.class_separation": _nonneg,
    "data.noise_std": _pos,
    "partition.num_clients": _ge1,
    "partition.beta": _pos,
    "partition.min_samples_per_client": _ge1,
    "domains.held_out": (lambda v: v >= -1, "must be >= -1"),
    "local.epochs": _ge1,
    "local.batch_size": _ge1,
    "local.lr": _nonneg,
    "local.momentum": (_between(0.0, 1.0, hi_open=True), "must lie in [0, 1)"),
    "local.weight_decay": _nonneg,
    "local.optimizer": _one_of(OPTIMIZERS),
    "local.mu": _nonneg,
    "local.server_lr": _pos,
    "attack.kind": _one_of(ATTACK_KINDS),
    "attack.evil_fraction": (_between(0.0, 0.5, hi_open=True), "must lie in [0, 0.5)"),
    "attack.sigma": _nonneg,
    "attack.z": _nonneg,
    "attack.direction": _one_of(("neg_std", "neg_mean")),
    "attack.tol": _pos,
    "attack.flip_mode": _one_of(("symmetric", "pair")),
    "attack.epsilon": (_between(0.0, 1.0), "must lie in [0, 1]"),
    "attack.target_class": _nonneg,
    "attack.poison_fraction": (_between(0.0, 1.0), "must lie in [0, 1]"),
    "attack.lam": _nonneg,
    "aggregator.kind": _one_of(AGGREGATOR_KINDS),
    "aggregator.trim_frac": (_between(0.0, 0.5, hi_open=True), "must lie in [0, 0.5)"),
    "aggregator.trim_mode": _one_of(("mean", "median")),
    "aggregator.f": _nonneg,
    "aggregator.top_k": _ge1,
    "aggregator.foolsgold_eps": _pos,
    "aggregator.dnc_b": _ge1,
    "aggregator.dnc_c": _pos,
    "aggregator.dnc_iters": _ge1,
    "aggregator.rfa_iters": _ge1,
    "aggregator.rfa_smoothing": _pos,
    "aggregator.fltrust_root_size": _ge1,
    "aggregator.fltrust_warmup_epochs": _nonneg,
    "aggregator.sageflow_e_th": _pos,
    "aggregator.sageflow_delta": _nonneg,
    "aggregator.rlr_threshold": _nonneg,
    "aggregator.rlr_lr": _pos,
    "aggregator.afl_gamma": _nonneg,
    "aggregator.afl_step": _pos,
    "aggregator.crfl_rho": _pos,
    "aggregator.crfl_sigma": _nonneg,
    "eval.test_per_class": _ge1,
    "eval.shard_size": _ge1,
    "rounds": _ge1,
    "eval_every": _ge1,
    "client_weighting": _one_of(("samples", "uniform")),
    "master_seed": _nonneg,
}


def _key_types() -> dict:
    """Key path -> scalar type (or tuple) for every settable key."""
    types = {"scenario": str}
    base = ExperimentConfig()
    for name in TOP_LEVEL[1:]:
        types[name] = type(getattr(base, name))
    for section, cls in SECTIONS.items():
        default = cls()
        for f in fields(cls):
            path = f"{section}.{f.name}"
            if path in OPTIONAL_INT:
                types[path] = int
            elif f.name == "plane":
                continue
            else:
                types[path] = type(getattr(default, f.name))
    return types


KEY_TYPES = _key_types()


def _flatten(tree: dict, prefix: str = "") -> dict:
    flat = {}
    for k, v in tree.items():
        path = f"{prefix}{k}"
        if isinstance(v, dict):
            flat.update(_flatten(v, path + "."))
        else:
            flat[path] = v
    return flat


def _coerce(path: str, value, errors: list):
    want = KEY_TYPES[path]
    if want is tuple:
        elem = TUPLE_ELEMS[path]
        if not isinstance(value, (list, tuple)):
            errors.append(f"{path}: expected a list, got {type(value).__name__}")
            return None
        out = []
        for k, item in enumerate(value):
            v = _coerce_scalar(f"{path}[{k}]", elem, item, errors)
            if v is None:
                return None
            out.append(v)
        return tuple(out)
    return _coerce_scalar(path, want, value, errors)


def _coerce_scalar(path: str, want: type, value, errors: list):
    if want is bool:
        if isinstance(value, bool):
            return value
    elif want is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif want is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            if math.isfinite(value):
                return float(value)
            errors.append(f"{path}: must be finite")
            return None
    elif want is str:
        if isinstance(value, str):
            return value
    errors.append(f"{path}: expected {want.__name__}, got {type(value).__name__} {value!r}")
    return None


def config_to_flat(cfg: ExperimentConfig) -> dict:
    """Ordered ``{key path: value}`` for every key; None-valued optional keys are omitted."""
    flat = {"scenario": cfg.scenario}
    for name in TOP_LEVEL[1:]:
        flat[name] = getattr(cfg, name)
    for section in SECTIONS:
        obj = getattr(cfg, section)
        for f in fields(obj):
            path = f"{section}.{f.name}"
            if path not in KEY_TYPES:
                continue
            value = getattr(obj, f.name)
            if value is not None:
                flat[path] = value
    return flat


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Nested plain-data form of ``cfg`` (the JSON config echo)."""
    out = {}
    for path, value in config_to_flat(cfg).items():
        value = list(value) if isinstance(value, tuple) else value
        head, _, tail = path.partition(".")
        if tail:
            out.setdefault(head, {})[tail] = value
        else:
            out[head] = value
    return out


def _base_config(name: str) -> ExperimentConfig:
    from .catalog import get_scenario

    return get_scenario(name)


def parse_mapping(tree: dict) -> ExperimentConfig:
    """Resolve a nested mapping (from TOML or a JSON echo) into a validated config."""
    errors = []
    flat = _flatten(tree)
    for path in flat:
        if path not in KEY_TYPES:
            errors.append(f"{path}: unknown key")
    values = {p: _coerce(p, v, errors) for p, v in flat.items() if p in KEY_TYPES}
    values = {p: v for p, v in values.items() if v is not None}

    base = ExperimentConfig()
    # "custom" names the bare defaults, so configs written without a scenario re-parse
    if "scenario" in values and values["scenario"] != base.scenario:
        try:
            base = _base_config(values["scenario"])
        except KeyError:
            errors.append(f"scenario: unknown scenario {values['scenario']!r}")

    for path, value in values.items():
        rule = RULES.get(path)
        if rule is not None and not rule[0](value):
            errors.append(f"{path}: {rule[1]}, got {value!r}")
    if "metrics" in values:
        bad = [m for m in values["metrics"] if m not in METRICS]
        if bad:
            errors.append(f"metrics: unknown metric(s) {bad}")
    if errors:
        raise ConfigError(errors)

    sections = {}
    for section, cls in SECTIONS.items():
        prefix = section + "."
        overrides = {p[len(prefix):]: v for p, v in values.items() if p.startswith(prefix)}
        try:
            sections[section] = replace(getattr(base, section), **overrides)
        except ContractViolation as exc:
            errors.append(f"{section}: {exc}")
    top = {p: v for p, v in values.items() if "." not in p}
    if errors:
        raise ConfigError(errors)
    cfg = replace(base, **sections, **top)
    errors.extend(validate(cfg))
    if errors:
        raise ConfigError(errors)
    return cfg


def parse_config(source) -> ExperimentConfig:
    """Parse a config file path, or inline config text, into a validated config."""
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source and "=" not in source):
        try:
            text = Path(source).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError([f"config: cannot read {source}: {exc.strerror}"]) from exc
    else:
        text = source
    try:
        tree = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError([f"config: syntax error: {exc}"]) from exc
    return parse_mapping(tree)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return "[" + ", ".join(_format_value(v) for v in value) + "]"
    return str(value)


def emit_config(cfg: ExperimentConfig) -> str:
    """Render every resolved key, one per line; ``parse_config`` reads it back unchanged."""
    lines = [f"# resolved config for scenario {cfg.scenario}"]
    section = None
    for path, value in config_to_flat(cfg).items():
        head = path.partition(".")[0] if "." in path else None
        if head != section:
            lines.append("")
            if head is not None:
                lines.append(f"# {head}")
            section = head
        lines.append(f"{path} = {_format_value(value)}")
    return "\n".join(lines) + "\n"
