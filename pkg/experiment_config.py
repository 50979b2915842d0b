#!/usr/bin/env python3
"""
Experiment configuration: strict parsing, defaults and validation.

The file is read with yaml.safe_load, so both YAML and JSON documents are accepted.
Every error names the dotted path of the offending key.
"""

import dataclasses
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, TextIO, Tuple

import yaml

from bench import FIGURE_SEED, list_benchmarks, load_benchmark
from bo_models import ConfigError, FantasyMode


OUTPUT_DIR_ENV = 'DKG_OUTPUT_DIR'
ACQUISITIONS = ('dkg', 'kg', 'ei', 'dei', 'ucbpe')
DERIVATIVE_FREE = ('kg', 'ei')


@dataclass
class Budgets:
    fantasies: int = 256
    rerank_fantasies: int = 64
    sga_steps: int = 50
    restarts: int = 8
    inner_steps: int = 30
    inner_starts: int = 8
    raw_samples: int = 128
    hyper_samples: int = 10
    walkers: Optional[int] = None
    burn_in: int = 200

    def acquisition_budgets(self) -> Dict[str, int]:
        """The subset consumed by the acquisition optimizers."""
        return {name: getattr(self, name) for name in
                ('rerank_fantasies', 'sga_steps', 'restarts', 'inner_steps', 'inner_starts', 'raw_samples')}


@dataclass
class Figure1Settings:
    grid_size: int = 201
    num_history: int = 3
    fantasies: int = 256
    length_scale: float = 0.15
    seed: int = FIGURE_SEED


@dataclass
class ExperimentConfig:
    benchmark: str
    acquisition: str
    mode: FantasyMode
    q: int
    iterations: int = 10
    replications: int = 1
    noise_sigma: float = 0.5
    mask: Optional[Tuple[int, ...]] = None
    seed: int = 0
    output_dir: str = 'results'
    budgets: Budgets = field(default_factory=Budgets)
    figure1: Figure1Settings = field(default_factory=Figure1Settings)

    def mask_flags(self, dim: int) -> Tuple[bool, ...]:
        if self.mask is None:
            return (self.mode != FantasyMode.VALUE,) * dim
        return tuple(i in self.mask for i in range(dim))


def _check_keys(document: Dict[str, Any], allowed, prefix: str = ''):
    if not isinstance(document, dict):
        raise ConfigError("expected a mapping", prefix.rstrip('.') or '<root>')
    for key in document:
        if key not in allowed:
            raise ConfigError("unknown key", f"{prefix}{key}")


def _integer(value, key_path: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"expected an integer, got {value!r}", key_path)
    if value < minimum:
        raise ConfigError(f"must be at least {minimum}, got {value}", key_path)
    return value


def _number(value, key_path: str, minimum: float = 0.0, strict: bool = False) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"expected a number, got {value!r}", key_path)
    if value < minimum or (strict and value == minimum):
        raise ConfigError(f"must be {'>' if strict else '>='} {minimum}, got {value}", key_path)
    return float(value)


def _section(cls, document: Optional[Dict[str, Any]], prefix: str):
    document = document or {}
    names = [f.name for f in dataclasses.fields(cls)]
    _check_keys(document, names, f"{prefix}.")
    values = {}
    for f in dataclasses.fields(cls):
        if f.name not in document:
            continue
        value, key_path = document[f.name], f"{prefix}.{f.name}"
        if f.name == 'walkers' and value is None:
            values[f.name] = None
        elif f.name == 'length_scale':
            values[f.name] = _number(value, key_path, strict=True)
        elif f.name in ('burn_in', 'seed'):
            values[f.name] = _integer(value, key_path, minimum=0)
        else:
            values[f.name] = _integer(value, key_path, minimum=2 if f.name == 'walkers' else 1)
    section = cls(**values)
    if isinstance(section, Budgets) and section.raw_samples < section.inner_starts:
        raise ConfigError(f"must be at least inner_starts ({section.inner_starts}), got {section.raw_samples}",
                          f"{prefix}.raw_samples")
    return section


def config_from_dict(document: Dict[str, Any]) -> ExperimentConfig:
    """Validates a parsed document and fills the defaults."""
    top_level = [f.name for f in dataclasses.fields(ExperimentConfig)]
    _check_keys(document, top_level)
    for required in ('benchmark', 'acquisition'):
        if required not in document:
            raise ConfigError("required key is missing", required)

    name = document['benchmark']
    if name not in list_benchmarks():
        raise ConfigError(f"unknown benchmark {name!r}; available: {', '.join(list_benchmarks())}", 'benchmark')
    bench = load_benchmark(name)
    acquisition = document['acquisition']
    if acquisition not in ACQUISITIONS:
        raise ConfigError(f"unknown acquisition {acquisition!r}; expected one of {', '.join(ACQUISITIONS)}",
                          'acquisition')

    mask = document.get('mask')
    if mask is not None:
        if not isinstance(mask, list) or not mask:
            raise ConfigError("expected a nonempty list of partial-derivative indices", 'mask')
        for i, index in enumerate(mask):
            _integer(index, f"mask.{i}", minimum=0)
            if index >= bench.dim:
                raise ConfigError(f"index {index} is out of range for a {bench.dim}-dimensional benchmark",
                                  f"mask.{i}")
        if len(set(mask)) != len(mask):
            raise ConfigError("indices must be distinct", 'mask')
        mask = tuple(sorted(mask))

    if 'mode' in document:
        try:
            mode = FantasyMode(document['mode'])
        except ValueError:
            raise ConfigError(f"unknown mode {document['mode']!r}; expected one of "
                              f"{', '.join(m.value for m in FantasyMode)}", 'mode') from None
    elif acquisition in ('dkg', 'dei'):
        mode = FantasyMode.MASKED if mask is not None or not bench.full_gradient else FantasyMode.FULL
    else:
        mode = FantasyMode.VALUE

    if mode == FantasyMode.DIRECTIONAL and acquisition != 'dkg':
        raise ConfigError("directional mode is only available with dkg", 'mode')
    if acquisition == 'dkg' and mode == FantasyMode.VALUE:
        raise ConfigError("dkg needs derivative observations; use kg for value-only runs", 'mode')
    if acquisition == 'dei' and mode not in (FantasyMode.FULL, FantasyMode.MASKED):
        raise ConfigError("dei needs full or masked gradient observations", 'mode')
    if acquisition in DERIVATIVE_FREE and mode != FantasyMode.VALUE:
        raise ConfigError(f"{acquisition} does not use derivatives; mode must be value", 'mode')
    if mode == FantasyMode.MASKED and mask is None:
        mask = tuple(i for i, observed in enumerate(bench.default_mask) if observed)
    if mode != FantasyMode.MASKED and mask is not None:
        raise ConfigError("a mask is only meaningful in masked mode", 'mask')

    output_dir = document.get('output_dir', 'results')
    if not isinstance(output_dir, str) or not output_dir:
        raise ConfigError("expected a nonempty path", 'output_dir')
    output_dir = os.environ.get(OUTPUT_DIR_ENV, output_dir)

    return ExperimentConfig(
        benchmark=name,
        acquisition=acquisition,
        mode=mode,
        q=_integer(document.get('q', bench.default_q), 'q'),
        iterations=_integer(document.get('iterations', 10), 'iterations'),
        replications=_integer(document.get('replications', 1), 'replications'),
        noise_sigma=_number(document.get('noise_sigma', 0.5), 'noise_sigma'),
        mask=mask,
        seed=_integer(document.get('seed', 0), 'seed', minimum=0),
        output_dir=output_dir,
        budgets=_section(Budgets, document.get('budgets'), 'budgets'),
        figure1=_section(Figure1Settings, document.get('figure1'), 'figure1'),
    )


def parse_config(path: str) -> ExperimentConfig:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            document = yaml.safe_load(f)
    except FileNotFoundError:
        raise ConfigError(f"configuration file not found: {path}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"malformed configuration file {path}: {e}") from None
    return config_from_dict(document if document is not None else {})


def config_to_dict(config: ExperimentConfig) -> Dict[str, Any]:
    document = dataclasses.asdict(config)
    document['mode'] = config.mode.value
    document['mask'] = None if config.mask is None else list(config.mask)
    if document['mask'] is None:
        del document['mask']
    return document


def serialize_config(config: ExperimentConfig, file: TextIO) -> None:
    yaml.safe_dump(config_to_dict(config), file, sort_keys=False, allow_unicode=True)
