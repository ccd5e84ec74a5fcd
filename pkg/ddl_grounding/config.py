"""This module contains the class that stores the run configuration."""

import configparser
import hashlib
import json
import logging
from dataclasses import dataclass, field, fields
from os import getenv

from .consolidation import STRATEGIES, ConsensusConfig
from .errors import ConfigError
from .lvlm_client import TOKEN_ENV, MockNoise, ModelEndpoint
from .viewgen import ROTATION_FIXED, ROTATION_UNIFORM

log = logging.getLogger(__name__)

INI_SECTION = 'ddl'
META_TEMPERATURE = 0.7
META_TOP_P = 0.9

VISUAL = 'visual'
LINGUISTIC = 'linguistic'
UNCERTAINTY_MODES = (VISUAL, LINGUISTIC)

_TRUE = ('1', 'true', 'yes', 'on')
_FALSE = ('0', 'false', 'no', 'off', '')


def to_bool(value):
    """Convert a flag or INI value to bool."""
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in _TRUE:
        return True
    if text in _FALSE:
        return False
    raise ConfigError('Not a boolean: {0!r}'.format(value))


def to_seeds(value):
    """Parse ``1,2,3`` (or a list) into a tuple of ints."""
    if isinstance(value, (list, tuple)):
        return tuple(int(v) for v in value)
    return tuple(int(v) for v in str(value).split(',') if v.strip())


def to_strategy(value):
    """Normalize a consolidation strategy name."""
    return str(value).strip().upper()


def to_mode(value):
    """Normalize an uncertainty mode name."""
    return str(value).strip().lower()


@dataclass
class RunConfig(object):
    """Resolved settings of one run.

    Every field is also an INI key of the ``[ddl]`` section and, with dashes
    instead of underscores, a command-line flag.
    """

    target_url: str = None
    target_model: str = 'qwen2.5-vl-7b-instruct'
    meta_url: str = None
    meta_model: str = 'gpt-4o'
    m: int = 7
    tau: float = 0.1
    omega1: float = 0.6
    omega2: float = 0.4
    seed: int = None
    seeds: tuple = ()
    max_generations: int = 10
    strategy: str = 'RHC'
    uncertainty: str = VISUAL
    workers: int = 32
    output_dir: str = 'ddl_run'
    eps: float = 0.9
    min_pts: int = 2
    rotation: str = ROTATION_FIXED
    score_full_pipeline: bool = False
    mock: bool = False
    jitter_px: float = 0.0
    hallucination_prob: float = 0.0
    miss_prob: float = 0.0
    sampling_jitter_px: float = 0.0
    consistent_jitter: bool = False
    max_tokens: int = 1024
    timeout: float = 60.0
    max_retries: int = 3
    normalized_range: int = 0
    log_level: str = 'INFO'
    api_token: str = field(default=None, repr=False)

    _converters = {
        'seeds': to_seeds,
        'strategy': to_strategy,
        'uncertainty': to_mode,
        'score_full_pipeline': to_bool,
        'mock': to_bool,
        'consistent_jitter': to_bool,
    }

    @classmethod
    def from_sources(cls, namespace=None, ini=None, **overrides):
        """Resolve every field from the CLI namespace and an INI mapping.

        :param namespace: argparse namespace; ``None`` values count as unset
        :param ini:       dict of ``[ddl]`` keys, e.g. from :func:`load_ini`
        :param overrides: explicit values taking precedence over both
        :return: validated RunConfig
        """
        values = {}
        for f in fields(cls):
            if f.name == 'api_token':
                continue
            value = overrides.get(f.name)
            if value is None:
                value = find_option(f.name, namespace, ini)
            if value is not None:
                values[f.name] = cls._convert(f, value)
        values['api_token'] = overrides.get('api_token') or getenv(TOKEN_ENV)
        config = cls(**values)
        config.validate()
        return config

    @classmethod
    def _convert(cls, f, value):
        converter = cls._converters.get(f.name)
        try:
            if converter is not None:
                return converter(value)
            if f.type in (int, float):
                return f.type(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError('Invalid value for {0}: {1!r} ({2})'
                              .format(f.name, value, exc))
        return value

    def validate(self):
        """Check cross-field consistency.

        :raises ConfigError: on the first inconsistency found
        """
        if self.strategy not in STRATEGIES:
            raise ConfigError('strategy must be one of {0}: {1}'
                              .format(', '.join(STRATEGIES), self.strategy))
        if self.uncertainty not in UNCERTAINTY_MODES:
            raise ConfigError('uncertainty must be one of {0}: {1}'
                              .format(', '.join(UNCERTAINTY_MODES),
                                      self.uncertainty))
        if self.rotation not in (ROTATION_FIXED, ROTATION_UNIFORM):
            raise ConfigError('Unknown rotation mode: {0}'
                              .format(self.rotation))
        if self.workers < 1:
            raise ConfigError('workers must be at least 1')
        if self.max_generations < 0:
            raise ConfigError('max_generations must be >= 0')
        self.consensus()
        if self.mock:
            if self.seed is None:
                raise ConfigError('--seed is required in mock mode')
            self.noise()
        elif not self.target_url:
            raise ConfigError('--target-url is required outside mock mode')

    def consensus(self):
        """ConsensusConfig of this run."""
        return ConsensusConfig(tau=self.tau, omega1=self.omega1,
                               omega2=self.omega2, m=self.m)

    def noise(self):
        """MockNoise of this run."""
        try:
            return MockNoise(jitter_px=self.jitter_px,
                             hallucination_prob=self.hallucination_prob,
                             miss_prob=self.miss_prob,
                             sampling_jitter_px=self.sampling_jitter_px,
                             consistent_jitter=self.consistent_jitter)
        except ValueError as exc:
            raise ConfigError(str(exc))

    def target_endpoint(self):
        """ModelEndpoint of the grounding model (greedy decoding)."""
        return ModelEndpoint(self.target_url or '', self.target_model,
                             timeout=self.timeout,
                             max_retries=self.max_retries,
                             max_tokens=self.max_tokens,
                             normalized_range=self.normalized_range)

    def meta_endpoint(self):
        """ModelEndpoint of the meta-optimizer."""
        return ModelEndpoint(self.meta_url or self.target_url or '',
                             self.meta_model, timeout=self.timeout,
                             max_retries=self.max_retries,
                             temperature=META_TEMPERATURE, top_p=META_TOP_P,
                             max_tokens=self.max_tokens)

    def run_seeds(self):
        """Roster seeds of the run: ``seeds`` when given, else ``seed``."""
        if self.seeds:
            return self.seeds
        return (self.seed if self.seed is not None else 0,)

    def snapshot(self):
        """JSON-friendly resolved configuration without secrets."""
        payload = {}
        for f in fields(self):
            if f.name == 'api_token':
                continue
            value = getattr(self, f.name)
            payload[f.name] = list(value) if isinstance(value, tuple) \
                else value
        return payload

    def config_hash(self):
        """SHA-256 of the canonical snapshot, ignoring the output directory."""
        payload = self.snapshot()
        payload.pop('output_dir', None)
        canonical = json.dumps(payload, sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def load_ini(path):
    """Read the ``[ddl]`` section of an INI file.

    :param path: config file path
    :return: dict of raw string values; empty when the section is absent
    """
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding='utf-8') as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError('Cannot read config file {0}: {1}'
                          .format(path, exc))
    if not parser.has_section(INI_SECTION):
        log.warning('Config file %s has no [%s] section', path, INI_SECTION)
        return {}
    return {key.replace('-', '_'): value
            for key, value in parser.items(INI_SECTION)}


def find_option(option_name, namespace=None, ini=None, default=None):
    """
    Find a single configuration setting from multiple places.

    The value is retrieved in the following places in priority order:

    1. From `namespace.[option_name]` (the command line).
    2. From `ini[option_name]` (the config file).

    :param option_name: name of the option
    :param namespace:   parsed command-line arguments
    :param ini:         config file values
    :param default:     value to be returned if not found
    :return: option value
    """
    value = getattr(namespace, option_name, None) if namespace else None
    if value is None and ini:
        value = ini.get(option_name)
    return default if value is None else value
