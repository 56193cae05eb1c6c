import copy
import logging
import os
import platform
from dataclasses import dataclass, field

import numpy as np
import psutil
import yaml

from cli import __version__
from schedules.step_size import B_LOWER, B_UPPER
from utils.errors import ConfigParseError, ConfigValidationError

logger = logging.getLogger('ConfigLoader')

SCENARIOS = ('td', 'scaled', 'identity', 'affine')
STOCHASTIC_TOL = 1e-12

DEFAULTS = {
    'chain': {
        'transitions': [[0.7, 0.3], [0.3, 0.7]],
        'generate': None,
        'random_inputs': 100,
        'tolerance': 1e-10,
    },
    'mdp': {
        'generate': {'n_states': 4, 'n_actions': 2, 'seed': 7, 'mixing': 0.1},
        'rewards': None,
        'transitions': None,
        'initial': None,
    },
    'policy': {
        'kind': 'uniform',
        'actions': None,
        'table': None,
    },
    'schedule': {
        'b': 0.9,
        'diagnostic_mode': False,
        'series_fraction': 0.01,
    },
    'run': {
        'scenario': 'td',
        'horizon': 1000000,
        'replicas': 1,
        'seed': 0,
        'threads': None,
        'checkpoint_start': 16,
        'checkpoint_ratio': 2.0,
        'decomposition': False,
        'check_compact_form': False,
        'strict': False,
        'operator': {'dimension': 3, 'factor': 0.5, 'contraction': 0.9, 'seed': 0},
    },
    'sweep': {
        'replicas': 20,
        'b_values': None,
        'tail_fraction': 0.1,
        'scaled_growth_limit': 1.5,
        'slope_range': [-0.75, -0.35],
        'gain_slope_range': [-1.2, -0.8],
    },
    'logging': {
        'log_path': './logs',
        'level': 'INFO',
        'event_cooldown': 10,
    },
    'reporting': {
        'enabled': True,
    },
    'output': {
        'path': './results',
    },
}

INTEGER_FIELDS = (
    ('chain', 'random_inputs'),
    ('run', 'horizon'),
    ('run', 'replicas'),
    ('run', 'seed'),
    ('run', 'checkpoint_start'),
    ('sweep', 'replicas'),
)


def default_threads():
    return psutil.cpu_count(logical=False) or 1


# ===============================
# Loading
# ===============================
def _deep_merge(base, override, path=''):
    merged = copy.deepcopy(base)
    for key, value in (override or {}).items():
        where = f"{path}.{key}" if path else key
        if path == '' and key not in base:
            raise ConfigValidationError(where, f"unknown section; expected one of {', '.join(base)}")
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value, where)
        else:
            merged[key] = value
    return merged


def _read_yaml(path):
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        mark = getattr(e, 'problem_mark', None)
        if mark is not None:
            raise ConfigParseError(f"Cannot parse {path}: {getattr(e, 'problem', e)}", mark.line + 1, mark.column + 1)
        raise ConfigParseError(f"Cannot parse {path}: {e}")
    except OSError as e:
        raise ConfigParseError(f"Cannot read {path}: {e}")


def _as_int(value, where):
    """Accept 1000000, 1e6, '1e6' and 1.0e+6 for integer fields"""
    try:
        number = float(value)
    except (TypeError, ValueError):
        raise ConfigValidationError(where, f"expected an integer, got {value!r}")
    if not np.isfinite(number) or number != int(number):
        raise ConfigValidationError(where, f"expected an integer, got {value!r}")
    return int(number)


def _as_float(value, where):
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ConfigValidationError(where, f"expected a number, got {value!r}")


def apply_overrides(config, overrides):
    """CLI flags win over the file; None means the flag was not given"""
    mapping = {
        'b': [('schedule', 'b')],
        'horizon': [('run', 'horizon')],
        'replicas': [('run', 'replicas'), ('sweep', 'replicas')],
        'seed': [('run', 'seed')],
        'threads': [('run', 'threads')],
        'strict': [('run', 'strict')],
        'output': [('output', 'path')],
    }
    for flag, value in (overrides or {}).items():
        if value is None or flag not in mapping:
            continue
        for section, key in mapping[flag]:
            config[section][key] = value
        if flag == 'b':
            config['sweep']['b_values'] = [value]
    return config


# ===============================
# Validation
# ===============================
def _check_rows(table, where):
    array = np.asarray(table, dtype=float)
    if np.any(array < 0):
        bad = np.argwhere(array < 0)[0].tolist()
        raise ConfigValidationError(where + ''.join(f"[{i}]" for i in bad), "negative probability")
    sums = array.sum(axis=-1)
    for index in np.argwhere(np.abs(sums - 1.0) > STOCHASTIC_TOL):
        label = where + ''.join(f"[{i}]" for i in index.tolist())
        raise ConfigValidationError(label, f"sums to {sums[tuple(index)]:.12g}, expected 1")
    return array


def _validate_b(b, where, diagnostic):
    if diagnostic:
        if b <= 0:
            raise ConfigValidationError(where, f"b = {b} must be positive")
        return
    if not B_LOWER < b <= B_UPPER:
        raise ConfigValidationError(
            where, f"b = {b} outside (0.8, 1]; step sizes alpha_n = 1/(n+1)^b need b in (4/5, 1]"
        )


def validate(config, subcommand=None):
    for section, key in INTEGER_FIELDS:
        config[section][key] = _as_int(config[section][key], f"{section}.{key}")

    chain = config['chain']
    if chain['generate'] is not None:
        generate = chain['generate']
        generate['n_states'] = _as_int(generate.get('n_states', 2), 'chain.generate.n_states')
        generate['seed'] = _as_int(generate.get('seed', 0), 'chain.generate.seed')
        generate.setdefault('mixing', 0.1)
    else:
        P = _check_rows(chain['transitions'], 'chain.transitions')
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ConfigValidationError('chain.transitions', f"must be a square matrix, got shape {P.shape}")

    mdp = config['mdp']
    if mdp['transitions'] is not None:
        p = _check_rows(mdp['transitions'], 'mdp.transitions')
        r = np.asarray(mdp['rewards'], dtype=float) if mdp['rewards'] is not None else None
        if p.ndim != 3 or r is None or r.shape != p.shape[:2]:
            raise ConfigValidationError('mdp.rewards', "explicit MDPs need rewards of shape (S, A) matching transitions (S, A, S)")
        if mdp['initial'] is not None:
            _check_rows([mdp['initial']], 'mdp.initial')
        mdp['generate'] = None
    else:
        generate = mdp['generate']
        for key in ('n_states', 'n_actions', 'seed'):
            generate[key] = _as_int(generate[key], f"mdp.generate.{key}")
        generate.setdefault('mixing', 0.1)

    policy = config['policy']
    if policy['kind'] not in ('uniform', 'deterministic', 'table'):
        raise ConfigValidationError('policy.kind', f"expected uniform, deterministic or table, got {policy['kind']!r}")
    if policy['kind'] == 'deterministic' and policy['actions'] is None:
        raise ConfigValidationError('policy.actions', "a deterministic policy needs one action per state")
    if policy['kind'] == 'table':
        if policy['table'] is None:
            raise ConfigValidationError('policy.table', "a table policy needs pi(a|s) rows")
        _check_rows(policy['table'], 'policy.table')

    schedule = config['schedule']
    schedule['b'] = _as_float(schedule['b'], 'schedule.b')
    diagnostic = bool(schedule['diagnostic_mode']) and subcommand == 'check-schedules'
    _validate_b(schedule['b'], 'schedule.b', diagnostic)

    run = config['run']
    if run['scenario'] not in SCENARIOS:
        raise ConfigValidationError('run.scenario', f"expected one of {', '.join(SCENARIOS)}, got {run['scenario']!r}")
    if run['horizon'] < 1:
        raise ConfigValidationError('run.horizon', f"must be >= 1, got {run['horizon']}")
    if run['replicas'] < 1:
        raise ConfigValidationError('run.replicas', f"must be >= 1, got {run['replicas']}")
    run['threads'] = default_threads() if run['threads'] is None else _as_int(run['threads'], 'run.threads')
    if run['threads'] < 1:
        raise ConfigValidationError('run.threads', f"must be >= 1, got {run['threads']}")
    run['checkpoint_ratio'] = _as_float(run['checkpoint_ratio'], 'run.checkpoint_ratio')
    if run['checkpoint_ratio'] <= 1.0:
        raise ConfigValidationError('run.checkpoint_ratio', f"must exceed 1, got {run['checkpoint_ratio']}")
    operator = run['operator']
    operator['dimension'] = _as_int(operator['dimension'], 'run.operator.dimension')
    operator['seed'] = _as_int(operator['seed'], 'run.operator.seed')

    sweep = config['sweep']
    if sweep['replicas'] < 1:
        raise ConfigValidationError('sweep.replicas', f"must be >= 1, got {sweep['replicas']}")
    if sweep['b_values'] is None:
        sweep['b_values'] = [schedule['b']]
    sweep['b_values'] = [_as_float(b, 'sweep.b_values') for b in sweep['b_values']]
    if not diagnostic:
        for b in sweep['b_values']:
            _validate_b(b, 'sweep.b_values', False)

    return config


# ===============================
# Manifest
# ===============================
@dataclass
class RunManifest:
    subcommand: str
    config: dict
    base_seed: int
    version: str = __version__
    output_dir: str = ''
    outputs: list = field(default_factory=list)
    host: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            'subcommand': self.subcommand,
            'version': self.version,
            'base_seed': self.base_seed,
            'output_dir': self.output_dir,
            'outputs': list(self.outputs),
            'host': dict(self.host),
            'config': self.config,
        }

    def write(self):
        os.makedirs(self.output_dir, exist_ok=True)
        path = os.path.join(self.output_dir, 'manifest.yaml')
        with open(path, 'w', encoding='utf-8') as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=False, default_flow_style=None)
        return path

    @classmethod
    def read(cls, path):
        data = _read_yaml(path)
        return cls(
            subcommand=data['subcommand'],
            config=data['config'],
            base_seed=data['base_seed'],
            version=data.get('version', __version__),
            output_dir=data.get('output_dir', ''),
            outputs=data.get('outputs', []),
            host=data.get('host', {}),
        )


def host_facts():
    memory = psutil.virtual_memory()
    return {
        'python': platform.python_version(),
        'platform': platform.platform(),
        'physical_cores': psutil.cpu_count(logical=False),
        'logical_cores': psutil.cpu_count(logical=True),
        'memory_gb': round(memory.total / 1024 ** 3, 2),
    }


def load_config(path=None, overrides=None, subcommand=None):
    """Defaults, then the YAML file, then CLI flags; validated with every default filled in"""
    raw = _read_yaml(path) if path else {}
    if not isinstance(raw, dict):
        raise ConfigParseError(f"{path} must contain a mapping of sections, got {type(raw).__name__}")
    config = _deep_merge(DEFAULTS, raw)
    config = apply_overrides(config, overrides)
    return validate(config, subcommand)


def parse_config(path=None, overrides=None, subcommand=None):
    config = load_config(path, overrides, subcommand)
    output_dir = os.path.join(config['output']['path'], subcommand) if subcommand else config['output']['path']
    manifest = RunManifest(
        subcommand=subcommand,
        config=config,
        base_seed=config['run']['seed'],
        output_dir=output_dir,
        host=host_facts(),
    )
    logger.debug(f"Resolved configuration for {subcommand}")
    return manifest
