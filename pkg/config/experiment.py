# config/experiment.py
"""Experiment files: ``section.key = value`` lines layered over the Config defaults.

Grammar: one assignment per line, ``#`` starts a comment, blank lines are
ignored. Values are numbers, ``true``/``false``, quoted or bare strings, or
flat arrays of numbers such as ``[64, 64]``.

Precedence (lowest first): Config defaults, the file, ``HF_<SECTION>_<KEY>``
environment variables (plus ``HF_SEED``, ``HF_OUT``, ``HF_THREADS``), and
finally command-line overrides.
"""
import copy
import hashlib
import json
import os
import re
from typing import Any, Dict, List, Mapping, Optional

from config.settings import Config
from src.errors import ConfigurationError

FLOATS = 'floats'

# section -> key -> (type, default)
SCHEMA: Dict[str, Dict[str, tuple]] = {
    'run': {
        'env': (str, 'cstr'),
        'seed': (int, Config.SEED),
        'out': (str, Config.OUTPUT_DIR),
        'threads': (int, Config.THREADS),
        'checkpoints': (str, ''),
    },
    'env': {
        'scenarios': (str, 'grid'),
        'reward_kind': (str, 'gaussian'),
        'sigma2': (float, Config.TRAIN_REWARD_VARIANCE),
        'threshold': (float, Config.SPARSE_THRESHOLD),
        'episode_length': (int, Config.EPISODE_LENGTH),
        'time_limit_terminal': (bool, True),
        'init_lower': (FLOATS, []),
        'init_upper': (FLOATS, []),
        'sample_time': (float, Config.SAMPLE_TIME),
        'substeps': (int, Config.RK4_SUBSTEPS),
    },
    'linear': {
        'dt': (float, 0.1),
        'a': (FLOATS, []),
        'b': (FLOATS, []),
        'disturbances': (FLOATS, [0.0]),
        'state_lower': (FLOATS, [-5.0, -5.0]),
        'state_upper': (FLOATS, [5.0, 5.0]),
        'action_lower': (FLOATS, [-1.0]),
        'action_upper': (FLOATS, [1.0]),
        'goal_lower': (FLOATS, [-2.0]),
        'goal_upper': (FLOATS, [2.0]),
    },
    'train': {
        'total_steps': (int, Config.TOTAL_STEPS),
        'batch_size': (int, Config.BATCH_SIZE),
        'buffer_capacity': (int, Config.BUFFER_CAPACITY),
        'warmup_steps': (int, Config.WARMUP_STEPS),
        'target_mode': (str, Config.TARGET_MODE),
        'her': (bool, Config.HER_ENABLED),
        'hidden_sizes': (FLOATS, list(Config.HIDDEN_SIZES)),
        'gamma': (float, Config.GAMMA),
        'tau': (float, Config.TAU),
        'actor_lr': (float, Config.ACTOR_LR),
        'critic_lr': (float, Config.CRITIC_LR),
        'noise_fraction': (float, Config.NOISE_FRACTION),
        'updates_per_step': (int, Config.UPDATES_PER_STEP),
    },
    'eval': {
        'n_starts': (int, Config.EVAL_STARTS),
        'horizon': (int, Config.EVAL_HORIZON),
        'tail': (int, Config.EVAL_TAIL),
        'scenarios': (str, 'evaluation'),
        'modes': (str, 'nominal,robust'),
    },
    'mpc': {
        'horizon': (int, Config.MPC_HORIZON),
        'baseline_horizon': (int, Config.MPC_BASELINE_HORIZON),
        'scenarios': (str, 'extreme'),
        'sigma2': (float, Config.MPC_REWARD_VARIANCE),
        'penalty_weight': (float, Config.MPC_PENALTY_WEIGHT),
        'baseline_penalty_weight': (float, Config.MPC_BASELINE_PENALTY_WEIGHT),
        'baseline_m_diag': (FLOATS, []),
        'baseline_r_diag': (FLOATS, []),
        'iterations': (int, Config.MPC_ITERATIONS),
        'restarts': (int, Config.MPC_RESTARTS),
        'step_size': (float, Config.MPC_STEP_SIZE),
        'step_decay': (float, Config.MPC_STEP_DECAY),
    },
    'compare': {
        'rollouts': (int, Config.COMPARE_ROLLOUTS),
        'length': (int, Config.COMPARE_LENGTH),
        'agents': (str, 'mpc,rl,rl_mpc'),
        'rl_mpc_horizons': (FLOATS, []),
        'scenarios': (str, 'evaluation'),
    },
    'profile': {
        'start': (FLOATS, []),
        'goal': (float, float('nan')),
        'scenario_index': (int, -1),
        'length': (int, Config.COMPARE_LENGTH),
    },
    'lqr': {
        'system': (str, 'double_integrator'),
        'dt': (float, 0.1),
        'a': (FLOATS, []),
        'b': (FLOATS, []),
        'm_diag': (FLOATS, []),
        'r_diag': (FLOATS, []),
        'gamma': (float, 1.0),
        'tol': (float, Config.DARE_TOL),
        'max_iters': (int, Config.DARE_MAX_ITERS),
        'check_states': (int, 20),
        'mpc_horizon': (int, 3),
    },
}

# legacy global variables that also feed the run section
GLOBAL_ENV = {('run', 'seed'): 'HF_SEED', ('run', 'out'): 'HF_OUT', ('run', 'threads'): 'HF_THREADS'}

_LINE = re.compile(r'^\s*([A-Za-z_][\w]*)\.([A-Za-z_][\w]*)\s*=\s*(.*?)\s*$')


def parse_value(text: str) -> Any:
    """Parse one literal: array, boolean, number or string."""
    text = text.strip()
    if text.startswith('['):
        if not text.endswith(']'):
            raise ConfigurationError(f"Unterminated array: {text}")
        inner = text[1:-1].strip()
        if '[' in inner:
            raise ConfigurationError("Nested arrays are not supported")
        if not inner:
            return []
        try:
            return [float(item) for item in inner.split(',')]
        except ValueError as e:
            raise ConfigurationError(f"Arrays hold numbers only: {text}") from e
    if text.lower() in ('true', 'false'):
        return text.lower() == 'true'
    if len(text) >= 2 and text[0] == text[-1] and text[0] in '"\'':
        return text[1:-1]
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    return text


def _coerce(section: str, key: str, value: Any) -> Any:
    kind, _ = SCHEMA[section][key]
    try:
        if kind is FLOATS:
            if isinstance(value, str):
                value = parse_value(value if value.strip().startswith('[') else f"[{value}]")
            if not isinstance(value, (list, tuple)):
                value = [value]
            return [float(v) for v in value]
        if kind is bool:
            if isinstance(value, str):
                value = parse_value(value)
            if not isinstance(value, bool):
                raise ValueError(f"expected true/false, got {value!r}")
            return value
        if kind is int:
            if isinstance(value, str):
                value = parse_value(value)
            if isinstance(value, bool) or float(value) != int(float(value)):
                raise ValueError(f"expected an integer, got {value!r}")
            return int(float(value))
        if kind is float:
            if isinstance(value, str):
                value = parse_value(value)
            if isinstance(value, bool):
                raise ValueError(f"expected a number, got {value!r}")
            return float(value)
        return str(value)
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f"Invalid value for {section}.{key}: {e}") from e


def parse_text(text: str, source: str = '<string>') -> Dict[str, Dict[str, Any]]:
    values: Dict[str, Dict[str, Any]] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        match = _LINE.match(line)
        if not match:
            raise ConfigurationError(f"{source}:{number}: expected 'section.key = value', got '{raw.strip()}'")
        section, key, value = match.groups()
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigurationError(f"{source}:{number}: unknown setting '{section}.{key}'")
        values.setdefault(section, {})[key] = _coerce(section, key, parse_value(value))
    return values


class ExperimentConfig:
    """Resolved experiment settings, one dictionary per section."""

    def __init__(self, values: Optional[Mapping[str, Mapping[str, Any]]] = None, source: str = 'defaults'):
        self.source = source
        self.values: Dict[str, Dict[str, Any]] = {
            section: {key: copy.deepcopy(default) for key, (_, default) in keys.items()}
            for section, keys in SCHEMA.items()
        }
        for section, keys in (values or {}).items():
            for key, value in keys.items():
                self.set(section, key, value)

    @classmethod
    def load(cls, path: Optional[str] = None, environ: Optional[Mapping[str, str]] = None,
             overrides: Optional[List[str]] = None) -> 'ExperimentConfig':
        """Defaults, then ``path``, then environment, then ``section.key=value`` overrides."""
        config = cls(source=path or 'defaults')
        if path:
            if not os.path.exists(path):
                raise ConfigurationError(f"Config file not found: {path}")
            with open(path) as file:
                for section, keys in parse_text(file.read(), path).items():
                    for key, value in keys.items():
                        config.set(section, key, value)
        config.apply_environment(os.environ if environ is None else environ)
        for item in overrides or []:
            if '=' not in item:
                raise ConfigurationError(f"Override '{item}' must look like section.key=value")
            name, value = item.split('=', 1)
            config.set_path(name.strip(), value)
        config.validate()
        return config

    def apply_environment(self, environ: Mapping[str, str]):
        for (section, key), name in GLOBAL_ENV.items():
            if name in environ:
                self.set(section, key, environ[name])
        for section, keys in SCHEMA.items():
            for key in keys:
                name = f"HF_{section.upper()}_{key.upper()}"
                if name in environ:
                    self.set(section, key, environ[name])

    def set(self, section: str, key: str, value: Any):
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigurationError(f"Unknown setting '{section}.{key}'")
        self.values[section][key] = _coerce(section, key, value)

    def set_path(self, name: str, value: Any):
        if '.' not in name:
            raise ConfigurationError(f"Setting name '{name}' must look like section.key")
        section, key = name.split('.', 1)
        self.set(section, key, value)

    def get(self, section: str, key: str) -> Any:
        return self.values[section][key]

    def section(self, name: str) -> Dict[str, Any]:
        return self.values[name]

    @property
    def seed(self) -> int:
        return self.values['run']['seed']

    @property
    def out(self) -> str:
        return self.values['run']['out']

    @property
    def threads(self) -> int:
        return self.values['run']['threads']

    def validate(self):
        if self.values['run']['env'] not in ('cstr', 'linear', 'tabular'):
            raise ConfigurationError(f"run.env must be cstr, linear or tabular, got '{self.values['run']['env']}'")
        if self.seed < 0:
            raise ConfigurationError("run.seed must be a non-negative integer")
        if self.threads < 1:
            raise ConfigurationError("run.threads must be >= 1")
        ev = self.values['eval']
        if ev['n_starts'] < 0 or ev['horizon'] < 0 or ev['tail'] < 0:
            raise ConfigurationError("eval sizes must be non-negative")

    def canonical(self) -> Dict[str, Dict[str, Any]]:
        """Resolved settings without run-local fields (output directory, worker count)."""
        values = copy.deepcopy(self.values)
        for key in ('out', 'threads', 'checkpoints'):
            values['run'].pop(key, None)
        return values

    def digest(self) -> str:
        payload = json.dumps(self.canonical(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(payload.encode('utf-8')).hexdigest()

    def to_text(self) -> str:
        """Render back into the file grammar."""
        lines = []
        for section in sorted(self.values):
            for key in sorted(self.values[section]):
                value = self.values[section][key]
                if isinstance(value, bool):
                    text = 'true' if value else 'false'
                elif isinstance(value, list):
                    text = '[' + ', '.join(repr(v) for v in value) + ']'
                elif isinstance(value, str):
                    text = f'"{value}"'
                else:
                    text = repr(value)
                lines.append(f"{section}.{key} = {text}")
        return '\n'.join(lines) + '\n'
