import copy
import json
import logging

from errors import ConfigError

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

# Environment constants
ENV_DEFAULTS = {
    'horizon': 100,
    'joint_step': 0.1,
    'action_penalty': 0.01,
    'engagement_width': 1.0,
    'contact_radius': 1.0,
    'gravity': 0.02,
    'screw_coupling': 0.25,
    'dice_goal_radius': 10.0,
    'sparse_target': 1.5,
    'sparse_threshold': 0.1,
    'min_d': 6,
}

# Task set selection
TASK_SET_DEFAULTS = {
    'id': 'A',
    'd': 20,
    'seed': 0,
    'engagement_on': False,
    'orthogonal': False,
    'horizon': 100,
}

# Network sizes
NETWORK_DEFAULTS = {
    'policy_hidden': [64, 64],
    'decoder_hidden': [32, 32],
    'disc_hidden': [64, 64],
    'activation': 'tanh',
}

# DiscoSyn / PPO training
TRAIN_DEFAULTS = {
    'gamma': 0.99,
    'gae_lambda': 0.95,
    'clip_eps': 0.2,
    'alpha1': 0.01,
    'alpha2': 0.1,
    'alpha3': 0.001,
    'lr_policy': 3e-4,
    'lr_decoder': 3e-4,
    'lr_disc': 1e-3,
    'episodes_per_task': 8,
    'ppo_epochs': 10,
    'minibatch': 256,
    'iterations': 500,
    'b': 4,
    'decoder_form': 'linear',
    'decoder_sampling': 'stochastic',
    'single_head': False,
    'eval_every': 10,
    'eval_episodes': 1,
    'disc_epochs': 5,
    'value_coef': 0.5,
    'max_grad_norm': 0.5,
    'max_ratio': 1e3,
    'early_stop': True,
    'early_stop_window': 20,
    'early_stop_slope': 1e-3,
    'success_fraction': 0.9,
    'bound_samples': 1000,
    'bound_states': 4,
    'reference_returns': {},
    **NETWORK_DEFAULTS,
}

# Sequential baseline
BASELINE_DEFAULTS = {
    'method': 'pca',
    'b': 4,
    'episodes_per_task': 50,
    'deterministic_dataset': True,
}

AE_DEFAULTS = {
    'hidden': [64, 64],
    'activation': 'tanh',
    'epochs': 2000,
    'lr': 1e-3,
    'minibatch': 256,
    'holdout_fraction': 0.1,
}

# Transfer and sparse-reward benchmark
TRANSFER_DEFAULTS = {
    'synergy': '',
    'task': 'cw-valve',
    'iterations': 200,
    'budget': 200000,
    'seeds': 5,
}

COMMANDS = ('train-discosyn', 'train-baseline', 'transfer', 'sparse-bench', 'analyze', 'report', 'eval')

EXPERIMENT_DEFAULTS = {
    'command': 'train-discosyn',
    'seed': 0,
    'task_set': TASK_SET_DEFAULTS,
    'train': TRAIN_DEFAULTS,
    'baseline': BASELINE_DEFAULTS,
    'ae': AE_DEFAULTS,
    'transfer': TRANSFER_DEFAULTS,
    'analyze': {'run': ''},
    'eval': {'run': '', 'episodes': 1},
    'report': {'runs': []},
}


def _key_lines(text):
    """Dotted key path -> 1-based line of its first occurrence in a JSON source"""
    lines = {}
    stack = []
    pending = None
    line, i, n = 1, 0, len(text)
    while i < n:
        ch = text[i]
        if ch == '\n':
            line += 1
        elif ch == '"':
            j = i + 1
            while j < n and text[j] != '"':
                j += 2 if text[j] == '\\' else 1
            if j >= n:
                break
            token = json.loads(text[i:j + 1])
            k = j + 1
            while k < n and text[k] in ' \t\r\n':
                k += 1
            if stack and stack[-1]['kind'] == '{' and k < n and text[k] == ':':
                keys = [frame['key'] for frame in stack if frame['key'] is not None]
                lines.setdefault('.'.join(keys + [token]), line)
                pending = token
            i = j
        elif ch in '{[':
            stack.append({'kind': ch, 'key': pending})
            pending = None
        elif ch in '}]':
            if stack:
                stack.pop()
            pending = None
        elif ch == ',':
            pending = None
        i += 1
    return lines


def _line_of(text, path):
    """1-based line of the dotted key ``path`` in the config source"""
    if not text or not path:
        return None
    return _key_lines(text).get(path)


def _check_type(path, value, default, text):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, (int, float)):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        if ok and isinstance(default, int) and not isinstance(value, int):
            ok = float(value).is_integer()
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"'{path}' expects {type(default).__name__}, got {value!r}", line=_line_of(text, path))
    if isinstance(default, int) and not isinstance(default, bool):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def _merge(target, source, prefix, text):
    if not isinstance(source, dict):
        raise ConfigError(f"'{prefix or '<root>'}' must be an object", line=_line_of(text, prefix))
    for key, value in source.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in target:
            raise ConfigError(f"Unknown key '{path}'", line=_line_of(text, path))
        default = target[key]
        if isinstance(default, dict) and default and not _is_free_map(path):
            _merge(default, value, path, text)
        elif isinstance(default, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"'{path}' must be an object", line=_line_of(text, path))
            target[key] = dict(value)
        else:
            target[key] = _check_type(path, value, default, text)


def _is_free_map(path):
    return path in ('train.reference_returns',)


def load_config(config_path):
    """Read a JSON experiment config; returns (document, source text)"""
    try:
        with open(config_path, 'r', encoding='utf-8') as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"Cannot read config file {config_path}: {e}")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Invalid JSON: {e.msg} (column {e.colno})", line=e.lineno)
    return raw, text


def parse_override(item):
    """Split ``a.b.c=value``; the value is parsed as JSON when possible"""
    if '=' not in item:
        raise ConfigError(f"Override must look like key=value, got {item!r}")
    key, raw_value = item.split('=', 1)
    try:
        value = json.loads(raw_value)
    except json.JSONDecodeError:
        value = raw_value
    nested = value
    for part in reversed(key.strip().split('.')):
        nested = {part: nested}
    return nested


def resolve_config(raw, text=None, overrides=()):
    """Materialize every default, apply overrides and validate"""
    resolved = copy.deepcopy(EXPERIMENT_DEFAULTS)
    _merge(resolved, raw or {}, '', text)
    for item in overrides:
        _merge(resolved, parse_override(item), '', None)
        logger.info(f"Override applied: {item}")
    if resolved['command'] not in COMMANDS:
        raise ConfigError(f"Unknown command '{resolved['command']}'", line=_line_of(text, 'command'))
    if resolved['task_set']['id'] not in ('A', 'B'):
        raise ConfigError(f"Unknown task set '{resolved['task_set']['id']}'", line=_line_of(text, 'task_set.id'))
    if resolved['baseline']['method'] not in ('pca', 'ae'):
        raise ConfigError(f"Unknown baseline method '{resolved['baseline']['method']}'",
                          line=_line_of(text, 'baseline.method'))
    return resolved

