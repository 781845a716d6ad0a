'''
Run configuration files: `key = value` lines, `#` starts a comment.

Keys are the TrainConfig fields followed by the BenchProtocol fields. A
missing key keeps its default. Lists are comma-separated, booleans are
true/false and floats are written with repr so a file read back gives the
same numbers.
'''
import math
from dataclasses import dataclass, field, fields
from typing import Any

from repositories.storage import write_text
from soma.adapter import AdapterKind
from soma.bench import BenchProtocol
from soma.errors import ConfigError
from soma.train import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    protocol: BenchProtocol = field(default_factory=BenchProtocol)

    def __post_init__(self):
        if self.train.nfeb > self.protocol.n_blocks:
            raise ConfigError(f'nfeb = {self.train.nfeb} but the model only has {self.protocol.n_blocks} blocks')


TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))
PROTOCOL_KEYS = tuple(f.name for f in fields(BenchProtocol))


def _defaults(cls) -> dict[str, Any]:
    instance = cls()
    return {f.name: getattr(instance, f.name) for f in fields(cls)}


def _parse_value(key: str, text: str, default: Any) -> Any:
    if isinstance(default, AdapterKind):
        try:
            return AdapterKind.parse(text)
        except ValueError as e:
            raise ConfigError(f'{key}: {e}') from None
    if isinstance(default, bool):
        if text not in ('true', 'false'):
            raise ConfigError(f'{key} must be true or false, got {text!r}')
        return text == 'true'
    if isinstance(default, int):
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f'{key} must be an integer, got {text!r}') from None
    if isinstance(default, float):
        try:
            value = float(text)
        except ValueError:
            raise ConfigError(f'{key} must be a number, got {text!r}') from None
        if not math.isfinite(value):
            raise ConfigError(f'{key} must be finite, got {text!r}')
        return value
    if isinstance(default, tuple):
        return tuple(item.strip() for item in text.split(',') if item.strip())
    return text


def _format_value(value: Any) -> str:
    if isinstance(value, AdapterKind):
        return value.value
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ','.join(value)
    return str(value)


def parse_config(text: str) -> RunConfig:
    '''
    Parse a run configuration.

    Parameters:
        text (str): file contents

    Returns:
        RunConfig

    Example:
        >>> parse_config('rank = 8\\nn_seeds = 2\\n').train.rank
        8
    '''
    train_defaults = _defaults(TrainConfig)
    protocol_defaults = _defaults(BenchProtocol)
    train_values: dict[str, Any] = {}
    protocol_values: dict[str, Any] = {}

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f'line {lineno}: expected `key = value`, got {raw.strip()!r}')
        key, value = (part.strip() for part in line.split('=', 1))
        if key in train_defaults:
            target, default = train_values, train_defaults[key]
        elif key in protocol_defaults:
            target, default = protocol_values, protocol_defaults[key]
        else:
            raise ConfigError(f'line {lineno}: unknown key {key!r}')
        if key in target:
            raise ConfigError(f'line {lineno}: duplicate key {key!r}')
        target[key] = _parse_value(key, value, default)

    return RunConfig(train=TrainConfig(**train_values), protocol=BenchProtocol(**protocol_values))


def serialize_config(config: RunConfig) -> str:
    lines = ['# fine-tuning']
    for key in TRAIN_KEYS:
        lines.append(f'{key} = {_format_value(getattr(config.train, key))}')
    lines.append('')
    lines.append('# benchmark protocol')
    for key in PROTOCOL_KEYS:
        lines.append(f'{key} = {_format_value(getattr(config.protocol, key))}')
    return '\n'.join(lines) + '\n'


def load_config(path: str) -> RunConfig:
    try:
        with open(path, encoding='utf-8') as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f'cannot read config {path}: {e.strerror}') from None
    return parse_config(text)


def save_config(path: str, config: RunConfig):
    write_text(path, serialize_config(config))
