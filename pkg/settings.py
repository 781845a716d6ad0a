import os
from dataclasses import dataclass

from dotenv import load_dotenv

from soma.errors import ConfigError

settings = None


@dataclass(frozen=True)
class Settings:
    log_level: str = 'WARNING'
    progress: bool = False
    workers: int = 1
    log_every: int = 50


def _flag(value: str) -> bool:
    return value.strip().lower() in ('1', 'true', 'yes', 'on')


def _int(key: str, default: int) -> int:
    value = os.getenv(key, str(default))
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f'{key} must be an integer, got {value!r}') from None


def get_settings() -> Settings:
    '''
    Process-level knobs from the environment, read once. A `.env` file next
    to this module is loaded first if there is one.

    Returns:
        Settings

    Example:
        >>> get_settings().workers
        1
    '''
    global settings
    if settings is None:
        load_dotenv(os.path.join(os.path.dirname(os.path.abspath(__file__)), '.env'))
        settings = Settings(
            log_level=os.getenv('SOMA_LOG_LEVEL', 'WARNING').upper(),
            progress=_flag(os.getenv('SOMA_PROGRESS', '0')),
            workers=max(1, _int('SOMA_WORKERS', 1)),
            log_every=max(0, _int('SOMA_LOG_EVERY', 50)),
        )
    return settings


def reset_settings():
    # next get_settings() call reads the environment again
    global settings
    settings = None
