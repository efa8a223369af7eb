# src/coverage_model/cli/config_file.py
"""
Flat key=value run configuration files.

    # comments and blank lines are ignored
    model=idml
    chain.iterations=4000
    prior.sigma3.upper=none

Precedence: command-line flags > config file > defaults.
"""
import logging
from pathlib import Path
from typing import Dict, Mapping, Optional, Union

from dotenv import dotenv_values

from ..models.configs import RunConfig

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def read_config_file(path: PathLike) -> Dict[str, Optional[str]]:
    """
    Raises:
        FileNotFoundError: If the file does not exist.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    values = dict(dotenv_values(path))
    logger.debug(f"Read {len(values)} config keys from {path}")
    return values


def resolve_run_config(config_path: Optional[PathLike] = None,
                       overrides: Optional[Mapping[str, object]] = None) -> RunConfig:
    """
    Layers the config file (if any) and then the command-line overrides on top of the defaults.

    Args:
        config_path: Optional key=value file.
        overrides: Flat keys set on the command line; None values are ignored.

    Raises:
        ValueError: On unknown keys or unparseable values.
    """
    config = RunConfig()
    if config_path is not None:
        config = RunConfig.from_flat(read_config_file(config_path), base=config)
    flags = {key: str(value) for key, value in (overrides or {}).items() if value is not None}
    if flags:
        config = RunConfig.from_flat(flags, base=config)
    return config


def write_config_file(config: RunConfig, path: PathLike) -> Path:
    """Writes every setting of `config`; reading the file back gives an equal RunConfig."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{key}={value}" for key, value in config.to_flat().items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
