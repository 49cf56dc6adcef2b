"""
Environment-backed settings and flat config files.

Reads `.env` on import, like every entry point of the project.
"""

import os
from pathlib import Path
from typing import Dict, Iterable, Optional, Union

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, Field

load_dotenv()

DEFAULT_CACHE_DIR = Path.home() / ".cache" / "visact"


class Settings(BaseModel):
    """Process-wide settings taken from the environment."""
    cache_dir: Path = Field(description="Intermediate artifacts (ablation checkpoints); LAVAMAN_CACHE")
    log_level: str = Field(default="INFO", description="VISACT_LOG_LEVEL")
    device: str = Field(default="cpu", description="Torch device; VISACT_DEVICE")
    episode_cache_size: int = Field(default=256, ge=0, description="Episodes kept in memory per corpus; VISACT_EPISODE_CACHE")


def get_settings() -> Settings:
    return Settings(
        cache_dir=Path(os.getenv("LAVAMAN_CACHE") or DEFAULT_CACHE_DIR),
        log_level=os.getenv("VISACT_LOG_LEVEL", "INFO"),
        device=os.getenv("VISACT_DEVICE", "cpu"),
        episode_cache_size=int(os.getenv("VISACT_EPISODE_CACHE", "256")),
    )


def cache_path(*parts: str) -> Path:
    """Path under the cache dir; parent directories are created."""
    path = get_settings().cache_dir.joinpath(*parts)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def read_config_file(path: Union[str, Path], allowed_keys: Iterable[str]) -> Dict[str, str]:
    """
    Parse a flat KEY=value config file.

    Keys are flag names with '_' for '-', case-insensitive.

    Raises:
        FileNotFoundError: missing file.
        ValueError: unknown keys, listed in the message.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    raw = dotenv_values(path)
    values: Dict[str, str] = {k.strip().lower().replace("-", "_"): v for k, v in raw.items() if v is not None}
    unknown = sorted(set(values) - set(allowed_keys))
    if unknown:
        raise ValueError(f"unknown config keys in {path}: {', '.join(unknown)}")
    return values


def merge_options(
    flags: Dict[str, Optional[object]],
    file_values: Dict[str, str],
    defaults: Dict[str, object],
) -> Dict[str, object]:
    """
    Flag > config file > default.

    Flags left at None count as unset. File values are strings and are cast to
    the type of the default when one exists.
    """
    merged: Dict[str, object] = {}
    for key in set(defaults) | set(flags) | set(file_values):
        if flags.get(key) is not None:
            merged[key] = flags[key]
        elif key in file_values:
            merged[key] = _cast(file_values[key], defaults.get(key))
        else:
            merged[key] = defaults.get(key)
    return merged


def _cast(value: str, default: object) -> object:
    if isinstance(default, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, (list, tuple)):
        items = value.replace(",", " ").split()
        if default and all(isinstance(v, str) for v in default):
            return items
        return [float(v) for v in items]
    return value
