"""
Application configuration module.
Handles environment variables, configuration files and logging for the
command line, the HTTP service and the evaluation harness.
"""
import json
import logging
import os
import tomllib
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Union

from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError

from . import __version__
from .errors import ConfigError
from .llm_gateway import ProviderConfig

# Environment types
ENV_LOCAL = "local"
ENV_DEV = "development"
ENV_TEST = "test"
ENV_PROD = "production"

# Load environment variables
load_dotenv()

# Determine environment
ENVIRONMENT = os.getenv("ENVIRONMENT", ENV_LOCAL).lower()
TEST_MODE = os.getenv("TEST_MODE", "false").lower() == "true" or ENVIRONMENT == ENV_TEST

# Prefix for configuration overrides taken from the environment
ENV_PREFIX = "RECURVULN_"

# Run ledger database configuration
LEDGER_CONFIG = {
    # Default SQLite file next to the working directory
    "sqlite": {
        "url": os.getenv("LEDGER_URL", "sqlite:///recurvuln_runs.db"),
        "connect_args": {"check_same_thread": False},
        "pool_pre_ping": True,
        "echo": False,
    },
    # In-memory SQLite for testing
    "sqlite_memory": {
        "url": "sqlite:///:memory:",
        "connect_args": {"check_same_thread": False},
        "echo": False,
    },
}


def get_ledger_config(url: Optional[str] = None) -> Dict[str, Any]:
    """
    Get ledger database configuration based on environment.

    Returns:
        Dict[str, Any]: SQLAlchemy engine keyword arguments including ``url``
    """
    if url:
        settings = dict(LEDGER_CONFIG["sqlite"], url=url)
        if not url.startswith("sqlite"):
            settings.pop("connect_args")
        return settings
    if TEST_MODE:
        return LEDGER_CONFIG["sqlite_memory"]
    return LEDGER_CONFIG["sqlite"]


# API configuration
API_CONFIG = {
    "title": "Recurring Vulnerability Manager API",
    "description": "Knowledge base, scanning and run history for recurring vulnerability management",
    "version": __version__,
    "docs_url": "/docs",
    "redoc_url": "/redoc",
    "openapi_url": "/openapi.json",
    "debug": os.getenv("DEBUG", "false").lower() == "true",
}

# Logging configuration
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

# Knowledge base served by the HTTP service
VKB_DIR = os.getenv("VKB_DIR", "vkb")


def configure_logging(level: Optional[str] = None) -> None:
    logging.basicConfig(level=(level or LOG_LEVEL).upper(), format=LOG_FORMAT)


# Detector threshold presets; "coverage" lowers theta to widen recall
DETECTOR_PRESETS = {
    "default": 0.8,
    "coverage": 0.6,
}


class DetectorConfig(BaseModel):
    window_w: int = Field(4, ge=1)
    shingle_n: int = Field(5, ge=1)
    theta: float = Field(0.8, gt=0.0, le=1.0)

    @classmethod
    def preset(cls, name: str) -> "DetectorConfig":
        if name not in DETECTOR_PRESETS:
            raise ConfigError(f"Unknown detector preset: {name}")
        return cls(theta=DETECTOR_PRESETS[name])


class PipelineConfig(BaseModel):
    detector: DetectorConfig = Field(default_factory=DetectorConfig)
    llm: ProviderConfig = Field(default_factory=ProviderConfig)
    no_vkb: bool = False
    no_confirmation: bool = False
    no_context_tools: bool = False
    llm_consistency_summary: bool = False
    workers: int = Field(1, ge=1)
    equivalence_mode: Literal["strict", "judge"] = "strict"
    output_dir: Path = Path("recurvuln-out")
    ledger_url: Optional[str] = None
    source_repos: Dict[str, Path] = Field(default_factory=dict)
    cve_filter: List[str] = Field(default_factory=list)
    version_label: str = ""


def _read_config_file(path: Path) -> Dict[str, Any]:
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise ConfigError(f"Cannot read configuration file {path}: {str(e)}") from e
    try:
        if path.suffix.lower() == ".json":
            return json.loads(raw)
        return tomllib.loads(raw.decode("utf-8"))
    except (json.JSONDecodeError, tomllib.TOMLDecodeError, UnicodeDecodeError) as e:
        raise ConfigError(f"Malformed configuration file {path}: {str(e)}") from e


def _expand(flat: Mapping[str, Any], separator: str = ".") -> Dict[str, Any]:
    """Turn ``{"detector.theta": 0.6}`` into ``{"detector": {"theta": 0.6}}``."""
    tree: Dict[str, Any] = {}
    for key, value in flat.items():
        if isinstance(value, Mapping):
            value = _expand(value, separator)
        node = tree
        parts = key.split(separator)
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        if isinstance(value, dict) and isinstance(node.get(parts[-1]), dict):
            node[parts[-1]] = _merge(node[parts[-1]], value)
        else:
            node[parts[-1]] = value
    return tree


def _merge(base: Dict[str, Any], extra: Mapping[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in extra.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _environment_overrides() -> Dict[str, Any]:
    flat = {
        name[len(ENV_PREFIX):].lower(): value
        for name, value in os.environ.items()
        if name.startswith(ENV_PREFIX)
    }
    return _expand(flat, separator="__")


def load_config(path: Optional[Union[str, Path]] = None,
                overrides: Optional[Mapping[str, Any]] = None) -> PipelineConfig:
    """
    Build the pipeline configuration.

    Precedence (lowest first): file, ``RECURVULN_*`` environment variables, explicit overrides.
    Override keys may be dotted (``detector.theta``); ``None`` values are ignored.
    """
    data: Dict[str, Any] = {}
    if path is not None:
        data = _expand(_read_config_file(Path(path)))
    data = _merge(data, _environment_overrides())
    if overrides:
        data = _merge(data, _expand({k: v for k, v in overrides.items() if v is not None}))
    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {str(e)}") from e
