"""
Runtime configuration.

Defaults come from the environment (a `.env` file is honoured), scenario
files are YAML (or JSON with the same shape), and CLI flags override both.
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict

import yaml
from dotenv import load_dotenv

from app.errors import ArtifactIOError, InvalidScenario

load_dotenv()

logger = logging.getLogger(__name__)

LOG_LEVEL = os.getenv("FBSD_LOG_LEVEL", "INFO")
DEFAULT_SEED = int(os.getenv("FBSD_SEED", 42))
DEFAULT_WORKERS = int(os.getenv("FBSD_WORKERS", 4))
NAS_LEN_SEQ = int(os.getenv("FBSD_NAS_LEN_SEQ", 12))
RRC_LEN_SEQ = int(os.getenv("FBSD_RRC_LEN_SEQ", 100))
DEFAULT_EPOCHS = int(os.getenv("FBSD_EPOCHS", 30))
DEFAULT_LR = float(os.getenv("FBSD_LR", 0.05))
DEFAULT_HIDDEN = int(os.getenv("FBSD_HIDDEN", 64))
MODEL_DIR = os.getenv("FBSD_MODEL_DIR", "./models")

MAX_CONCURRENT_REQUESTS = int(os.getenv("MAX_CONCURRENT_REQUESTS", 10))
REQUEST_TIMEOUT_SECONDS = int(os.getenv("REQUEST_TIMEOUT_SECONDS", 30))

FORMAT_VERSION = 1

DATA_DIR = Path(__file__).parent / "data"


def default_len_seq(layer_name: str) -> int:
    """Window length used for a layer when no flag is given."""
    return NAS_LEN_SEQ if layer_name.upper() == "NAS" else RRC_LEN_SEQ


def load_config_file(path: str) -> Dict[str, Any]:
    """
    Load a scenario/config file.

    Args:
        path: .yaml/.yml or .json file

    Returns:
        The parsed mapping

    Raises:
        ArtifactIOError: file missing or unreadable
        InvalidScenario: content is not a mapping
    """
    p = Path(path)
    if not p.exists():
        raise ArtifactIOError(f"Config file not found: {path}")
    try:
        with open(p, "r", encoding="utf-8") as f:
            if p.suffix.lower() == ".json":
                config = json.load(f)
            else:
                config = yaml.safe_load(f)
    except (OSError, yaml.YAMLError, json.JSONDecodeError) as e:
        raise ArtifactIOError(f"Could not read config {path}: {e}") from e

    if not isinstance(config, dict):
        raise InvalidScenario(f"Config {path} must contain a mapping at top level")
    logger.debug(f"Loaded config {path} with keys {sorted(config)}")
    return config


def load_data_file(name: str) -> Dict[str, Any]:
    """Load one of the YAML/JSON tables shipped in app/data."""
    return load_config_file(str(DATA_DIR / name))
