# app/core/config.py

from __future__ import annotations
import hashlib
from pathlib import Path
from typing import Any, Dict, Optional

from dotenv import dotenv_values

# -----------------------------
# Global run defaults
# -----------------------------
DEFAULT_SEED = 13
DEFAULT_JOBS = 1
DEFAULT_WORKDIR = "runs/default"

# -----------------------------
# Tokenization
# -----------------------------
# Number of position tokens P (one per quantization bin along an axis)
DEFAULT_POSITION_TOKENS = 100

# -----------------------------
# Tiny network (desk scale)
# -----------------------------
DEFAULT_HIDDEN_DIM = 64
DEFAULT_NUM_HEADS = 4
DEFAULT_LAYERS = 2
DEFAULT_IMAGE_SIZE = 64
DEFAULT_PATCH_SIZE = 8
DEFAULT_MAX_INPUT_LEN = 16
DEFAULT_MAX_TARGET_LEN = 16
INIT_STD = 0.02

# -----------------------------
# Optimizer (Adam)
# -----------------------------
DEFAULT_LR = 3e-4
DEFAULT_BETA1 = 0.9
DEFAULT_BETA2 = 0.999
DEFAULT_EPS = 1e-8
DEFAULT_EPOCHS = 40
DEFAULT_BATCH_SIZE = 32

# -----------------------------
# Decoding
# -----------------------------
DEFAULT_DECODE_K = 5
MAX_LEN_PAIR_STEP = 8
MAX_LEN_BOX_STEP = 6

# -----------------------------
# Evaluation
# -----------------------------
DEFAULT_EVAL_KS = (1, 3, 5)
DEFAULT_IOU_THRESHOLDS = (0.3, 0.4, 0.5)

# -----------------------------
# Splits
# -----------------------------
DEFAULT_REMOVAL_FRACTION = 0.5
DEFAULT_MIN_PAIR_COUNT = 1
DEFAULT_MAX_PAIR_COUNT = 1_000_000_000

# -----------------------------
# Logging
# -----------------------------
LOG_LEVEL = "INFO"


def derive_seed(seed: int, stage: str) -> int:
    """
    Named sub-seed for one pipeline stage.
    Stages stay reproducible on their own because nothing shares an RNG.
    """

    digest = hashlib.sha256(f"{seed}:{stage}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % (2**31 - 1)


def _nest(flat: Dict[str, Optional[str]]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    for key, value in flat.items():
        if value is None:
            continue
        node = nested
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return nested


def load_run_config(path: Optional[str | Path] = None, overrides: Optional[Dict[str, Any]] = None):
    """
    Reads a sectioned key-value run file (`model.hidden_dim=64`) into a RunConfig.

    The process environment is never consulted: values come from the file,
    then from explicit overrides (CLI flags), then from the defaults above.
    """
    from app.core.errors import ConfigError
    from app.models.schemas import RunConfig

    values: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        values = _nest(dotenv_values(path, interpolate=False))

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        node = values
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value

    try:
        return RunConfig.model_validate(values)
    except ValueError as exc:
        raise ConfigError(f"invalid run config: {exc}") from exc
