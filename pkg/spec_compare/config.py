"""
Run configuration.

Precedence (lowest first): dataclass defaults, environment (.env), config
file (--config, JSON or TOML), command-line flags.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, Optional

import tomli
from dotenv import load_dotenv

from spec_compare.errors import ValidationError
from spec_compare.io_model import CSV_HEADER_MODES
from spec_compare.kernels import KERNEL_KINDS, KernelSpec

logger = logging.getLogger(__name__)

STRATEGIES = ("symmetric_reduction", "general")
REPORT_FORMATS = ("json", "markdown")

# environment variable -> (field, type)
ENV_KEYS = {
    "SPEC_SEED": ("seed", int),
    "SPEC_RFF_DIM": ("rff_dim", int),
    "SPEC_TOP_K": ("top_k", int),
    "SPEC_TOP_R": ("top_r", int),
    "SPEC_CHUNK_SIZE": ("chunk_size", int),
    "SPEC_DIRECT_CAP": ("direct_cap", int),
}


def env_overrides() -> Dict[str, Any]:
    load_dotenv()
    values = {}
    for name, (key, cast) in ENV_KEYS.items():
        raw = os.getenv(name)
        if raw is None or raw.strip() == "":
            continue
        try:
            values[key] = cast(raw)
        except ValueError:
            raise ValidationError(f"environment variable {name}={raw!r} is not a valid {cast.__name__}")
    return values


def log_level_from_env(default: str = "INFO") -> str:
    load_dotenv()
    return os.getenv("SPEC_LOG_LEVEL", default).upper()


def load_config_file(path) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    try:
        if path.suffix.lower() == ".toml":
            with open(path, "rb") as f:
                raw = tomli.load(f)
        else:
            with open(path, "r", encoding="utf-8") as f:
                raw = json.load(f)
    except (tomli.TOMLDecodeError, json.JSONDecodeError) as e:
        raise ValidationError(f"cannot parse config file {path}: {e}")
    if not isinstance(raw, dict):
        raise ValidationError(f"config file {path} must hold a flat table of keys")
    return {str(k).replace("-", "_"): v for k, v in raw.items()}


def _from_dict(cls, values: Dict[str, Any]):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ValidationError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    return cls(**values)


@dataclass
class SpecConfig:
    emb_a: str = ""
    emb_b: str = ""
    kernel_a: str = "cosine"
    kernel_b: str = "cosine"
    sigma_a: Optional[float] = None
    sigma_b: Optional[float] = None
    rff_dim: int = 2000
    top_k: int = 10
    top_r: int = 100
    seed: int = 0
    out: Optional[str] = None
    format: str = "json"
    chunk_size: int = 4096
    strategy: str = "symmetric_reduction"
    labels: Optional[str] = None
    direct_cap: int = 2000
    bandwidth_target: Optional[float] = None
    bandwidth_tol: float = 0.005
    validate_runs: int = 0
    validate_k: Optional[int] = None
    progress: bool = False
    header: str = "auto"

    def __post_init__(self):
        for side in ("a", "b"):
            kind = getattr(self, f"kernel_{side}")
            if kind not in KERNEL_KINDS:
                raise ValidationError(f"kernel_{side}: unknown kernel '{kind}', expected one of {KERNEL_KINDS}")
            sigma = getattr(self, f"sigma_{side}")
            if sigma is not None and float(sigma) <= 0:
                raise ValidationError(f"sigma_{side} must be positive, got {sigma}")
        for key in ("top_k", "top_r", "rff_dim", "chunk_size", "direct_cap"):
            if int(getattr(self, key)) < 1:
                raise ValidationError(f"{key} must be >= 1, got {getattr(self, key)}")
        if int(self.seed) < 0:
            raise ValidationError(f"seed must be unsigned, got {self.seed}")
        if self.format not in REPORT_FORMATS:
            raise ValidationError(f"format must be one of {REPORT_FORMATS}, got '{self.format}'")
        if self.header not in CSV_HEADER_MODES:
            raise ValidationError(f"header must be one of {CSV_HEADER_MODES}, got '{self.header}'")
        if self.strategy not in STRATEGIES:
            raise ValidationError(f"strategy must be one of {STRATEGIES}, got '{self.strategy}'")
        if int(self.validate_runs) < 0:
            raise ValidationError("validate_runs must be >= 0")
        if self.validate_k is not None and int(self.validate_k) < 2:
            raise ValidationError("validate_k must be >= 2")

    def kernel_spec(self, side: str, sigma: Optional[float] = None) -> KernelSpec:
        """KernelSpec for side 'a' or 'b'. Both sides share the seed, so equal inputs give equal bases."""
        kind = getattr(self, f"kernel_{side}")
        if sigma is None:
            sigma = getattr(self, f"sigma_{side}")
        return KernelSpec(kind=kind, sigma=sigma, rff_dim=int(self.rff_dim), seed=int(self.seed))

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "SpecConfig":
        return _from_dict(cls, values)

    @classmethod
    def resolve(cls, flags: Optional[Dict[str, Any]] = None, config_path=None) -> "SpecConfig":
        values: Dict[str, Any] = {}
        values.update(env_overrides())
        if config_path:
            values.update(load_config_file(config_path))
        values.update({k: v for k, v in (flags or {}).items() if v is not None})
        return cls.from_dict(values)

    def to_dict(self) -> Dict[str, Any]:
        # config echo written into every report
        return asdict(self)


@dataclass
class AlignConfig:
    beta: float = 1.0
    step: float = 1e-2
    iterations: int = 500
    seed: int = 0
    init_scale: float = 1.0
    out_dim: Optional[int] = None
    divergence_factor: float = 10.0
    jitter: float = 1e-8
    max_retries: int = 10
    early_stop_ratio: float = 0.0
    batch_size: Optional[int] = None
    weight_decay: float = 0.0
    power_tol: float = 1e-12
    power_max_iter: int = 5000

    def __post_init__(self):
        if self.step < 0:
            raise ValidationError(f"step must be >= 0, got {self.step}")
        if self.beta < 0:
            raise ValidationError(f"beta must be >= 0, got {self.beta}")
        if int(self.iterations) < 0:
            raise ValidationError(f"iterations must be >= 0, got {self.iterations}")
        if self.divergence_factor <= 1:
            raise ValidationError("divergence_factor must exceed 1")
        if self.batch_size is not None and int(self.batch_size) < 1:
            raise ValidationError("batch_size must be >= 1")
        if not 0 <= self.early_stop_ratio < 1:
            raise ValidationError("early_stop_ratio must lie in [0, 1)")

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "AlignConfig":
        return _from_dict(cls, values)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)
