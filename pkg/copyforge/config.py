"""Process settings and experiment configuration.

Experiment configuration is a set of pydantic models merged into ``RunConfig``.
It is read from flat ``key=value`` files with command-line overrides applied
afterwards (later wins), and every run echoes the resolved configuration next
to its outputs so the run can be reproduced from that file alone.
"""

import hashlib
import json
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Type

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from copyforge.exceptions import ConfigError


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_file=".env", env_prefix="COPYFORGE_")

    THREADS: int = Field(default=1, ge=1)  # worker cap; 1 keeps runs deterministic
    LOG_DIR: str = "logs"
    LOG_LEVEL: str = "INFO"
    API_TITLE: str = "copyforge generation API"
    API_VERSION: str = "1.0.0"
    CHECKPOINT_DIR: Optional[str] = None  # served by the HTTP service

    ENABLE_CORRELATION_IDS: bool = Field(default=True)


settings = Settings()


class CopyMode(str, Enum):
    """Training objective for the copy switch."""

    MIXTURE = "mixture"
    FORCE_COPY = "force_copy"
    FORCE_COPY_UNK = "force_copy_unk"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelConfig(_Section):
    emb_dim: int = Field(default=32, ge=1)
    hidden_dim: int = Field(default=64, ge=1)
    enc_layers: int = Field(default=2, ge=1)
    enc_heads: int = Field(default=1, ge=1)
    enc_ff_dim: int = Field(default=64, ge=1)
    dec_layers: int = Field(default=1, ge=1)
    vocab_size: int = Field(default=500, ge=5)
    max_src_len: int = Field(default=128, ge=1)
    max_tgt_len: int = Field(default=64, ge=1)
    dropout: float = Field(default=0.0, ge=0.0, lt=1.0)
    seed: int = 13

    @model_validator(mode="after")
    def _heads_divide_embedding(self) -> "ModelConfig":
        if self.emb_dim % self.enc_heads != 0:
            raise ValueError(
                f"emb_dim={self.emb_dim} is not divisible by enc_heads={self.enc_heads}"
            )
        return self


class TrainConfig(_Section):
    mode: CopyMode = CopyMode.FORCE_COPY_UNK
    lr: float = Field(default=1e-3, ge=0.0)
    weight_decay: float = Field(default=1e-5, ge=0.0)
    batch_size: int = Field(default=8, ge=1)
    epochs: int = Field(default=20, ge=1)
    max_steps: Optional[int] = Field(default=None, ge=1)
    grad_clip_norm: float = Field(default=2.0, gt=0.0)
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = Field(default=1e-8, gt=0.0)
    loss_weights: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    patience: int = Field(default=3, ge=1)
    seed: int = 13
    checkpoint_dir: str = "runs/default"
    eval_every: int = Field(default=50, ge=1)

    @model_validator(mode="after")
    def _non_negative_weights(self) -> "TrainConfig":
        if any(w < 0 for w in self.loss_weights):
            raise ValueError("loss_weights must be non-negative")
        return self


class DecodeConfig(_Section):
    beam_size: int = Field(default=4, ge=1)
    max_len: int = Field(default=64, ge=1)
    block_ngram: int = Field(default=0, ge=0)
    length_norm: bool = False


class DataConfig(_Section):
    train_path: Optional[str] = None
    valid_path: Optional[str] = None
    test_path: Optional[str] = None
    max_vocab: int = Field(default=500, ge=5)
    min_freq: int = Field(default=1, ge=1)


PROFILES: Dict[str, Dict[str, Any]] = {
    "data_to_text": {"length_norm": False, "block_ngram": 10},
    "summarization": {"length_norm": True, "block_ngram": 3},
}

_SECTIONS: Dict[str, Type[_Section]] = {
    "model": ModelConfig,
    "train": TrainConfig,
    "decode": DecodeConfig,
    "data": DataConfig,
}

# seed is shared between model and train sections
_SHARED_KEYS = {"seed"}
_RESUMABLE_KEYS = ("epochs", "max_steps", "checkpoint_dir")


def _owner_of(key: str) -> List[str]:
    owners = [name for name, cls in _SECTIONS.items() if key in cls.model_fields]
    return owners


class RunConfig(BaseModel):
    """Merged configuration of one experiment run."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    decode: DecodeConfig = Field(default_factory=DecodeConfig)
    data: DataConfig = Field(default_factory=DataConfig)

    @classmethod
    def from_flat(cls, pairs: Dict[str, str]) -> "RunConfig":
        """Build a config from flat string pairs, rejecting unknown keys."""
        buckets: Dict[str, Dict[str, Any]] = {name: {} for name in _SECTIONS}
        for key, raw in pairs.items():
            if key == "profile":
                if raw not in PROFILES:
                    raise ConfigError(f"Unknown profile '{raw}'", key=key)
                for pkey, pval in PROFILES[raw].items():
                    buckets["decode"].setdefault(pkey, pval)
                continue
            owners = _owner_of(key)
            if not owners:
                raise ConfigError(f"Unknown configuration key '{key}'", key=key)
            for owner in owners:
                buckets[owner][key] = _coerce(raw)
        try:
            return cls(**{name: _SECTIONS[name](**vals) for name, vals in buckets.items()})
        except ValidationError as e:
            first = e.errors()[0]
            field = ".".join(str(loc) for loc in first["loc"])
            raise ConfigError(f"Invalid configuration: {first['msg']}", key=field or None)

    def to_flat(self) -> str:
        """Render as ``key=value`` lines that ``parse_config_text`` reads back."""
        lines: List[str] = []
        seen = set()
        for name in _SECTIONS:
            section = getattr(self, name)
            for key, value in section.model_dump(mode="json").items():
                if key in seen and key in _SHARED_KEYS:
                    continue
                seen.add(key)
                lines.append(f"{key}={_render(value)}")
        return "\n".join(lines) + "\n"

    def digest(self) -> bytes:
        """SHA-256 of the canonical JSON form (32 raw bytes)."""
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).digest()

    def checkpoint_digest(self) -> bytes:
        """Digest of the fields that shape a training trajectory.

        Run length and output location are left out so a run can be resumed
        with a larger step budget.
        """
        data = self.model_dump(mode="json", exclude={"decode": True, "data": True})
        for key in _RESUMABLE_KEYS:
            data["train"].pop(key, None)
        canonical = json.dumps(data, sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).digest()

    def with_overrides(self, overrides: Dict[str, str]) -> "RunConfig":
        flat = parse_config_text(self.to_flat())
        flat.update(overrides)
        return RunConfig.from_flat(flat)

    def write(self, directory: Path) -> None:
        """Echo the resolved config as ``run.cfg`` plus a JSON twin."""
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "run.cfg").write_text(self.to_flat(), encoding="utf-8")
        (directory / "run.json").write_text(
            json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True),
            encoding="utf-8",
        )


def _coerce(raw: str) -> Any:
    """Turn a flat string value into JSON-ish python values for pydantic."""
    text = raw.strip()
    if text.lower() in ("none", "null", ""):
        return None
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    if "," in text:
        return [_coerce(part) for part in text.split(",")]
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def _render(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(_render(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text: str) -> Dict[str, str]:
    pairs: Dict[str, str] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"Line {number} is not key=value: {line!r}")
        key, value = stripped.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def load_run_config(
    path: Optional[Path] = None, overrides: Iterable[Tuple[str, str]] = ()
) -> RunConfig:
    """Read a flat config file (optional) and apply overrides in order."""
    pairs: Dict[str, str] = {}
    if path is not None:
        try:
            pairs.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
        except OSError as e:
            raise ConfigError(f"Cannot read config file: {e}", key=str(path))
    for key, value in overrides:
        pairs[key] = value
    return RunConfig.from_flat(pairs)
