"""Run settings: defaults, flat ``key = value`` config files and environment overrides.

Precedence, highest first: command-line flags, environment variables (paths
only), config file, built-in defaults.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .encoder import FUSIONS
from .model import DECODER_MODES

# environment variables may only override these path settings
ENV_PATHS = {"data": "CTXREPORT_DATA", "out": "CTXREPORT_OUT"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    embed_dim: int = 300
    hidden_dim: int = 256
    lr: float = 0.001
    epochs: int = 2
    batch_size: int = 64
    max_len: int = 50
    beam_k: int = 3
    dropout: float = 0.5
    fusion: str = "lstm-context"
    decoder_mode: str = "causal"
    length_norm: bool = False
    seed: int = 0
    data: str | None = None
    out: str | None = None

    def validate(self) -> None:
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.decoder_mode not in DECODER_MODES:
            raise ConfigError(f"decoder_mode must be one of {DECODER_MODES}, got {self.decoder_mode!r}")
        for name in ("embed_dim", "hidden_dim", "epochs", "batch_size", "beam_k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.max_len < 3:
            raise ConfigError("max_len must be at least 3")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")

    def echo(self) -> dict:
        """Settings recorded in checkpoints; paths are left out so outputs do not depend on them."""
        d = asdict(self)
        d.pop("data")
        d.pop("out")
        return d


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key: str, raw: str):
    kind = _TYPES[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _convert(key, value)
    return out


def resolve(cli: dict | None = None, config_file: str | Path | None = None,
            environ: dict | None = None) -> RunConfig:
    """Merge the settings sources; ``None`` values in ``cli`` mean "not given"."""
    values: dict = {}
    if config_file is not None:
        path = Path(config_file)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        values.update(parse_config_text(path.read_text(encoding="utf-8"), str(path)))
    env = os.environ if environ is None else environ
    for key, var in ENV_PATHS.items():
        if env.get(var):
            values[key] = env[var]
    for key, value in (cli or {}).items():
        if value is not None:
            if key not in _TYPES:
                raise ConfigError(f"unknown setting {key!r}")
            values[key] = value
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg
