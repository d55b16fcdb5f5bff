"""Training configuration and its key = value text format."""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional

from ..data.kinship import GRANDPARENT_CLASSES, TRAINED_CLASSES, KinshipClass

PROTOCOLS = ("restricted", "unrestricted")
SAMPLERS = ("adaptive", "uniform")
WEIGHTINGS = ("auto", "tied", "untied", "none")
FUSIONS = ("conv", "concat", "embedding")


class ConfigError(ValueError):
    """A configuration value is invalid or conflicts with the protocol."""


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1.0
    lr: float = 1e-3
    lr_min: float = 1e-5
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0
    protocol: str = "unrestricted"
    # None resolves to adaptive (unrestricted) or uniform (restricted)
    sampler: Optional[str] = None
    weighting: str = "auto"
    fusion: str = "conv"
    multitask: bool = True
    classes: tuple = tuple(k.tag for k in TRAINED_CLASSES)
    include_grandparents: bool = False
    backbone: str = "tiny"
    input_size: int = 12
    embed_dim: int = 16
    channels: int = 16
    hidden_layers: int = 8
    margin: int = 4
    lambda_start: float = 1500.0
    lambda_end: float = 5.0
    plateau_tol: float = 1e-3
    plateau_window: int = 3
    augment: bool = True
    aug_gamma: bool = True
    aug_scale: bool = True
    aug_flip: bool = True
    aug_jitter: bool = True
    dtype: str = "float64"

    def resolved(self) -> "TrainConfig":
        """Fill protocol-dependent defaults and validate."""
        cfg = self
        if cfg.sampler is None:
            cfg = replace(cfg, sampler="uniform" if cfg.protocol == "restricted" else "adaptive")
        if isinstance(cfg.classes, list):
            cfg = replace(cfg, classes=tuple(cfg.classes))
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if self.sampler is not None and self.sampler not in SAMPLERS:
            raise ConfigError(f"sampler must be one of {SAMPLERS}, got {self.sampler!r}")
        if self.protocol == "restricted" and self.sampler == "adaptive":
            raise ConfigError("the restricted protocol gives no identities or family structure, "
                              "so adaptive sampling cannot be applied; use --sampler uniform")
        if self.protocol == "restricted" and self.fusion == "embedding":
            raise ConfigError("embedding-only scoring needs backbone refinement, which the restricted protocol forbids")
        if self.weighting not in WEIGHTINGS:
            raise ConfigError(f"weighting must be one of {WEIGHTINGS}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}")
        if self.backbone not in ("tiny", "full"):
            raise ConfigError("backbone must be tiny or full")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype must be float64 or float32")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if not (self.lr > 0 and 0 < self.lr_min <= self.lr):
            raise ConfigError("need 0 < lr_min <= lr")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if not 5 <= self.lambda_end <= self.lambda_start <= 1500:
            raise ConfigError("annealing weights must satisfy 5 <= lambda_end <= lambda_start <= 1500")
        for tag in self.classes:
            try:
                kin = KinshipClass.parse(tag)
            except ValueError as err:
                raise ConfigError(str(err)) from None
            if kin in GRANDPARENT_CLASSES and not self.include_grandparents:
                raise ConfigError(f"class {kin.tag} is a grandparent class; set include_grandparents to train it")
        if not self.classes:
            raise ConfigError("at least one kinship class is required")

    @property
    def kin_classes(self) -> tuple:
        return tuple(KinshipClass.parse(t) for t in self.classes)

    @property
    def uses_identities(self) -> bool:
        return self.protocol == "unrestricted"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = list(self.classes)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        data = dict(data)
        if "classes" in data:
            val = data["classes"]
            data["classes"] = tuple(val.split(",")) if isinstance(val, str) else tuple(val)
        try:
            return cls(**data)
        except TypeError as err:
            raise ConfigError(str(err)) from None


def _parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    return text.strip("'\"")


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines (``#`` comments, optional ``[section]`` headers ignored)."""
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"), inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string("[__root__]\n" + text)
    except configparser.Error as err:
        raise ConfigError(f"cannot parse config: {err}") from None
    out = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            out[key] = _parse_value(value)
    return out


def load_config(path, overrides: Optional[dict] = None) -> TrainConfig:
    data = parse_config_text(Path(path).read_text(encoding="utf-8")) if path else {}
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return TrainConfig.from_dict(data).resolved()


def dump_config(config: TrainConfig) -> str:
    lines = []
    for key, value in config.to_dict().items():
        lines.append(f"{key} = {json.dumps(value)}")
    return "\n".join(lines) + "\n"
