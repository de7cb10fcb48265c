"""Run configuration, stable hashing and provenance stamps."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .diffusion import DenoiserConfig
from .encoder import EncoderConfig
from .transfer import TransferConfig


def config_hash(obj) -> str:
    """First 64 bits of SHA-256 over canonical JSON, as 16 hex digits."""
    if dataclasses.is_dataclass(obj):
        obj = dataclasses.asdict(obj)
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _jsonable(o):
    if hasattr(o, "tolist"):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


@dataclass
class ScheduleConfig:
    kind: str = "cosine"
    T: int = 100
    # linear schedules only
    beta_start: float = 1e-3
    beta_end: float = 0.2

    def build(self):
        from .diffusion import make_schedule

        return make_schedule(self.kind, self.T, self.beta_start, self.beta_end)


@dataclass
class WorldConfig:
    n_train: int = 20000
    n_heldout: int = 512


@dataclass
class EditDefaults:
    window: tuple[float, float] = (0.0, 0.4)
    guidance: float = 1.0
    lambda_e: float | None = None


@dataclass
class EvalConfig:
    m_images: int = 100
    calibration_images: int = 32


@dataclass
class RunConfig:
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    transfer: TransferConfig = field(default_factory=TransferConfig)
    edit: EditDefaults = field(default_factory=EditDefaults)
    eval: EvalConfig = field(default_factory=EvalConfig)
    out: str = "runs"

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self), default=_jsonable))

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("out")
        return config_hash(d)

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy with the global seed pushed into every seeded sub-config."""
        cfg = dataclasses.replace(self, seed=seed)
        cfg.encoder = dataclasses.replace(self.encoder, seed=seed)
        cfg.denoiser = dataclasses.replace(self.denoiser, seed=seed)
        cfg.transfer = dataclasses.replace(self.transfer, seed=seed)
        return cfg

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        sub = {
            "world": WorldConfig,
            "schedule": ScheduleConfig,
            "encoder": EncoderConfig,
            "denoiser": DenoiserConfig,
            "transfer": TransferConfig,
            "edit": EditDefaults,
            "eval": EvalConfig,
        }
        kwargs = {}
        for key, value in d.items():
            if key in sub:
                kwargs[key] = _build(sub[key], value)
            elif key in ("seed", "out"):
                kwargs[key] = value
            else:
                raise ValueError(f"unknown config key {key!r}")
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        doc = json.loads(Path(path).read_text())
        if "config" in doc and "provenance" in doc:
            # a config.json written into an output tree
            doc = doc["config"]
        return cls.from_dict(doc)


def _build(klass, values: dict):
    names = {f.name: f for f in dataclasses.fields(klass)}
    unknown = set(values) - set(names)
    if unknown:
        raise ValueError(f"unknown {klass.__name__} keys: {sorted(unknown)}")
    fixed = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    return klass(**fixed)


def stamp(cfg_hash: str, seed: int, **extra) -> dict:
    """Provenance fields embedded in every artifact."""
    return {"config_hash": cfg_hash, "seed": seed, "versions": {"dirforge": __version__}, **extra}
