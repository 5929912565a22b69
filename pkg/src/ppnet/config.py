"""Training configuration, named profiles and the flat JSON form used by the CLI."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Tuple

from .exceptions import ConfigError
from .loss import LossConfig
from .network import PPNetConfig

__all__ = ["DataConfig", "TrainConfig", "PROFILES", "profile", "FLAT_KEYS"]


@dataclass
class DataConfig:
    """Synthetic generation and ingestion parameters."""

    count: int = 200
    seq_len: int = 10
    num_shapes: int = 1
    speed_min: int = 1
    speed_max: int = 2
    shape_min: int = 6
    shape_max: int = 10
    seed: int = 0
    heldout: int = 40
    stride: Optional[int] = None
    center_crop: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        if self.seq_len < 2:
            raise ConfigError("data_seq_len must be >= 2")
        if self.count < 1:
            raise ConfigError("data_count must be >= 1")
        if self.heldout < 0:
            raise ConfigError("data_heldout must be >= 0")
        if self.center_crop is not None:
            self.center_crop = tuple(int(v) for v in self.center_crop)


@dataclass
class TrainConfig:
    net: PPNetConfig = field(default_factory=PPNetConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: DataConfig = field(default_factory=DataConfig)
    epochs: int = 20
    learning_rate: float = 2e-4
    batch_size: int = 4
    seed: int = 0
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be > 0")
        if self.net.p != self.loss.p or self.net.lambda0 != self.loss.lambda0:
            raise ConfigError("net and loss disagree on p / lambda0")

    def replace(self, **flat) -> "TrainConfig":
        """Copy with some flat keys overridden."""
        d = self.to_flat()
        unknown = set(flat) - set(d)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        d.update(flat)
        return TrainConfig.from_flat(d)

    # -- flat form ----------------------------------------------------------

    def to_flat(self) -> dict:
        out = {}
        for k, v in self.net.to_dict().items():
            out[k] = v
        for k in ("detach_weight", "layer_scope"):
            out[k] = getattr(self.loss, k)
        for k, v in asdict(self.data).items():
            out["data_" + k] = list(v) if isinstance(v, tuple) else v
        for k in ("epochs", "learning_rate", "batch_size", "seed", "clip_norm"):
            out[k] = getattr(self, k)
        return out

    @classmethod
    def from_flat(cls, d: dict) -> "TrainConfig":
        missing = [k for k in FLAT_KEYS if k not in d]
        if missing:
            raise ConfigError(f"missing config key(s): {', '.join(missing)}")
        unknown = sorted(set(d) - set(FLAT_KEYS))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        try:
            net = PPNetConfig(**{f.name: d[f.name] for f in fields(PPNetConfig)})
            loss = LossConfig(p=d["p"], lambda0=d["lambda0"], detach_weight=bool(d["detach_weight"]),
                              layer_scope=d["layer_scope"])
            data = DataConfig(**{f.name: d["data_" + f.name] for f in fields(DataConfig)})
            return cls(net=net, loss=loss, data=data, epochs=int(d["epochs"]),
                       learning_rate=float(d["learning_rate"]), batch_size=int(d["batch_size"]),
                       seed=int(d["seed"]), clip_norm=float(d["clip_norm"]))
        except TypeError as exc:
            raise ConfigError(f"bad config value: {exc}") from exc

    def canonical_json(self) -> str:
        return json.dumps(self.to_flat(), sort_keys=True, separators=(",", ":"))

    def fingerprint(self) -> str:
        """Hash of everything that defines the model and its optimizer.

        Epoch count and data settings are excluded so training can be
        resumed for more epochs or on other data.
        """
        d = {k: v for k, v in self.to_flat().items() if k != "epochs" and not k.startswith("data_")}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


FLAT_KEYS = tuple(TrainConfig().to_flat())


def _desk() -> TrainConfig:
    return TrainConfig()


def _full() -> TrainConfig:
    net = PPNetConfig(num_layers=6, channels=[16, 32, 64, 128, 256, 256], input_channels=3,
                      input_size=(128, 160), p=1000.0)
    return TrainConfig(net=net, loss=LossConfig(p=1000.0), data=DataConfig(count=2000, heldout=200),
                       epochs=200, batch_size=4)


PROFILES = {"desk": _desk, "full": _full}


def profile(name: str) -> TrainConfig:
    try:
        return PROFILES[name]()
    except KeyError:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None
