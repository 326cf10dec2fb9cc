"""Run configuration: defaults, JSON loading, flat overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .controller import Mode, TciConfig
from .data import SynthSpec
from .decoder import DecoderOptions
from .encoder import EncoderConfig
from .losses import LossConfig
from .model import ModelConfig


@dataclass
class TrainConfig:
    lr: float = 1e-4
    steps: int = 300
    seed: int = 0
    detach_iterations: bool = False


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"]["tci"]["mode"] = self.model.tci.mode.value
        d["model"]["tci"]["per_layer_enabled"] = list(
            self.model.tci.per_layer_enabled)
        d["model"]["encoder"]["channel_schedule"] = list(
            self.model.encoder.channel_schedule)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = d or {}
        model = d.get("model", {})
        tci_d = dict(model.get("tci", {}))
        if "mode" in tci_d:
            tci_d["mode"] = Mode(tci_d["mode"])
        if "per_layer_enabled" in tci_d:
            tci_d["per_layer_enabled"] = tuple(tci_d["per_layer_enabled"])
        return cls(
            model=ModelConfig(
                encoder=EncoderConfig(**model.get("encoder", {})),
                decoder=DecoderOptions(**model.get("decoder", {})),
                tci=TciConfig(**tci_d),
            ),
            loss=LossConfig(**d.get("loss", {})),
            train=TrainConfig(**d.get("train", {})),
            synth=SynthSpec(**d.get("synth", {})),
        )

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def apply_overrides(self, overrides: dict) -> "RunConfig":
        """Apply dotted-path overrides like {'train.lr': 1e-3}."""
        d = self.to_dict()
        for key, value in overrides.items():
            if value is None:
                continue
            node = d
            parts = key.split(".")
            for part in parts[:-1]:
                node = node[part]
            node[parts[-1]] = value
        return RunConfig.from_dict(d)
