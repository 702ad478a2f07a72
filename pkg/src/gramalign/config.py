"""Training configuration and its flat dotted-key JSON form."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

from .diffusion import DiffusionConfig
from .fusion import FusionConfig
from .objective import LossConfig


@dataclass
class TrainConfig:
    hidden_dim: int = 300
    epochs: int = 1000
    learning_rate: float = 5e-3
    visual_dim: int = 4096
    batch_size: int = 512
    seed: int = 0
    train_ratio: float = 0.3
    rrgat_layers: int = 2
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    # per-modality diffusion overrides, e.g. {"v": DiffusionConfig(...)}
    diffusion_by_modality: dict = field(default_factory=dict)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def diffusion_for(self, modality: str) -> DiffusionConfig:
        return self.diffusion_by_modality.get(modality, self.diffusion)

    def to_flat(self) -> dict:
        out = {k: getattr(self, k) for k in _TOP}
        for key, (section, attr) in _NESTED.items():
            out[key] = getattr(getattr(self, section), attr)
        for m, cfg in sorted(self.diffusion_by_modality.items()):
            for short, attr in _DIFF_KEYS.items():
                out[f"diffusion.{m}.{short}"] = getattr(cfg, attr)
        return out

    @classmethod
    def from_flat(cls, flat: dict, base: "TrainConfig | None" = None) -> "TrainConfig":
        cfg = base or cls()
        top, nested, per_mod = {}, {}, {}
        for key, value in flat.items():
            if key in _TOP:
                top[key] = value
            elif key in _NESTED:
                section, attr = _NESTED[key]
                nested.setdefault(section, {})[attr] = value
            elif key.startswith("diffusion.") and key.count(".") == 2:
                _, m, short = key.split(".")
                if m not in ("r", "a", "v") or short not in _DIFF_KEYS:
                    raise KeyError(f"unknown config key {key!r}")
                per_mod.setdefault(m, {})[_DIFF_KEYS[short]] = value
            else:
                raise KeyError(f"unknown config key {key!r}")
        cfg = replace(cfg, **top)
        for section, values in nested.items():
            cfg = replace(cfg, **{section: replace(getattr(cfg, section), **values)})
        if per_mod:
            merged = dict(cfg.diffusion_by_modality)
            for m, values in per_mod.items():
                merged[m] = replace(merged.get(m, cfg.diffusion), **values)
            cfg = replace(cfg, diffusion_by_modality=merged)
        return cfg

    @classmethod
    def from_json(cls, path, base=None) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_flat(json.load(fh), base)

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_flat(), fh, indent=2, sort_keys=True)


_TOP = ("hidden_dim", "epochs", "learning_rate", "visual_dim", "batch_size", "seed",
        "train_ratio", "rrgat_layers")

_DIFF_KEYS = {"alpha": "alpha", "beta": "beta", "k": "k", "dropout": "dropout_rate"}

_NESTED = {
    "diffusion.alpha": ("diffusion", "alpha"),
    "diffusion.beta": ("diffusion", "beta"),
    "diffusion.k": ("diffusion", "k"),
    "diffusion.dropout": ("diffusion", "dropout_rate"),
    "fusion.heads": ("fusion", "heads"),
    "fusion.ffn_dim": ("fusion", "ffn_dim"),
    "fusion.weight_mode": ("fusion", "weight_mode"),
    "fusion.weight_scope": ("fusion", "weight_scope"),
    "loss.tau": ("loss", "tau"),
    "loss.T": ("loss", "T"),
    "loss.lambda": ("loss", "lam"),
    "loss.topk": ("loss", "K"),
    "loss.epsilon": ("loss", "epsilon"),
    "gram.normalize": ("loss", "normalize"),
    "infonce.include_positive_in_denominator": ("loss", "include_positive"),
}
