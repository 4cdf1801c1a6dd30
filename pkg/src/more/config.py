"""Plain-text run configuration (INI style, sections data/model/train/eval).

Every key has a default; unknown sections or keys are errors. Values are
parsed according to the type of their default, and ``to_text`` writes every
key, so parse -> serialise -> parse is the identity.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Tuple

from .encoders import LoraConfig, TextConfig, VitConfig
from .model import ModelConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    classes: int = 3
    per_class: int = 100
    image_size: int = 64
    ecg_length: int = 1000
    seed: int = 0
    test_size: int = 60
    val_fraction: float = 0.1
    manifest: str = ""


@dataclass
class ModelSection:
    depth: int = 4
    heads: int = 4
    dim: int = 128
    mlp_ratio: float = 4.0
    patch_size: int = 16
    dropkey_rate_first: float = 0.1
    dropkey_rate_last: float = 0.0
    pos_init_std: float = 1.0
    text_depth: int = 4
    text_heads: int = 4
    text_dim: int = 128
    lora_rank: int = 4
    lora_alpha: float = 8.0
    proj_hidden: int = 128
    proj_out: int = 64
    tau_init: float = 0.1


@dataclass
class TrainSection:
    lr: float = 3e-3
    weight_decay: float = 0.1
    accumulation_steps: int = 4
    batch_size: int = 32
    max_epochs: int = 15
    patience: int = 10
    seed: int = 0
    augment: bool = True
    finetune_mode: str = "linear_probe"
    k_last_layers: int = 1
    finetune_lr: float = 1e-2
    finetune_weight_decay: float = 0.02
    finetune_epochs: int = 30


@dataclass
class EvalSection:
    top_k: int = 5
    fusion_weight: float = 0.5
    max_gap_days: int = 3
    templates: str = "Finding of {d}"  # '|'-separated


SECTIONS = {"data": DataSection, "model": ModelSection, "train": TrainSection, "eval": EvalSection}


def _parse(value: str, like, where: str):
    try:
        if isinstance(like, bool):
            low = value.strip().lower()
            if low not in ("true", "false"):
                raise ValueError("expected true or false")
            return low == "true"
        if isinstance(like, int):
            return int(value)
        if isinstance(like, float):
            return float(value)
        return value
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc).splitlines()[0]) from None
        out = cls()
        for sec in cp.sections():
            if sec not in SECTIONS:
                raise ConfigError(f"unknown section [{sec}]")
            target = getattr(out, sec)
            known = {f.name for f in fields(target)}
            for key, raw in cp[sec].items():
                if key not in known:
                    raise ConfigError(f"unknown key {sec}.{key}")
                setattr(target, key, _parse(raw, getattr(target, key), f"{sec}.{key}"))
        return out

    def to_text(self) -> str:
        lines = []
        for sec in SECTIONS:
            lines.append(f"[{sec}]")
            obj = getattr(self, sec)
            lines += [f"{f.name} = {_render(getattr(obj, f.name))}" for f in fields(obj)]
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    def templates(self) -> Tuple[str, ...]:
        return tuple(t.strip() for t in self.eval.templates.split("|") if t.strip())

    def model_config(self, vocab_size: int) -> ModelConfig:
        m = self.model
        vit = VitConfig(
            depth=m.depth, heads=m.heads, dim=m.dim, mlp_ratio=m.mlp_ratio, patch_size=m.patch_size,
            dropkey_rate_first=m.dropkey_rate_first, dropkey_rate_last=m.dropkey_rate_last,
            image_size=self.data.image_size, ecg_length=self.data.ecg_length, pos_init_std=m.pos_init_std,
        )
        text = TextConfig(
            vocab_size=vocab_size, dim=m.text_dim, depth=m.text_depth, heads=m.text_heads,
            mlp_ratio=m.mlp_ratio, lora=LoraConfig(rank=m.lora_rank, alpha=m.lora_alpha),
        )
        return ModelConfig(vit=vit, text=text, proj_hidden=m.proj_hidden, proj_out=m.proj_out, tau_init=m.tau_init, seed=self.train.seed)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            lr=t.lr, weight_decay=t.weight_decay, accumulation_steps=t.accumulation_steps,
            batch_size=t.batch_size, max_epochs=t.max_epochs, patience=t.patience, seed=t.seed,
            augment=t.augment, finetune_mode=t.finetune_mode, k_last_layers=t.k_last_layers,
            finetune_lr=t.finetune_lr, finetune_weight_decay=t.finetune_weight_decay,
            finetune_epochs=t.finetune_epochs, val_fraction=self.data.val_fraction,
        )
