"""The tri-modal model: three encoders, three projection heads, one temperature."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .encoders import EcgEncoder, ImageEncoder, LoraConfig, TextConfig, TextEncoder, VitConfig
from .nn import Module
from .objective import ProjectionHead, Temperature, project, total_loss
from .tensor import Tensor


@dataclass
class ModelConfig:
    vit: VitConfig = field(default_factory=VitConfig)
    text: TextConfig = field(default_factory=TextConfig)
    proj_hidden: int = 128
    proj_out: int = 64
    tau_init: float = 0.1
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        text = dict(d["text"])
        lora = text.pop("lora", None)
        vit = dict(d["vit"])
        for key in ("ecg_kernels", "ecg_strides"):
            vit[key] = tuple(vit[key])
        if lora is not None:
            lora = dict(lora)
            lora["targets"] = tuple(lora["targets"])
        return cls(
            vit=VitConfig(**vit),
            text=TextConfig(**text, lora=LoraConfig(**lora) if lora is not None else None),
            proj_hidden=d["proj_hidden"],
            proj_out=d["proj_out"],
            tau_init=d["tau_init"],
            seed=d["seed"],
        )


class MoreModel(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.image_encoder = ImageEncoder(cfg.vit, rng)
        self.ecg_encoder = EcgEncoder(cfg.vit, rng)
        self.text_encoder = TextEncoder(cfg.text, rng)
        d_img, d_txt = cfg.vit.dim, cfg.text.dim
        self.image_head = ProjectionHead(d_img, cfg.proj_hidden, cfg.proj_out, rng)
        self.ecg_head = ProjectionHead(d_img, cfg.proj_hidden, cfg.proj_out, rng)
        self.text_head = ProjectionHead(d_txt, cfg.proj_hidden, cfg.proj_out, rng)
        self.temperature = Temperature(cfg.tau_init)

    def embed_image(self, images, rng=None, trace: bool = False):
        h, tr = self.image_encoder(images, rng=rng, trace=trace)
        return project(self.image_head, h), tr

    def embed_ecg(self, ecgs, rng=None, trace: bool = False):
        h, tr = self.ecg_encoder(ecgs, rng=rng, trace=trace)
        return project(self.ecg_head, h), tr

    def embed_text(self, ids, valid=None, trace: bool = False):
        h, tr = self.text_encoder(ids, valid, trace=trace)
        return project(self.text_head, h), tr

    def loss(self, images, ecgs, ids, valid, rng=None) -> Tensor:
        zi, _ = self.embed_image(images, rng)
        ze, _ = self.embed_ecg(ecgs, rng)
        zt, _ = self.embed_text(ids, valid)
        return total_loss(zt, zi, ze, self.temperature())
