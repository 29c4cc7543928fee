"""Full segmentation network: backbone, OCR head, classifier and HMA fusion."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import ops
from .backbone import Backbone, BackboneConfig
from .hma import TRAIN_SCALES, AttentionHead, hierarchical_fuse
from .layers import Conv2d, Module
from .ocr import OcrHead
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 4
    num_domains: int = 1
    norm_kind: str = "DBN"
    base_channels: int = 16
    low_channels: int = 32
    num_fusion_blocks: int = 3
    key_channels: int = 32
    epsilon: float = 1e-5
    stats_momentum: float = 0.1

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(self.base_channels, self.low_channels, self.num_fusion_blocks,
                              self.norm_kind.upper(), self.num_domains, self.epsilon, self.stats_momentum)

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


class SegmentationModel(Module):
    """Per-scale forward is backbone -> OCR -> 1x1 classifier; scales are fused by HMA."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        bcfg = config.backbone_config()
        c = bcfg.out_channels
        self.backbone = Backbone(bcfg, rng)
        self.ocr = OcrHead(bcfg, c, config.num_classes, rng, key_channels=config.key_channels)
        self.classifier = Conv2d("classifier", c, config.num_classes, 1, rng=rng)
        self.attention = AttentionHead(c, rng)

    def forward_scale(self, image: Tensor, domain, mode: str = "train"):
        """Return ``(logits, features, region_logits)`` for one input scale."""
        feats = self.backbone(image, domain, mode)
        augmented, region_logits = self.ocr(feats, domain, mode)
        return self.classifier(augmented), augmented, region_logits

    def forward(self, image: Tensor, domain, mode: str = "train", scales: Sequence[float] = TRAIN_SCALES,
                return_parts: bool = False):
        """Fused logits at the input resolution."""
        return hierarchical_fuse(self.attention, lambda x: self.forward_scale(x, domain, mode), image,
                                 scales, return_parts=return_parts)

    __call__ = forward

    def predict(self, images, domain, scales: Sequence[float] = TRAIN_SCALES, stats: str = "running") -> np.ndarray:
        """Argmax class ids ``[N, H, W]``; no tape is recorded."""
        mode = {"running": "eval", "batch": "batch"}[stats]
        logits = self.forward(Tensor(np.asarray(images, np.float32)), domain, mode, scales)
        return logits.data.argmax(axis=1)

    def parameter_dict(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}

    def domain_stats(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.norm_layers():
            out.update(layer.state())
        return out
