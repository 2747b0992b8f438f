"""Full segmenter: two frozen backbones, a fusion variant and the decoder."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import numerics as nx
from .backbone import BackboneConfig, FrozenBackbone, LayerFeatures
from .decoder import Decoder, DecoderConfig, SegLogits
from .fusion import Fusion, VariantConfig
from .numerics import ParameterStore

# fixed standardisation of metric depth before the depth stream, the usual
# input normalisation of a pretrained depth model
DEPTH_MEAN = 0.55
DEPTH_STD = 0.25


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    variant: VariantConfig = field(default_factory=VariantConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    seed: int = 0


class DepthForgeModel:
    def __init__(self, config: ModelConfig):
        self.config = config
        bb = config.backbone
        self.store = ParameterStore()
        self.visual = FrozenBackbone(replace(bb, input_channels=3), self.store, "visual")
        self.depth = FrozenBackbone(replace(bb, input_channels=1, seed=bb.seed + 1), self.store, "depth")
        self.fusion = Fusion(config.variant, bb.num_layers, bb.feature_dim, self.store, config.seed)
        self.decoder = Decoder(config.decoder, bb.num_layers, bb.feature_dim, bb.grid, bb.patch_size,
                               self.store, config.seed)

    @property
    def uses_depth(self) -> bool:
        return self.config.variant.uses_depth

    def trainable(self) -> list:
        return self.store.trainable()

    def depth_features(self, depth: np.ndarray) -> list[np.ndarray]:
        """Frozen depth-stream outputs per layer (plain arrays, cacheable)."""
        with nx.no_grad():
            feats = self.depth.forward_features((_batched(depth, 1) - DEPTH_MEAN) / DEPTH_STD)
        return [f.data for f in feats.features]

    def forward_adapted(self, image, depth=None, depth_feats=None) -> LayerFeatures:
        """Run both stacks layer-synchronously; the adapted visual feature feeds
        the next visual layer, the depth stream stays purely frozen."""
        image = _batched(image, 3)
        if self.uses_depth and depth_feats is None:
            if depth is None:
                raise ValueError(f"variant {self.config.variant.tag!r} needs a depth image")
            depth_feats = self.depth_features(depth)
        if self.fusion.record:
            self.fusion.awareness = []
        x = self.visual.embed(image)
        d_in = None
        feats = []
        for i in range(1, self.config.backbone.num_layers + 1):
            out_v = self.visual.layer(i, x)
            out_d = nx.Tensor(depth_feats[i - 1]) if self.uses_depth else None
            x = self.fusion.fuse_layer(i, x, d_in, out_v, out_d)
            d_in = out_d
            feats.append(x)
        return LayerFeatures(feats, "visual")

    def forward(self, image, depth=None, depth_feats=None) -> SegLogits:
        feats = self.forward_adapted(image, depth, depth_feats)
        return self.decoder(feats.features)

    def predict_labels(self, image, depth=None, depth_feats=None) -> np.ndarray:
        with nx.no_grad():
            return self.forward(image, depth, depth_feats).labels()

    def count_trainable(self) -> int:
        return sum(p.size for p in self.store.trainable())


def _batched(arr, channels: int) -> np.ndarray:
    a = np.asarray(arr, dtype=np.float64)
    if channels == 1 and a.ndim == 2:
        a = a[..., None]
    if a.ndim == 3:
        a = a[None]
    return a


def model_config_to_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)


def model_config_from_dict(d: dict) -> ModelConfig:
    return ModelConfig(
        backbone=BackboneConfig(**d.get("backbone", {})),
        variant=VariantConfig(**d.get("variant", {})),
        decoder=DecoderConfig(**d.get("decoder", {})),
        seed=int(d.get("seed", 0)),
    )
