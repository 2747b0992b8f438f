"""Depth-aware learnable tokens on frozen transformer backbones, in numpy."""
from .backbone import BackboneConfig, FrozenBackbone
from .decoder import Decoder, DecoderConfig
from .fusion import VARIANTS, Fusion, VariantConfig
from .model import DepthForgeModel, ModelConfig
from .synthbench import DatasetSpec, DomainSpec, build_dataset, evaluate_miou, generate_scene
from .training import TrainConfig, Trainer, lr_at_step, new_state

__version__ = "0.1.0"
