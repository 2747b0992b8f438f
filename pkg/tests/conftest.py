import numpy as np
import pytest

from depthforge.backbone import BackboneConfig
from depthforge.decoder import DecoderConfig
from depthforge.fusion import VariantConfig
from depthforge.model import DepthForgeModel, ModelConfig


def tiny_config(tag="depthforge", *, layers=2, c=16, m=4, grid=2, patch=2, K=3, heads=2,
                seed=0, token_drop=True, **variant_kw):
    return ModelConfig(
        backbone=BackboneConfig(num_layers=layers, feature_dim=c, num_heads=heads,
                                patch_size=patch, image_side=grid * patch, seed=11),
        variant=VariantConfig(tag=tag, num_tokens=m, token_drop=token_drop, **variant_kw),
        decoder=DecoderConfig(num_classes=K, head_layers=1, head_heads=heads),
        seed=seed,
    )


def tiny_model(tag="depthforge", **kw):
    return DepthForgeModel(tiny_config(tag, **kw))


def randomize_zero_init(model, seed=5, scale=0.3):
    """Give zero-initialised trainable weights random values so every path is live."""
    rng = np.random.default_rng(seed)
    for p in model.store.trainable():
        if not np.any(p.data):
            p.tensor.data[...] = scale * rng.standard_normal(p.shape)


def tiny_batch(model, B=2, seed=0):
    rng = np.random.default_rng(seed)
    s = model.config.backbone.image_side
    K = model.config.decoder.num_classes
    return {
        "visual": rng.uniform(size=(B, s, s, 3)),
        "depth": rng.uniform(0.1, 1.0, size=(B, s, s, 1)),
        "labels": rng.integers(0, K, size=(B, s, s)),
    }


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
