"""Frozen transformer encoder stacks standing in for the visual and depth VFMs."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ParameterStore, Tensor


@dataclass
class BackboneConfig:
    num_layers: int = 4
    feature_dim: int = 64
    num_heads: int = 4
    patch_size: int = 4
    image_side: int = 64
    input_channels: int = 3
    seed: int = 0
    mlp_ratio: int = 4

    def validate(self) -> None:
        for name in ("num_layers", "feature_dim", "num_heads", "patch_size", "image_side",
                     "input_channels", "mlp_ratio"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.feature_dim % self.num_heads:
            raise ValueError(
                f"feature_dim {self.feature_dim} is not divisible by num_heads {self.num_heads}")
        if self.image_side % self.patch_size:
            raise ValueError(
                f"image_side {self.image_side} is not a multiple of patch_size {self.patch_size}")

    @property
    def grid(self) -> int:
        return self.image_side // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2


@dataclass
class LayerFeatures:
    """Per-layer features [f_1 ... f_N], each (B, n, c) or (n, c)."""

    features: list
    modality: str

    def __len__(self) -> int:
        return len(self.features)

    def __getitem__(self, i):
        return self.features[i]


def block_param_shapes(c: int, ratio: int) -> dict[str, tuple[int, ...]]:
    h = c * ratio
    return {
        "ln1.gamma": (c,), "ln1.beta": (c,),
        "attn.qkv.weight": (c, 3 * c), "attn.qkv.bias": (3 * c,),
        "attn.proj.weight": (c, c), "attn.proj.bias": (c,),
        "ln2.gamma": (c,), "ln2.beta": (c,),
        "mlp.fc1.weight": (c, h), "mlp.fc1.bias": (h,),
        "mlp.fc2.weight": (h, c), "mlp.fc2.bias": (c,),
    }


def init_block(store: ParameterStore, prefix: str, c: int, ratio: int, rng, trainable: bool,
               zero_last: bool = False) -> None:
    """Register one pre-norm transformer block; linear maps use variance 1/fan_in."""
    for key, shape in block_param_shapes(c, ratio).items():
        if key.endswith("gamma"):
            data = np.ones(shape)
        elif key.endswith(("beta", "bias")):
            data = np.zeros(shape)
        elif zero_last and key == "mlp.fc2.weight":
            data = np.zeros(shape)
        else:
            data = rng.standard_normal(shape) / np.sqrt(shape[0])
        store.add(f"{prefix}.{key}", data, trainable)


def attention(x: Tensor, store: ParameterStore, prefix: str, heads: int) -> Tensor:
    """Multi-head self-attention; heads are column slices of one qkv projection."""
    c = x.shape[-1]
    d = c // heads
    qkv = nx.linear(x, store[f"{prefix}.qkv.weight"].tensor, store[f"{prefix}.qkv.bias"].tensor)
    inv = 1.0 / np.sqrt(d)
    outs = []
    for h in range(heads):
        q = qkv[..., h * d:(h + 1) * d]
        k = qkv[..., c + h * d:c + (h + 1) * d]
        v = qkv[..., 2 * c + h * d:2 * c + (h + 1) * d]
        weights = nx.softmax_rows(nx.scale(nx.matmul(q, nx.transpose(k)), inv))
        outs.append(nx.matmul(weights, v))
    merged = outs[0] if heads == 1 else nx.concat(outs, axis=-1)
    return nx.linear(merged, store[f"{prefix}.proj.weight"].tensor,
                     store[f"{prefix}.proj.bias"].tensor)


def affine_norm(x: Tensor, store: ParameterStore, prefix: str) -> Tensor:
    y = nx.scale(nx.layer_norm(x), store[f"{prefix}.gamma"].tensor)
    return nx.add(y, store[f"{prefix}.beta"].tensor)


def transformer_block(x: Tensor, store: ParameterStore, prefix: str, heads: int) -> Tensor:
    x = nx.add(x, attention(affine_norm(x, store, f"{prefix}.ln1"), store, f"{prefix}.attn", heads))
    h = affine_norm(x, store, f"{prefix}.ln2")
    h = nx.relu(nx.linear(h, store[f"{prefix}.mlp.fc1.weight"].tensor,
                          store[f"{prefix}.mlp.fc1.bias"].tensor))
    h = nx.linear(h, store[f"{prefix}.mlp.fc2.weight"].tensor, store[f"{prefix}.mlp.fc2.bias"].tensor)
    return nx.add(x, h)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) -> (B, n, patch*patch*C), patches in row-major grid order."""
    B, H, W, C = images.shape
    g_h, g_w = H // patch, W // patch
    x = images.reshape(B, g_h, patch, g_w, patch, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, g_h * g_w, patch * patch * C)


class FrozenBackbone:
    """N-layer pre-norm ViT encoder whose parameters are all frozen."""

    def __init__(self, config: BackboneConfig, store: ParameterStore | None = None,
                 prefix: str = "visual"):
        config.validate()
        self.config = config
        self.prefix = prefix
        self.store = store if store is not None else ParameterStore()
        c, p, C = config.feature_dim, config.patch_size, config.input_channels
        rng = np.random.default_rng(config.seed)
        fan_in = p * p * C
        self.store.add(f"{prefix}.patch_embed.weight",
                       rng.standard_normal((fan_in, c)) / np.sqrt(fan_in), False)
        self.store.add(f"{prefix}.patch_embed.bias", np.zeros(c), False)
        self.store.add(f"{prefix}.pos_embed", 0.5 * rng.standard_normal((config.num_patches, c)),
                       False)
        for i in range(config.num_layers):
            init_block(self.store, f"{prefix}.layer{i + 1}", c, config.mlp_ratio, rng, False)

    @property
    def params(self) -> list:
        return [p for p in self.store if p.name.startswith(self.prefix + ".")]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.params:
            h.update(p.name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def _check_image(self, image: np.ndarray) -> np.ndarray:
        cfg = self.config
        arr = np.asarray(image, dtype=np.float64)
        if arr.ndim == 2 and cfg.input_channels == 1:
            arr = arr[..., None]
        if arr.ndim == 3:
            arr = arr[None]
        expected = (cfg.image_side, cfg.image_side, cfg.input_channels)
        if arr.ndim != 4 or arr.shape[1:] != expected:
            raise ValueError(f"{self.prefix} backbone expects images of shape {expected} "
                             f"(optionally batched), got {np.shape(image)}")
        return arr

    def embed(self, images: np.ndarray) -> Tensor:
        arr = self._check_image(images)
        patches = patchify(arr, self.config.patch_size)
        s, pre = self.store, self.prefix
        x = nx.linear(patches, s[f"{pre}.patch_embed.weight"].tensor, s[f"{pre}.patch_embed.bias"].tensor)
        return nx.add(x, s[f"{pre}.pos_embed"].tensor)

    def layer(self, i: int, x: Tensor) -> Tensor:
        """Apply frozen layer ``i`` (1-based)."""
        if not 1 <= i <= self.config.num_layers:
            raise IndexError(f"layer index {i} outside [1, {self.config.num_layers}]")
        return transformer_block(x, self.store, f"{self.prefix}.layer{i}", self.config.num_heads)

    def forward_features(self, image: np.ndarray) -> LayerFeatures:
        single = np.asarray(image).ndim < 4
        x = self.embed(image)
        feats = []
        for i in range(1, self.config.num_layers + 1):
            x = self.layer(i, x)
            feats.append(x)
        if single:
            feats = [f[0] for f in feats]
        return LayerFeatures(feats, "visual" if self.config.input_channels == 3 else "depth")

