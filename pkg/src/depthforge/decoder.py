"""Depth refinement decoder: per-layer MLPs, 1x1 fusion, transformer head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .backbone import affine_norm, init_block, transformer_block
from .fusion import _gauss
from .numerics import ParameterStore, Tensor


@dataclass
class DecoderConfig:
    num_classes: int = 6
    hidden_dim: int | None = None
    head_layers: int = 2
    head_heads: int = 4

    def validate(self, c: int) -> None:
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.head_layers < 0:
            raise ValueError("head_layers must be >= 0")
        if c % self.head_heads:
            raise ValueError(f"feature_dim {c} is not divisible by head_heads {self.head_heads}")


@dataclass
class SegLogits:
    patch: Tensor  # (B, n, K)
    grid: int
    patch_size: int

    def pixel_logits(self) -> Tensor:
        """Nearest-patch replication to (B, H*W, K), differentiable."""
        return nx.matmul(replication_matrix(self.grid, self.patch_size), self.patch)

    def pixel_array(self) -> np.ndarray:
        """(B, H, W, K) numpy logits."""
        z = self.patch.data
        B, _, K = z.shape
        g, p = self.grid, self.patch_size
        z = z.reshape(B, g, 1, g, 1, K)
        z = np.broadcast_to(z, (B, g, p, g, p, K))
        return z.reshape(B, g * p, g * p, K)

    def labels(self) -> np.ndarray:
        """(B, H, W) argmax labels; constant within each patch."""
        g, p = self.grid, self.patch_size
        B = self.patch.shape[0]
        lab = np.argmax(self.patch.data, axis=-1).reshape(B, g, g)
        return np.repeat(np.repeat(lab, p, axis=1), p, axis=2).astype(np.uint8)


_REP_CACHE: dict = {}


def replication_matrix(grid: int, patch: int) -> np.ndarray:
    """(H*W, n) 0/1 matrix mapping each pixel to its patch."""
    key = (grid, patch)
    if key not in _REP_CACHE:
        side = grid * patch
        rows = np.arange(side) // patch
        patch_of = (rows[:, None] * grid + rows[None, :]).reshape(-1)
        mat = np.zeros((side * side, grid * grid))
        mat[np.arange(side * side), patch_of] = 1.0
        _REP_CACHE[key] = mat
    return _REP_CACHE[key]


class Decoder:
    def __init__(self, config: DecoderConfig, num_layers: int, c: int, grid: int, patch_size: int,
                 store: ParameterStore, seed: int = 0):
        config.validate(c)
        self.config = config
        self.num_layers = num_layers
        self.c = c
        self.grid = grid
        self.patch_size = patch_size
        self.store = store
        h = config.hidden_dim or c

        def dense(name, fan_in, fan_out):
            store.add(f"{name}.weight", _gauss(seed, f"{name}.weight", (fan_in, fan_out)), True)
            store.add(f"{name}.bias", np.zeros(fan_out), True)

        for i in range(1, num_layers + 1):
            dense(f"decoder.layer{i}.fc_in", c, h)
            dense(f"decoder.layer{i}.fc_out", h, c)
        dense("decoder.fuse", num_layers * c, c)
        for j in range(1, config.head_layers + 1):
            init_block(store, f"head.block{j}", c, 4, np.random.default_rng([seed, 7919, j]), True)
        store.add("head.norm.gamma", np.ones(c), True)
        store.add("head.norm.beta", np.zeros(c), True)
        dense("head.cls", c, config.num_classes)

    def _dense(self, x, name):
        return nx.linear(x, self.store[f"{name}.weight"].tensor, self.store[f"{name}.bias"].tensor)

    def project_layer(self, f, i: int) -> Tensor:
        """f_out = fc_out(relu(fc_in f)) with layer-specific weights (1-based i)."""
        if not 1 <= i <= self.num_layers:
            raise IndexError(f"layer index {i} outside [1, {self.num_layers}]")
        return self._dense(nx.relu(self._dense(f, f"decoder.layer{i}.fc_in")), f"decoder.layer{i}.fc_out")

    def fuse_multilayer(self, outs: list) -> Tensor:
        if len(outs) != self.num_layers:
            raise ValueError(f"expected {self.num_layers} layer outputs, got {len(outs)}")
        stacked = outs[0] if len(outs) == 1 else nx.concat(outs, axis=-1)
        return self._dense(stacked, "decoder.fuse")

    def predict(self, fused) -> SegLogits:
        x = nx.as_tensor(fused)
        for j in range(1, self.config.head_layers + 1):
            x = transformer_block(x, self.store, f"head.block{j}", self.config.head_heads)
        x = affine_norm(x, self.store, "head.norm")
        logits = self._dense(x, "head.cls")
        return SegLogits(logits, self.grid, self.patch_size)

    def __call__(self, feats: list) -> SegLogits:
        outs = [self.project_layer(f, i) for i, f in enumerate(feats, start=1)]
        return self.predict(self.fuse_multilayer(outs))
