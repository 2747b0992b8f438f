"""Depth-aware learnable tokens and the layer-wise fusion variants.

Per adapted layer i the depthforge variant computes

    A^v = softmax(o^v (T P_v)^T / sqrt(c)),  A^d = softmax(o^d (T P_d)^T / sqrt(c))
    A   = A^v + lam * A^d                       (row sums 1 + lam)
    M   = drop mask of A (row argmax zeroed)
    V   = T W_T + b_T
    out = o^v + eps_out(eps_v(phi((M*A^v) V)) + eps_d(phi((M*lam*A^d) V)))

where o^v, o^d are the frozen layer outputs.  The two branch products sum to
(M*A) V, the single-map form.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import ParameterStore, Tensor

VARIANTS = (
    "frozen",
    "linear_delta",
    "rein",
    "config1_add_depth",
    "config2_token_depth",
    "depthforge",
    "depthforge_no_scale",
)
TOKEN_VARIANTS = ("rein", "config1_add_depth", "config2_token_depth", "depthforge",
                  "depthforge_no_scale")
DEPTH_VARIANTS = ("config1_add_depth", "config2_token_depth", "depthforge", "depthforge_no_scale")


@dataclass
class VariantConfig:
    tag: str = "depthforge"
    token_drop: bool = True
    num_tokens: int = 8
    per_layer_scale: bool = False
    scale_init: float = 1.0

    def validate(self) -> None:
        if self.tag not in VARIANTS:
            raise ValueError(f"unknown variant tag {self.tag!r}; expected one of {VARIANTS}")
        if self.num_tokens < 1:
            raise ValueError("num_tokens must be >= 1")

    @property
    def uses_depth(self) -> bool:
        return self.tag in DEPTH_VARIANTS


@dataclass
class AwarenessMap:
    combined: np.ndarray
    visual: np.ndarray | None = None
    depth: np.ndarray | None = None
    scale: float = 1.0


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Per-parameter generator, so equal names initialise equally across variants."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])


def _gauss(seed: int, name: str, shape) -> np.ndarray:
    return param_rng(seed, name).standard_normal(shape) / np.sqrt(shape[0])


# --------------------------------------------------------------------- ops


def compute_awareness(f_v, f_d, tokens_v, tokens_d, lam):
    """A = S(f_v T_v^T / sqrt c) + lam * S(f_d T_d^T / sqrt c).

    Returns (A, A^v, A^d) as tensors; ``lam`` may be a float or a tensor.
    """
    f_v, f_d = nx.as_tensor(f_v), nx.as_tensor(f_d)
    tokens_v, tokens_d = nx.as_tensor(tokens_v), nx.as_tensor(tokens_d)
    c = f_v.shape[-1]
    for what, t in (("depth features", f_d), ("visual tokens", tokens_v), ("depth tokens", tokens_d)):
        if t.shape[-1] != c:
            raise ValueError(f"channel mismatch: visual features have c={c}, {what} have "
                             f"c={t.shape[-1]}")
    inv = 1.0 / np.sqrt(c)
    a_v = nx.softmax_rows(nx.scale(nx.matmul(f_v, nx.transpose(tokens_v)), inv))
    a_d = nx.softmax_rows(nx.scale(nx.matmul(f_d, nx.transpose(tokens_d)), inv))
    weighted_d = nx.scale(a_d, lam)
    return nx.add(a_v, weighted_d), a_v, a_d


def drop_mask(a: np.ndarray) -> np.ndarray:
    """1 everywhere except at each row's maximum (lowest index on ties)."""
    a = np.asarray(a)
    if a.ndim < 1 or a.shape[-1] < 1:
        raise ValueError(f"drop_top_token needs at least one column, got shape {a.shape}")
    mask = np.ones_like(a, dtype=np.float64)
    idx = np.argmax(a, axis=-1)[..., None]
    np.put_along_axis(mask, idx, 0.0, axis=-1)
    return mask


def drop_top_token(a):
    """Zero the strongest token weight of every patch row."""
    if isinstance(a, AwarenessMap):
        return AwarenessMap(a.combined * drop_mask(a.combined), a.visual, a.depth, a.scale)
    arr = np.asarray(a, dtype=np.float64)
    return arr * drop_mask(arr)


def residual_phi(x, store: ParameterStore, prefix: str) -> Tensor:
    """Two consecutive blocks x <- x + relu(x W + b)."""
    for j in range(2):
        x = nx.add(x, nx.relu(nx.linear(x, store[f"{prefix}.{j}.weight"].tensor,
                                        store[f"{prefix}.{j}.bias"].tensor)))
    return x


def mlp(x, store: ParameterStore, prefix: str) -> Tensor:
    h = nx.relu(nx.linear(x, store[f"{prefix}.fc1.weight"].tensor, store[f"{prefix}.fc1.bias"].tensor))
    return nx.linear(h, store[f"{prefix}.fc2.weight"].tensor, store[f"{prefix}.fc2.bias"].tensor)


def attention_optimize(a, tokens, weight, bias, store=None, phi_prefix=None):
    """delta_hat = A (T W + b); returns (delta_hat, phi(delta_hat)).

    Without ``store`` the residual stage is the identity.
    """
    a, tokens = nx.as_tensor(a), nx.as_tensor(tokens)
    if a.shape[-1] != tokens.shape[-2]:
        raise ValueError(f"awareness map has {a.shape[-1]} token columns but {tokens.shape[-2]} "
                         "tokens were given")
    values = nx.add(nx.matmul(tokens, weight), bias)
    delta_hat = nx.matmul(a, values)
    delta = delta_hat if store is None else residual_phi(delta_hat, store, phi_prefix)
    return delta_hat, delta


# ---------------------------------------------------------------- module


class Fusion:
    """Trainable per-layer adaptation for one variant."""

    def __init__(self, variant: VariantConfig, num_layers: int, c: int, store: ParameterStore,
                 seed: int = 0):
        variant.validate()
        self.variant = variant
        self.num_layers = num_layers
        self.c = c
        self.store = store
        self.seed = seed
        self.record = False
        self.awareness: list[AwarenessMap] = []
        tag = variant.tag
        m = variant.num_tokens

        def add(name, data, trainable=True):
            return store.add(f"fusion.{name}", data, trainable)

        def gauss(name, shape):
            return add(name, _gauss(seed, f"fusion.{name}", shape))

        if tag == "linear_delta":
            for i in range(1, num_layers + 1):
                add(f"layer{i}.delta_w", np.zeros((c, c)))
            return
        if tag not in TOKEN_VARIANTS:
            return

        for i in range(1, num_layers + 1):
            gauss(f"layer{i}.tokens", (m, c))
            gauss(f"layer{i}.align.weight", (c, c))
            add(f"layer{i}.align.bias", np.zeros(c))
            if tag == "config2_token_depth":
                add(f"layer{i}.token_depth.weight", np.zeros((c, c)))
        add("proj_v", np.eye(c))
        for j in range(2):
            if j == 0:
                gauss("phi.0.weight", (c, c))
            else:
                add("phi.1.weight", np.zeros((c, c)))
            add(f"phi.{j}.bias", np.zeros(c))
        branches = ["mlp_v"] + (["mlp_d"] if tag.startswith("depthforge") else [])
        for br in branches:
            gauss(f"{br}.fc1.weight", (c, c))
            add(f"{br}.fc1.bias", np.zeros(c))
            gauss(f"{br}.fc2.weight", (c, c))
            add(f"{br}.fc2.bias", np.zeros(c))
        gauss("mlp_out.fc1.weight", (c, c))
        add("mlp_out.fc1.bias", np.zeros(c))
        add("mlp_out.fc2.weight", np.zeros((c, c)))
        add("mlp_out.fc2.bias", np.zeros(c))
        if tag.startswith("depthforge"):
            add("proj_d", np.eye(c))
            if tag == "depthforge":
                if variant.per_layer_scale:
                    for i in range(1, num_layers + 1):
                        add(f"layer{i}.scale", np.full((1,), variant.scale_init))
                else:
                    add("scale", np.full((1,), variant.scale_init))

    def p(self, name: str) -> Tensor:
        return self.store[f"fusion.{name}"].tensor

    def scale_for(self, i: int):
        """lam for layer i: a tensor when learnable, 1.0 when pinned."""
        if self.variant.tag == "depthforge_no_scale":
            return 1.0
        if self.variant.per_layer_scale:
            return self.p(f"layer{i}.scale")
        return self.p("scale")

    def params(self) -> list:
        return [p for p in self.store if p.name.startswith("fusion.")]

    # ---------------------------------------------------------------- paths

    def _token_path(self, i: int, feats, tokens, mask_source=None):
        """Visual-only token path: eps_v(phi(M * S(f T_v^T/sqrt c) V))."""
        keys = nx.matmul(tokens, self.p("proj_v"))
        inv = 1.0 / np.sqrt(self.c)
        a = nx.softmax_rows(nx.scale(nx.matmul(feats, nx.transpose(keys)), inv))
        if self.record:
            self.awareness.append(AwarenessMap(a.data.copy(), a.data.copy(), None, 0.0))
        if self.variant.token_drop:
            a = nx.scale(a, drop_mask(a.data))
        _, delta = attention_optimize(a, tokens, self.p(f"layer{i}.align.weight"),
                                      self.p(f"layer{i}.align.bias"), self.store, "fusion.phi")
        return mlp(delta, self.store, "fusion.mlp_v")

    def depthforge_delta(self, i: int, out_v, out_d) -> Tensor:
        tokens = self.p(f"layer{i}.tokens")
        lam = self.scale_for(i)
        tv = nx.matmul(tokens, self.p("proj_v"))
        td = nx.matmul(tokens, self.p("proj_d"))
        a, a_v, a_d = compute_awareness(out_v, out_d, tv, td, lam)
        if self.record:
            lam_val = float(np.asarray(nx.as_tensor(lam).data).reshape(-1)[0])
            self.awareness.append(AwarenessMap(a.data.copy(), a_v.data.copy(), a_d.data.copy(), lam_val))
        weighted_d = nx.scale(a_d, lam)
        if self.variant.token_drop:
            mask = drop_mask(a.data)
            a_v = nx.scale(a_v, mask)
            weighted_d = nx.scale(weighted_d, mask)
        w, b = self.p(f"layer{i}.align.weight"), self.p(f"layer{i}.align.bias")
        _, dv = attention_optimize(a_v, tokens, w, b, self.store, "fusion.phi")
        _, dd = attention_optimize(weighted_d, tokens, w, b, self.store, "fusion.phi")
        summed = nx.add(mlp(dv, self.store, "fusion.mlp_v"), mlp(dd, self.store, "fusion.mlp_d"))
        return mlp(summed, self.store, "fusion.mlp_out")

    def fuse_layer(self, i: int, f_v, f_d, out_v, out_d) -> Tensor:
        """Adapted feature f_{i+1} from inputs f_* and frozen outputs out_* of layer i."""
        tag = self.variant.tag
        shapes = {nx.as_tensor(t).shape[-2:] for t in (f_v, out_v) if t is not None}
        if self.variant.uses_depth:
            shapes |= {nx.as_tensor(t).shape[-2:] for t in (f_d, out_d) if t is not None}
        if len(shapes) > 1:
            raise ValueError(f"fuse_layer inputs disagree in shape: {sorted(shapes)}")
        if tag == "frozen":
            return out_v
        if tag == "linear_delta":
            return nx.add(out_v, nx.matmul(f_v, self.p(f"layer{i}.delta_w")))
        if tag == "rein":
            delta = self._token_path(i, out_v, self.p(f"layer{i}.tokens"))
            return nx.add(out_v, mlp(delta, self.store, "fusion.mlp_out"))
        if tag == "config1_add_depth":
            # tokens attend to the summed features; the residual base stays visual
            delta = self._token_path(i, nx.add(out_v, out_d), self.p(f"layer{i}.tokens"))
            return nx.add(out_v, mlp(delta, self.store, "fusion.mlp_out"))
        if tag == "config2_token_depth":
            d = nx.as_tensor(out_d)
            n = d.shape[-2]
            pooled = nx.matmul(np.full((1, n), 1.0 / n), d)
            tokens = nx.add(self.p(f"layer{i}.tokens"),
                            nx.matmul(pooled, self.p(f"layer{i}.token_depth.weight")))
            delta = self._token_path(i, out_v, tokens)
            return nx.add(out_v, mlp(delta, self.store, "fusion.mlp_out"))
        if tag in ("depthforge", "depthforge_no_scale"):
            return nx.add(out_v, self.depthforge_delta(i, out_v, out_d))
        raise ValueError(f"unknown variant tag {tag!r}")


def export_awareness(maps: list[AwarenessMap], out_dir, sample: int = 0) -> list[Path]:
    """Write each layer's combined map as raw little-endian float32 plus a JSON sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for layer, amap in enumerate(maps, start=1):
        grid = np.asarray(amap.combined)
        if grid.ndim == 3:
            grid = grid[sample]
        n, m = grid.shape
        path = out / f"awareness_layer{layer}.f32"
        path.write_bytes(np.ascontiguousarray(grid, dtype="<f4").tobytes())
        (out / f"awareness_layer{layer}.json").write_text(
            json.dumps({"layer": layer, "n": n, "m": m, "lambda": amap.scale}, indent=2))
        written.append(path)
    return written
