"""Segmentation objective, one-cycle AdamW optimisation and checkpoints.

Only trainable parameters (tokens, fusion, decoder, head) are updated; both
backbones stay frozen.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .decoder import SegLogits
from .model import DepthForgeModel, ModelConfig, model_config_from_dict, model_config_to_dict
from .synthbench import Dataset

MAGIC = b"DFCK"
FORMAT_VERSION = 1


class NumericError(RuntimeError):
    """Training produced a non-finite loss; ``diagnostics`` holds feature norms."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr_max: float = 1e-4
    weight_decay: float = 0.05
    adam_eps: float = 1e-8
    betas: tuple = (0.9, 0.999)
    total_steps: int = 2000
    warmup_fraction: float = 0.10
    div_factor: float = 10.0
    final_div_factor: float = 10.0
    batch_size: int = 8
    seed: int = 0
    grad_clip: float | None = None
    checkpoint_every: int = 0

    def validate(self) -> None:
        if not 0 < self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in (0, 1)")
        if self.div_factor < 1 or self.final_div_factor < 1:
            raise ValueError("div factors must be >= 1")
        if self.total_steps < 0 or self.batch_size < 1:
            raise ValueError("total_steps must be >= 0 and batch_size >= 1")
        self.betas = tuple(self.betas)


def _cos_anneal(start: float, end: float, pct: float) -> float:
    return end + (start - end) / 2.0 * (math.cos(math.pi * pct) + 1.0)


def lr_at_step(step: int, config: TrainConfig) -> float:
    """Cosine warmup from lr_max/div up to lr_max, then cosine decay to
    lr_max/(div*final_div) at ``total_steps``."""
    total = config.total_steps
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    initial = config.lr_max / config.div_factor
    final = initial / config.final_div_factor
    warm = config.warmup_fraction * total
    if step <= warm:
        return _cos_anneal(initial, config.lr_max, step / warm if warm > 0 else 1.0)
    return _cos_anneal(config.lr_max, final, (step - warm) / (total - warm))


def segmentation_loss(logits, labels) -> nx.Tensor:
    """Mean per-pixel softmax cross-entropy; label 255 is ignored.

    ``logits`` is a :class:`SegLogits` (patch logits replicated to pixels) or a
    tensor of pixel logits (..., K) matching ``labels``.
    """
    labels = np.asarray(labels)
    if isinstance(logits, SegLogits):
        pix = logits.pixel_logits()
        return nx.cross_entropy(pix, labels.reshape(pix.shape[:-1]))
    return nx.cross_entropy(logits, labels)


def count_trainable_params(model: DepthForgeModel) -> int:
    return sum(p.size for p in model.store.trainable())


class AdamW:
    """Adam moments with decoupled weight decay, trainable parameters only."""

    def __init__(self, params, config: TrainConfig):
        self.params = [p for p in params if p.trainable]
        self.config = config
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}
        self.t = 0

    def step(self, lr: float) -> None:
        b1, b2 = self.config.betas
        eps, wd = self.config.adam_eps, self.config.weight_decay
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p in self.params:
            g = p.tensor.grad
            m, v = self.m[p.name], self.v[p.name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            data = p.tensor.data
            data *= 1.0 - lr * wd
            data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_gradients(params, max_norm: float) -> float:
    total = math.sqrt(sum(float((p.tensor.grad ** 2).sum()) for p in params))
    if total > max_norm:
        for p in params:
            p.tensor.grad *= max_norm / total
    return total


def feature_norms(model: DepthForgeModel, images, depth_feats) -> dict:
    with nx.no_grad():
        feats = model.forward_adapted(images, depth_feats=depth_feats)
    return {f"layer{i}": float(np.linalg.norm(f.data)) for i, f in enumerate(feats.features, 1)}


def train_step(model: DepthForgeModel, batch: dict, optim: AdamW, config: TrainConfig,
               step: int) -> float:
    """One forward, one backward and one AdamW update at ``lr_at_step(step)``."""
    with nx.Tape():
        logits = model.forward(batch["visual"], batch.get("depth"), batch.get("depth_feats"))
        loss = segmentation_loss(logits, batch["labels"])
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss at step {step}",
                               feature_norms(model, batch["visual"], batch.get("depth_feats")))
        nx.backward(loss, optim.params)
    if config.grad_clip:
        clip_gradients(optim.params, config.grad_clip)
    optim.step(lr_at_step(step, config))
    return value


# ---------------------------------------------------------------- batches


class BatchStream:
    """Seeded shuffle, reshuffled each epoch; batch s depends only on (seed, s)."""

    def __init__(self, n: int, batch_size: int, seed: int):
        self.n, self.batch_size, self.seed = n, batch_size, seed
        self._perms: dict[int, np.ndarray] = {}

    def _perm(self, epoch: int) -> np.ndarray:
        if epoch not in self._perms:
            self._perms[epoch] = np.random.default_rng([self.seed, epoch]).permutation(self.n)
        return self._perms[epoch]

    def indices(self, step: int) -> np.ndarray:
        pos = np.arange(step * self.batch_size, (step + 1) * self.batch_size)
        return np.array([self._perm(int(q) // self.n)[int(q) % self.n] for q in pos])


@dataclass
class TrainState:
    model: DepthForgeModel
    optim: AdamW
    config: TrainConfig
    step: int = 0
    extra: dict = field(default_factory=dict)


def new_state(model_config: ModelConfig, train_config: TrainConfig) -> TrainState:
    train_config.validate()
    model = DepthForgeModel(model_config)
    return TrainState(model, AdamW(model.store.trainable(), train_config), train_config)


class Trainer:
    def __init__(self, state: TrainState, dataset: Dataset):
        self.state = state
        self.data = dataset
        cfg = state.config
        self.stream = BatchStream(len(dataset), cfg.batch_size, cfg.seed)
        model = state.model
        self.depth_cache = None
        if model.uses_depth:
            feats = [model.depth_features(dataset.depth[i:i + 64]) for i in range(0, len(dataset), 64)]
            self.depth_cache = [np.concatenate([f[layer] for f in feats]) for layer in
                                range(len(feats[0]))]

    def batch(self, step: int) -> dict:
        idx = self.stream.indices(step)
        out = {"visual": self.data.visual[idx], "labels": self.data.labels[idx]}
        if self.depth_cache is not None:
            out["depth_feats"] = [f[idx] for f in self.depth_cache]
        return out

    def run(self, until: int | None = None, log=None) -> list[float]:
        """Train from the current step up to ``until`` (default total_steps)."""
        st = self.state
        until = st.config.total_steps if until is None else until
        losses = []
        while st.step < until:
            t0 = time.perf_counter()
            lr = lr_at_step(st.step, st.config)
            loss = train_step(st.model, self.batch(st.step), st.optim, st.config, st.step)
            losses.append(loss)
            if log is not None:
                log(st.step, lr, loss, (time.perf_counter() - t0) * 1000.0)
            st.step += 1
        return losses


class CsvLog:
    def __init__(self, path):
        self.path = Path(path)
        self.fh = self.path.open("w", newline="")
        self.writer = csv.writer(self.fh)
        self.writer.writerow(["step", "lr", "loss", "wall_ms"])

    def __call__(self, step, lr, loss, wall_ms):
        self.writer.writerow([step, f"{lr:.9e}", f"{loss:.9f}", f"{wall_ms:.2f}"])
        self.fh.flush()

    def close(self):
        self.fh.close()


# -------------------------------------------------------------- checkpoints


def _f32(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def save_checkpoint(state: TrainState, path) -> Path:
    """Header, JSON manifest, then little-endian float32 payload."""
    entries, chunks, offset = [], [], 0

    def put(name, arr, kind, trainable):
        nonlocal offset
        raw = _f32(arr)
        entries.append({"name": name, "kind": kind, "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(raw), "trainable": trainable,
                        "sha256": hashlib.sha256(raw).hexdigest()})
        chunks.append(raw)
        offset += len(raw)

    for p in state.model.store:
        put(p.name, p.data, "param", p.trainable)
    for p in state.optim.params:
        put(f"adam.m.{p.name}", state.optim.m[p.name], "adam_m", False)
        put(f"adam.v.{p.name}", state.optim.v[p.name], "adam_v", False)
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": model_config_to_dict(state.model.config),
        "train_config": asdict(state.config),
        "state": {"step": state.step, "adam_t": state.optim.t,
                  "rng": {"seed": state.config.seed, "next_batch": state.step}},
        "payload_bytes": offset,
        "entries": entries,
    }
    blob = json.dumps(manifest, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)
    return path


def read_manifest(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated header")
    version, mlen = struct.unpack("<IQ", raw[4:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    manifest = json.loads(raw[16:16 + mlen])
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: manifest version mismatch")
    return manifest, raw[16 + mlen:]


def load_checkpoint(path) -> TrainState:
    manifest, payload = read_manifest(path)
    if len(payload) < manifest["payload_bytes"]:
        short = next(e for e in manifest["entries"] if e["offset"] + e["nbytes"] > len(payload))
        raise CheckpointError(
            f"{path}: payload truncated at byte {len(payload)} of {manifest['payload_bytes']}; "
            f"entry {short['name']!r} needs bytes [{short['offset']}, "
            f"{short['offset'] + short['nbytes']})")
    tc = dict(manifest["train_config"])
    tc["betas"] = tuple(tc["betas"])
    state = new_state(model_config_from_dict(manifest["model_config"]), TrainConfig(**tc))
    store = state.model.store
    for e in manifest["entries"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        if hashlib.sha256(raw).hexdigest() != e["sha256"]:
            raise CheckpointError(f"{path}: checksum mismatch for {e['name']!r} at offset {e['offset']}")
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(e["shape"])
        if e["kind"] == "param":
            if e["name"] not in store:
                raise CheckpointError(f"{path}: unknown parameter {e['name']!r}")
            target = store[e["name"]]
            if target.shape != arr.shape:
                raise CheckpointError(f"{path}: shape mismatch for {e['name']!r}")
            if not target.trainable:
                # frozen weights are rebuilt from the config; the payload must agree
                if _f32(target.data) != raw:
                    raise CheckpointError(f"{path}: frozen backbone parameter {e['name']!r} does "
                                          "not match the backbone described by the manifest")
                continue
            target.tensor.data[...] = arr
        elif e["kind"] == "adam_m":
            state.optim.m[e["name"][len("adam.m."):]][...] = arr
        elif e["kind"] == "adam_v":
            state.optim.v[e["name"][len("adam.v."):]][...] = arr
    state.step = manifest["state"]["step"]
    state.optim.t = manifest["state"]["adam_t"]
    return state


def payload_digest(model: DepthForgeModel, prefixes: tuple[str, ...]) -> str:
    """SHA-256 over the float64 payload of parameters whose names start with ``prefixes``."""
    h = hashlib.sha256()
    for p in model.store:
        if p.name.startswith(prefixes):
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()
