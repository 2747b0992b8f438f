"""Procedural RGB + depth segmentation scenes, domain shifts and the mIoU evaluator."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

IGNORE_INDEX = 255

# Fixed base colours; class k uses row k (cycled for K > len).
PALETTE = np.array([
    [0.45, 0.42, 0.40],
    [0.85, 0.20, 0.20],
    [0.20, 0.70, 0.25],
    [0.20, 0.30, 0.85],
    [0.90, 0.80, 0.20],
    [0.75, 0.30, 0.80],
    [0.20, 0.80, 0.80],
    [0.95, 0.55, 0.15],
])

NEAR, FAR = 0.15, 1.0
COLOR_JITTER = 0.15  # per-scene shift of each class colour, so colour alone is ambiguous
TEXTURE_STD = 0.04  # per-pixel albedo texture


@dataclass
class Scene:
    depth: np.ndarray  # (S, S) in (0, 1]
    albedo: np.ndarray  # (S, S, 3) in [0, 1]
    labels: np.ndarray  # (S, S) uint8
    seed: int


@dataclass
class DomainSpec:
    gain: float = 1.0
    fog_density: float = 0.0
    fog_color: list = field(default_factory=lambda: [1.0, 1.0, 1.0])
    noise_std: float = 0.0
    visual_blackout: bool = False
    depth_noise_std: float = 0.0

    def validate(self) -> None:
        if self.gain < 0 or self.fog_density < 0 or self.noise_std < 0 or self.depth_noise_std < 0:
            raise ValueError("domain gain, fog density and noise levels must be non-negative")
        if len(self.fog_color) != 3 or not all(0.0 <= v <= 1.0 for v in self.fog_color):
            raise ValueError("fog_color must be three values in [0, 1]")

    @classmethod
    def preset(cls, name: str) -> "DomainSpec":
        presets = {
            "identity": cls(),
            "night": cls(gain=0.15, noise_std=0.02),
            "fog": cls(fog_density=3.0, fog_color=[0.8, 0.8, 0.8]),
            "noise": cls(noise_std=0.25),
            "blackout": cls(visual_blackout=True),
        }
        if name not in presets:
            raise ValueError(f"unknown domain preset {name!r}; choose from {sorted(presets)}")
        return presets[name]


@dataclass
class DomainSample:
    visual: np.ndarray  # (S, S, 3)
    depth_input: np.ndarray  # (S, S, 1)
    labels: np.ndarray  # (S, S)
    domain: str = "identity"


# ------------------------------------------------------------------ scenes


def _depth_band(k: int, K: int) -> tuple[float, float]:
    """Disjoint depth interval for object class k in [1, K)."""
    edges = np.linspace(0.2, 0.9, K)
    lo, hi = edges[k - 1], edges[k]
    pad = 0.15 * (hi - lo)
    return lo + pad, hi - pad


def _try_scene(rng: np.random.Generator, K: int, side: int, cell: int):
    g = side // cell
    rows = (np.arange(side) + 0.5) / side
    ground_depth = FAR - (FAR - NEAR) * rows  # top far, bottom near
    depth = np.repeat(ground_depth[:, None], side, axis=1)
    labels = np.zeros((side, side), dtype=np.uint8)
    cell_labels = np.zeros((g, g), dtype=np.int64)
    cell_depth = np.full((g, g), np.inf)
    objects = []
    for k in range(1, K):
        lo, hi = _depth_band(k, K)
        objects.append((k, float(rng.uniform(lo, hi))))
    # far to near so nearer primitives overwrite
    objects.sort(key=lambda t: -t[1])
    cy, cx = np.mgrid[0:g, 0:g] + 0.5
    lo_size, hi_size = max(2, g // 5), max(3, g // 2)
    for k, z in objects:
        if rng.random() < 0.5:
            h, w = rng.integers(lo_size, hi_size + 1, size=2)
            y0 = rng.integers(0, g - h + 1)
            x0 = rng.integers(0, g - w + 1)
            inside = (cy >= y0) & (cy < y0 + h) & (cx >= x0) & (cx < x0 + w)
        else:
            r = rng.uniform(lo_size / 2 + 0.3, hi_size / 2 + 0.3)
            y, x = rng.uniform(r, g - r, size=2)
            inside = (cy - y) ** 2 + (cx - x) ** 2 <= r * r
        cell_labels[inside] = k
        cell_depth[inside] = z
    present = set(np.unique(cell_labels).tolist())
    if present != set(range(K)):
        return None
    up = np.ones((cell, cell))
    labels = np.kron(cell_labels, up).astype(np.uint8)
    obj_depth = np.kron(cell_depth, up)
    depth = np.where(labels > 0, obj_depth, depth)
    return labels, depth


def generate_scene(seed: int, K: int = 6, image_side: int = 64, cell: int = 4,
                   max_retries: int = 50) -> Scene:
    """K-1 rectangles/discs (one per object class) over a ground plane.

    Shapes are rasterised on a ``cell``-pixel grid so labels are constant within
    each cell; every class appears in every scene.
    """
    if K < 2:
        raise ValueError("K must be >= 2")
    if image_side % cell:
        raise ValueError(f"image_side {image_side} is not a multiple of cell {cell}")
    if image_side // cell < 2:
        raise ValueError("scene grid needs at least 2x2 cells")
    attempt_seed = int(seed)
    for regen in range(8):
        rng = np.random.default_rng([attempt_seed, regen])
        for _ in range(max_retries):
            got = _try_scene(rng, K, image_side, cell)
            if got is not None:
                labels, depth = got
                albedo = _render_albedo(rng, labels, K)
                return Scene(depth, albedo, labels, int(seed))
    raise RuntimeError(f"could not place {K - 1} visible primitives on a {image_side}px scene "
                       f"(seed {seed}); use a larger image or fewer classes")


def _render_albedo(rng, labels: np.ndarray, K: int) -> np.ndarray:
    side = labels.shape[0]
    albedo = np.empty((side, side, 3))
    for k in range(K):
        base = PALETTE[k % len(PALETTE)] + rng.normal(0.0, COLOR_JITTER, size=3)
        sel = labels == k
        albedo[sel] = base
    albedo += rng.normal(0.0, TEXTURE_STD, size=albedo.shape)
    return np.clip(albedo, 0.0, 1.0)


def apply_domain(scene: Scene, spec: DomainSpec, seed: int, name: str = "custom") -> DomainSample:
    spec.validate()
    rng = np.random.default_rng([int(seed), 0xD0])
    z = scene.depth[..., None]
    if spec.visual_blackout:
        visual = rng.uniform(0.0, 1.0, size=scene.albedo.shape)
    else:
        if spec.fog_density == 0 and spec.gain == 1:
            visual = scene.albedo.copy()
        else:
            t = np.exp(-spec.fog_density * z)
            visual = spec.gain * scene.albedo * t + np.asarray(spec.fog_color) * (1.0 - t)
        if spec.noise_std > 0:
            visual = visual + rng.normal(0.0, spec.noise_std, size=visual.shape)
        visual = np.clip(visual, 0.0, 1.0)
    depth = scene.depth.copy()
    if spec.depth_noise_std > 0:
        # truncated at 4 std so the deviation bound is hard
        noise = np.clip(rng.normal(0.0, 1.0, size=depth.shape), -4.0, 4.0) * spec.depth_noise_std
        depth = np.clip(depth + noise, 1e-3, 1.0)
    return DomainSample(visual, depth[..., None], scene.labels.copy(), name)


# ---------------------------------------------------------------- datasets


@dataclass
class DatasetSpec:
    name: str = "train"
    domain: str | dict = "identity"
    num_samples: int = 32
    scene_seed: int = 0
    noise_seed: int = 0

    def domain_spec(self) -> DomainSpec:
        if isinstance(self.domain, str):
            return DomainSpec.preset(self.domain)
        return DomainSpec(**self.domain)

    def domain_name(self) -> str:
        return self.domain if isinstance(self.domain, str) else "custom"


@dataclass
class Dataset:
    visual: np.ndarray  # (N, S, S, 3)
    depth: np.ndarray  # (N, S, S, 1)
    labels: np.ndarray  # (N, S, S) uint8
    K: int
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)


def sample_seed(base: int, index: int) -> int:
    return int(np.random.SeedSequence([int(base), int(index)]).generate_state(1)[0])


def build_dataset(spec: DatasetSpec, K: int, image_side: int, cell: int = 4) -> Dataset:
    domain = spec.domain_spec()
    vis, dep, lab = [], [], []
    for i in range(spec.num_samples):
        scene = generate_scene(sample_seed(spec.scene_seed, i), K, image_side, cell)
        s = apply_domain(scene, domain, sample_seed(spec.noise_seed + 7_777, i), spec.domain_name())
        vis.append(s.visual)
        dep.append(s.depth_input)
        lab.append(s.labels)
    meta = {"name": spec.name, "K": K, "image_side": image_side, "cell": cell,
            "domain_name": spec.domain_name(), "domain": asdict(domain),
            "num_samples": spec.num_samples, "scene_seed": spec.scene_seed,
            "noise_seed": spec.noise_seed}
    return Dataset(np.stack(vis), np.stack(dep), np.stack(lab).astype(np.uint8), K, meta)


def write_pfm(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype="<f4")
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    color = img.ndim == 3
    h, w = img.shape[:2]
    header = f"{'PF' if color else 'Pf'}\n{w} {h}\n-1.0\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(img[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    kind, dims, scale_line, payload = parts
    w, h = (int(v) for v in dims.split())
    scale = float(scale_line)
    channels = 3 if kind == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    expected = w * h * channels * 4
    if len(payload) != expected:
        raise ValueError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(h, w, channels)[::-1]
    return arr.astype(np.float64)


def write_pgm(path, labels: np.ndarray) -> None:
    lab = np.asarray(labels, dtype=np.uint8)
    h, w = lab.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + lab.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, dims, maxval, payload = raw.split(b"\n", 3)
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in dims.split())
    if len(payload) != w * h:
        raise ValueError(f"{path}: payload has {len(payload)} bytes, expected {w * h}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


def save_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    for i in range(len(ds)):
        write_pfm(out / "samples" / f"{i:04d}.visual.pfm", ds.visual[i])
        write_pfm(out / "samples" / f"{i:04d}.depth.pfm", ds.depth[i])
        write_pgm(out / "samples" / f"{i:04d}.labels.pgm", ds.labels[i])
    (out / "dataset.json").write_text(json.dumps(ds.meta, indent=2, sort_keys=True))
    return out


def load_dataset(path) -> Dataset:
    root = Path(path)
    meta = json.loads((root / "dataset.json").read_text())
    n = meta["num_samples"]
    vis, dep, lab = [], [], []
    for i in range(n):
        vis.append(read_pfm(root / "samples" / f"{i:04d}.visual.pfm"))
        dep.append(read_pfm(root / "samples" / f"{i:04d}.depth.pfm"))
        lab.append(read_pgm(root / "samples" / f"{i:04d}.labels.pgm"))
    return Dataset(np.stack(vis), np.stack(dep), np.stack(lab), meta["K"], meta)


# -------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    per_class_iou: list  # NaN where the union is empty
    miou: float
    pixel_accuracy: float
    confusion: np.ndarray  # rows = truth, cols = prediction
    sample_count: int
    chance_miou: float

    def to_dict(self) -> dict:
        return {
            "miou": self.miou,
            "pixel_accuracy": self.pixel_accuracy,
            "chance_miou": self.chance_miou,
            "per_class_iou": [None if np.isnan(v) else float(v) for v in self.per_class_iou],
            "confusion": self.confusion.astype(int).tolist(),
            "sample_count": self.sample_count,
        }

    def write(self, stem) -> None:
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        stem.with_suffix(".json").write_text(json.dumps(self.to_dict(), indent=2))
        with stem.with_suffix(".csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "iou"])
            for k, v in enumerate(self.per_class_iou):
                w.writerow([k, "" if np.isnan(v) else f"{v:.6f}"])
            w.writerow(["mean", f"{self.miou:.6f}"])
            w.writerow(["pixel_accuracy", f"{self.pixel_accuracy:.6f}"])
            w.writerow(["chance_miou", f"{self.chance_miou:.6f}"])


def confusion_matrix(pred: np.ndarray, truth: np.ndarray, K: int,
                     ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    truth = np.asarray(truth).reshape(-1).astype(np.int64)
    if pred.shape != truth.shape:
        raise ValueError("prediction and truth shapes differ")
    keep = truth != ignore_index
    pred, truth = pred[keep], truth[keep]
    if np.any((truth < 0) | (truth >= K)) or np.any((pred < 0) | (pred >= K)):
        raise ValueError(f"labels must lie in [0, {K}) or equal {ignore_index}")
    return np.bincount(truth * K + pred, minlength=K * K).reshape(K, K)


def report_from_confusion(conf: np.ndarray, samples: int) -> EvalReport:
    conf = np.asarray(conf, dtype=np.int64)
    tp = np.diag(conf).astype(np.float64)
    union = conf.sum(0) + conf.sum(1) - np.diag(conf)
    if not np.any(union > 0):
        raise ValueError("every class has an empty union; mIoU is undefined")
    iou = np.full(len(tp), np.nan)
    iou[union > 0] = tp[union > 0] / union[union > 0]
    total = conf.sum()
    truth_counts = conf.sum(1)
    present = truth_counts > 0
    chance = 0.0
    for k in range(len(tp)):
        classes = present.copy()
        classes[k] = True
        chance = max(chance, truth_counts[k] / total / classes.sum())
    return EvalReport(iou.tolist(), float(np.nanmean(iou)), float(tp.sum() / total), conf,
                      samples, float(chance))


def evaluate_miou(predictions, truths, K: int, ignore_index: int = IGNORE_INDEX) -> EvalReport:
    """Accumulate one global confusion matrix over all label maps."""
    preds, trs = list(predictions), list(truths)
    if len(preds) != len(trs):
        raise ValueError("predictions and truths differ in count")
    conf = np.zeros((K, K), dtype=np.int64)
    for p, t in zip(preds, trs):
        if np.shape(p) != np.shape(t):
            raise ValueError(f"shape mismatch {np.shape(p)} vs {np.shape(t)}")
        conf += confusion_matrix(p, t, K, ignore_index)
    return report_from_confusion(conf, len(preds))
