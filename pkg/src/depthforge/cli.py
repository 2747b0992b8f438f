"""Command-line entry point: generate, train, eval, gradcheck, ablate.

Every command reads one JSON run config.  Missing keys take the defaults of
the corresponding dataclasses and the fully resolved config is echoed into the
run manifest, so ``depthforge train --config out/run.json`` repeats a run.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .backbone import BackboneConfig
from .decoder import DecoderConfig
from .fusion import VARIANTS, VariantConfig, export_awareness
from .model import DepthForgeModel, ModelConfig
from .synthbench import (DatasetSpec, build_dataset, evaluate_miou, load_dataset, save_dataset,
                         write_pgm)
from .training import (CheckpointError, CsvLog, NumericError, TrainConfig, Trainer,
                       count_trainable_params, load_checkpoint, new_state, save_checkpoint,
                       segmentation_loss)

log = logging.getLogger("depthforge")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
GRADCHECK_LIMIT = 1e-4
GRADCHECK_MAX_SIZE = 4096


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    train: DatasetSpec = field(default_factory=DatasetSpec)
    eval: list = field(default_factory=lambda: [DatasetSpec(name="blackout", domain="blackout",
                                                            num_samples=32, scene_seed=1000)])
    cell: int = 4


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    variant: VariantConfig = field(default_factory=VariantConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    out_dir: str = "runs/default"
    seed: int = 0
    sweep: list = field(default_factory=lambda: list(VARIANTS))

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.backbone, self.variant, self.decoder, self.seed)

    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.seed)

    @property
    def K(self) -> int:
        return self.decoder.num_classes

    def validate(self) -> None:
        self.backbone.validate()
        self.variant.validate()
        self.decoder.validate(self.backbone.feature_dim)
        self.train.validate()
        for tag in self.sweep:
            VariantConfig(tag=tag).validate()
        for spec in [self.data.train, *self.data.eval]:
            spec.domain_spec().validate()
        names = [s.name for s in [self.data.train, *self.data.eval]]
        if len(set(names)) != len(names):
            raise ConfigError(f"dataset names must be unique, got {names}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"]["betas"] = list(d["train"]["betas"])
        return d


def _build(cls, data: dict | None, what: str):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown {what} keys: {unknown}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"bad {what} section: {exc}") from None


def run_config_from_dict(d: dict) -> RunConfig:
    d = {k: v for k, v in d.items() if not k.startswith("_")}
    unknown = sorted(set(d) - {f.name for f in fields(RunConfig)})
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    data = dict(d.get("data") or {})
    data_cfg = DataConfig(
        train=_build(DatasetSpec, data.get("train"), "data.train"),
        eval=[_build(DatasetSpec, e, "data.eval") for e in data.get("eval", [])]
        if "eval" in data else DataConfig().eval,
        cell=int(data.get("cell", 4)),
    )
    train = _build(TrainConfig, d.get("train"), "train")
    train.betas = tuple(train.betas)
    cfg = RunConfig(
        backbone=_build(BackboneConfig, d.get("backbone"), "backbone"),
        variant=_build(VariantConfig, d.get("variant"), "variant"),
        decoder=_build(DecoderConfig, d.get("decoder"), "decoder"),
        train=train,
        data=data_cfg,
        out_dir=str(d.get("out_dir", "runs/default")),
        seed=int(d.get("seed", 0)),
        sweep=list(d.get("sweep", VARIANTS)),
    )
    return cfg


def load_run_config(args) -> RunConfig:
    if args.config is None:
        raise ConfigError("--config is required")
    try:
        raw = json.loads(Path(args.config).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.config}: invalid JSON ({exc})") from None
    cfg = run_config_from_dict(raw)
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "steps", None) is not None:
        cfg.train.total_steps = args.steps
    if getattr(args, "variant", None):
        cfg.variant.tag = args.variant
    cfg.validate()
    return cfg


# ----------------------------------------------------------------- datasets


def dataset_dir(cfg: RunConfig, spec: DatasetSpec) -> Path:
    return Path(cfg.out_dir) / "data" / spec.name


def generate_datasets(cfg: RunConfig) -> dict[str, Path]:
    out = {}
    for spec in [cfg.data.train, *cfg.data.eval]:
        ds = build_dataset(spec, cfg.K, cfg.backbone.image_side, cfg.data.cell)
        out[spec.name] = save_dataset(ds, dataset_dir(cfg, spec))
        print(f"{spec.name}: {len(ds)} samples ({spec.domain_name()}) -> {out[spec.name]}")
    return out


def _load_for(cfg: RunConfig, spec: DatasetSpec, create: bool = False):
    path = dataset_dir(cfg, spec)
    if not (path / "dataset.json").exists():
        if not create:
            raise FileNotFoundError(f"dataset {spec.name!r} not found at {path}; "
                                    "run `depthforge generate` first")
        save_dataset(build_dataset(spec, cfg.K, cfg.backbone.image_side, cfg.data.cell), path)
    ds = load_dataset(path)
    check_compatible(ds.meta, cfg.model_config(), path)
    return ds


def check_compatible(meta: dict, mc: ModelConfig, where) -> None:
    if meta["image_side"] != mc.backbone.image_side or meta["K"] != mc.decoder.num_classes:
        raise ConfigError(
            f"{where}: dataset has image_side={meta['image_side']}, K={meta['K']} but the model "
            f"expects image_side={mc.backbone.image_side}, K={mc.decoder.num_classes}")


# -------------------------------------------------------------------- train


def train_run(cfg: RunConfig, out_dir: Path, create_data: bool = False, quiet: bool = False):
    """Train one variant; returns the final TrainState."""
    ds = _load_for(cfg, cfg.data.train, create=create_data)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = cfg.to_dict()
    manifest["out_dir"] = str(cfg.out_dir)
    manifest["_meta"] = {"command": "train", "dataset": str(dataset_dir(cfg, cfg.data.train))}
    (out_dir / "run.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    state = new_state(cfg.model_config(), cfg.train_config())
    trainer = Trainer(state, ds)
    csv_log = CsvLog(out_dir / "train_log.csv")
    every = cfg.train.checkpoint_every
    ckpt_dir = out_dir / "checkpoints"
    try:
        total = cfg.train.total_steps
        while state.step < total:
            until = min(total, state.step + every) if every else total
            trainer.run(until=until, log=csv_log)
            if every and state.step < total:
                save_checkpoint(state, ckpt_dir / f"step_{state.step:06d}.ckpt")
    finally:
        csv_log.close()
    final = save_checkpoint(state, out_dir / "final.ckpt")
    if not quiet:
        print(f"trained {cfg.variant.tag} for {state.step} steps; "
              f"{count_trainable_params(state.model)} trainable parameters -> {final}")
    return state


# --------------------------------------------------------------------- eval


def evaluate_model(model: DepthForgeModel, ds, batch: int = 32):
    preds = []
    for i in range(0, len(ds), batch):
        preds.append(model.predict_labels(ds.visual[i:i + batch], ds.depth[i:i + batch]))
    preds = np.concatenate(preds)
    return evaluate_miou(preds, ds.labels, ds.K), preds


def eval_checkpoint(ckpt, data_dirs, out_dir: Path, dump_awareness=False, save_predictions=False):
    state = load_checkpoint(ckpt)
    model = state.model
    reports = {}
    for d in data_dirs:
        ds = load_dataset(d)
        check_compatible(ds.meta, model.config, d)
        name = ds.meta.get("name", Path(d).name)
        report, preds = evaluate_model(model, ds)
        report.write(out_dir / "eval" / name)
        reports[name] = report
        print(f"{name}: mIoU {report.miou:.4f}  pixel acc {report.pixel_accuracy:.4f}  "
              f"chance {report.chance_miou:.4f}  ({report.sample_count} samples)")
        if save_predictions:
            pred_dir = out_dir / "predictions" / name
            pred_dir.mkdir(parents=True, exist_ok=True)
            for i, p in enumerate(preds):
                write_pgm(pred_dir / f"{i:04d}.pred.pgm", p)
            (pred_dir / "classes.json").write_text(json.dumps(
                {"num_classes": ds.K, "ignore_index": 255,
                 "classes": {str(k): ("ground" if k == 0 else f"object{k}") for k in range(ds.K)}},
                indent=2))
        if dump_awareness:
            if model.config.variant.tag not in ("rein", "config1_add_depth", "config2_token_depth",
                                                "depthforge", "depthforge_no_scale"):
                print(f"variant {model.config.variant.tag!r} has no awareness maps; skipping dump")
            else:
                model.fusion.record = True
                with nx.no_grad():
                    model.forward(ds.visual[:1], ds.depth[:1])
                model.fusion.record = False
                export_awareness(model.fusion.awareness, out_dir / "awareness" / name)
    return reports


# ---------------------------------------------------------------- gradcheck


def _group(name: str) -> str:
    return ".".join(name.split(".")[:2])


def gradcheck(cfg: RunConfig, seed: int | None = None, eps: float = 1e-6):
    """Per-group worst relative error of tape gradients vs central differences."""
    bb = cfg.backbone
    if bb.num_patches * bb.feature_dim > GRADCHECK_MAX_SIZE:
        raise ConfigError(f"gradcheck needs a tiny model: n*c = {bb.num_patches * bb.feature_dim} "
                          f"exceeds {GRADCHECK_MAX_SIZE}")
    seed = cfg.seed if seed is None else seed
    model = DepthForgeModel(cfg.model_config())
    rng = np.random.default_rng([seed, 17])
    # zero-initialised weights would hide whole branches from the check
    for p in model.store.trainable():
        if not np.any(p.data):
            p.tensor.data[...] = 0.3 * rng.standard_normal(p.shape)
    side = bb.image_side
    visual = rng.uniform(size=(1, side, side, 3))
    depth = rng.uniform(0.1, 1.0, size=(1, side, side, 1))
    labels = rng.integers(0, cfg.K, size=(1, side, side))
    depth_feats = model.depth_features(depth) if model.uses_depth else None

    def full():
        return segmentation_loss(model.forward(visual, depth_feats=depth_feats), labels)

    with nx.no_grad():
        feats = model.forward_adapted(visual, depth_feats=depth_feats).features

    def head_only():
        # decoder/head parameters do not influence the adapted features
        return segmentation_loss(model.decoder(feats), labels)

    trainable = model.store.trainable()
    adapter = [p for p in trainable if p.name.startswith("fusion.")]
    rest = [p for p in trainable if not p.name.startswith("fusion.")]
    report = {}
    if adapter:
        report.update(nx.finite_diff_check(full, adapter, eps=eps, per_param=True)[1])
    if rest:
        # analytic gradients still come from the full model's tape
        with nx.Tape():
            grads = nx.backward(full(), rest)
        grads = {k: v.copy() for k, v in grads.items()}
        _, part = nx.finite_diff_check(head_only, rest, eps=eps, per_param=True)
        with nx.Tape():
            head_grads = nx.backward(head_only(), rest)
        mismatch = max(float(np.abs(grads[k] - head_grads[k]).max()) for k in grads)
        if mismatch > 1e-12:
            raise NumericError(f"decoder gradients depend on the cut point ({mismatch:.3g})")
        report.update(part)
    groups: dict[str, float] = {}
    for name, err in report.items():
        groups[_group(name)] = max(groups.get(_group(name), 0.0), err)
    return groups, len(report), sum(p.size for p in trainable)


# ------------------------------------------------------------------- ablate


def _ablate_member(payload):
    cfg_dict, tag, member_dir = payload
    cfg = run_config_from_dict(cfg_dict)
    cfg.variant.tag = tag
    try:
        state = train_run(cfg, Path(member_dir), create_data=True, quiet=True)
        rows = []
        for spec in cfg.data.eval:
            ds = _load_for(cfg, spec, create=True)
            report, _ = evaluate_model(state.model, ds)
            report.write(Path(member_dir) / "eval" / spec.name)
            rows.append({"variant": tag, "domain": spec.name, "miou": f"{report.miou:.6f}",
                         "pixel_accuracy": f"{report.pixel_accuracy:.6f}",
                         "chance_miou": f"{report.chance_miou:.6f}",
                         "trainable_params": count_trainable_params(state.model),
                         "status": "ok"})
        return rows
    except Exception as exc:  # one failed member must not stop the sweep
        return [{"variant": tag, "domain": spec.name, "miou": "", "pixel_accuracy": "",
                 "chance_miou": "", "trainable_params": "",
                 "status": f"failed: {type(exc).__name__}: {exc}"} for spec in cfg.data.eval]


def ablate(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    # materialise data once so parallel members only read it
    for spec in [cfg.data.train, *cfg.data.eval]:
        _load_for(cfg, spec, create=True)
    base = cfg.to_dict()
    jobs = [(base, tag, str(out / "members" / f"{k:02d}_{tag}")) for k, tag in enumerate(cfg.sweep)]
    workers = max(1, min(len(jobs), int(os.environ.get("DEPTHFORGE_THREADS", "1"))))
    if workers == 1:
        results = [_ablate_member(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_ablate_member, jobs))
    path = out / "ablation.csv"
    cols = ["variant", "domain", "miou", "pixel_accuracy", "chance_miou", "trainable_params",
            "status"]
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for rows in results:
            for row in rows:
                w.writerow(row)
                print(",".join(str(row[c]) for c in cols))
    return path


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="depthforge",
                                     description="Depth-aware token adaptation at desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        p.add_argument("--seed", type=int, help="run seed (overrides config)")
        p.add_argument("--steps", type=int, help="total training steps (overrides config)")
        p.add_argument("--variant", choices=VARIANTS, help="variant tag (overrides config)")
        return p

    common(sub.add_parser("generate", help="write the train and eval datasets"))
    common(sub.add_parser("train", help="train one variant on the train dataset"))
    common(sub.add_parser("gradcheck", help="finite-difference check on a tiny model"))
    common(sub.add_parser("ablate", help="train every variant in the sweep and tabulate mIoU"))
    ev = sub.add_parser("eval", help="evaluate a checkpoint on dataset directories")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", nargs="+", required=True, help="dataset directories")
    ev.add_argument("--out", required=True, help="directory for reports")
    ev.add_argument("--dump-awareness", action="store_true",
                    help="write per-layer awareness maps of the first sample")
    ev.add_argument("--save-predictions", action="store_true",
                    help="write predicted label maps as PGM")
    return parser


def run(args) -> int:
    if args.command == "eval":
        eval_checkpoint(args.checkpoint, args.data, Path(args.out), args.dump_awareness,
                        args.save_predictions)
        return EXIT_OK
    cfg = load_run_config(args)
    if args.command == "generate":
        generate_datasets(cfg)
    elif args.command == "train":
        train_run(cfg, Path(cfg.out_dir))
    elif args.command == "gradcheck":
        t0 = time.perf_counter()
        groups, tensors, coords = gradcheck(cfg)
        worst = max(groups.values()) if groups else 0.0
        for name in sorted(groups):
            print(f"{name:<28s} {groups[name]:.3e}")
        print(f"max relative error {worst:.3e} over {tensors} tensors, {coords} coordinates "
              f"({time.perf_counter() - t0:.1f} s)")
        if worst > GRADCHECK_LIMIT:
            print(f"gradient check failed: {worst:.3e} > {GRADCHECK_LIMIT:g}", file=sys.stderr)
            return EXIT_NUMERIC
    elif args.command == "ablate":
        print(f"wrote {ablate(cfg)}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return run(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        for k, v in exc.diagnostics.items():
            print(f"  {k}: {v:.6g}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError, KeyError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
