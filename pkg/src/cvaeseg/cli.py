"""Command-line entry point: dataset synthesis, the training phase chain,
evaluation, prediction export, and the verification suite.

Exit codes: 0 success, 1 usage/config error, 2 runtime/data error,
3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, restore_model
from .data import GenParams, gen_dataset, load_dataset
from .errors import ConfigError, CvaesegError
from .evaluate import evaluate_all, worker_count
from .model import ArchConfig, predict, predict_fcn, predict_global_only, predict_hr
from .oracle import run_verification
from .report import eval_figure, training_curves_figure, verification_figure, write_eval_report
from .tensor import Tensor
from .train import PHASES, Trainer, TrainConfig


@dataclass
class DataConfig:
    dir: str = "data/toy"
    n_train: int = 500
    n_val: int = 100
    n_test: int = 100
    generator: GenParams = field(default_factory=GenParams)

    def to_dict(self) -> dict:
        return {"dir": self.dir, "n_train": self.n_train, "n_val": self.n_val,
                "n_test": self.n_test, "generator": self.generator.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        known = {"dir", "n_train", "n_val", "n_test", "generator"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown data fields: {sorted(unknown)}")
        gen = GenParams.from_dict(d.get("generator", {}))
        return cls(dir=d.get("dir", cls.dir), n_train=d.get("n_train", cls.n_train),
                   n_val=d.get("n_val", cls.n_val), n_test=d.get("n_test", cls.n_test),
                   generator=gen)


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        train = self.train.to_dict()
        train.pop("seed")
        return {"seed": self.seed, "out_dir": self.out_dir, "data": self.data.to_dict(),
                "arch": self.arch.to_dict(), "train": train}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {"seed", "out_dir", "data", "arch", "train"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        seed = d.get("seed", 0)
        train_block = dict(d.get("train", {}))
        if "seed" in train_block:
            raise ConfigError("set 'seed' at the top level, not inside 'train'")
        try:
            return cls(
                seed=seed,
                out_dir=d.get("out_dir", cls.out_dir),
                data=DataConfig.from_dict(d.get("data", {})),
                arch=ArchConfig.from_dict(d.get("arch", {})),
                train=TrainConfig.from_dict({**train_block, "seed": seed}),
            )
        except CvaesegError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad configuration value: {e}") from e

    @classmethod
    def load(cls, path: str | Path | None, seed: int | None = None,
             out_dir: str | None = None) -> "RunConfig":
        raw = {}
        if path is not None:
            try:
                raw = json.loads(Path(path).read_text())
            except OSError as e:
                raise ConfigError(f"cannot read config {path}: {e}") from e
            except json.JSONDecodeError as e:
                raise ConfigError(f"config {path} is not valid JSON: {e}") from e
            if not isinstance(raw, dict):
                raise ConfigError("config root must be a JSON object")
        if seed is not None:
            raw = dict(raw, seed=seed)
        if out_dir is not None:
            raw = dict(raw, out_dir=out_dir)
        return cls.from_dict(raw)


# -- prediction file formats ---------------------------------------------------------

def read_image_bin(path: Path, size: int) -> np.ndarray:
    blob = path.read_bytes()
    need = size * size * 8
    if len(blob) < need:
        raise CvaesegError(f"{path}: expected at least {need} bytes of image data")
    return np.frombuffer(blob[:need], dtype="<f8").reshape(size, size)


def write_pgm(path: Path, labels: np.ndarray, classes: int) -> None:
    scale = 255 // max(1, classes - 1)
    body = (labels.astype(np.uint16) * scale).clip(0, 255).astype(np.uint8)
    h, w = labels.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + body.tobytes())


# -- commands --------------------------------------------------------------------------

def cmd_synth(cfg: RunConfig) -> int:
    manifest = gen_dataset(cfg.seed, cfg.data.n_train, cfg.data.n_val, cfg.data.n_test,
                           cfg.data.dir, cfg.data.generator)
    counts = {}
    for rec in manifest.samples:
        counts[rec.split] = counts.get(rec.split, 0) + 1
    print(f"wrote {manifest.count} samples to {Path(cfg.data.dir) / 'manifest.json'}")
    for split in ("train", "val", "test"):
        print(f"  {split}: {counts.get(split, 0)}")
    return 0


def cmd_train(cfg: RunConfig, phase: str) -> int:
    dataset = load_dataset(cfg.data.dir)
    trainer = Trainer(cfg.out_dir, cfg.arch, cfg.train, dataset)
    phases = list(PHASES) if phase == "all" else [phase]
    done = trainer.run(phases)
    fig_dir = Path(cfg.out_dir) / "figures"
    fig = training_curves_figure(trainer.log_dir, phases, fig_dir / f"train_{phase}.png")
    for name, path in done.items():
        print(f"phase {name}: checkpoint {path}")
    print(f"training curves: {fig}")
    return 0


def cmd_eval(cfg: RunConfig, checkpoint: str | None, split: str) -> int:
    dataset = load_dataset(cfg.data.dir)
    ckpt_dir = Path(checkpoint) if checkpoint else Path(cfg.out_dir) / "checkpoints"
    results = evaluate_all(ckpt_dir, dataset, split, threads=worker_count())
    if not results:
        raise CvaesegError(f"no checkpoints found under {ckpt_dir}")
    rows = [r.report_row() for r in results]
    out = Path(cfg.out_dir) / "eval"
    write_eval_report(rows, out / f"eval_{split}.json", out / f"eval_{split}.csv")

    x, gt = dataset.arrays(split)
    panels = []
    for i in range(min(4, len(gt))):
        panel = {"image": x[i, 0], "gt": gt[i]}
        for r in results:
            panel[r.variant] = r.lifted_labels[i]
        panels.append(panel)
    fig = eval_figure(rows, panels, out / f"eval_{split}.png")

    print(f"evaluation on split {split!r} ({len(gt)} images):")
    print(f"{'variant':10s} {'pix_acc':>8s} {'mean_iou':>9s} {'sap':>8s} {'fg_iou':>8s} {'fg_native':>10s}")
    for row in rows:
        fg = row["iou_per_class"].get("1", float("nan"))
        print(f"{row['variant']:10s} {row['pixel_accuracy']:8.4f} {row['mean_iou']:9.4f} "
              f"{row['sap']:8.4f} {fg:8.4f} {row['fg_iou_native']:10.4f}")
    print(f"report: {out / f'eval_{split}.json'}  figure: {fig}")
    return 0


def cmd_predict(cfg: RunConfig, checkpoint: str | None, inputs: list[str],
                out: str | None) -> int:
    if not checkpoint:
        raise ConfigError("predict requires --checkpoint")
    if not inputs:
        raise ConfigError("predict requires at least one --input file")
    ckpt = load_checkpoint(checkpoint)
    model = restore_model(ckpt)
    predictor = {"fcn": predict_fcn, "imgenc": predict_global_only,
                 "joint": predict, "hr": predict_hr}.get(ckpt.phase)
    if predictor is None:
        raise ConfigError(f"checkpoint phase {ckpt.phase!r} is not a predictor")
    out_dir = Path(out) if out else Path(cfg.out_dir) / "predictions"
    out_dir.mkdir(parents=True, exist_ok=True)
    size = model.arch.input_size
    for item in inputs:
        path = Path(item)
        image = read_image_bin(path, size)
        labels, _ = predictor(model, Tensor(image[None, None]))
        mask = labels[0].astype(np.uint8)
        (out_dir / f"{path.stem}.mask.bin").write_bytes(mask.tobytes())
        write_pgm(out_dir / f"{path.stem}.pgm", mask, model.arch.classes)
        print(f"{path.name}: mask {mask.shape[0]}x{mask.shape[1]} -> "
              f"{out_dir / (path.stem + '.mask.bin')}")
    return 0


def cmd_verify(cfg: RunConfig, deep: bool) -> int:
    report = run_verification(seed=cfg.seed, deep=deep)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "verify_report.txt").write_text(report.text())
    verification_figure([c.name for c in report.checks],
                        [c.measured for c in report.checks],
                        [c.threshold for c in report.checks],
                        out / "figures" / "verify.png")
    print(report.text(), end="")
    if not report.passed:
        first = report.first_failure()
        print(f"verification failed at check {first.name!r}", file=sys.stderr)
        return 3
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cvaeseg",
        description="Latent-prior segmentation at desk scale: synthesize data, train the "
                    "phase chain, evaluate variants, export predictions, verify numerics.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run configuration (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="override the output directory")

    p = sub.add_parser("synth", help="generate the synthetic dataset")
    common(p)

    p = sub.add_parser("train", help="run training phases")
    common(p)
    p.add_argument("--phase", default="all", choices=list(PHASES) + ["all"],
                   help="phase to run (default: all, in order)")

    p = sub.add_parser("eval", help="evaluate trained variants on a split")
    common(p)
    p.add_argument("--checkpoint", help="checkpoint directory (default: <out>/checkpoints)")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])

    p = sub.add_parser("predict", help="write predicted masks for image files")
    common(p)
    p.add_argument("--checkpoint", help="checkpoint file to predict with")
    p.add_argument("--input", nargs="+", default=[], help="dataset-format sample files")

    p = sub.add_parser("verify", help="run the numerical verification suite")
    common(p)
    p.add_argument("--deep", action="store_true",
                   help="acceptance-level sample counts (slower)")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = RunConfig.load(args.config, seed=args.seed, out_dir=args.out)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.phase)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.split)
        if args.command == "predict":
            return cmd_predict(cfg, args.checkpoint, args.input, args.out)
        if args.command == "verify":
            return cmd_verify(cfg, args.deep)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except CvaesegError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
