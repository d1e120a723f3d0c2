"""Four-phase training schedule plus the optional high-resolution stage.

Phases run in a fixed chain (trunk classifier -> mask autoencoder -> image
encoder alignment -> joint -> HR head); each phase starts from the previous
phase's checkpoint, freezes its designated parameter groups, and writes a
full-model checkpoint after every epoch.

Every stochastic draw (shuffling, augmentation, reparameterization noise) is
keyed by (seed, phase, epoch), so a run resumed from any epoch checkpoint
consumes exactly the draws of an unbroken run.  Wall-clock timings go to a
sidecar file so the metrics logs stay byte-reproducible.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, restore_adam, restore_model, save_checkpoint
from .data import Dataset, augment
from .errors import ConfigError, EmptyDataset, PhaseOrderViolation
from .metrics import iou
from .model import (
    ArchConfig,
    CVAEModel,
    VAE_DECODER_PARAMS,
    loss_cvae,
    loss_fcn,
    loss_hr,
    loss_image_encoder,
    loss_seg_vae,
    predict,
    predict_fcn,
    predict_global_only,
    predict_hr,
)
from .optim import AdamState, adam_step
from .prng import SplitMix64
from .tensor import Tensor, backward, zero_grad

PHASES = ("fcn", "vae", "imgenc", "joint", "hr")
PHASE_REQUIRES = {"fcn": None, "vae": "fcn", "imgenc": "vae", "joint": "imgenc", "hr": "joint"}

METRICS_HEADER = "step,phase,kl,recon_nll,objective"
TIMING_HEADER = "step,phase,wall_time"
EPOCHS_HEADER = "epoch,phase,kl,recon_nll,objective,val_iou"


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 32
    num_samples: int = 1  # reparameterized draws per step
    epochs: dict = field(default_factory=lambda: {
        "fcn": 25, "vae": 30, "imgenc": 25, "joint": 50, "hr": 15})
    lr: dict = field(default_factory=lambda: {
        "fcn": 1e-3, "vae": 1e-3, "imgenc": 1e-3, "joint": 1e-3, "hr": 1e-3})
    hflip: bool = True
    shift: int = 2
    joint_cold_start: bool = False

    def __post_init__(self):
        if self.batch_size < 1 or self.num_samples < 1:
            raise ConfigError("batch_size and num_samples must be >= 1")
        for table_name in ("epochs", "lr"):
            table = dict(getattr(self, table_name))
            unknown = set(table) - set(PHASES)
            if unknown:
                raise ConfigError(f"{table_name} has unknown phases: {sorted(unknown)}")
            base = TrainConfig.__dataclass_fields__[table_name].default_factory()
            base.update(table)
            setattr(self, table_name, base)
        if any(v < 0 for v in self.epochs.values()):
            raise ConfigError("epoch counts must be >= 0")
        if self.shift < 0 or self.shift > 2:
            raise ConfigError("shift range is limited to [0, 2] px")

    def to_dict(self) -> dict:
        return {f.name: dict(v) if isinstance(v := getattr(self, f.name), dict) else v
                for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train fields: {sorted(unknown)}")
        return cls(**d)


def _phase_trainable(model: CVAEModel, phase: str) -> None:
    """Set the trainable flags for one phase; everything else is frozen."""
    reg = model.registry
    reg.set_all_trainable(False)
    if phase == "fcn":
        reg.set_group_trainable("trunk/", True)
        reg.set_group_trainable("fcn_head/", True)
    elif phase == "vae":
        reg.set_group_trainable("seg_enc/", True)
        for stem in VAE_DECODER_PARAMS:
            reg.set_group_trainable(stem + "/", True)
    elif phase == "imgenc":
        # the trained mask autoencoder stays frozen; the trunk belongs to the
        # image-encoder path and keeps training
        reg.set_group_trainable("img_enc/", True)
        reg.set_group_trainable("trunk/", True)
    elif phase == "joint":
        reg.set_group_trainable("trunk/", True)
        reg.set_group_trainable("img_enc/", True)
        reg.set_group_trainable("seg_enc/", True)
        reg.set_group_trainable("decoder/", True)
    elif phase == "hr":
        reg.set_group_trainable("hr_head/", True)
    else:
        raise ConfigError(f"unknown phase {phase!r}")


class Trainer:
    """Runs the phase chain against one dataset and output directory."""

    def __init__(self, out_dir: str | Path, arch: ArchConfig, config: TrainConfig,
                 dataset: Dataset):
        self.out_dir = Path(out_dir)
        self.arch = arch
        self.config = config
        self.dataset = dataset
        self.ckpt_dir = self.out_dir / "checkpoints"
        self.log_dir = self.out_dir / "logs"
        if "train" not in dataset.splits or not dataset.splits["train"]:
            raise EmptyDataset("dataset has no training split")
        self.train_samples = dataset.splits["train"]
        self.val_arrays = dataset.arrays("val") if "val" in dataset.splits else None

    # -- paths -------------------------------------------------------------

    def ckpt_path(self, phase: str) -> Path:
        return self.ckpt_dir / f"{phase}.ckpt"

    def _log_paths(self, phase: str) -> tuple[Path, Path, Path]:
        return (self.log_dir / f"{phase}_metrics.csv",
                self.log_dir / f"{phase}_timing.csv",
                self.log_dir / f"{phase}_epochs.csv")

    # -- phase orchestration -------------------------------------------------

    def run(self, phases: list[str]) -> dict[str, Path]:
        done = {}
        for phase in phases:
            self.run_phase(phase)
            done[phase] = self.ckpt_path(phase)
        return done

    def _source_model(self, phase: str) -> tuple[CVAEModel, AdamState | None, int]:
        """Model to start the phase from, plus optimizer state and first epoch
        when resuming a partial run of the same phase."""
        own = self.ckpt_path(phase)
        if own.exists():
            ckpt = load_checkpoint(own)
            if ckpt.phase != phase:
                raise PhaseOrderViolation(f"{own} belongs to phase {ckpt.phase!r}")
            model = restore_model(ckpt)
            state = restore_adam(ckpt, model.registry)
            return model, state, ckpt.epoch

        required = PHASE_REQUIRES[phase]
        if phase == "joint" and self.config.joint_cold_start:
            required = None
        if required is None:
            model = CVAEModel.build(self.arch, seed=self.config.seed)
        else:
            req_path = self.ckpt_path(required)
            if not req_path.exists():
                raise PhaseOrderViolation(
                    f"phase {phase!r} requires the {required!r} checkpoint at {req_path}")
            model = restore_model(load_checkpoint(req_path))
        if phase == "hr":
            model.add_hr_head()
        return model, None, 0

    def run_phase(self, phase: str) -> CVAEModel:
        if phase not in PHASES:
            raise ConfigError(f"unknown phase {phase!r}")
        total_epochs = self.config.epochs[phase]
        model, state, first_epoch = self._source_model(phase)
        if first_epoch >= total_epochs:
            return model
        _phase_trainable(model, phase)
        if state is None:
            state = AdamState(model.registry, lr=self.config.lr[phase])

        metrics_path, timing_path, epochs_path = self._log_paths(phase)
        self.log_dir.mkdir(parents=True, exist_ok=True)
        mode = "a" if first_epoch > 0 else "w"
        with open(metrics_path, mode) as m_fh, open(timing_path, mode) as t_fh, \
                open(epochs_path, mode) as e_fh:
            if mode == "w":
                m_fh.write(METRICS_HEADER + "\n")
                t_fh.write(TIMING_HEADER + "\n")
                e_fh.write(EPOCHS_HEADER + "\n")
            for epoch in range(first_epoch, total_epochs):
                sums = self._run_epoch(phase, model, state, epoch, m_fh, t_fh)
                val_iou = self._val_foreground_iou(model, phase)
                e_fh.write(f"{epoch},{phase},{sums[0]!r},{sums[1]!r},{sums[2]!r},{val_iou!r}\n")
                for fh in (m_fh, t_fh, e_fh):
                    fh.flush()
                save_checkpoint(model, self.ckpt_path(phase), phase=phase,
                                epoch=epoch + 1, step=state.t, adam=state)
        return model

    # -- epoch internals ---------------------------------------------------------

    def _batch_arrays(self, indices: list[int], rng_aug: SplitMix64
                      ) -> tuple[Tensor, np.ndarray]:
        cfg = self.config
        images, masks = [], []
        for idx in indices:
            sample = self.train_samples[idx]
            if cfg.hflip and rng_aug.next_float() < 0.5:
                sample = augment(sample, "hflip")
            if cfg.shift:
                dx = rng_aug.next_index(2 * cfg.shift + 1) - cfg.shift
                dy = rng_aug.next_index(2 * cfg.shift + 1) - cfg.shift
                if dx or dy:
                    sample = augment(sample, "shift", dx=dx, dy=dy)
            images.append(sample.image[:, :, 0])
            masks.append(sample.mask)
        x = Tensor(np.stack(images)[:, None])
        s = np.stack(masks).astype(np.int64)
        return x, s

    def _loss_for(self, phase: str, model: CVAEModel, x: Tensor, s: np.ndarray,
                  rng_eps: SplitMix64):
        n = x.shape[0]
        d = model.arch.latent_dim
        if phase in ("vae", "imgenc", "joint"):
            count = self.config.num_samples * n * d
            eps = np.array(rng_eps.gaussians(count), dtype=np.float64) \
                .reshape(self.config.num_samples, n, d)
        if phase == "fcn":
            return loss_fcn(model, x, s)
        if phase == "vae":
            return loss_seg_vae(model, s, eps)
        if phase == "imgenc":
            return loss_image_encoder(model, x, s, eps)
        if phase == "joint":
            return loss_cvae(model, x, s, eps)
        return loss_hr(model, x, s)

    def _run_epoch(self, phase: str, model: CVAEModel, state: AdamState, epoch: int,
                   m_fh, t_fh) -> tuple[float, float, float]:
        cfg = self.config
        seed = cfg.seed
        order = list(range(len(self.train_samples)))
        SplitMix64.derive(seed, phase, "shuffle", epoch).shuffle(order)
        rng_aug = SplitMix64.derive(seed, phase, "aug", epoch)
        rng_eps = SplitMix64.derive(seed, phase, "eps", epoch)

        totals = np.zeros(3)
        n_steps = 0
        for lo in range(0, len(order), cfg.batch_size):
            tic = time.perf_counter()
            x, s = self._batch_arrays(order[lo:lo + cfg.batch_size], rng_aug)
            breakdown = self._loss_for(phase, model, x, s, rng_eps)
            zero_grad(model.registry)
            backward(breakdown.objective)
            adam_step(model.registry, state)
            kl, recon, obj = breakdown.values
            totals += (kl, recon, obj)
            n_steps += 1
            m_fh.write(f"{state.t},{phase},{kl!r},{recon!r},{obj!r}\n")
            t_fh.write(f"{state.t},{phase},{time.perf_counter() - tic:.6f}\n")
        mean = totals / max(1, n_steps)
        return float(mean[0]), float(mean[1]), float(mean[2])

    def _val_foreground_iou(self, model: CVAEModel, phase: str) -> float:
        """Foreground IoU on the validation split for the predictor this
        phase trains, nearest-upsampled to the ground-truth resolution.
        Logged per epoch for trend inspection."""
        if self.val_arrays is None or phase == "vae":
            return float("nan")
        x_val, s_val = self.val_arrays
        xt = Tensor(x_val)
        if phase == "hr" and model.has_hr:
            labels, _ = predict_hr(model, xt)
        else:
            if phase == "fcn":
                labels, _ = predict_fcn(model, xt)
            elif phase == "imgenc":
                labels, _ = predict_global_only(model, xt)
            else:
                labels, _ = predict(model, xt)
            factor = s_val.shape[1] // labels.shape[1]
            if factor > 1:
                labels = labels.repeat(factor, axis=1).repeat(factor, axis=2)
        return float(np.mean([iou(labels[i], s_val[i], 1) for i in range(len(labels))]))
