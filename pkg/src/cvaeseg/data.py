"""Synthetic segmentation dataset with deliberate local ambiguity.

Each sample is an elliptical body with a thin tail attached at one end of
its major axis, plus a distractor stripe of tail-like intensity on the
opposite side that touches nothing.  Locally the two stripes are
indistinguishable; only the global arrangement (which side of the body the
attached stripe is on) separates foreground from background.  The body and
tail are labeled foreground, the distractor is background.

All randomness flows through the portable splitmix64 stream, so a (seed,
params) pair identifies a sample bit-exactly.  Infeasible draws are rejected
and redrawn from the same stream, which keeps generation deterministic.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CorruptSample,
    FormatVersionMismatch,
    IoError,
    ParamOutOfRange,
    ShiftOutOfRange,
)
from .prng import SplitMix64

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"


@dataclass
class GenParams:
    height: int = 32
    width: int = 32
    body_axis: tuple[float, float] = (6.0, 10.0)
    tail_len: tuple[float, float] = (6.0, 12.0)
    tail_width: tuple[float, float] = (1.0, 2.0)
    gap: tuple[float, float] = (2.0, 3.0)
    distractor_len: tuple[float, float] = (6.0, 12.0)
    distractor_width: tuple[float, float] = (1.0, 2.0)
    noise_sigma: float = 0.05
    background: tuple[float, float] = (0.10, 0.20)
    body_intensity: tuple[float, float] = (0.80, 0.90)
    stripe_intensity: tuple[float, float] = (0.45, 0.60)
    distractor_jitter: float = 0.02
    distractor_prob: float = 1.0
    margin: float = 1.0
    fg_range: tuple[float, float] = (0.05, 0.6)
    max_attempts: int = 200

    def __post_init__(self):
        for name in ("body_axis", "tail_len", "tail_width", "gap", "distractor_len",
                     "distractor_width", "background", "body_intensity",
                     "stripe_intensity", "fg_range"):
            rng = tuple(float(v) for v in getattr(self, name))
            setattr(self, name, rng)
            if len(rng) != 2 or rng[0] > rng[1]:
                raise ParamOutOfRange(f"{name}: expected (lo, hi) with lo <= hi, got {rng}")
        if self.height < 16 or self.width < 16:
            raise ParamOutOfRange("image sides must be at least 16 px")
        if self.noise_sigma < 0 or self.distractor_jitter < 0:
            raise ParamOutOfRange("noise parameters must be nonnegative")
        if not 0.0 <= self.distractor_prob <= 1.0:
            raise ParamOutOfRange("distractor_prob must lie in [0, 1]")
        if self.margin < 0 or self.max_attempts < 1:
            raise ParamOutOfRange("margin must be >= 0 and max_attempts >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "GenParams":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ParamOutOfRange(f"unknown generator fields: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 1) float64 in [0, 1]
    mask: np.ndarray   # (H, W) uint8 labels

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.image.astype("<f8").tobytes())
        h.update(self.mask.astype(np.uint8).tobytes())
        return h.hexdigest()


def _segment_mask(pu: np.ndarray, pv: np.ndarray, lo: float, hi: float, width: float) -> np.ndarray:
    """Pixels whose center lies within width/2 of the u-axis segment [lo, hi]."""
    tt = np.clip(pu, lo, hi)
    d2 = (pu - tt) ** 2 + pv ** 2
    return d2 <= (0.5 * width) ** 2


def _generate(seed: int, params: GenParams) -> tuple[Sample, dict]:
    p = params
    h, w = p.height, p.width
    rng = SplitMix64.derive(seed, "sample")
    px = np.arange(w, dtype=np.float64) + 0.5
    py = np.arange(h, dtype=np.float64) + 0.5
    gx, gy = np.meshgrid(px, py)

    for _ in range(p.max_attempts):
        sa = 0.5 * rng.uniform(*p.body_axis)
        sb = 0.5 * rng.uniform(*p.body_axis)
        if sb > sa:
            sa, sb = sb, sa  # major axis carries the orientation
        while True:
            g1, g2 = rng.next_gaussian_pair()
            norm = math.sqrt(g1 * g1 + g2 * g2)
            if norm > 1e-6:
                ux, uy = g1 / norm, g2 / norm
                break
        t_len = rng.uniform(*p.tail_len)
        t_width = rng.uniform(*p.tail_width)
        gap = rng.uniform(*p.gap)
        d_len = rng.uniform(*p.distractor_len)
        d_width = rng.uniform(*p.distractor_width)
        with_distractor = rng.next_float() < p.distractor_prob
        cx = rng.uniform(p.margin + sa, w - p.margin - sa)
        cy = rng.uniform(p.margin + sa, h - p.margin - sa)
        bg = rng.uniform(*p.background)
        body_int = rng.uniform(*p.body_intensity)
        stripe_int = rng.uniform(*p.stripe_intensity)
        jitter = rng.next_gaussian_pair()[0] * p.distractor_jitter
        distr_int = min(1.0, max(0.0, stripe_int + jitter))

        # endpoints must stay inside the frame with margin
        reach_tail = sa + t_len
        reach_distr = sa + gap + d_len
        ok = True
        for t, half in ((reach_tail, 0.5 * t_width), (-reach_distr if with_distractor else 0.0, 0.5 * d_width)):
            ex, ey = cx + t * ux, cy + t * uy
            if not (p.margin + half <= ex <= w - p.margin - half
                    and p.margin + half <= ey <= h - p.margin - half):
                ok = False
        if not ok:
            continue

        rel_x = gx - cx
        rel_y = gy - cy
        pu = rel_x * ux + rel_y * uy
        pv = -rel_x * uy + rel_y * ux
        body = (pu / sa) ** 2 + (pv / sb) ** 2 <= 1.0
        tail = _segment_mask(pu, pv, sa - 0.5, sa + t_len, t_width)
        fg = body | tail
        if with_distractor:
            distr = _segment_mask(pu, pv, -(sa + gap + d_len), -(sa + gap), d_width) & ~fg
        else:
            distr = np.zeros_like(fg)

        frac = fg.mean()
        if not p.fg_range[0] <= frac <= p.fg_range[1]:
            continue
        if (tail & ~body).sum() < 3:
            continue
        if with_distractor and distr.sum() < 3:
            continue

        image = np.full((h, w), bg, dtype=np.float64)
        image[body] = body_int
        image[tail & ~body] = stripe_int
        image[distr] = distr_int
        noise = np.array(rng.gaussians(h * w), dtype=np.float64).reshape(h, w)
        image = np.clip(image + p.noise_sigma * noise, 0.0, 1.0)

        sample = Sample(image=image[:, :, None], mask=fg.astype(np.uint8))
        info = {
            "ambiguous": bool(with_distractor),
            "tail_pixels": tail & ~body,
            "distractor_pixels": distr,
            "body_pixels": body,
        }
        return sample, info

    raise ParamOutOfRange(
        f"could not generate a valid sample for seed {seed} within {p.max_attempts} attempts")


def gen_sample(seed: int, params: GenParams | None = None) -> Sample:
    """Deterministic sample: (seed, params) fully determine the result."""
    return _generate(seed, params or GenParams())[0]


def augment(sample: Sample, op: str, dx: int = 0, dy: int = 0) -> Sample:
    """hflip mirrors image and mask jointly; shift translates both by
    (dx, dy) pixels with zero-fill for the image and background for the mask."""
    if op == "hflip":
        return Sample(image=sample.image[:, ::-1].copy(), mask=sample.mask[:, ::-1].copy())
    if op == "shift":
        if abs(dx) > 2 or abs(dy) > 2:
            raise ShiftOutOfRange(f"shift limited to +/-2 px, got ({dx}, {dy})")
        h, w = sample.mask.shape
        image = np.zeros_like(sample.image)
        mask = np.zeros_like(sample.mask)
        src_r = slice(max(0, -dy), min(h, h - dy))
        dst_r = slice(max(0, dy), min(h, h + dy))
        src_c = slice(max(0, -dx), min(w, w - dx))
        dst_c = slice(max(0, dx), min(w, w + dx))
        image[dst_r, dst_c] = sample.image[src_r, src_c]
        mask[dst_r, dst_c] = sample.mask[src_r, src_c]
        return Sample(image=image, mask=mask)
    raise ValueError(f"unknown augmentation {op!r}")


# -- on-disk format -----------------------------------------------------------------

@dataclass
class SampleRecord:
    id: str
    seed: int
    split: str
    ambiguous: bool
    file: str


@dataclass
class DatasetManifest:
    height: int
    width: int
    classes: int
    generator: dict
    samples: list[SampleRecord] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.samples)

    def to_dict(self) -> dict:
        return {
            "format_version": MANIFEST_VERSION,
            "height": self.height,
            "width": self.width,
            "classes": self.classes,
            "count": self.count,
            "generator": self.generator,
            "samples": [asdict(rec) for rec in self.samples],
        }


class Dataset:
    """In-memory dataset grouped by split, in manifest order."""

    def __init__(self, manifest: DatasetManifest, samples: dict[str, list[Sample]]):
        self.manifest = manifest
        self.splits = samples

    def __getitem__(self, split: str) -> list[Sample]:
        return self.splits[split]

    def arrays(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        """(images (N,1,H,W), masks (N,H,W)) ready for the model."""
        samples = self.splits[split]
        x = np.stack([s.image[:, :, 0] for s in samples])[:, None]
        m = np.stack([s.mask for s in samples]).astype(np.int64)
        return x, m


def _sample_file_size(h: int, w: int) -> int:
    return h * w * 8 + h * w


def _write_sample(path: Path, sample: Sample) -> None:
    blob = sample.image.astype("<f8").tobytes() + sample.mask.astype(np.uint8).tobytes()
    path.write_bytes(blob)


def _read_sample(path: Path, h: int, w: int, classes: int, rec_id: str) -> Sample:
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise IoError(f"cannot read sample file {path}: {e}") from e
    if len(blob) != _sample_file_size(h, w):
        raise CorruptSample(f"sample {rec_id}: file size {len(blob)} != expected "
                            f"{_sample_file_size(h, w)}")
    img = np.frombuffer(blob[:h * w * 8], dtype="<f8").reshape(h, w, 1).copy()
    mask = np.frombuffer(blob[h * w * 8:], dtype=np.uint8).reshape(h, w).copy()
    if mask.max(initial=0) >= classes:
        raise CorruptSample(f"sample {rec_id}: label {mask.max()} out of range [0, {classes})")
    if img.min() < 0.0 or img.max() > 1.0:
        raise CorruptSample(f"sample {rec_id}: image values outside [0, 1]")
    return Sample(image=img, mask=mask)


_SPLIT_OFFSETS = {"train": 0, "val": 1, "test": 2}


def sample_seed_for(dataset_seed: int, split: str, index: int) -> int:
    """Disjoint per-sample seeds; splits draw from disjoint derivation paths."""
    return SplitMix64.derive(dataset_seed, "split", _SPLIT_OFFSETS[split], index).next_u64()


def gen_dataset(seed: int, n_train: int, n_val: int, n_test: int, out_dir: str | Path,
                params: GenParams | None = None) -> DatasetManifest:
    """Write a full dataset: one binary file per sample plus a manifest,
    which is written last."""
    params = params or GenParams()
    counts = {"train": n_train, "val": n_val, "test": n_test}
    if min(counts.values()) < 1:
        raise ParamOutOfRange(f"split counts must be >= 1, got {counts}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoError(f"cannot create dataset directory {out}: {e}") from e

    generator_block = dict(params.to_dict(), seed=seed)
    manifest = DatasetManifest(height=params.height, width=params.width,
                               classes=2, generator=generator_block)
    for split, count in counts.items():
        for i in range(count):
            s_seed = sample_seed_for(seed, split, i)
            sample, info = _generate(s_seed, params)
            rec = SampleRecord(id=f"{split}-{i:05d}", seed=s_seed, split=split,
                               ambiguous=info["ambiguous"], file=f"{split}-{i:05d}.bin")
            try:
                _write_sample(out / rec.file, sample)
            except OSError as e:
                raise IoError(f"cannot write sample file {out / rec.file}: {e}") from e
            manifest.samples.append(rec)

    body = json.dumps(manifest.to_dict(), indent=1, sort_keys=True)
    try:
        (out / MANIFEST_NAME).write_text(body + "\n")
    except OSError as e:
        raise IoError(f"cannot write manifest {out / MANIFEST_NAME}: {e}") from e
    return manifest


def load_dataset(manifest_path: str | Path) -> Dataset:
    """Read a dataset back; every sample is validated on load."""
    path = Path(manifest_path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        raw = json.loads(path.read_text())
    except OSError as e:
        raise IoError(f"cannot read manifest {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise FormatVersionMismatch(f"manifest {path} is not valid JSON: {e}") from e
    version = raw.get("format_version")
    if version != MANIFEST_VERSION:
        raise FormatVersionMismatch(
            f"manifest version {version} unsupported (expected {MANIFEST_VERSION})")

    records = [SampleRecord(**rec) for rec in raw["samples"]]
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise FormatVersionMismatch("manifest contains duplicate sample ids")
    manifest = DatasetManifest(height=raw["height"], width=raw["width"],
                               classes=raw["classes"], generator=raw["generator"],
                               samples=records)
    base = path.parent
    splits: dict[str, list[Sample]] = {}
    for rec in records:
        file_path = base / rec.file
        if not file_path.exists():
            raise IoError(f"sample file missing: {file_path}")
        sample = _read_sample(file_path, manifest.height, manifest.width,
                              manifest.classes, rec.id)
        splits.setdefault(rec.split, []).append(sample)
    return Dataset(manifest, splits)
