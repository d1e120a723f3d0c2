"""Bit-exact model/optimizer persistence.

Layout: an ASCII first line `CVAESEG-CKPT v1 <header_bytes>`, a JSON header
of exactly that many bytes, one newline, then the raw body: little-endian
float64 parameter blocks followed by ADAM moment blocks.  The header's
manifest must tile the body exactly; anything else is rejected.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatVersionMismatch, IoError, ManifestCorrupt
from .model import ArchConfig, CVAEModel
from .optim import AdamState
from .tensor import ParamRegistry

MAGIC = "CVAESEG-CKPT"
VERSION = "v1"


@dataclass
class Checkpoint:
    arch: dict
    phase: str
    epoch: int
    step: int
    seed: int
    params: dict[str, np.ndarray]
    trainable: dict[str, bool]
    adam: dict | None  # {"lr","beta1","beta2","eps","t","m":{name:arr},"v":{name:arr}}


def save_checkpoint(model: CVAEModel, path: str | Path, phase: str, epoch: int,
                    step: int, adam: AdamState | None = None) -> None:
    path = Path(path)
    blocks: list[bytes] = []
    manifest = []
    offset = 0

    def push(arr: np.ndarray) -> tuple[int, int]:
        nonlocal offset
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        blocks.append(raw)
        start = offset
        offset += len(raw)
        return start, len(raw)

    for name, p in model.registry.items():
        start, length = push(p.data)
        manifest.append({
            "name": name,
            "shape": list(p.shape),
            "offset": start,
            "length": length,
            "trainable": model.registry.is_trainable(name),
        })

    adam_block = None
    if adam is not None:
        entries = []
        for name in adam.m:
            m_off, length = push(adam.m[name])
            v_off, _ = push(adam.v[name])
            entries.append({"name": name, "shape": list(adam.m[name].shape),
                            "m_offset": m_off, "v_offset": v_off, "length": length})
        adam_block = {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2,
                      "eps": adam.eps, "t": adam.t, "entries": entries}

    header = {
        "format_version": 1,
        "arch": model.arch.to_dict(),
        "phase": phase,
        "epoch": epoch,
        "step": step,
        "seed": model.seed,
        "params": manifest,
        "adam": adam_block,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(f"{MAGIC} {VERSION} {len(header_bytes)}\n".encode())
            fh.write(header_bytes)
            fh.write(b"\n")
            for raw in blocks:
                fh.write(raw)
    except OSError as e:
        raise IoError(f"cannot write checkpoint {path}: {e}") from e


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise IoError(f"cannot read checkpoint {path}: {e}") from e

    newline = blob.find(b"\n")
    if newline < 0:
        raise FormatVersionMismatch(f"{path}: not a checkpoint file")
    fields = blob[:newline].decode(errors="replace").split()
    if len(fields) != 3 or fields[0] != MAGIC:
        raise FormatVersionMismatch(f"{path}: bad magic line")
    if fields[1] != VERSION:
        raise FormatVersionMismatch(f"{path}: unsupported version {fields[1]!r}")
    header_len = int(fields[2])
    header_start = newline + 1
    body_start = header_start + header_len + 1
    if len(blob) < body_start or blob[header_start + header_len:body_start] != b"\n":
        raise ManifestCorrupt(f"{path}: truncated header")
    header = json.loads(blob[header_start:header_start + header_len])
    body = blob[body_start:]

    spans = [(e["offset"], e["length"]) for e in header["params"]]
    if header["adam"]:
        for e in header["adam"]["entries"]:
            spans.append((e["m_offset"], e["length"]))
            spans.append((e["v_offset"], e["length"]))
    spans.sort()
    at = 0
    for off, length in spans:
        if off != at:
            raise ManifestCorrupt(f"{path}: manifest gap/overlap at offset {off}")
        at += length
    if at != len(body):
        raise ManifestCorrupt(f"{path}: body is {len(body)} bytes, manifest covers {at}")

    def pull(off: int, length: int, shape: list[int]) -> np.ndarray:
        return np.frombuffer(body[off:off + length], dtype="<f8").reshape(shape).copy()

    params = {e["name"]: pull(e["offset"], e["length"], e["shape"]) for e in header["params"]}
    trainable = {e["name"]: bool(e["trainable"]) for e in header["params"]}
    adam = None
    if header["adam"]:
        ab = header["adam"]
        adam = {
            "lr": ab["lr"], "beta1": ab["beta1"], "beta2": ab["beta2"],
            "eps": ab["eps"], "t": ab["t"],
            "m": {e["name"]: pull(e["m_offset"], e["length"], e["shape"]) for e in ab["entries"]},
            "v": {e["name"]: pull(e["v_offset"], e["length"], e["shape"]) for e in ab["entries"]},
        }
    return Checkpoint(arch=header["arch"], phase=header["phase"], epoch=header["epoch"],
                      step=header["step"], seed=header["seed"], params=params,
                      trainable=trainable, adam=adam)


def restore_model(ckpt: Checkpoint) -> CVAEModel:
    """Rebuild a model and overwrite its parameters from a checkpoint."""
    arch = ArchConfig.from_dict(ckpt.arch)
    with_hr = any(name.startswith("hr_head/") for name in ckpt.params)
    model = CVAEModel.build(arch, seed=ckpt.seed, with_hr=with_hr)
    expected = set(model.registry.names())
    got = set(ckpt.params)
    if expected != got:
        raise ManifestCorrupt(
            f"checkpoint parameters do not match architecture: missing {sorted(expected - got)}, "
            f"unexpected {sorted(got - expected)}")
    for name, arr in ckpt.params.items():
        p = model.registry[name]
        if tuple(arr.shape) != p.shape:
            raise ManifestCorrupt(f"parameter {name}: shape {arr.shape} != {p.shape}")
        p.data[...] = arr
        model.registry.set_trainable(name, ckpt.trainable[name])
    return model


def restore_adam(ckpt: Checkpoint, registry: ParamRegistry) -> AdamState | None:
    if ckpt.adam is None:
        return None
    state = AdamState(registry, lr=ckpt.adam["lr"], beta1=ckpt.adam["beta1"],
                      beta2=ckpt.adam["beta2"], eps=ckpt.adam["eps"])
    state.t = ckpt.adam["t"]
    if set(state.m) != set(ckpt.adam["m"]):
        raise ManifestCorrupt("optimizer state does not match trainable parameters")
    for name in state.m:
        state.m[name][...] = ckpt.adam["m"][name]
        state.v[name][...] = ckpt.adam["v"][name]
    return state
