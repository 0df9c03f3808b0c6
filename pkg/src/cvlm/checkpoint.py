"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    b"CVLM"  u32 version  u64 meta_len  meta (canonical JSON, UTF-8)
    u32 n_tensors
    per tensor:
        u16 name_len  name (UTF-8)  2-byte dtype tag b"f4" | b"f8"
        u8 ndim  ndim * u32 dims  u64 nbytes  u32 crc32(payload)  payload

The metadata holds the resolved model config, tokenizer vocabulary, stage,
step, the LoRA merge flag and optimizer scalars. Optimizer moments are
stored as tensors named ``optim.m.<param>`` and ``optim.v.<param>``.
Serialisation is canonical, so load followed by save reproduces the file
byte for byte.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .config import model_config_from_dict
from .data import Tokenizer
from .errors import FormatError, IntegrityError, MergeError
from .model import CVLM
from .numerics import AdamW
from .training import TrainState

MAGIC = b"CVLM"
VERSION = 1
DTYPES = {b"f4": "<f4", b"f8": "<f8"}


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict  # name -> float64 array

    @property
    def stage(self):
        return self.meta.get("stage")

    @property
    def step(self):
        return self.meta.get("step", 0)


def _canonical(meta):
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_checkpoint(path, meta, tensors, dtype="f8"):
    """Write ``tensors`` (name -> array) in sorted name order."""
    tag = dtype.encode("ascii")
    if tag not in DTYPES:
        raise FormatError(f"unsupported checkpoint dtype {dtype!r}")
    meta = dict(meta, dtype=dtype)
    blob = _canonical(meta)
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(blob)), blob,
             struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=DTYPES[tag])
        payload = arr.tobytes()
        raw = name.encode("utf-8")
        parts += [struct.pack("<H", len(raw)), raw, tag, struct.pack("<B", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape),
                  struct.pack("<QI", len(payload), zlib.crc32(payload)), payload]
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise IntegrityError(f"checkpoint truncated while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_checkpoint(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf)
    if buf[:4] != MAGIC:
        raise FormatError(f"{path}: not a CVLM checkpoint (bad magic)")
    r.pos = 4
    version, meta_len = r.unpack("<IQ", "header")
    if version != VERSION:
        raise FormatError(f"{path}: checkpoint version {version} is not supported "
                          f"(expected {VERSION})")
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except ValueError as exc:
        raise FormatError(f"{path}: corrupt metadata block ({exc})") from exc
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for i in range(count):
        (n,) = r.unpack("<H", f"name of tensor #{i}")
        name = r.take(n, f"name of tensor #{i}").decode("utf-8", errors="replace")
        tag = r.take(2, f"tensor {name!r} dtype")
        if tag not in DTYPES:
            raise FormatError(f"tensor {name!r} has unknown dtype tag {tag!r}")
        (ndim,) = r.unpack("<B", f"tensor {name!r} rank")
        shape = r.unpack(f"<{ndim}I", f"tensor {name!r} shape")
        nbytes, crc = r.unpack("<QI", f"tensor {name!r} length")
        expected = int(np.prod(shape, dtype=np.int64)) * int(tag[1:])
        if nbytes != expected:
            raise IntegrityError(f"tensor {name!r}: length field {nbytes} does not match "
                                 f"shape {tuple(shape)}")
        if r.pos + nbytes > len(buf):
            raise IntegrityError(f"tensor {name!r}: payload truncated")
        payload = r.take(nbytes, f"tensor {name!r} payload")
        if zlib.crc32(payload) != crc:
            raise IntegrityError(f"tensor {name!r}: payload checksum mismatch")
        tensors[name] = np.frombuffer(payload, dtype=DTYPES[tag]).reshape(shape).astype(
            np.float64)
    if r.pos != len(buf):
        raise IntegrityError(f"{path}: {len(buf) - r.pos} trailing bytes after last tensor")
    return Checkpoint(meta, tensors)


# ------------------------------------------------------------ model bundles

def save_checkpoint(model, path, stage=None, step=0, train_state=None, dtype=None, extra=None):
    """Save parameters, metadata and (optionally) a resumable train state."""
    dtype = dtype or getattr(model, "storage_dtype", "f8")
    meta = {
        "format": "cvlm",
        "config": model.cfg.to_dict(),
        "vocab": list(model.tokenizer.vocab),
        "stage": stage,
        "step": int(step),
        "lora_merged": bool(model.lora_merged),
        "completed_stages": list(model.completed_stages),
        "train_state": None,
        "extra": extra or {},
    }
    tensors = {name: p.data for name, p in model.named_parameters()}
    if train_state is not None:
        opt = train_state.optimizer
        meta["train_state"] = {
            "stage": train_state.stage, "step": train_state.step,
            "optimizer": {"step_count": opt.step_count, "beta1": opt.beta1,
                          "beta2": opt.beta2, "eps": opt.eps,
                          "weight_decay": opt.weight_decay},
            "best": train_state.best,
        }
        for name in opt.m:
            tensors[f"optim.m.{name}"] = opt.m[name]
            tensors[f"optim.v.{name}"] = opt.v[name]
    write_checkpoint(path, meta, tensors, dtype)


def load_checkpoint(path):
    """Rebuild the model bundle (and train state, if stored) from ``path``.

    Every stored tensor must name a parameter of the rebuilt model or an
    optimizer moment of one; anything else is rejected.
    """
    ckpt = read_checkpoint(path)
    meta = ckpt.meta
    for key in ("config", "vocab"):
        if key not in meta:
            raise FormatError(f"{path}: metadata lacks {key!r}")
    try:
        tokenizer = Tokenizer.from_vocab(meta["vocab"])
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    model = CVLM(model_config_from_dict(meta["config"]), tokenizer)
    params = dict(model.named_parameters())
    moments = {}
    for name, arr in ckpt.tensors.items():
        if name.startswith(("optim.m.", "optim.v.")):
            base = name[len("optim.m."):]
            if base not in params:
                raise FormatError(f"{path}: optimizer tensor {name!r} has no parameter")
            moments[name] = arr
            continue
        if name not in params:
            raise FormatError(f"{path}: unknown tensor {name!r}")
        if params[name].shape != arr.shape:
            raise FormatError(f"{path}: tensor {name!r} has shape {arr.shape}, model expects "
                              f"{params[name].shape}")
        params[name].data = arr.copy()
    missing = sorted(set(params) - set(ckpt.tensors))
    if missing:
        raise FormatError(f"{path}: checkpoint lacks tensors {missing[:3]}"
                          + (" ..." if len(missing) > 3 else ""))
    model.lora_merged = bool(meta.get("lora_merged", False))
    model.completed_stages = list(meta.get("completed_stages", []))
    model.storage_dtype = meta.get("dtype", "f8")
    state = None
    ts = meta.get("train_state")
    if ts is not None:
        o = ts["optimizer"]
        opt = AdamW(o["beta1"], o["beta2"], o["eps"], o["weight_decay"])
        opt.step_count = o["step_count"]
        for name, arr in moments.items():
            target = opt.m if name.startswith("optim.m.") else opt.v
            target[name[len("optim.m."):]] = arr.copy()
        state = TrainState(ts["stage"], ts["step"], opt, ts.get("best", {}))
    return model, state, ckpt


def merge_checkpoint(src, dst):
    """Fold LoRA adapters of checkpoint ``src`` into base weights, saved as ``dst``.

    Raises :class:`~cvlm.errors.MergeError` if ``src`` is already merged.
    """
    if read_checkpoint(src).meta.get("lora_merged"):
        raise MergeError(f"{src}: LoRA adapters are already merged (header flag set)")
    model, _, ckpt = load_checkpoint(src)
    model.merge_lora()
    save_checkpoint(model, dst, stage=ckpt.stage, step=ckpt.step)
    return model


def describe(ckpt):
    """Human-readable listing used by ``inspect-checkpoint``."""
    m = ckpt.meta
    lines = [f"stage: {m.get('stage')}", f"step: {m.get('step')}",
             f"dtype: {m.get('dtype')}", f"lora_merged: {m.get('lora_merged')}",
             f"completed_stages: {', '.join(m.get('completed_stages', [])) or '-'}",
             f"tensors: {len(ckpt.tensors)}"]
    for name in sorted(ckpt.tensors):
        arr = ckpt.tensors[name]
        lines.append(f"  {name}  {m.get('dtype')}  {list(arr.shape)}")
    return "\n".join(lines)
