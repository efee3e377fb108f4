"""TAVC checkpoint files.

Layout (integers little-endian)::

    b"TAVC" | version u16 | manifest length u32 | manifest (UTF-8 JSON)
    | raw tensor data | checksum 8 bytes

The manifest lists every stored tensor (name, shape, dtype) in the order its
bytes follow, plus the model config, epoch, root seed and optimizer scalars.
Tensors are 32-bit little-endian floats; a float64 model is stored as
``<f8`` and tagged as such so that round trips stay bitwise.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .models import HybridViT, ModelConfig, build_model
from .optim import AdamWState
from .volume_io import (
    ChecksumError,
    TruncatedFileError,
    atomic_write_bytes,
    checksum64,
)

MAGIC = b"TAVC"
VERSION = 1
_HEAD = struct.Struct("<4sHI")
_DTYPES = {"<f4": np.float32, "<f8": np.float64}


class CheckpointError(Exception):
    pass


class BadCheckpointMagicError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError, TruncatedFileError):
    pass


class CheckpointChecksumError(CheckpointError, ChecksumError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    epoch: int = 0
    root_seed: int = 0
    optimizer: AdamWState | None = None
    extra: dict = field(default_factory=dict)


def _tag(arr: np.ndarray) -> str:
    return "<f8" if arr.dtype == np.float64 else "<f4"


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    entries, chunks = [], []

    def add(name: str, arr: np.ndarray) -> None:
        tag = _tag(arr)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": tag})
        chunks.append(np.ascontiguousarray(arr, dtype=tag).tobytes())

    for name in sorted(ckpt.params):
        add(f"param/{name}", ckpt.params[name])
    opt = None
    if ckpt.optimizer is not None:
        o = ckpt.optimizer
        opt = {"t": o.t, **o.hyperparameters(), "slots": len(o.m)}
        for i, (m, v) in enumerate(zip(o.m, o.v)):
            add(f"adam_m/{i}", m)
            add(f"adam_v/{i}", v)
    manifest = {
        "config": ckpt.config.to_dict(),
        "epoch": ckpt.epoch,
        "root_seed": ckpt.root_seed,
        "optimizer": opt,
        "extra": ckpt.extra,
        "tensors": entries,
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    payload = _HEAD.pack(MAGIC, VERSION, len(mbytes)) + mbytes + b"".join(chunks)
    return payload + checksum64(payload)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < 4:
        raise CheckpointTruncatedError("file shorter than the magic number")
    if buf[:4] != MAGIC:
        raise BadCheckpointMagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    if len(buf) < _HEAD.size + 8:
        raise CheckpointTruncatedError("truncated header")
    _, version, mlen = _HEAD.unpack_from(buf)
    if version != VERSION:
        raise CheckpointError(f"unsupported TAVC version {version}")
    body_end = len(buf) - 8
    if _HEAD.size + mlen > body_end:
        raise CheckpointTruncatedError("manifest runs past end of file")
    if checksum64(buf[:body_end]) != buf[body_end:]:
        raise CheckpointChecksumError("checksum mismatch (file corrupt or truncated)")
    try:
        return _decode_body(buf, mlen, body_end)
    except CheckpointError:
        raise
    except (ValueError, KeyError, TypeError, AttributeError) as exc:
        # a well-formed checksum over a malformed manifest
        raise CheckpointError(f"unreadable manifest: {exc!r}") from exc


def _decode_body(buf: bytes, mlen: int, body_end: int) -> Checkpoint:
    manifest = json.loads(buf[_HEAD.size : _HEAD.size + mlen].decode("utf-8"))
    config = ModelConfig.from_dict(manifest["config"])
    entries = manifest["tensors"]

    off = _HEAD.size + mlen
    tensors: dict[str, np.ndarray] = {}
    for e in entries:
        if e.get("dtype") not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {e.get('dtype')!r} for {e.get('name')}")
        shape = tuple(int(s) for s in e["shape"])
        if any(s < 0 for s in shape):
            raise CheckpointError(f"negative extent in {e['name']}")
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = count * np.dtype(e["dtype"]).itemsize
        if off + nbytes > body_end:
            raise CheckpointTruncatedError(f"tensor {e['name']} runs past end of data")
        arr = np.frombuffer(buf, dtype=e["dtype"], count=count, offset=off).reshape(shape)
        tensors[e["name"]] = arr.astype(_DTYPES[e["dtype"]])
        off += nbytes
    if off != body_end:
        raise CheckpointError(f"{body_end - off} unaccounted bytes before checksum")

    params = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
    opt = None
    if manifest.get("optimizer") is not None:
        o = manifest["optimizer"]
        n = int(o["slots"])
        try:
            m = [tensors[f"adam_m/{i}"] for i in range(n)]
            v = [tensors[f"adam_v/{i}"] for i in range(n)]
        except KeyError as exc:
            raise CheckpointError(f"optimizer slot missing: {exc}") from exc
        opt = AdamWState(lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"],
                         weight_decay=o["weight_decay"], t=int(o["t"]), m=m, v=v)
    return Checkpoint(config=config, params=params, epoch=int(manifest["epoch"]),
                      root_seed=int(manifest["root_seed"]), optimizer=opt,
                      extra=manifest.get("extra") or {})


def save_checkpoint(model: HybridViT, path, epoch: int = 0, root_seed: int | None = None,
                    optimizer: AdamWState | None = None, extra: dict | None = None) -> None:
    ckpt = Checkpoint(
        config=model.config, params={k: np.array(v) for k, v in model.state_dict().items()},
        epoch=epoch, root_seed=model.config.seed if root_seed is None else root_seed,
        optimizer=optimizer, extra=extra or {})
    atomic_write_bytes(path, encode_checkpoint(ckpt))


def read_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


def load_checkpoint(path, model: HybridViT | None = None, expect: ModelConfig | None = None) -> HybridViT:
    """Restore a model from ``path``.

    With ``model`` given, weights are copied into it after checking that its
    config matches the stored one; otherwise a model is built from the stored
    config. ``expect`` adds a compatibility check against a run config.
    """
    ckpt = read_checkpoint(path)
    for want in (expect, None if model is None else model.config):
        if want is not None:
            _check_config(want, ckpt.config)
    dtype = next(iter(ckpt.params.values())).dtype if ckpt.params else np.dtype(np.float32)
    if model is None:
        with T.precision(dtype):
            model = build_model(ckpt.config)
    elif model.head.weight.dtype != dtype:
        raise ConfigMismatchError(f"checkpoint stores {dtype} weights, model is {model.head.weight.dtype}")
    model.load_state_dict(ckpt.params)
    return model


def _check_config(want: ModelConfig, got: ModelConfig) -> None:
    a, b = want.to_dict(), got.to_dict()
    diffs = [f"{k}: expected {a[k]!r}, checkpoint has {b.get(k)!r}" for k in a if a[k] != b.get(k)]
    if diffs:
        raise ConfigMismatchError("checkpoint incompatible with config; " + "; ".join(diffs))
