"""Binary checkpoint format.

Layout (little-endian)::

    b"GPFN" | u16 version=1 | u32 n + n bytes JSON {"config", "seed", "step"}
    then until EOF, per parameter:
        u16 n + utf-8 name | u8 rank | u32 dim * rank | f64 values (row-major)
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .model import GpfModel, ModelConfig, parameter_shapes

MAGIC = b"GPFN"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: GpfModel
    step: int = 0
    seed: int = 0


def to_bytes(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(
        {"config": ckpt.model.config.to_dict(), "seed": ckpt.seed, "step": ckpt.step},
        sort_keys=True,
    ).encode("utf-8")
    out = [MAGIC, struct.pack("<HI", VERSION, len(meta)), meta]
    for name, t in ckpt.model.named_parameters():
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack(f"<B{t.ndim}I", t.ndim, *t.shape))
        out.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return b"".join(out)


def from_bytes(buf: bytes) -> Checkpoint:
    if buf[:4] != MAGIC:
        raise CheckpointError(f"not a checkpoint (magic {buf[:4]!r})")
    try:
        version, n = struct.unpack_from("<HI", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 10
        meta = json.loads(buf[off : off + n].decode("utf-8"))
        off += n
        params: dict[str, Tensor] = {}
        while off < len(buf):
            (ln,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off : off + ln].decode("utf-8")
            off += ln
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            if off + 8 * size > len(buf):
                raise CheckpointError(f"parameter {name!r} truncated")
            data = np.frombuffer(buf, dtype="<f8", count=size, offset=off).astype(np.float64)
            off += 8 * size
            if name in params:
                raise CheckpointError(f"duplicate parameter name {name!r}")
            params[name] = Tensor(data.reshape(dims), requires_grad=True)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    config = ModelConfig(**meta["config"])
    expected = parameter_shapes(config)
    if list(expected) != list(params):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise CheckpointError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
    for name, t in params.items():
        if t.shape != expected[name]:
            raise CheckpointError(f"{name}: shape {t.shape}, config implies {expected[name]}")
    return Checkpoint(GpfModel(config, params), int(meta.get("step", 0)), int(meta.get("seed", 0)))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
