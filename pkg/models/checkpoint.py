"""
Recognizer checkpoints and the LSHOCR1 file layout.

Layout: the header line ``LSHOCR1\\n``, a UTF-8 JSON block (arch, codec,
train_meta, tensor directory with name/shape/byte offset), a ``\\0``
separator, then little-endian float32 tensor data in directory order. The
live tensors come first, sorted by name; their EMA shadows follow with
names suffixed ``.ema``.
"""

import json
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Optional

import numpy as np

from config import Config
from models.codec import Codec
from utils.exceptions import CheckpointFormatError, CodecMismatchError, ShapeMismatchError

MAGIC = (Config.CHECKPOINT_FORMAT + "\n").encode("ascii")
FILE_DTYPE = np.dtype("<f4")


@dataclass
class Checkpoint:
    arch: Any
    codec: Codec
    tensors: Dict[str, np.ndarray]
    ema_tensors: Dict[str, np.ndarray]
    train_meta: Dict[str, Any] = field(default_factory=dict)
    # Adam moments and step; kept in memory only
    opt_state: Optional[Dict[str, Any]] = field(default=None, compare=False, repr=False)

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.tensors.values())).dtype

    def validate(self) -> None:
        if set(self.tensors) != set(self.ema_tensors):
            raise ShapeMismatchError("tensors and ema_tensors name different sets")
        for name, value in self.tensors.items():
            if value.shape != self.ema_tensors[name].shape:
                raise ShapeMismatchError(
                    f"{name}: shape {value.shape} != ema shape {self.ema_tensors[name].shape}"
                )
        rows = self.tensors["out.w"].shape[0]
        if rows != self.codec.size or self.arch.num_classes != self.codec.size:
            raise CodecMismatchError(
                f"output layer has {rows} rows, codec needs {self.codec.size}"
            )

    def copy(self) -> "Checkpoint":
        return Checkpoint(
            arch=self.arch,
            codec=self.codec,
            tensors={k: v.copy() for k, v in self.tensors.items()},
            ema_tensors={k: v.copy() for k, v in self.ema_tensors.items()},
            train_meta=json.loads(json.dumps(self.train_meta)),
            opt_state=None
            if self.opt_state is None
            else {
                "step": self.opt_state["step"],
                "m": {k: v.copy() for k, v in self.opt_state["m"].items()},
                "v": {k: v.copy() for k, v in self.opt_state["v"].items()},
            },
        )

    def astype(self, dtype) -> "Checkpoint":
        """Same weights in another compute dtype (float64 for gradient checks)."""
        return Checkpoint(
            self.arch,
            self.codec,
            {k: v.astype(dtype) for k, v in self.tensors.items()},
            {k: v.astype(dtype) for k, v in self.ema_tensors.items()},
            dict(self.train_meta),
        )

    def same_weights(self, other: "Checkpoint") -> bool:
        return all(
            np.array_equal(self.tensors[k], other.tensors.get(k))
            and np.array_equal(self.ema_tensors[k], other.ema_tensors.get(k))
            for k in self.tensors
        ) and set(self.tensors) == set(other.tensors)


def to_bytes(ckpt: Checkpoint) -> bytes:
    ckpt.validate()
    names = sorted(ckpt.tensors)
    entries = [(n, ckpt.tensors[n]) for n in names] + [
        (n + ".ema", ckpt.ema_tensors[n]) for n in names
    ]
    directory = []
    chunks = []
    offset = 0
    for name, value in entries:
        data = np.ascontiguousarray(value, dtype=FILE_DTYPE).tobytes()
        directory.append({"name": name, "shape": list(value.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)

    header = {
        "arch": asdict(ckpt.arch),
        "codec": ckpt.codec.to_list(),
        "format": Config.CHECKPOINT_FORMAT,
        "tensors": directory,
        "train_meta": ckpt.train_meta,
    }
    meta = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return MAGIC + meta.encode("utf-8") + b"\0" + b"".join(chunks)


def from_bytes(blob: bytes, source: str = "<bytes>") -> Checkpoint:
    from models.network import ArchSpec

    if not blob.startswith(MAGIC):
        raise CheckpointFormatError(f"{source}: not a {Config.CHECKPOINT_FORMAT} checkpoint")
    end = blob.find(b"\0", len(MAGIC))
    if end < 0:
        raise CheckpointFormatError(f"{source}: missing header terminator")
    try:
        header = json.loads(blob[len(MAGIC) : end].decode("utf-8"))
        arch_fields = dict(header["arch"])
        arch_fields["conv_filters"] = tuple(arch_fields["conv_filters"])
        arch = ArchSpec(**arch_fields)
        codec = Codec(tuple(header["codec"]))
        directory = header["tensors"]
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointFormatError(f"{source}: bad header ({e})")

    data = memoryview(blob)[end + 1 :]
    tensors: Dict[str, np.ndarray] = {}
    ema: Dict[str, np.ndarray] = {}
    for entry in directory:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        stop = start + count * FILE_DTYPE.itemsize
        if stop > len(data):
            raise CheckpointFormatError(f"{source}: tensor {entry['name']} truncated")
        value = np.frombuffer(data[start:stop], dtype=FILE_DTYPE).astype(np.float32).reshape(shape)
        name = entry["name"]
        if name.endswith(".ema"):
            ema[name[: -len(".ema")]] = value
        else:
            tensors[name] = value

    ckpt = Checkpoint(arch, codec, tensors, ema, header.get("train_meta", {}))
    ckpt.validate()
    return ckpt


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    with open(path, "wb") as f:
        f.write(to_bytes(ckpt))


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        return from_bytes(f.read(), path)
