"""Binary checkpoint files.

Layout, all integers little-endian::

    magic   8 bytes   b"CTXRCKPT"
    version uint32
    hlen    uint64    byte length of the JSON header
    header  hlen      UTF-8 JSON, sorted keys, no whitespace
    data              every tensor as row-major '<f8', in header order

The header carries the run settings, the model configuration, the
vocabulary files (name relative to the checkpoint plus sha256), and each
tensor's name, shape and byte offset into the data block.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ContractError, Tensor
from .model import ModelConfig, ModelParams, param_shapes
from .text import Vocabulary

MAGIC = b"CTXRCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class Checkpoint:
    params: ModelParams
    run_config: dict = field(default_factory=dict)
    vocab_files: dict[str, dict] = field(default_factory=dict)
    version: int = VERSION


def to_bytes(ckpt: Checkpoint) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, t in ckpt.params.named():
        blob = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "dtype": "float64",
        "byteorder": "little",
        "model": ckpt.params.config.to_dict(),
        "run": ckpt.run_config,
        "vocab": ckpt.vocab_files,
        "tensors": entries,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, ckpt.version, len(hbytes)) + hbytes + b"".join(blobs)


def from_bytes(raw: bytes) -> Checkpoint:
    if len(raw) < _PREFIX.size:
        raise CheckpointError("file too short for a checkpoint header")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    config = ModelConfig(**header["model"])
    expected = param_shapes(config)
    data = raw[start + hlen:]
    names = [e["name"] for e in header["tensors"]]
    if names != list(expected):
        raise CheckpointError(f"tensor names {names} do not match the model layout {list(expected)}")
    tensors = {}
    for e in header["tensors"]:
        shape = tuple(e["shape"])
        if shape != expected[e["name"]]:
            raise CheckpointError(f"{e['name']}: stored shape {shape} != expected {expected[e['name']]}")
        if e["nbytes"] != 8 * int(np.prod(shape)) or e["offset"] + e["nbytes"] > len(data):
            raise CheckpointError(f"{e['name']}: data block truncated or inconsistent")
        arr = np.frombuffer(data, dtype="<f8", count=e["nbytes"] // 8, offset=e["offset"])
        tensors[e["name"]] = Tensor(arr.reshape(shape).astype(np.float64), requires_grad=True)
    if sum(e["nbytes"] for e in header["tensors"]) != len(data):
        raise CheckpointError("trailing bytes after the tensor data")
    return Checkpoint(ModelParams(config, tensors), header["run"], header["vocab"], version)


def save(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


def vocab_entry(vocab_path: str | Path, checkpoint_path: str | Path) -> dict:
    """Reference to a vocabulary file stored next to the checkpoint."""
    vocab_path, base = Path(vocab_path), Path(checkpoint_path).parent
    return {"file": str(vocab_path.relative_to(base)) if vocab_path.is_relative_to(base) else str(vocab_path),
            "sha256": file_sha256(vocab_path)}


def load_vocab(ckpt: Checkpoint, checkpoint_path: str | Path, role: str) -> Vocabulary:
    """Load and verify a referenced vocabulary against its hash and the model sizes."""
    ref = ckpt.vocab_files.get(role)
    if ref is None:
        raise ContractError(f"checkpoint has no {role} vocabulary reference")
    path = Path(checkpoint_path).parent / ref["file"]
    if not path.exists():
        raise ContractError(f"{role} vocabulary {path} not found")
    if file_sha256(path) != ref["sha256"]:
        raise ContractError(f"{role} vocabulary {path} does not match the checkpoint (sha256 differs)")
    vocab = Vocabulary.load(path)
    cfg = ckpt.params.config
    size = cfg.vocab_size if role == "report" else cfg.keyword_vocab_size
    if len(vocab) != size:
        raise ContractError(f"{role} vocabulary has {len(vocab)} entries, model expects {size}")
    return vocab
