"""
Checkpoint Module

Binary checkpoint files: an 8-byte magic, a 4-byte little-endian header
length, a UTF-8 JSON manifest, then raw little-endian tensor payloads in
manifest order. The manifest carries the format version, config hash,
vocabulary layout, model shape, tensor directory, freeze sets, epoch
counter, RNG state and optimizer step counts.
"""

import json
import os
import struct
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from errors import (
    CheckpointError, CheckpointShapeError, CheckpointTruncatedError, CheckpointVersionError,
)
from optimizer import Adam
from transformer import ParameterStore, TransformerConfig
from vocab import VocabLayout


MAGIC = b"PLM4JOB1"
VERSION = 1
_HEADER_LENGTH = struct.Struct("<I")


@dataclass
class Checkpoint:
    """Decoded checkpoint: manifest plus tensors in saved order."""

    manifest: Dict
    arrays: Dict[str, np.ndarray]

    @property
    def epoch(self) -> int:
        return int(self.manifest["epoch"])

    @property
    def config_hash(self) -> str:
        return self.manifest["config_hash"]

    @property
    def layout(self) -> VocabLayout:
        return VocabLayout.from_manifest(self.manifest["vocab"])

    @property
    def model_config(self) -> TransformerConfig:
        return TransformerConfig(**self.manifest["model"])

    def parameter_arrays(self) -> Dict[str, np.ndarray]:
        return {k: v for k, v in self.arrays.items() if not k.startswith("optim.")}

    def optimizer_arrays(self) -> Dict[str, np.ndarray]:
        return {k: v for k, v in self.arrays.items() if k.startswith("optim.")}


@contextmanager
def _atomic_write(path: Path):
    """Write to a sibling temp file and move it into place only on success."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    f = open(tmp, "wb")
    try:
        yield f
        f.close()
        os.replace(tmp, path)
    except Exception:
        f.close()
        tmp.unlink(missing_ok=True)
        raise


def save_checkpoint(path: str, params: ParameterStore, config_hash: str, epoch: int,
                    rng: Optional[np.random.Generator] = None, optimizer: Optional[Adam] = None,
                    extra: Optional[Dict] = None) -> None:
    """
    Save parameters (and optionally optimizer moments and RNG state).

    Args:
        path: Destination file
        params: Parameter store
        config_hash: Hash of the run configuration
        epoch: Number of completed epochs
        rng: Generator whose state is restored on resume
        optimizer: Optimizer whose moments are saved as ``optim.*`` tensors
        extra: Additional JSON-serializable manifest fields (phase, splits, ...)
    """
    arrays: Dict[str, np.ndarray] = dict(params.state())
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())

    directory = []
    payloads = []
    for name, array in arrays.items():
        little = np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<"))
        directory.append({"name": name, "shape": list(array.shape), "dtype": array.dtype.name,
                          "nbytes": little.nbytes})
        payloads.append(little.tobytes())

    manifest = {
        "version": VERSION,
        "config_hash": config_hash,
        "epoch": epoch,
        "vocab": params.layout.to_manifest(),
        "model": asdict(params.config),
        "frozen": sorted(params.frozen),
        "fixed": sorted(params.fixed),
        "tensors": directory,
        "rng_state": rng.bit_generator.state if rng is not None else None,
        "optim_steps": dict(optimizer.steps) if optimizer is not None else {},
    }
    manifest.update(extra or {})
    header = json.dumps(manifest).encode("utf-8")

    with _atomic_write(Path(path)) as f:
        f.write(MAGIC)
        f.write(_HEADER_LENGTH.pack(len(header)))
        f.write(header)
        for payload in payloads:
            f.write(payload)


def load_checkpoint(path: str) -> Checkpoint:
    """
    Read and verify a checkpoint file.

    Raises:
        CheckpointError: If the file is missing or not a checkpoint
        CheckpointVersionError: If the format version is unknown
        CheckpointTruncatedError: If the header or payloads are short (or long)
        CheckpointShapeError: If a payload size disagrees with its declared shape
    """
    if not Path(path).exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    data = Path(path).read_bytes()
    prefix = len(MAGIC) + _HEADER_LENGTH.size
    if len(data) < prefix:
        raise CheckpointTruncatedError(f"{path}: file ends inside the header")
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")

    (header_length,) = _HEADER_LENGTH.unpack_from(data, len(MAGIC))
    if len(data) < prefix + header_length:
        raise CheckpointTruncatedError(f"{path}: file ends inside the manifest")
    try:
        manifest = json.loads(data[prefix:prefix + header_length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable manifest ({e})") from e

    if manifest.get("version") != VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint version {manifest.get('version')!r}, this build reads {VERSION}"
        )

    arrays: Dict[str, np.ndarray] = {}
    offset = prefix + header_length
    for entry in manifest["tensors"]:
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        shape = tuple(entry["shape"])
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if entry["nbytes"] != expected:
            raise CheckpointShapeError(
                f"{path}: tensor {entry['name']} declares {entry['nbytes']} bytes for shape {shape}"
            )
        if offset + expected > len(data):
            raise CheckpointTruncatedError(f"{path}: payload of {entry['name']} is cut short")
        array = np.frombuffer(data, dtype=dtype, count=expected // dtype.itemsize, offset=offset)
        arrays[entry["name"]] = array.reshape(shape).astype(dtype.newbyteorder("="))
        offset += expected

    if offset != len(data):
        raise CheckpointTruncatedError(f"{path}: {len(data) - offset} trailing bytes after payloads")
    return Checkpoint(manifest=manifest, arrays=arrays)


def restore_parameters(checkpoint: Checkpoint) -> ParameterStore:
    """Rebuild the ParameterStore saved in a checkpoint."""
    return ParameterStore.from_arrays(
        checkpoint.model_config,
        checkpoint.layout,
        checkpoint.parameter_arrays(),
        frozen=checkpoint.manifest.get("frozen", []),
        fixed=checkpoint.manifest.get("fixed", []),
    )


def load_into(params: ParameterStore, checkpoint: Checkpoint) -> None:
    """
    Copy checkpoint tensors into an existing store.

    Raises:
        CheckpointShapeError: On a missing tensor or a shape mismatch
    """
    arrays = checkpoint.parameter_arrays()
    for name, tensor in params.items():
        if name not in arrays:
            raise CheckpointShapeError(f"checkpoint has no tensor {name}")
        if arrays[name].shape != tensor.shape:
            raise CheckpointShapeError(
                f"tensor {name}: checkpoint shape {arrays[name].shape}, model shape {tensor.shape}"
            )
    params.load_state(arrays)


def restore_optimizer(checkpoint: Checkpoint, optimizer: Adam) -> None:
    optimizer.load_state(checkpoint.optimizer_arrays(), checkpoint.manifest.get("optim_steps", {}))


def restore_rng(checkpoint: Checkpoint) -> Optional[np.random.Generator]:
    state = checkpoint.manifest.get("rng_state")
    if state is None:
        return None
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng
