"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"CPFG1"                       magic
    32 bytes                       SHA-256 digest of the resolved RunConfig
    u32                            tensor count
    per tensor:
        u32 + bytes                UTF-8 name
        u32                        rank
        u64 * rank                 dims
        f64 * prod(dims)           row-major values

Parameters come first, then Adam moments under ``<name>.m`` / ``<name>.v``,
then trainer bookkeeping under ``optim.*`` / ``trainer.*``.
"""

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Dict, List, Optional, Tuple, Union

import numpy as np

from copyforge.exceptions import CheckpointFormatError
from copyforge.logger import logger
from copyforge.network import ModelParameters
from copyforge.optim import OptimState

MAGIC = b"CPFG1"
DIGEST_SIZE = 32
_BOOKKEEPING = ("optim.", "trainer.")


@dataclass
class Checkpoint:
    digest: bytes
    params: ModelParameters
    optim: Optional[OptimState] = None
    extra: Dict[str, np.ndarray] = field(default_factory=dict)


def _write_tensor(handle: BinaryIO, name: str, value: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    array = np.asarray(value, dtype="<f8")
    handle.write(struct.pack("<I", len(encoded)))
    handle.write(encoded)
    handle.write(struct.pack("<I", array.ndim))
    for dim in array.shape:
        handle.write(struct.pack("<Q", dim))
    handle.write(array.tobytes(order="C"))


def save_checkpoint(
    params: ModelParameters,
    optim: Optional[OptimState],
    digest: bytes,
    path: Union[str, Path],
    extra: Optional[Dict[str, np.ndarray]] = None,
) -> Path:
    """Write atomically: a temp file is renamed over ``path`` once complete."""
    if len(digest) != DIGEST_SIZE:
        raise CheckpointFormatError("Config digest must be 32 bytes", path=str(path), reason="digest")
    entries: List[Tuple[str, np.ndarray]] = [(name, params[name]) for name in params.names()]
    if optim is not None:
        entries += [(f"{name}.m", optim.m[name]) for name in params.names()]
        entries += [(f"{name}.v", optim.v[name]) for name in params.names()]
        entries.append(("optim.step", np.array(float(optim.step))))
    for name, value in (extra or {}).items():
        if not name.startswith(_BOOKKEEPING):
            raise CheckpointFormatError(f"Extra entry '{name}' needs a trainer./optim. prefix", path=str(path))
        entries.append((name, np.asarray(value, dtype=np.float64)))

    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = target.with_name(target.name + ".tmp")
    with open(tmp, "wb") as handle:
        handle.write(MAGIC)
        handle.write(digest)
        handle.write(struct.pack("<I", len(entries)))
        for name, value in entries:
            _write_tensor(handle, name, value)
    os.replace(tmp, target)
    logger.debug(f"Checkpoint saved to {target} ({len(entries)} tensors)")
    return target


class _Reader:
    def __init__(self, data: bytes, path: str) -> None:
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError("Checkpoint is truncated", path=self.path, reason="truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> int:
        return int(struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0])


def read_tensors(path: Union[str, Path]) -> Tuple[bytes, Dict[str, np.ndarray]]:
    """Raw (digest, ordered name -> array) view of a checkpoint file."""
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointFormatError(f"Cannot read checkpoint: {e}", path=str(path), reason="io")
    reader = _Reader(data, str(path))
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointFormatError("Bad magic bytes", path=str(path), reason="magic")
    digest = reader.take(DIGEST_SIZE)
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(reader.unpack("<I")):
        try:
            name = reader.take(reader.unpack("<I")).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointFormatError("Tensor name is not UTF-8", path=str(path), reason="name")
        shape = tuple(reader.unpack("<Q") for _ in range(reader.unpack("<I")))
        count = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(reader.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        tensors[name] = values
    if reader.pos != len(data):
        raise CheckpointFormatError("Trailing bytes after last tensor", path=str(path), reason="length")
    return digest, tensors


def load_checkpoint(path: Union[str, Path], expected_digest: Optional[bytes] = None) -> Checkpoint:
    digest, tensors = read_tensors(path)
    if expected_digest is not None and digest != expected_digest:
        raise CheckpointFormatError("Checkpoint was written under a different config", path=str(path), reason="digest")

    def is_moment(name: str) -> bool:
        base = name[:-2]
        return name.endswith((".m", ".v")) and base in tensors and f"{base}.m" in tensors and f"{base}.v" in tensors

    params = {
        name: value
        for name, value in tensors.items()
        if not name.startswith(_BOOKKEEPING) and not is_moment(name)
    }
    optim: Optional[OptimState] = None
    if "optim.step" in tensors:
        missing = [name for name in params if f"{name}.m" not in tensors or f"{name}.v" not in tensors]
        if missing:
            raise CheckpointFormatError(f"Missing Adam moments for {missing[0]}", path=str(path), reason="moments")
        optim = OptimState(
            m={name: tensors[f"{name}.m"] for name in params},
            v={name: tensors[f"{name}.v"] for name in params},
            step=int(tensors["optim.step"].item()),
        )
    extra = {name: value for name, value in tensors.items() if name.startswith("trainer.")}
    return Checkpoint(digest=digest, params=ModelParameters(params), optim=optim, extra=extra)
