"""Binary tensor and checkpoint containers.

Two little-endian formats are defined here:

* ``GDRT`` tensor block: magic ``b"GDRT"``, version byte, dtype code byte,
  rank byte, ``rank`` u64 shape entries, then the row-major payload.
* ``GDRC`` checkpoint container: magic ``b"GDRC"``, version byte, u64 step
  counter, a UTF-8 JSON config snapshot, and named GDRT entries.

Round trips are bitwise: ``load(save(x)) == x`` down to the payload bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO

import numpy as np

TENSOR_MAGIC = b"GDRT"
CHECKPOINT_MAGIC = b"GDRC"
FORMAT_VERSION = 1

# dtype code table; payloads are always little-endian.
_CODE_TO_DTYPE = {
    0: np.dtype("<u1"),
    1: np.dtype("<i4"),
    2: np.dtype("<i8"),
    3: np.dtype("<f4"),
    4: np.dtype("<f8"),
}
_DTYPE_TO_CODE = {dt.newbyteorder("="): code for code, dt in _CODE_TO_DTYPE.items()}


def _dtype_code(dtype: np.dtype) -> int:
    key = np.dtype(dtype).newbyteorder("=")
    if key not in _DTYPE_TO_CODE:
        supported = sorted(str(dt) for dt in _DTYPE_TO_CODE)
        raise ValueError(f"unsupported dtype {dtype!r}; supported: {supported}")
    return _DTYPE_TO_CODE[key]


def write_tensor(fp: BinaryIO, array: np.ndarray) -> None:
    """Append one GDRT block for `array` to an open binary stream."""
    arr = np.ascontiguousarray(array)
    code = _dtype_code(arr.dtype)
    if arr.ndim > 255:
        raise ValueError("rank above 255 not representable")
    fp.write(TENSOR_MAGIC)
    fp.write(struct.pack("<BBB", FORMAT_VERSION, code, arr.ndim))
    for dim in arr.shape:
        fp.write(struct.pack("<Q", dim))
    fp.write(arr.astype(_CODE_TO_DTYPE[code], copy=False).tobytes(order="C"))


def _read_exact(fp: BinaryIO, size: int) -> bytes:
    data = fp.read(size)
    if len(data) != size:
        raise ValueError(f"truncated stream: wanted {size} bytes, got {len(data)}")
    return data


def read_tensor(fp: BinaryIO) -> np.ndarray:
    """Read one GDRT block from an open binary stream."""
    magic = _read_exact(fp, 4)
    if magic != TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    version, code, rank = struct.unpack("<BBB", _read_exact(fp, 3))
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported tensor format version {version}")
    if code not in _CODE_TO_DTYPE:
        raise ValueError(f"unknown dtype code {code}")
    shape = tuple(
        struct.unpack("<Q", _read_exact(fp, 8))[0] for _ in range(rank)
    )
    dtype = _CODE_TO_DTYPE[code]
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    payload = _read_exact(fp, count * dtype.itemsize)
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def write_tensor_file(path: str | Path, arrays: list[np.ndarray]) -> None:
    """Write a file of concatenated GDRT blocks (entry order is the caller's contract)."""
    with open(path, "wb") as fp:
        for arr in arrays:
            write_tensor(fp, arr)


def read_tensor_file(path: str | Path) -> list[np.ndarray]:
    """Read every GDRT block in a file, in order."""
    arrays = []
    with open(path, "rb") as fp:
        while fp.peek(1) if hasattr(fp, "peek") else True:
            head = fp.read(1)
            if not head:
                break
            fp.seek(-1, 1)
            arrays.append(read_tensor(fp))
    return arrays


@dataclass
class Checkpoint:
    """Named tensors plus a config snapshot and a step counter."""

    step: int = 0
    config: dict = field(default_factory=dict)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        config_blob = json.dumps(self.config, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fp:
            fp.write(CHECKPOINT_MAGIC)
            fp.write(struct.pack("<B", FORMAT_VERSION))
            fp.write(struct.pack("<Q", self.step))
            fp.write(struct.pack("<I", len(config_blob)))
            fp.write(config_blob)
            fp.write(struct.pack("<I", len(self.tensors)))
            for name, arr in self.tensors.items():
                blob = name.encode("utf-8")
                fp.write(struct.pack("<H", len(blob)))
                fp.write(blob)
                write_tensor(fp, arr)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        with open(path, "rb") as fp:
            magic = _read_exact(fp, 4)
            if magic != CHECKPOINT_MAGIC:
                raise ValueError(f"bad checkpoint magic {magic!r}")
            (version,) = struct.unpack("<B", _read_exact(fp, 1))
            if version != FORMAT_VERSION:
                raise ValueError(f"unsupported checkpoint version {version}")
            (step,) = struct.unpack("<Q", _read_exact(fp, 8))
            (config_len,) = struct.unpack("<I", _read_exact(fp, 4))
            config = json.loads(_read_exact(fp, config_len).decode("utf-8"))
            (count,) = struct.unpack("<I", _read_exact(fp, 4))
            tensors: dict[str, np.ndarray] = {}
            for _ in range(count):
                (name_len,) = struct.unpack("<H", _read_exact(fp, 2))
                name = _read_exact(fp, name_len).decode("utf-8")
                tensors[name] = read_tensor(fp)
        return cls(step=step, config=config, tensors=tensors)


def state_dict_to_tensors(state: dict) -> dict[str, np.ndarray]:
    """Convert a torch state dict into checkpoint-friendly numpy arrays."""
    out: dict[str, np.ndarray] = {}
    for name, value in state.items():
        arr = value.detach().cpu().numpy()
        if arr.dtype == np.float16:
            arr = arr.astype(np.float32)
        out[name] = arr
    return out
