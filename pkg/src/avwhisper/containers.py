"""Binary containers for lip-crop stacks and cached log-mel features.

All integers are little-endian. Payloads are C-order arrays.

Lip stack (``.lips``)::

    offset  size  field
    0       4     magic b"LIPS"
    4       1     version (1)
    5       1     dtype code (1 = float32, 2 = uint8)
    6       2     frame height (uint16)
    8       2     frame width (uint16)
    10      2     reserved, zero
    12      4     frame count (uint32)
    16      ...   frames, count * height * width items

Feature blob (``.mel``)::

    offset  size  field
    0       4     magic b"LMEL"
    4       1     version (1)
    5       1     dtype code (1 = float32)
    6       2     reserved, zero
    8       4     time frames (uint32)
    12      4     mel bins (uint32)
    16      ...   features, time * n_mels items
    end-32  32    SHA-256 digest of the feature bytes
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("u1")}

_LIPS_HEADER = struct.Struct("<4sBBHHHI")
_MEL_HEADER = struct.Struct("<4sBBHII")


class ContainerError(ValueError):
    pass


def _code_for(arr: np.ndarray) -> int:
    if arr.dtype == np.float32:
        return 1
    if arr.dtype == np.uint8:
        return 2
    raise ContainerError(f"unsupported dtype {arr.dtype}")


def write_lips(path: str | Path, frames: np.ndarray) -> None:
    frames = np.asarray(frames)
    if frames.ndim != 3:
        raise ContainerError(f"expected (T, H, W) frames, got shape {frames.shape}")
    code = _code_for(frames)
    t, h, w = frames.shape
    payload = np.ascontiguousarray(frames, dtype=_DTYPES[code]).tobytes()
    Path(path).write_bytes(_LIPS_HEADER.pack(b"LIPS", 1, code, h, w, 0, t) + payload)


def read_lips(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _LIPS_HEADER.size:
        raise ContainerError(f"{path}: truncated header")
    magic, version, code, h, w, _, t = _LIPS_HEADER.unpack_from(data)
    if magic != b"LIPS" or version != 1 or code not in _DTYPES:
        raise ContainerError(f"{path}: not a version-1 lip stack")
    dtype = _DTYPES[code]
    expected = t * h * w * dtype.itemsize
    body = data[_LIPS_HEADER.size :]
    if len(body) != expected:
        raise ContainerError(f"{path}: payload is {len(body)} bytes, header implies {expected}")
    return np.frombuffer(body, dtype=dtype).reshape(t, h, w).copy()


def write_features(path: str | Path, features: np.ndarray) -> None:
    features = np.ascontiguousarray(features, dtype="<f4")
    if features.ndim != 2:
        raise ContainerError(f"expected (time, n_mels) features, got shape {features.shape}")
    payload = features.tobytes()
    header = _MEL_HEADER.pack(b"LMEL", 1, 1, 0, features.shape[0], features.shape[1])
    Path(path).write_bytes(header + payload + hashlib.sha256(payload).digest())


def read_features(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _MEL_HEADER.size + 32:
        raise ContainerError(f"{path}: truncated")
    magic, version, code, _, t, n_mels = _MEL_HEADER.unpack_from(data)
    if magic != b"LMEL" or version != 1 or code != 1:
        raise ContainerError(f"{path}: not a version-1 feature blob")
    payload = data[_MEL_HEADER.size : -32]
    if len(payload) != t * n_mels * 4:
        raise ContainerError(f"{path}: payload size does not match header")
    if hashlib.sha256(payload).digest() != data[-32:]:
        raise ContainerError(f"{path}: checksum mismatch")
    return np.frombuffer(payload, dtype="<f4").reshape(t, n_mels).copy()
