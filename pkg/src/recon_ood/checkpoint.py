"""Binary parameter checkpoint format.

Layout: magic ``ROOD``, format version (u16), then one record per array:
name length (u16), utf-8 name bytes, rank (u8), each dim as u32, then the
raw little-endian float32 payload.  All integers little-endian.  Metadata
travels as ordinary named float32 records (``meta/...``), so the format
stays a flat list of arrays and round-trips bit-exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"ROOD"
FORMAT_VERSION = 1


class CheckpointFormatError(ValueError):
    """Raised when a file does not parse as a parameter checkpoint."""


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    """Write named float32 arrays to ``path`` in record order."""
    path = Path(path)
    chunks = [MAGIC, struct.pack("<H", FORMAT_VERSION)]
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype="<f4")
        name_bytes = name.encode("utf-8")
        if len(name_bytes) > 0xFFFF:
            raise CheckpointFormatError(f"parameter name too long: {name!r}")
        if a.ndim > 0xFF:
            raise CheckpointFormatError(f"rank {a.ndim} exceeds format limit")
        chunks.append(struct.pack("<H", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack("<B", a.ndim))
        chunks.append(struct.pack(f"<{a.ndim}I", *a.shape))
        chunks.append(a.tobytes())
    path.write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back into an ordered name -> float32 array dict."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported format version {version}")
    pos = 6
    out: dict[str, np.ndarray] = {}
    while pos < len(blob):
        try:
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            payload = blob[pos : pos + 4 * count]
            if len(payload) != 4 * count:
                raise struct.error("truncated payload")
            pos += 4 * count
        except (struct.error, UnicodeDecodeError) as exc:
            raise CheckpointFormatError(f"{path}: truncated or corrupt record") from exc
        arr = np.frombuffer(payload, dtype="<f4").reshape(dims)
        out[name] = arr.astype(np.float32, copy=True)
    return out
