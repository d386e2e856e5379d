"""Little-endian binary checkpoints of named float64 blocks.

Layout: b"DISA", u32 format version, then repeated blocks of
u32 name length, UTF-8 name, u32 rank, rank x u32 dims, raw <f8 values.
Names are prefixed by group ("backbone/", "prompts/", "prototypes").
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DISA"
VERSION = 1


def write_checkpoint(path: str | Path, blocks: dict[str, np.ndarray]) -> None:
    """Write a new checkpoint; an existing file is never overwritten."""
    with open(path, "xb") as fh:
        fh.write(MAGIC + struct.pack("<I", VERSION))
        for name in sorted(blocks):
            arr = np.ascontiguousarray(blocks[name], dtype="<f8")
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos, out = 8, {}
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            name = buf[pos + 4:pos + 4 + n].decode()
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", buf, pos)
            dims = struct.unpack_from(f"<{rank}I", buf, pos + 4)
            pos += 4 + 4 * rank
            count = int(np.prod(dims)) if rank else 1
            out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * count
    except (struct.error, ValueError) as exc:
        raise ValueError(f"{path}: truncated or corrupt checkpoint ({exc})") from None
    return out


def group(blocks: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    p = prefix.rstrip("/") + "/"
    return {k[len(p):]: v for k, v in blocks.items() if k.startswith(p)}


def prefixed(prefix: str, blocks: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v for k, v in blocks.items()}


def prototype_blocks(table) -> dict[str, np.ndarray]:
    return {"prototypes": table.means,
            "prototypes/class_ids": np.asarray(table.class_ids, dtype=np.float64),
            "prototypes/counts": np.asarray(table.counts, dtype=np.float64)}


def load_prototypes(blocks: dict[str, np.ndarray]):
    from .losses import PrototypeTable

    if "prototypes" not in blocks:
        return None
    return PrototypeTable([int(c) for c in blocks["prototypes/class_ids"]], blocks["prototypes"],
                          [int(c) for c in blocks["prototypes/counts"]])
