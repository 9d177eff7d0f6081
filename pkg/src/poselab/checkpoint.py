"""Binary checkpoint files for trained networks.

Layout (little-endian):
  magic 'PFCK', u32 version,
  u32 meta count, then (u32 len, utf-8 key, u32 len, utf-8 value) pairs,
  u32 tensor count, then per tensor:
      u32 name length, utf-8 name, u32 rank, u32 x rank dims, f64 payload.
Tensors are written in sorted name order so files are byte-deterministic.
"""

import struct

import numpy as np

MAGIC = b"PFCK"
VERSION = 1


def _write_str(fh, s: str) -> None:
    raw = s.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _read_str(fh) -> str:
    (n,) = struct.unpack("<I", fh.read(4))
    return fh.read(n).decode("utf-8")


def save_checkpoint(path, meta: dict, tensors: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(meta)))
        for key in sorted(meta.keys()):
            _write_str(fh, key)
            _write_str(fh, str(meta[key]))
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors.keys()):
            arr = np.asarray(tensors[name], dtype=np.float64)
            _write_str(fh, name)
            fh.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.astype("<f8").tobytes(order="C"))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError("not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (n_meta,) = struct.unpack("<I", fh.read(4))
        meta = {}
        for _ in range(n_meta):
            key = _read_str(fh)
            meta[key] = _read_str(fh)
        (n_tensors,) = struct.unpack("<I", fh.read(4))
        tensors = {}
        for _ in range(n_tensors):
            name = _read_str(fh)
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            count = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(fh.read(8 * count), dtype="<f8")
            tensors[name] = data.reshape(dims).astype(np.float64)
    return meta, tensors
