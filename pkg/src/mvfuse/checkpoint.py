"""Binary checkpoint format and checkpoint averaging.

Layout (little-endian)::

    b"MVF1" | u32 version | u32 metadata length | metadata (UTF-8 JSON)
    then per tensor: u32 name length | name | u32 rank | u32 dims... | f8 data
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, CorpusIOError

MAGIC = b"MVF1"
VERSION = 1


class IncompatibleCheckpoints(ConfigError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str | None:
        return self.meta.get("config_hash")


def encode(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode()
    out = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta]
    for name, arr in ckpt.params.items():
        arr = np.asarray(arr, dtype="<f8")
        nb = name.encode()
        out.append(struct.pack("<I", len(nb)) + nb)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.tobytes(order="C"))
    return b"".join(out)


def decode(buf: bytes, where: str = "<bytes>") -> Checkpoint:
    if buf[:4] != MAGIC:
        raise CorpusIOError(f"{where}: not a checkpoint (bad magic bytes)")
    try:
        version, mlen = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise CorpusIOError(f"{where}: unsupported checkpoint version {version}")
        off = 12
        meta = json.loads(buf[off:off + mlen].decode())
        off += mlen
        params = {}
        while off < len(buf):
            (nlen,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + nlen].decode()
            off += nlen
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            params[name] = np.frombuffer(buf, "<f8", count, off).reshape(dims).astype(np.float64)
            off += 8 * count
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CorpusIOError(f"{where}: corrupt checkpoint ({exc})") from None
    return Checkpoint(params, meta)


def save(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(encode(ckpt))


def load(path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CorpusIOError(f"{path}: cannot read checkpoint ({exc.strerror or exc})") from None
    return decode(buf, str(path))


def average(ckpts: list[Checkpoint]) -> Checkpoint:
    """Elementwise mean of every parameter tensor."""
    if not ckpts:
        raise ConfigError("no checkpoints to average")
    hashes = {c.config_hash for c in ckpts}
    if len(hashes) != 1:
        raise IncompatibleCheckpoints(f"checkpoints come from different configs: {sorted(map(str, hashes))}")
    names = list(ckpts[0].params)
    for c in ckpts[1:]:
        if list(c.params) != names:
            raise IncompatibleCheckpoints("checkpoints have different parameter sets")
    params = {}
    for name in names:
        # mean taken as offsets from the first tensor: identical inputs average exactly
        ref = ckpts[0].params[name]
        acc = np.zeros_like(ref)
        for c in ckpts[1:]:
            acc = acc + (c.params[name] - ref)
        params[name] = ref + acc / len(ckpts)
    epochs = [c.meta.get("epoch") for c in ckpts]
    meta = dict(ckpts[0].meta)
    meta.update(source_epochs=epochs, averaged=len(ckpts),
                avg_window_end=max((e for e in epochs if e is not None), default=None))
    return Checkpoint(params, meta)


def average_checkpoints(paths) -> Checkpoint:
    return average([load(p) for p in paths])
