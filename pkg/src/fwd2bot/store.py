"""Flat-file store of per-image compressed tokens.

Layout (all integers little-endian)::

    magic "F2BSTOR\\0" (8) | version u16 | dtype u8 | pad u8 | k_summary u32 | d u32 | count u64
    count x [ id_len u16 | id (UTF-8) | payload k_summary*d elements ]
    crc32 u32 over every preceding byte

dtype 0 is IEEE half precision (2 bytes per element), 1 is float32.
"""

from __future__ import annotations

import struct
import warnings
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import Scene
from .errors import ConfigError, CorruptionError, IngestionError, StoreLookupError
from .inference import compress_scenes
from .model import Fwd2BotModel, ModelConfig

MAGIC = b"F2BSTOR\0"
VERSION = 1
HEADER = struct.Struct("<8sHBBIIQ")
DTYPES = {"half": (0, np.dtype("<f2")), "float32": (1, np.dtype("<f4"))}
CODES = {code: (name, dt) for name, (code, dt) in DTYPES.items()}
HALF_MAX = float(np.finfo(np.float16).max)


@dataclass(frozen=True)
class StoreHeader:
    version: int
    dtype: str
    k_summary: int
    d: int
    count: int

    @property
    def bytes_per_record_payload(self) -> int:
        return self.k_summary * self.d * DTYPES[self.dtype][1].itemsize


def write_store(path: str | Path, ids: Sequence[str], hc: torch.Tensor | np.ndarray, dtype: str = "half") -> None:
    """Write ``[N, k, d]`` compressed tokens under ``ids`` in the given order."""
    if dtype not in DTYPES:
        raise ConfigError(f"unknown store dtype {dtype!r}")
    arr = hc.detach().float().cpu().numpy() if isinstance(hc, torch.Tensor) else np.asarray(hc, np.float32)
    if arr.ndim != 3 or arr.shape[0] != len(ids):
        raise IngestionError(f"need one [k, d] payload per id; got {arr.shape} for {len(ids)} ids")
    if len(set(ids)) != len(ids):
        raise IngestionError("duplicate image id")
    code, dt = DTYPES[dtype]
    n, k, d = arr.shape if len(ids) else (0, *arr.shape[1:])
    parts = [HEADER.pack(MAGIC, VERSION, code, 0, k, d, len(ids))]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        payload = arr.astype(dt)
    for i, image_id in enumerate(ids):
        raw = image_id.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise IngestionError("image id longer than 65535 bytes")
        parts += [struct.pack("<H", len(raw)), raw, payload[i].tobytes()]
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body)))


def ingest(model: Fwd2BotModel, items: Sequence[tuple[str, Scene]], path: str | Path, dtype: str = "half") -> StoreHeader:
    """Compress every scene once and write the store."""
    ids = [i for i, _ in items]
    if len(set(ids)) != len(ids):
        raise IngestionError("duplicate image id")
    hc = compress_scenes(model, [s for _, s in items])
    if not len(items):
        hc = torch.zeros(0, model.cfg.k_summary, model.cfg.d_model)
    write_store(path, ids, hc, dtype)
    return StoreHeader(VERSION, dtype, model.cfg.k_summary, model.cfg.d_model, len(ids))


class Store:
    """Read-only view of a store file; the CRC is verified on open."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._data = self.path.read_bytes()
        data = self._data
        if len(data) < HEADER.size + 4:
            raise CorruptionError(f"{path}: truncated store")
        (crc,) = struct.unpack_from("<I", data, len(data) - 4)
        if zlib.crc32(data[:-4]) != crc:
            raise CorruptionError(f"{path}: CRC mismatch")
        magic, version, code, _, k, d, count = HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise CorruptionError(f"{path}: bad magic")
        if version != VERSION or code not in CODES:
            raise CorruptionError(f"{path}: unsupported version {version} or dtype {code}")
        name, self._dt = CODES[code]
        self.header = StoreHeader(version, name, k, d, count)
        size = self.header.bytes_per_record_payload
        self._offsets: dict[str, int] = {}
        self.ids: list[str] = []
        off = HEADER.size
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, off)
            image_id = data[off + 2: off + 2 + n].decode("utf-8")
            off += 2 + n
            if image_id in self._offsets:
                raise CorruptionError(f"{path}: duplicate id {image_id!r}")
            self._offsets[image_id] = off
            self.ids.append(image_id)
            off += size
        if off != len(data) - 4:
            raise CorruptionError(f"{path}: record section length mismatch")

    def __len__(self) -> int:
        return self.header.count

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._offsets

    def raw(self, image_id: str) -> bytes:
        if image_id not in self._offsets:
            raise StoreLookupError(f"lookup error: image id {image_id!r} not in store")
        off = self._offsets[image_id]
        return self._data[off: off + self.header.bytes_per_record_payload]

    def read(self, image_id: str) -> torch.Tensor:
        """Payload dequantized to float32, shape ``[k_summary, d]``."""
        arr = np.frombuffer(self.raw(image_id), dtype=self._dt).astype(np.float32)
        return torch.from_numpy(arr.reshape(self.header.k_summary, self.header.d))

    def read_all(self) -> dict[str, torch.Tensor]:
        return {i: self.read(i) for i in self.ids}

    def require_compatible(self, cfg: ModelConfig) -> None:
        if (self.header.k_summary, self.header.d) != (cfg.k_summary, cfg.d_model):
            raise ConfigError(
                f"config mismatch: store holds {self.header.k_summary}x{self.header.d} tokens, "
                f"checkpoint expects {cfg.k_summary}x{cfg.d_model}"
            )


def read(store: Store | str | Path, image_id: str) -> torch.Tensor:
    s = store if isinstance(store, Store) else Store(store)
    return s.read(image_id)


@dataclass(frozen=True)
class QuantizationReport:
    max_abs_error: float
    overflow_count: int


def quantization_report(hc: torch.Tensor | np.ndarray) -> QuantizationReport:
    """Worst absolute error of a float32 -> half -> float32 round trip.

    Values beyond the half range are counted and excluded from the error.
    """
    arr = hc.detach().float().cpu().numpy() if isinstance(hc, torch.Tensor) else np.asarray(hc, np.float32)
    if not np.isfinite(arr).all():
        raise ConfigError("quantization_report needs finite values")
    over = np.abs(arr) > HALF_MAX
    n_over = int(over.sum())
    if n_over:
        warnings.warn(f"{n_over} values exceed the half-precision range", RuntimeWarning, stacklevel=2)
    ok = arr[~over]
    with np.errstate(over="ignore"):
        err = np.abs(ok.astype(np.float16).astype(np.float32) - ok)
    return QuantizationReport(float(err.max()) if err.size else 0.0, n_over)


def storage_file_size(ids: Sequence[str], k: int, d: int, dtype: str = "half") -> int:
    """Exact file size for the given ids."""
    per = k * d * DTYPES[dtype][1].itemsize
    return HEADER.size + sum(2 + len(i.encode("utf-8")) + per for i in ids) + 4
