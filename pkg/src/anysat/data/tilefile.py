"""Binary tile files and dataset directories.

Layout of one tile file::

    b"ANYSATTL" | u32 version | u64 header length | UTF-8 JSON header | payload

The header lists every array (modality data, then pixel labels) with its
shape and byte offset into the payload; arrays are little-endian float32.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"ANYSATTL"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class TileFormatError(ValueError):
    pass


class BadMagicError(TileFormatError):
    pass


class CorruptHeaderError(TileFormatError):
    pass


class TileShapeError(TileFormatError):
    pass


@dataclass
class TileLabels:
    classes_present: list[int] = field(default_factory=list)
    dominant: int | None = None
    pixel: np.ndarray | None = None
    pixel_resolution: float | None = None

    def __eq__(self, other):
        if not isinstance(other, TileLabels):
            return NotImplemented
        same_pixels = (self.pixel is None and other.pixel is None) or (
            self.pixel is not None and other.pixel is not None and np.array_equal(self.pixel, other.pixel)
        )
        return (
            self.classes_present == other.classes_present
            and self.dominant == other.dominant
            and self.pixel_resolution == other.pixel_resolution
            and same_pixels
        )


@dataclass
class TileSample:
    dataset: str
    tile_id: int
    arrays: dict[str, np.ndarray]
    dates: dict[str, np.ndarray]
    labels: TileLabels | None = None

    def __eq__(self, other):
        if not isinstance(other, TileSample):
            return NotImplemented
        return (
            self.dataset == other.dataset
            and self.tile_id == other.tile_id
            and self.arrays.keys() == other.arrays.keys()
            and all(np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays)
            and self.dates.keys() == other.dates.keys()
            and all(np.array_equal(self.dates[k], other.dates[k]) for k in self.dates)
            and self.labels == other.labels
        )

    def T(self, modality: str) -> int:
        return self.arrays[modality].shape[2]


def tile_bytes(sample: TileSample, extra: dict | None = None) -> bytes:
    chunks: list[bytes] = []
    offset = 0
    entries = []
    for name, arr in sample.arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entry = {"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        if name in sample.dates:
            entry["dates"] = [int(d) for d in sample.dates[name]]
        entries.append(entry)
        chunks.append(raw)
        offset += len(raw)
    header = {"dataset": sample.dataset, "tile_id": int(sample.tile_id), "modalities": entries}
    if sample.labels is not None:
        lab = sample.labels
        lh = {"classes_present": [int(c) for c in lab.classes_present], "dominant": lab.dominant}
        if lab.pixel is not None:
            raw = np.ascontiguousarray(lab.pixel, dtype="<f4").tobytes()
            lh["pixel"] = {
                "shape": list(lab.pixel.shape),
                "resolution": lab.pixel_resolution,
                "offset": offset,
                "nbytes": len(raw),
            }
            chunks.append(raw)
            offset += len(raw)
        header["labels"] = lh
    if extra:
        header.update(extra)
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(hb)) + hb + b"".join(chunks)


def store_tile(path: str | Path, sample: TileSample, extra: dict | None = None) -> None:
    Path(path).write_bytes(tile_bytes(sample, extra))


def _read_array(payload: bytes, entry: dict, what: str) -> np.ndarray:
    off, nbytes, shape = entry["offset"], entry["nbytes"], tuple(entry["shape"])
    if off < 0 or off + nbytes > len(payload) or nbytes != 4 * int(np.prod(shape)):
        raise CorruptHeaderError(f"{what}: byte range inconsistent with file size or shape")
    return np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=off).reshape(shape).astype(np.float32)


def parse_tile(blob: bytes) -> tuple[TileSample, dict]:
    if len(blob) < _PREFIX.size:
        if blob[: len(MAGIC)] != MAGIC[: len(blob)]:
            raise BadMagicError("not a tile file (bad magic bytes)")
        raise CorruptHeaderError("file truncated inside the fixed prefix")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise BadMagicError(f"not a tile file (magic {magic!r})")
    if version != VERSION:
        raise TileFormatError(f"unsupported tile format version {version}")
    start = _PREFIX.size
    if start + hlen > len(blob):
        raise CorruptHeaderError("file truncated inside the JSON header")
    try:
        header = json.loads(blob[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptHeaderError(f"unreadable header: {exc}") from None
    payload = blob[start + hlen :]
    try:
        arrays, dates = {}, {}
        for entry in header["modalities"]:
            arrays[entry["name"]] = _read_array(payload, entry, entry["name"])
            if "dates" in entry:
                dates[entry["name"]] = np.asarray(entry["dates"], dtype=np.int64)
        labels = None
        if "labels" in header:
            lh = header["labels"]
            pixel, res = None, None
            if "pixel" in lh:
                pixel = _read_array(payload, lh["pixel"], "pixel labels").astype(np.int64)
                res = lh["pixel"]["resolution"]
            labels = TileLabels(list(lh["classes_present"]), lh["dominant"], pixel, res)
        sample = TileSample(header["dataset"], int(header["tile_id"]), arrays, dates, labels)
    except (KeyError, TypeError) as exc:
        raise CorruptHeaderError(f"header missing field: {exc}") from None
    return sample, header


def load_tile(path: str | Path, dataset=None) -> TileSample:
    """Read a tile file; with a validated ``dataset``, also check shapes."""
    sample, _ = parse_tile(Path(path).read_bytes())
    if dataset is not None:
        check_tile_shapes(sample, dataset)
    return sample


def check_tile_shapes(sample: TileSample, dataset) -> None:
    for m in dataset.spec.modalities:
        if m not in sample.arrays:
            raise TileShapeError(f"tile {sample.tile_id}: modality {m!r} missing")
        ms = dataset.modalities[m]
        arr = sample.arrays[m]
        side = dataset.spatial_side(m)
        t_min, t_max = ms.T_range
        if arr.ndim != 4 or arr.shape[:2] != (side, side) or arr.shape[3] != dataset.stored_channels(m):
            raise TileShapeError(
                f"tile {sample.tile_id}/{m}: shape {arr.shape} does not match "
                f"({side}, {side}, T, {dataset.stored_channels(m)})"
            )
        if not t_min <= arr.shape[2] <= t_max:
            raise TileShapeError(f"tile {sample.tile_id}/{m}: T={arr.shape[2]} outside {ms.T_range}")
        d = sample.dates.get(m)
        if d is not None and (len(d) != arr.shape[2] or np.any(np.diff(d) <= 0)):
            raise TileShapeError(f"tile {sample.tile_id}/{m}: dates must be strictly increasing, one per step")
