"""Domain records and their on-disk formats.

Formats
-------
captions     UTF-8 JSON lines, one flat object per record.
embeddings   ``EMB1`` | u32 count | u32 dim | f32[count*dim], little endian;
             ids in a sidecar text file, one per line.
images       ``IMG1`` | u32 count | u32 C | u32 H | u32 W | f32 payload.
masks        ``MSK1`` | u32 count | u32 H | u32 W | u8 payload.
manifest     tab separated ``query_id neighbor_id similarity`` with a header.
labels       tab separated ``id label`` with a header.

Image and mask ids are not stored in the binary files; they travel in a
sidecar ids file exactly like embeddings.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, ParseError, ValidationError

EMB_MAGIC = b"EMB1"
IMG_MAGIC = b"IMG1"
MSK_MAGIC = b"MSK1"

_U32 = struct.Struct("<I")


@dataclass(frozen=True)
class CaptionRecord:
    id: str
    caption: str
    generated_caption: str | None = None
    itm_original: float | None = None
    itm_generated: float | None = None
    class_hint: str | None = None
    source: str | None = None

    def __post_init__(self):
        if not isinstance(self.id, str) or not self.id:
            raise ValidationError("record id must be a nonempty string")
        if not isinstance(self.caption, str):
            raise ValidationError(f"record {self.id!r}: caption must be a string")
        if self.itm_generated is not None and self.generated_caption is None:
            raise ValidationError(
                f"record {self.id!r}: itm_generated given without generated_caption"
            )
        for name in ("itm_original", "itm_generated"):
            score = getattr(self, name)
            if score is None:
                continue
            if isinstance(score, bool) or not isinstance(score, (int, float)):
                raise ValidationError(f"record {self.id!r}: {name} must be a number")
            if not 0.0 <= score <= 1.0:
                raise ValidationError(f"record {self.id!r}: {name}={score} outside [0, 1]")
        if self.source not in (None, "original", "generated"):
            raise ValidationError(f"record {self.id!r}: unknown source {self.source!r}")
        if self.source == "generated" and self.generated_caption is None:
            raise ValidationError(f"record {self.id!r}: source=generated without generated_caption")

    @property
    def text(self) -> str:
        """The caption currently in effect (honours ``source`` after filtering)."""
        if self.source == "generated":
            return self.generated_caption
        return self.caption

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if value is not None:
                out[f.name] = value
        return out


_CAPTION_KEYS = {f.name for f in fields(CaptionRecord)}


def check_unique_ids(ids: Iterable[str], what: str = "collection") -> None:
    seen = set()
    for i in ids:
        if i in seen:
            raise ValidationError(f"duplicate id {i!r} in {what}")
        seen.add(i)


def read_captions(path) -> list[CaptionRecord]:
    records = []
    seen = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(path, lineno, f"invalid JSON: {exc.msg}") from None
            if not isinstance(obj, dict):
                raise ParseError(path, lineno, "record must be a key-value object")
            unknown = set(obj) - _CAPTION_KEYS
            if unknown:
                raise ParseError(path, lineno, f"unknown field(s) {sorted(unknown)}")
            for key in ("id", "caption"):
                if key not in obj:
                    raise ParseError(path, lineno, f'missing "{key}"')
            try:
                rec = CaptionRecord(**obj)
            except ValidationError as exc:
                raise ParseError(path, lineno, str(exc)) from None
            if rec.id in seen:
                raise ValidationError(
                    f"{path}:{lineno}: duplicate id {rec.id!r} (first on line {seen[rec.id]})"
                )
            seen[rec.id] = lineno
            records.append(rec)
    return records


def write_captions(records: Sequence[CaptionRecord], path) -> None:
    check_unique_ids((r.id for r in records), "captions")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), ensure_ascii=False) + "\n")


def read_ids(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.rstrip("\n")]


def write_ids(ids: Sequence[str], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i in ids:
            fh.write(i + "\n")


def default_ids_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".ids")


@dataclass(frozen=True)
class EmbeddingMatrix:
    """Unit-norm float32 rows aligned to ``ids``."""

    ids: tuple[str, ...]
    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "data", data)
        if data.ndim != 2 or data.shape[1] < 1:
            raise ValidationError(f"embedding data must be 2-D with dim >= 1, got {data.shape}")
        if data.shape[0] != len(self.ids):
            raise ValidationError(f"{data.shape[0]} rows but {len(self.ids)} ids")
        check_unique_ids(self.ids, "embedding ids")
        if not np.isfinite(data).all():
            raise ValidationError("embedding data contains non-finite values")
        norms = np.linalg.norm(data.astype(np.float64), axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > 1e-6)
        if bad.size:
            raise ValidationError(
                f"row {bad[0]} ({self.ids[bad[0]]!r}) has norm {norms[bad[0]]:.9f}, expected 1"
            )
        data.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def __len__(self):
        return self.data.shape[0]

    def __eq__(self, other):
        if not isinstance(other, EmbeddingMatrix):
            return NotImplemented
        return self.ids == other.ids and np.array_equal(self.data, other.data)

    __hash__ = None

    def index(self) -> dict[str, int]:
        return {k: i for i, k in enumerate(self.ids)}


def _read_header(buf: bytes, magic: bytes, n: int, path) -> tuple[int, ...]:
    if buf[:4] != magic:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}, expected {magic!r}")
    need = 4 + 4 * n
    if len(buf) < need:
        raise FormatError(f"{path}: truncated header")
    return struct.unpack_from("<" + "I" * n, buf, 4)


def _payload(buf: bytes, offset: int, count: int, dtype, path) -> np.ndarray:
    itemsize = np.dtype(dtype).itemsize
    have = len(buf) - offset
    if have != count * itemsize:
        raise FormatError(
            f"{path}: payload is {have} bytes, header implies {count * itemsize}"
        )
    return np.frombuffer(buf, dtype=dtype, count=count, offset=offset).copy()


def write_embeddings(m: EmbeddingMatrix, path, ids_path=None) -> None:
    n, d = m.data.shape
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC + _U32.pack(n) + _U32.pack(d))
        fh.write(m.data.astype("<f4", copy=False).tobytes())
    write_ids(m.ids, ids_path or default_ids_path(path))


def read_embeddings(path, ids_path=None) -> EmbeddingMatrix:
    buf = Path(path).read_bytes()
    n, d = _read_header(buf, EMB_MAGIC, 2, path)
    data = _payload(buf, 12, n * d, "<f4", path).reshape(n, d).astype(np.float32)
    ids = read_ids(ids_path or default_ids_path(path))
    if len(ids) != n:
        raise FormatError(f"{path}: {n} rows but {len(ids)} ids in sidecar")
    return EmbeddingMatrix(tuple(ids), data)


@dataclass(frozen=True)
class ImageTensorSet:
    """Images as a float32 array of shape (N, C, H, W)."""

    ids: tuple[str, ...]
    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "data", data)
        if data.ndim != 4:
            raise ValidationError(f"image data must be (N, C, H, W), got {data.shape}")
        if data.shape[0] != len(self.ids):
            raise ValidationError(f"{data.shape[0]} images but {len(self.ids)} ids")
        check_unique_ids(self.ids, "image ids")
        if not np.isfinite(data).all():
            raise ValidationError("image data contains non-finite values")
        data.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    def __len__(self):
        return self.data.shape[0]

    def __eq__(self, other):
        if not isinstance(other, ImageTensorSet):
            return NotImplemented
        return self.ids == other.ids and np.array_equal(self.data, other.data)

    __hash__ = None

    def index(self) -> dict[str, int]:
        return {k: i for i, k in enumerate(self.ids)}


@dataclass(frozen=True)
class MaskSet:
    """Binary masks as a uint8 array of shape (N, H, W)."""

    ids: tuple[str, ...]
    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data)
        object.__setattr__(self, "ids", tuple(self.ids))
        if data.ndim != 3:
            raise ValidationError(f"mask data must be (N, H, W), got {data.shape}")
        if data.shape[0] != len(self.ids):
            raise ValidationError(f"{data.shape[0]} masks but {len(self.ids)} ids")
        if not np.isin(data, (0, 1)).all():
            raise ValidationError("mask values must be 0 or 1")
        check_unique_ids(self.ids, "mask ids")
        data = data.astype(np.uint8)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.data.shape[1:])

    def __len__(self):
        return self.data.shape[0]

    def __eq__(self, other):
        if not isinstance(other, MaskSet):
            return NotImplemented
        return self.ids == other.ids and np.array_equal(self.data, other.data)

    __hash__ = None


def write_images(images: ImageTensorSet, path, ids_path=None) -> None:
    n, c, h, w = images.data.shape
    with open(path, "wb") as fh:
        fh.write(IMG_MAGIC + struct.pack("<IIII", n, c, h, w))
        fh.write(images.data.astype("<f4", copy=False).tobytes())
    write_ids(images.ids, ids_path or default_ids_path(path))


def read_images(path, ids_path=None) -> ImageTensorSet:
    buf = Path(path).read_bytes()
    n, c, h, w = _read_header(buf, IMG_MAGIC, 4, path)
    data = _payload(buf, 20, n * c * h * w, "<f4", path).reshape(n, c, h, w)
    ids_file = Path(ids_path or default_ids_path(path))
    if ids_file.exists():
        ids = read_ids(ids_file)
    else:
        ids = [str(i) for i in range(n)]
    if len(ids) != n:
        raise FormatError(f"{path}: {n} images but {len(ids)} ids in sidecar")
    return ImageTensorSet(tuple(ids), data.astype(np.float32))


def write_masks(masks: MaskSet, path, ids_path=None) -> None:
    n, h, w = masks.data.shape
    with open(path, "wb") as fh:
        fh.write(MSK_MAGIC + struct.pack("<III", n, h, w))
        fh.write(masks.data.tobytes())
    write_ids(masks.ids, ids_path or default_ids_path(path))


def read_masks(path, ids_path=None) -> MaskSet:
    buf = Path(path).read_bytes()
    n, h, w = _read_header(buf, MSK_MAGIC, 3, path)
    data = _payload(buf, 16, n * h * w, np.uint8, path).reshape(n, h, w)
    ids_file = Path(ids_path or default_ids_path(path))
    ids = read_ids(ids_file) if ids_file.exists() else [str(i) for i in range(n)]
    if len(ids) != n:
        raise FormatError(f"{path}: {n} masks but {len(ids)} ids in sidecar")
    return MaskSet(tuple(ids), data)


@dataclass(frozen=True)
class Pair:
    query_id: str
    neighbor_id: str
    similarity: float


@dataclass(frozen=True)
class PairManifest:
    entries: tuple[Pair, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        for p in self.entries:
            if p.query_id == p.neighbor_id:
                raise ValidationError(f"pair {p.query_id!r} points at itself")
            if not -1.0 - 1e-6 <= p.similarity <= 1.0 + 1e-6:
                raise ValidationError(f"pair {p.query_id!r}: similarity {p.similarity} out of range")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def as_dict(self) -> dict[str, str]:
        return {p.query_id: p.neighbor_id for p in self.entries}

    def check_resolves(self, ids: Iterable[str]) -> None:
        known = set(ids)
        for p in self.entries:
            for i in (p.query_id, p.neighbor_id):
                if i not in known:
                    raise ValidationError(f"manifest id {i!r} not found")


_MANIFEST_HEADER = "query_id\tneighbor_id\tsimilarity"


def write_manifest(p: PairManifest, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_MANIFEST_HEADER + "\n")
        for e in p.entries:
            fh.write(f"{e.query_id}\t{e.neighbor_id}\t{e.similarity!r}\n")


def read_manifest(path) -> PairManifest:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if lineno == 1:
                if line != _MANIFEST_HEADER:
                    raise ParseError(path, 1, "missing manifest header")
                continue
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(path, lineno, f"expected 3 fields, got {len(parts)}")
            try:
                sim = float(parts[2])
            except ValueError:
                raise ParseError(path, lineno, f"bad similarity {parts[2]!r}") from None
            if not math.isfinite(sim):
                raise ParseError(path, lineno, "similarity is not finite")
            entries.append(Pair(parts[0], parts[1], sim))
    try:
        return PairManifest(tuple(entries))
    except ValidationError as exc:
        raise FormatError(f"{path}: {exc}") from None


_LABELS_HEADER = "id\tlabel"


def write_labels(ids: Sequence[str], labels: Sequence, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_LABELS_HEADER + "\n")
        for i, lab in zip(ids, labels):
            fh.write(f"{i}\t{lab}\n")


def read_labels(path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if lineno == 1 and line == _LABELS_HEADER:
                continue
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(path, lineno, "expected 'id<TAB>label'")
            if parts[0] in out:
                raise ValidationError(f"{path}:{lineno}: duplicate id {parts[0]!r}")
            out[parts[0]] = parts[1]
    return out


def encode_labels(ids: Sequence[str], label_map: dict[str, str]) -> tuple[np.ndarray, list[str]]:
    """Integer-code labels for ``ids``; classes sorted by name."""
    missing = [i for i in ids if i not in label_map]
    if missing:
        raise ValidationError(f"no label for id {missing[0]!r}")
    classes = sorted({label_map[i] for i in ids})
    code = {c: k for k, c in enumerate(classes)}
    return np.array([code[label_map[i]] for i in ids], dtype=np.int64), classes
