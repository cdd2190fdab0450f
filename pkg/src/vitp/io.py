"""On-disk formats: proposal files, checkpoints, dataset directories and reports.

All binary numbers are little-endian except 16-bit PGM samples, which netpbm
defines as big-endian.

Proposal file (``.vtp``)::

    "VTP1" | u32 version=1 | u32 H | u32 W | u32 N | u32 K | u32 flags
    masks   N*H*W f32 (flags bit 0) or u8 round(255*v) (flags bit 1), row-major
    scores  N*(K+1) f32, last column = no object

Checkpoint (``.vtpc``)::

    "VTPC" | u32 version=1 | u32 count
    count x (u32 name_len | utf-8 name | u32 rank | u32 dims[rank] | f32 data)
    u64 FNV-1a of every preceding byte

Tensors are written in lexicographic name order.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .optim import ParamStore
from .structures import VOID_ID, ProposalSet, Taxonomy
from .synth import AnnotatedImage, Box, Dataset
from .tensor import Tensor

PROPOSAL_MAGIC = b"VTP1"
CHECKPOINT_MAGIC = b"VTPC"
FORMAT_VERSION = 1
FLAG_F32 = 1
FLAG_U8 = 2

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


class FormatError(ValueError):
    """A file does not follow its documented layout."""


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


class _Reader:
    """Bounds-checked cursor over a byte string."""

    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated while reading {what} at byte {self.pos}: "
                              f"need {n} bytes, {len(self.data) - self.pos} left")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


# -- proposals ---------------------------------------------------------------------

def write_proposals(proposals: ProposalSet, path, mask_format: str = "f32") -> None:
    """Write one image's proposals. ``mask_format="u8"`` quantises masks to round(255*v)."""
    if mask_format not in ("f32", "u8"):
        raise ValueError(f"mask_format must be f32 or u8, got {mask_format!r}")
    n = proposals.num_proposals
    h, w = proposals.hw
    k = proposals.num_classes
    flags = FLAG_F32 if mask_format == "f32" else FLAG_U8
    if mask_format == "f32":
        masks = proposals.masks.astype("<f4").tobytes()
    else:
        masks = np.round(proposals.masks.astype(np.float64) * 255).astype(np.uint8).tobytes()
    header = PROPOSAL_MAGIC + struct.pack("<6I", FORMAT_VERSION, h, w, n, k, flags)
    scores = proposals.class_scores.astype("<f4").tobytes()
    Path(path).write_bytes(header + masks + scores)


def read_proposals(path) -> ProposalSet:
    data = Path(path).read_bytes()
    r = _Reader(data, path)
    magic = r.take(4, "magic")
    if magic != PROPOSAL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0, expected {PROPOSAL_MAGIC!r}")
    version = r.u32("version")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte 4")
    h, w, n, k, flags = (r.u32(f) for f in ("H", "W", "N", "K", "flags"))
    if flags not in (FLAG_F32, FLAG_U8):
        raise FormatError(f"{path}: flags {flags:#x} at byte 24 must select exactly one mask encoding")
    if k < 1:
        raise FormatError(f"{path}: K must be >= 1")
    item = 4 if flags == FLAG_F32 else 1
    expected = r.pos + n * h * w * item + n * (k + 1) * 4
    if len(data) != expected:
        raise FormatError(f"{path}: payload length mismatch: expected {expected} bytes, file has {len(data)}")
    raw = r.take(n * h * w * item, "masks")
    if flags == FLAG_F32:
        masks = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(n, h, w)
    else:
        masks = (np.frombuffer(raw, dtype=np.uint8).astype(np.float32) / 255).reshape(n, h, w)
    scores = np.frombuffer(r.take(n * (k + 1) * 4, "scores"), dtype="<f4").reshape(n, k + 1)
    try:
        return ProposalSet(masks, scores.astype(np.float64), Path(path).stem)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def proposal_path(directory, image_id: str) -> Path:
    return Path(directory) / f"{image_id}.vtp"


# -- checkpoints -------------------------------------------------------------------

def write_checkpoint(params, path) -> None:
    """Serialise a name -> tensor mapping; names are written sorted."""
    names = sorted(params)
    out = bytearray(CHECKPOINT_MAGIC + struct.pack("<II", FORMAT_VERSION, len(names)))
    for name in names:
        value = params[name]
        arr = np.asarray(value.data if isinstance(value, Tensor) else value)
        encoded = name.encode("utf-8")
        out += struct.pack("<I", len(encoded)) + encoded
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.astype("<f4").tobytes()
    out += struct.pack("<Q", fnv1a64(bytes(out)))
    Path(path).write_bytes(bytes(out))


def read_checkpoint(path) -> ParamStore:
    data = Path(path).read_bytes()
    if len(data) < 20:
        raise FormatError(f"{path}: truncated checkpoint ({len(data)} bytes)")
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r} at byte 0, expected {CHECKPOINT_MAGIC!r}")
    body = data[:-8]
    stored = struct.unpack("<Q", data[-8:])[0]
    actual = fnv1a64(body)
    if stored != actual:
        raise FormatError(f"{path}: checksum mismatch at byte {len(body)}: "
                          f"stored {stored:#018x}, computed {actual:#018x}")
    r = _Reader(body, path)
    r.take(4, "magic")
    version = r.u32("version")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte 4")
    count = r.u32("tensor count")
    params = ParamStore()
    for _ in range(count):
        start = r.pos
        try:
            name = r.take(r.u32("name length"), "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: tensor name at byte {start} is not UTF-8") from exc
        if name in params:
            raise FormatError(f"{path}: duplicate tensor name {name!r} at byte {start}")
        rank = r.u32("rank")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, "dims"))
        size = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * size, f"data of {name}"), dtype="<f4").astype(np.float32)
        params[name] = Tensor(arr.reshape(dims), requires_grad=True)
    if r.pos != len(body):
        raise FormatError(f"{path}: {len(body) - r.pos} unexpected bytes at byte {r.pos}")
    return params


# -- netpbm ------------------------------------------------------------------------

def _pnm_header(data: bytes, path) -> tuple:
    """Parse ``magic width height maxval`` and return them with the payload offset."""
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: malformed PNM header")
        tokens.append(data[start:pos])
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError(f"{path}: malformed PNM header")
    magic = tokens[0].decode("ascii", "replace")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed PNM header") from exc
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise FormatError(f"{path}: malformed PNM header")
    return magic, width, height, maxval, pos + 1


def write_ppm(image: np.ndarray, path) -> None:
    h, w, _ = image.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(image, np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, w, h, maxval, off = _pnm_header(data, path)
    if magic != "P6" or maxval != 255:
        raise FormatError(f"{path}: expected 8-bit P6, got {magic} maxval {maxval}")
    if len(data) - off != h * w * 3:
        raise FormatError(f"{path}: expected {h * w * 3} pixel bytes, found {len(data) - off}")
    return np.frombuffer(data, dtype=np.uint8, offset=off).reshape(h, w, 3).copy()


def write_pgm16(ids: np.ndarray, path) -> None:
    h, w = ids.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode() + ids.astype(">u2").tobytes())


def read_pgm16(path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, w, h, maxval, off = _pnm_header(data, path)
    if magic != "P5":
        raise FormatError(f"{path}: expected P5, got {magic}")
    if maxval != 65535:
        raise FormatError(f"{path}: 16-bit instance maps need maxval 65535, got {maxval}")
    if len(data) - off != h * w * 2:
        raise FormatError(f"{path}: expected {h * w * 2} pixel bytes, found {len(data) - off}")
    return np.frombuffer(data, dtype=">u2", offset=off).astype(np.uint16).reshape(h, w)


# -- datasets ----------------------------------------------------------------------

def _index_of(ann: AnnotatedImage, fallback: int) -> int:
    try:
        return int(ann.image_id)
    except (TypeError, ValueError):
        return fallback


def write_dataset(dataset: Dataset, directory) -> None:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    write_json(dataset.taxonomy.to_dict(), root / "taxonomy.json")
    for pos, ann in enumerate(dataset.images):
        i = _index_of(ann, pos)
        sub = root / ann.split
        sub.mkdir(exist_ok=True)
        write_ppm(ann.image, sub / f"img_{i:06d}.ppm")
        write_pgm16(ann.fine, sub / f"fine_{i:06d}.pgm")
        write_pgm16(ann.coarse, sub / f"coarse_{i:06d}.pgm")
        meta = {"image_id": ann.image_id, "split": ann.split,
                "segments": {str(s): int(c) for s, c in sorted(ann.segments.items())},
                "boxes": [{"segment_id": b.segment_id, "class_id": b.class_id,
                           "x": b.x, "y": b.y, "w": b.w, "h": b.h} for b in ann.boxes]}
        write_json(meta, sub / f"meta_{i:06d}.json")


def _read_image(sub: Path, i: int, num_classes: int) -> AnnotatedImage:
    meta_path = sub / f"meta_{i:06d}.json"
    if not meta_path.exists():
        raise FormatError(f"missing {meta_path}")
    try:
        meta = json.loads(meta_path.read_text())
        segments = {int(s): int(c) for s, c in meta["segments"].items()}
        boxes = [Box(int(b["segment_id"]), int(b["class_id"]), float(b["x"]), float(b["y"]),
                     float(b["w"]), float(b["h"])) for b in meta["boxes"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{meta_path}: malformed meta ({exc})") from exc
    image = read_ppm(sub / f"img_{i:06d}.ppm")
    fine = read_pgm16(sub / f"fine_{i:06d}.pgm")
    coarse = read_pgm16(sub / f"coarse_{i:06d}.pgm")
    if image.shape[:2] != fine.shape or fine.shape != coarse.shape:
        raise FormatError(f"{sub}: image {i} has mismatched map sizes")
    for name, ids in (("fine", fine), ("coarse", coarse)):
        missing = sorted(set(np.unique(ids).tolist()) - set(segments) - {VOID_ID})
        if missing:
            raise FormatError(f"{sub}: {name} map of image {i} uses ids {missing} absent from the meta table")
    bad = [c for c in segments.values() if not 0 <= c < num_classes]
    if bad:
        raise FormatError(f"{meta_path}: class ids {bad} outside the taxonomy")
    return AnnotatedImage(image, fine, segments, coarse, boxes, meta.get("image_id", f"{i:06d}"),
                          meta.get("split", sub.name))


def read_dataset(directory) -> Dataset:
    root = Path(directory)
    tax_path = root / "taxonomy.json"
    if not tax_path.exists():
        raise FormatError(f"missing {tax_path}")
    try:
        taxonomy = Taxonomy.from_dict(json.loads(tax_path.read_text()))
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{tax_path}: malformed taxonomy ({exc})") from exc
    found = []
    for split in ("train", "val"):
        sub = root / split
        if not sub.is_dir():
            continue
        for p in sub.glob("img_*.ppm"):
            found.append((int(p.stem[4:]), sub))
    found.sort()
    return Dataset(taxonomy, [_read_image(sub, i, len(taxonomy)) for i, sub in found])


# -- reports -----------------------------------------------------------------------

def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def dumps(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, indent=2)


def write_json(obj, path) -> None:
    Path(path).write_text(dumps(obj) + "\n")


def write_jsonl(records, path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(_plain(rec), sort_keys=True) + "\n")


def write_csv(rows: list, columns: list, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({c: _plain(row.get(c, "")) for c in columns})


def tree_digest(directory) -> str:
    """SHA-256 over every file (relative path + bytes) under ``directory``, in sorted order."""
    root = Path(directory)
    digest = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        digest.update(os.fsencode(str(p.relative_to(root))) + b"\0")
        digest.update(hashlib.sha256(p.read_bytes()).digest())
    return digest.hexdigest()
