"""Nearest-neighbour lookup of high-quality reference images.

Embeddings are unit-norm vectors, so cosine similarity is a dot product and
the whole database is scanned with one matrix-vector product.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .images import list_images, load_image, resize_bicubic, to_gray

log = logging.getLogger(__name__)

MAGIC = b"RFIX"
FORMAT_VERSION = 1


class IndexFormatError(Exception):
    """Base class for index file errors."""


class BadMagicError(IndexFormatError):
    pass


class VersionMismatchError(IndexFormatError):
    pass


class TruncatedFileError(IndexFormatError):
    pass


class EmbedderMismatchError(ValueError):
    pass


class NormalizationError(ValueError):
    """Raw feature vector has zero norm and cannot be normalised."""


class Embedder(Protocol):
    embedder_id: str
    dim: int

    def __call__(self, image: np.ndarray) -> np.ndarray: ...


class TinyGist:
    """Handcrafted global descriptor.

    Grayscale 16x16 thumbnail (256 intensity values) followed by an 8-bin
    gradient-orientation histogram for each of the 16 cells of 4x4 pixels
    (128 values). Orientation is unsigned, bins cover ``[0, pi)``, votes are
    weighted by gradient magnitude. Gradients use central differences with
    replicated borders.
    """

    embedder_id = "tiny-gist"
    size = 16
    cell = 4
    bins = 8
    dim = size * size + (size // cell) ** 2 * bins

    def raw_feature(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image)
        if image.ndim != 3 or image.shape[0] not in (1, 3):
            raise ValueError(f"expected a 1- or 3-channel C x H x W image, got shape {image.shape}")
        if image.shape[1] < self.size or image.shape[2] < self.size:
            raise ValueError(
                f"image {image.shape[1]}x{image.shape[2]} is smaller than {self.size}x{self.size}"
            )
        gray = to_gray(image)[None]
        thumb = resize_bicubic(gray, self.size, self.size)[0].astype(np.float64)
        return np.concatenate([thumb.ravel(), self.orientation_histogram(thumb).ravel()])

    def orientation_histogram(self, thumb: np.ndarray) -> np.ndarray:
        p = np.pad(thumb, 1, mode="edge")
        gx = (p[1:-1, 2:] - p[1:-1, :-2]) / 2.0
        gy = (p[2:, 1:-1] - p[:-2, 1:-1]) / 2.0
        mag = np.hypot(gx, gy)
        theta = np.mod(np.arctan2(gy, gx), np.pi)
        idx = np.minimum((theta / np.pi * self.bins).astype(int), self.bins - 1)
        n = self.size // self.cell
        hist = np.zeros((n, n, self.bins))
        for i in range(self.size):
            for j in range(self.size):
                hist[i // self.cell, j // self.cell, idx[i, j]] += mag[i, j]
        return hist

    def __call__(self, image: np.ndarray) -> np.ndarray:
        return normalize(self.raw_feature(image))


EMBEDDERS: dict[str, Callable[[], Embedder]] = {"tiny-gist": TinyGist}


def get_embedder(name: str) -> Embedder:
    try:
        return EMBEDDERS[name]()
    except KeyError:
        raise ValueError(f"unknown embedder {name!r}; known: {sorted(EMBEDDERS)}") from None


def normalize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm == 0.0 or not np.isfinite(norm):
        raise NormalizationError("feature vector has zero norm")
    return v / norm


def embed(image: np.ndarray, embedder: Embedder | None = None) -> np.ndarray:
    """Unit-norm embedding of ``image`` (float32, ``embedder.dim`` entries)."""
    embedder = embedder or TinyGist()
    return np.asarray(embedder(image), dtype=np.float32)


@dataclass(frozen=True)
class EmbeddingRecord:
    image_id: str
    embedding: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, EmbeddingRecord):
            return NotImplemented
        return self.image_id == other.image_id and np.array_equal(self.embedding, other.embedding)


@dataclass(frozen=True)
class RetrievalResult:
    image_id: str
    similarity: float
    rank: int


@dataclass(frozen=True)
class EmbeddingIndex:
    embedder_id: str
    dim: int
    records: tuple[EmbeddingRecord, ...]
    _matrix: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.dim <= 0:
            raise ValueError("dim must be positive")
        ids = [r.image_id for r in self.records]
        if any(not i for i in ids):
            raise ValueError("image ids must be non-empty")
        if len(set(ids)) != len(ids):
            raise ValueError("image ids must be unique")
        mat = np.zeros((len(self.records), self.dim), dtype=np.float32)
        for row, rec in enumerate(self.records):
            if rec.embedding.shape != (self.dim,):
                raise ValueError(f"record {rec.image_id!r} has shape {rec.embedding.shape}, expected ({self.dim},)")
            mat[row] = rec.embedding
        mat.setflags(write=False)
        object.__setattr__(self, "_matrix", mat)

    @classmethod
    def from_arrays(cls, embedder_id: str, ids, embeddings) -> "EmbeddingIndex":
        embeddings = np.asarray(embeddings, dtype=np.float32)
        order = sorted(range(len(ids)), key=lambda i: ids[i])
        records = tuple(EmbeddingRecord(ids[i], embeddings[i].copy()) for i in order)
        return cls(embedder_id, embeddings.shape[1], records)

    @property
    def ids(self) -> list[str]:
        return [r.image_id for r in self.records]

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class BuildReport:
    indexed: list[str] = field(default_factory=list)
    skipped: dict[str, str] = field(default_factory=dict)


def build_index(image_directory, embedder: Embedder | None = None,
                report: BuildReport | None = None) -> EmbeddingIndex:
    """Embed every decodable image in a directory; ids are file stems."""
    embedder = embedder or TinyGist()
    report = report if report is not None else BuildReport()
    ids, vecs = [], []
    for path in list_images(image_directory):
        try:
            vec = embed(load_image(path), embedder)
        except (OSError, ValueError) as exc:
            log.warning("skipping %s: %s", path.name, exc)
            report.skipped[path.name] = str(exc)
            continue
        if path.stem in ids:
            log.warning("skipping %s: duplicate id %r", path.name, path.stem)
            report.skipped[path.name] = f"duplicate id {path.stem!r}"
            continue
        ids.append(path.stem)
        vecs.append(vec)
        report.indexed.append(path.stem)
    if not ids:
        raise FileNotFoundError(f"no decodable images in {image_directory}")
    return EmbeddingIndex.from_arrays(embedder.embedder_id, ids, np.stack(vecs))


def query_embedding(index: EmbeddingIndex, q: np.ndarray, k: int) -> list[RetrievalResult]:
    """Top-``k`` records by cosine similarity; ties go to the smaller id."""
    if k < 1 or k > len(index):
        raise ValueError(f"k={k} outside [1, {len(index)}]")
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (index.dim,):
        raise ValueError(f"query has shape {q.shape}, index dim is {index.dim}")
    q = q / np.linalg.norm(q)
    sims = index.matrix.astype(np.float64) @ q
    # records are id-sorted, so a stable sort on -sim breaks ties lexicographically
    order = np.argsort(-sims, kind="stable")[:k]
    return [
        RetrievalResult(index.records[i].image_id, float(np.clip(sims[i], -1.0, 1.0)), rank)
        for rank, i in enumerate(order, start=1)
    ]


def query(index: EmbeddingIndex, lq_image: np.ndarray, k: int,
          embedder: Embedder | None = None) -> list[RetrievalResult]:
    embedder = embedder or get_embedder(index.embedder_id)
    if embedder.embedder_id != index.embedder_id:
        raise EmbedderMismatchError(
            f"index built with {index.embedder_id!r}, query embedder is {embedder.embedder_id!r}"
        )
    return query_embedding(index, embed(lq_image, embedder), k)


def reference_weights(similarities, scale: float) -> np.ndarray:
    """Per-reference blend weights: ``scale * softmax(similarities)``."""
    sims = np.asarray(similarities, dtype=np.float64)
    if sims.size == 0:
        raise ValueError("need at least one similarity")
    if not 0.0 <= scale <= 1.0:
        raise ValueError(f"scale {scale} outside [0, 1]")
    e = np.exp(sims - sims.max())
    return scale * (e / e.sum())


# --- persistence ------------------------------------------------------------

def serialize(index: EmbeddingIndex) -> bytes:
    eid = index.embedder_id.encode("utf-8")
    parts = [
        MAGIC,
        struct.pack("<H", FORMAT_VERSION),
        struct.pack("<H", len(eid)), eid,
        struct.pack("<I", index.dim),
        struct.pack("<Q", len(index)),
    ]
    for rec in index.records:
        rid = rec.image_id.encode("utf-8")
        parts += [struct.pack("<H", len(rid)), rid, rec.embedding.astype("<f4").tobytes()]
    return b"".join(parts)


def deserialize(data: bytes) -> EmbeddingIndex:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(view):
            raise TruncatedFileError(f"file ends at byte {len(view)}, needed {pos + n}")
        out = bytes(view[pos:pos + n])
        pos += n
        return out

    if len(view) < 4 or bytes(view[:4]) != MAGIC:
        raise BadMagicError(f"bad magic {bytes(view[:4])!r}")
    pos = 4
    (version,) = struct.unpack("<H", take(2))
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"index format version {version}, expected {FORMAT_VERSION}")
    (elen,) = struct.unpack("<H", take(2))
    embedder_id = take(elen).decode("utf-8")
    (dim,) = struct.unpack("<I", take(4))
    (count,) = struct.unpack("<Q", take(8))
    records = []
    for _ in range(count):
        (ilen,) = struct.unpack("<H", take(2))
        image_id = take(ilen).decode("utf-8")
        vec = np.frombuffer(take(4 * dim), dtype="<f4").astype(np.float32)
        records.append(EmbeddingRecord(image_id, vec))
    if pos != len(view):
        raise IndexFormatError(f"{len(view) - pos} trailing bytes after {count} records")
    return EmbeddingIndex(embedder_id, dim, tuple(records))


def save_index(index: EmbeddingIndex, path) -> None:
    Path(path).write_bytes(serialize(index))


def load_index(path) -> EmbeddingIndex:
    return deserialize(Path(path).read_bytes())


def expected_file_size(index: EmbeddingIndex) -> int:
    header = 4 + 2 + 2 + len(index.embedder_id.encode("utf-8")) + 4 + 8
    return header + sum(2 + len(r.image_id.encode("utf-8")) + 4 * index.dim for r in index.records)
