"""Paired image/recipe records, their on-disk format, and a seeded synthetic generator.

Records file layout (all integers little-endian)::

    header   : 8s magic b"SCANRECS" | u32 format_version | u32 record_count
    record*  : u32 payload_length | payload
    payload  : u64 pair_id | u32 label | u32 n_tokens | u32 n_sentences
               | u32 sentence_dim | u32 image_dim
               | u32[n_tokens] token ids
               | f32[n_sentences * sentence_dim] sentence vectors (row-major)
               | f32[image_dim] image features

A JSON manifest sits next to the records file (``<stem>.manifest.json``).
Floats are stored as 32-bit and widened to float64 in memory; the synthetic
generator rounds through float32 so that save/load is exact.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"SCANRECS"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sII")
_LEN = struct.Struct("<I")
_FIXED = struct.Struct("<QIIIII")
RECORDS_SUFFIX = ".scanrec"
MANIFEST_SUFFIX = ".manifest.json"


class DatasetError(Exception):
    pass


class DatasetFileNotFound(DatasetError, FileNotFoundError):
    pass


class FormatVersionError(DatasetError):
    pass


class ParseError(DatasetError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class RecordValidationError(DatasetError):
    def __init__(self, message: str, pair_id: int | None = None, record_index: int | None = None):
        where = []
        if record_index is not None:
            where.append(f"record #{record_index}")
        if pair_id is not None:
            where.append(f"pair id {pair_id}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.pair_id = pair_id
        self.record_index = record_index


@dataclass
class FoodPairRecord:
    pair_id: int
    label: int
    tokens: np.ndarray       # int64 [n]
    sentences: np.ndarray    # float64 [m, d_s]
    image: np.ndarray        # float64 [d_img]

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64).reshape(-1)
        self.sentences = np.asarray(self.sentences, dtype=np.float64)
        if self.sentences.ndim == 1:
            self.sentences = self.sentences.reshape(1, -1)
        self.image = np.asarray(self.image, dtype=np.float64).reshape(-1)

    def __eq__(self, other):
        if not isinstance(other, FoodPairRecord):
            return NotImplemented
        return (self.pair_id == other.pair_id and self.label == other.label
                and np.array_equal(self.tokens, other.tokens)
                and self.sentences.shape == other.sentences.shape
                and np.array_equal(self.sentences, other.sentences)
                and np.array_equal(self.image, other.image))


@dataclass
class DatasetManifest:
    split: str
    record_count: int
    num_classes: int
    vocab_size: int
    sentence_dim: int
    image_dim: int
    format_version: int = FORMAT_VERSION
    seed: int | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


@dataclass
class Dataset:
    records: list[FoodPairRecord]
    manifest: DatasetManifest

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def subset(self, indices: Sequence[int], split: str | None = None) -> Dataset:
        recs = [self.records[i] for i in indices]
        m = DatasetManifest(**{**asdict(self.manifest), "record_count": len(recs)})
        if split is not None:
            m.split = split
        return Dataset(recs, m)


def validate_record(rec: FoodPairRecord, manifest: DatasetManifest, index: int | None = None) -> None:
    def fail(msg):
        raise RecordValidationError(msg, rec.pair_id, index)

    if not 0 <= rec.label < manifest.num_classes:
        fail(f"class label {rec.label} outside [0, {manifest.num_classes})")
    if rec.tokens.size == 0 or not np.any(rec.tokens != 0):
        fail("ingredient sequence has no non-padding token")
    if rec.tokens.min() < 0 or rec.tokens.max() >= manifest.vocab_size:
        fail(f"token id outside vocabulary of size {manifest.vocab_size}")
    if rec.sentences.ndim != 2 or rec.sentences.shape[0] < 1:
        fail("needs at least one instruction sentence vector")
    if rec.sentences.shape[1] != manifest.sentence_dim:
        fail(f"sentence dim {rec.sentences.shape[1]} != {manifest.sentence_dim}")
    if rec.image.shape[0] != manifest.image_dim:
        fail(f"image feature dim {rec.image.shape[0]} != {manifest.image_dim}")
    if not (np.all(np.isfinite(rec.sentences)) and np.all(np.isfinite(rec.image))):
        fail("non-finite feature value")


def validate_dataset(ds: Dataset) -> None:
    seen: set[int] = set()
    for i, rec in enumerate(ds.records):
        validate_record(rec, ds.manifest, i)
        if rec.pair_id in seen:
            raise RecordValidationError("duplicate pair id", rec.pair_id, i)
        seen.add(rec.pair_id)
    if ds.manifest.record_count != len(ds.records):
        raise DatasetError(f"manifest says {ds.manifest.record_count} records, found {len(ds.records)}")


# -- serialisation --------------------------------------------------------
def _paths(path: str | Path) -> tuple[Path, Path]:
    p = Path(path)
    name = p.name
    if name.endswith(MANIFEST_SUFFIX):
        stem = name[: -len(MANIFEST_SUFFIX)]
    elif name.endswith(RECORDS_SUFFIX):
        stem = name[: -len(RECORDS_SUFFIX)]
    else:
        stem = name
    return p.with_name(stem + RECORDS_SUFFIX), p.with_name(stem + MANIFEST_SUFFIX)


def encode_record(rec: FoodPairRecord) -> bytes:
    m, ds = rec.sentences.shape
    parts = [
        _FIXED.pack(rec.pair_id, rec.label, rec.tokens.size, m, ds, rec.image.size),
        rec.tokens.astype("<u4").tobytes(),
        rec.sentences.astype("<f4").tobytes(),
        rec.image.astype("<f4").tobytes(),
    ]
    payload = b"".join(parts)
    return _LEN.pack(len(payload)) + payload


def save_dataset(ds: Dataset, path: str | Path) -> tuple[Path, Path]:
    """Write records + manifest; returns both paths."""
    rec_path, man_path = _paths(path)
    rec_path.parent.mkdir(parents=True, exist_ok=True)
    with open(rec_path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(ds.records)))
        for rec in ds.records:
            f.write(encode_record(rec))
    man_path.write_text(ds.manifest.to_json() + "\n")
    return rec_path, man_path


def _decode_records(buf: bytes) -> list[FoodPairRecord]:
    if len(buf) < _HEADER.size:
        raise ParseError("file shorter than header", len(buf))
    magic, version, count = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise ParseError(f"bad magic {magic!r}", 0)
    if version != FORMAT_VERSION:
        raise FormatVersionError(f"records format version {version} unsupported (expected {FORMAT_VERSION})")
    off = _HEADER.size
    out = []
    for i in range(count):
        if off + _LEN.size > len(buf):
            raise ParseError(f"truncated before record #{i} length prefix", off)
        (length,) = _LEN.unpack_from(buf, off)
        start = off + _LEN.size
        if start + length > len(buf):
            raise ParseError(f"record #{i} truncated: needs {length} bytes, {len(buf) - start} left", start)
        if length < _FIXED.size:
            raise ParseError(f"record #{i} payload too short", start)
        pid, label, n, m, d_s, d_img = _FIXED.unpack_from(buf, start)
        expect = _FIXED.size + 4 * (n + m * d_s + d_img)
        if expect != length:
            raise ParseError(f"record #{i} length {length} inconsistent with its dimensions ({expect})", start)
        p = start + _FIXED.size
        tokens = np.frombuffer(buf, "<u4", n, p).astype(np.int64)
        p += 4 * n
        sent = np.frombuffer(buf, "<f4", m * d_s, p).astype(np.float64).reshape(m, d_s)
        p += 4 * m * d_s
        image = np.frombuffer(buf, "<f4", d_img, p).astype(np.float64)
        out.append(FoodPairRecord(pid, label, tokens, sent, image))
        off = start + length
    if off != len(buf):
        raise ParseError(f"{len(buf) - off} trailing bytes after {count} records", off)
    return out


def load_dataset(path: str | Path) -> Dataset:
    """Read and validate a records file and its manifest."""
    rec_path, man_path = _paths(path)
    for p in (rec_path, man_path):
        if not p.exists():
            raise DatasetFileNotFound(f"dataset file not found: {p}")
    meta = json.loads(man_path.read_text())
    if meta.get("format_version") != FORMAT_VERSION:
        raise FormatVersionError(
            f"{man_path}: manifest format version {meta.get('format_version')} unsupported")
    manifest = DatasetManifest(**meta)
    records = _decode_records(rec_path.read_bytes())
    ds = Dataset(records, manifest)
    validate_dataset(ds)
    return ds


# -- synthetic data ---------------------------------------------------------
@dataclass
class SyntheticConfig:
    num_classes: int = 20
    pairs_per_class: int = 10
    latent_dim: int = 8
    noise: float = 0.1
    pair_scale: float = 0.6
    vocab_size: int = 120
    common_tokens: int = 10
    tokens_per_class: int = 6
    common_weight: float = 0.5
    tokens_range: tuple[int, int] = (4, 10)
    sentences_range: tuple[int, int] = (3, 6)
    sentence_dim: int = 32
    image_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.noise < 0 or self.pair_scale < 0:
            raise ValueError("noise and pair_scale must be nonnegative")
        counts = [self.num_classes, self.pairs_per_class, self.latent_dim, self.common_tokens,
                  self.tokens_per_class, self.sentence_dim, self.image_dim,
                  *self.tokens_range, *self.sentences_range]
        if min(counts) < 1:
            raise ValueError("all counts in SyntheticConfig must be >= 1")
        if self.tokens_range[0] > self.tokens_range[1] or self.sentences_range[0] > self.sentences_range[1]:
            raise ValueError("ranges must be (low, high) with low <= high")
        if not 0 <= self.common_weight <= 1:
            raise ValueError("common_weight must lie in [0, 1]")
        if self.vocab_size < 1 + self.common_tokens + self.tokens_per_class:
            raise ValueError("vocab_size too small for the common and class token pools")


@dataclass
class SyntheticTruth:
    """Generator internals, kept for tests and diagnostics."""
    class_latents: np.ndarray
    pair_latents: np.ndarray
    image_map: np.ndarray
    instruction_map: np.ndarray
    class_token_probs: np.ndarray
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def _f32(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32).astype(np.float64)


def synthetic_generate(cfg: SyntheticConfig, split: str = "all",
                       return_truth: bool = False) -> Dataset | tuple[Dataset, SyntheticTruth]:
    """Draw a labelled paired dataset whose modalities share a latent per pair.

    Each class k has latent c_k and each pair a private offset u. Image
    features and every instruction sentence vector are fixed random linear
    maps of (c_k + u) plus Gaussian noise. Ingredient tokens mix a shared
    pool of common tokens (weight ``common_weight``) with a class-specific
    distribution, so half of a recipe's tokens carry no class information.
    """
    rng = np.random.default_rng(cfg.seed)
    L = cfg.latent_dim
    class_lat = rng.standard_normal((cfg.num_classes, L))
    image_map = rng.standard_normal((cfg.image_dim, L)) / np.sqrt(L)
    instr_map = rng.standard_normal((cfg.sentence_dim, L)) / np.sqrt(L)

    common = np.arange(1, 1 + cfg.common_tokens)
    pool = np.arange(1 + cfg.common_tokens, cfg.vocab_size)
    class_tokens = np.stack([rng.choice(pool, cfg.tokens_per_class, replace=False)
                             for _ in range(cfg.num_classes)])
    class_probs = rng.dirichlet(np.full(cfg.tokens_per_class, 2.0), size=cfg.num_classes)

    n = cfg.num_classes * cfg.pairs_per_class
    labels = np.repeat(np.arange(cfg.num_classes), cfg.pairs_per_class)
    pair_lat = cfg.pair_scale * rng.standard_normal((n, L))
    records = []
    for i in range(n):
        k = labels[i]
        z = class_lat[k] + pair_lat[i]
        image = image_map @ z + cfg.noise * rng.standard_normal(cfg.image_dim)
        m = int(rng.integers(cfg.sentences_range[0], cfg.sentences_range[1] + 1))
        sent = (instr_map @ z)[None, :] + cfg.noise * rng.standard_normal((m, cfg.sentence_dim))
        nt = int(rng.integers(cfg.tokens_range[0], cfg.tokens_range[1] + 1))
        use_common = rng.random(nt) < cfg.common_weight
        toks = np.where(use_common,
                        rng.choice(common, nt),
                        rng.choice(class_tokens[k], nt, p=class_probs[k]))
        records.append(FoodPairRecord(i, int(k), toks, _f32(sent), _f32(image)))

    manifest = DatasetManifest(split=split, record_count=n, num_classes=cfg.num_classes,
                               vocab_size=cfg.vocab_size, sentence_dim=cfg.sentence_dim,
                               image_dim=cfg.image_dim, seed=cfg.seed)
    ds = Dataset(records, manifest)
    validate_dataset(ds)
    if return_truth:
        probs = np.zeros((cfg.num_classes, cfg.vocab_size))
        for k in range(cfg.num_classes):
            probs[k, common] += cfg.common_weight / len(common)
            np.add.at(probs[k], class_tokens[k], (1 - cfg.common_weight) * class_probs[k])
        return ds, SyntheticTruth(class_lat, pair_lat, image_map, instr_map, probs, labels)
    return ds


# -- splitting --------------------------------------------------------------
SPLIT_NAMES = ("train", "val", "test")


def _allocate(n: int, fractions: Sequence[float]) -> list[int]:
    raw = np.asarray(fractions) * n
    counts = np.floor(raw).astype(int)
    remainder = n - counts.sum()
    # largest remainder, ties to the earlier split
    order = sorted(range(len(fractions)), key=lambda j: (-(raw[j] - counts[j]), j))
    for j in order[:remainder]:
        counts[j] += 1
    return counts.tolist()


def split_dataset(ds: Dataset, fractions: Sequence[float] = (0.7, 0.15, 0.15),
                  seed: int = 0, names: Sequence[str] = SPLIT_NAMES) -> dict[str, Dataset]:
    """Class-stratified, seed-deterministic partition into named splits."""
    if len(fractions) != len(names):
        raise ValueError("one fraction per split name")
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be nonnegative and sum to 1, got {tuple(fractions)}")
    rng = np.random.default_rng(seed)
    labels = np.array([r.label for r in ds.records])
    active = sum(1 for f in fractions if f > 0)
    buckets: list[list[int]] = [[] for _ in names]
    leftovers: list[int] = []
    for k in np.unique(labels):
        idx = np.flatnonzero(labels == k)
        idx = idx[rng.permutation(len(idx))]
        if len(idx) < active:
            log.warning("class %d has %d records for %d splits; splitting it unstratified", k, len(idx), active)
            leftovers.extend(idx.tolist())
            continue
        start = 0
        for j, c in enumerate(_allocate(len(idx), fractions)):
            buckets[j].extend(idx[start:start + c].tolist())
            start += c
    if leftovers:
        left = np.array(leftovers)[rng.permutation(len(leftovers))]
        start = 0
        for j, c in enumerate(_allocate(len(left), fractions)):
            buckets[j].extend(left[start:start + c].tolist())
            start += c
    return {name: ds.subset(sorted(b), split=name) for name, b in zip(names, buckets)}


# -- batching ----------------------------------------------------------------
@dataclass
class Batch:
    """Right-padded mini-batch. Token id 0 is padding."""
    pair_ids: np.ndarray        # [B]
    labels: np.ndarray          # [B]
    tokens: np.ndarray          # [B, n_max] int64
    sentences: np.ndarray       # [B, m_max, d_s]
    sentence_mask: np.ndarray   # [B, m_max] float 0/1
    images: np.ndarray          # [B, d_img]

    @property
    def size(self) -> int:
        return len(self.pair_ids)

    @property
    def token_mask(self) -> np.ndarray:
        return (self.tokens != 0).astype(np.float64)


def collate(records: Sequence[FoodPairRecord]) -> Batch:
    if len(records) == 0:
        raise DatasetError("cannot build an empty batch")
    B = len(records)
    n_max = max(r.tokens.size for r in records)
    m_max = max(r.sentences.shape[0] for r in records)
    d_s = records[0].sentences.shape[1]
    tokens = np.zeros((B, n_max), dtype=np.int64)
    sents = np.zeros((B, m_max, d_s))
    smask = np.zeros((B, m_max))
    for i, r in enumerate(records):
        tokens[i, : r.tokens.size] = r.tokens
        m = r.sentences.shape[0]
        sents[i, :m] = r.sentences
        smask[i, :m] = 1.0
    return Batch(
        pair_ids=np.array([r.pair_id for r in records], dtype=np.int64),
        labels=np.array([r.label for r in records], dtype=np.int64),
        tokens=tokens, sentences=sents, sentence_mask=smask,
        images=np.stack([r.image for r in records]),
    )
