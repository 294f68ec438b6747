"""Embedding datasets: JSONL and packed binary formats, synthetic generation, PK sampling.

Vectors are stored as float32 on disk and in memory so that both formats
round-trip bit-exactly.

JSONL layout: a header object ``{"img_dim", "txt_dim", "num_identities",
"count"}`` on the first line, then one record object per line with keys
``id, label, camera, image_vec, text_tokens``.

Binary layout (little-endian)::

    b"GPFE" | u16 version=1 | u32 img_dim | u32 txt_dim | u32 num_identities | u64 count
    per record: u16 len + utf-8 id | u32 label | i64 camera (-1 = none)
                | u16 n_tokens | f32[img_dim] image_vec | f32[n_tokens*txt_dim] tokens
"""

from __future__ import annotations

import json
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"GPFE"
VERSION = 1
LATENT_DIM = 32

_HEADER = struct.Struct("<4sHIIIQ")


class DatasetError(ValueError):
    pass


class DatasetParseError(DatasetError):
    pass


class DatasetValidationError(DatasetError):
    pass


class SamplingError(DatasetError):
    pass


@dataclass
class EmbeddingRecord:
    id: str
    label: int
    camera: int | None
    image_vec: np.ndarray
    text_tokens: np.ndarray

    def __post_init__(self):
        self.image_vec = np.asarray(self.image_vec, dtype=np.float32)
        self.text_tokens = np.asarray(self.text_tokens, dtype=np.float32)
        if self.text_tokens.ndim == 1:
            self.text_tokens = self.text_tokens[None, :]


@dataclass
class Dataset:
    img_dim: int
    txt_dim: int
    num_identities: int
    records: list[EmbeddingRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def count(self) -> int:
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    @property
    def cameras(self) -> list[int | None]:
        return [r.camera for r in self.records]

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def images(self) -> np.ndarray:
        if not self.records:
            return np.zeros((0, self.img_dim))
        return np.stack([r.image_vec for r in self.records]).astype(np.float64)

    def tokens(self) -> list[np.ndarray]:
        return [r.text_tokens.astype(np.float64) for r in self.records]

    def label_counts(self) -> Counter:
        return Counter(r.label for r in self.records)

    def validate(self) -> None:
        seen = set()
        for r in self.records:
            validate_record(r, self.img_dim, self.txt_dim, self.num_identities)
            if r.id in seen:
                raise DatasetValidationError(f"record {r.id!r}: duplicate id")
            seen.add(r.id)


def validate_record(r: EmbeddingRecord, img_dim: int, txt_dim: int, num_identities: int) -> None:
    if r.image_vec.shape != (img_dim,):
        raise DatasetValidationError(
            f"record {r.id!r}: image_vec length {r.image_vec.size} != img_dim {img_dim}"
        )
    if r.text_tokens.ndim != 2 or r.text_tokens.shape[0] < 1 or r.text_tokens.shape[1] != txt_dim:
        raise DatasetValidationError(
            f"record {r.id!r}: text_tokens shape {r.text_tokens.shape}, expected (n>=1, {txt_dim})"
        )
    if not 0 <= r.label < num_identities:
        raise DatasetValidationError(
            f"record {r.id!r}: label {r.label} outside [0, {num_identities})"
        )
    if r.camera is not None and r.camera < 0:
        raise DatasetValidationError(f"record {r.id!r}: negative camera {r.camera}")
    if not (np.isfinite(r.image_vec).all() and np.isfinite(r.text_tokens).all()):
        raise DatasetValidationError(f"record {r.id!r}: non-finite values")


# JSONL ---------------------------------------------------------------------

def _floats(a: np.ndarray):
    return [float(v) for v in a]


def save_jsonl(dataset: Dataset, path) -> None:
    header = {
        "img_dim": dataset.img_dim,
        "txt_dim": dataset.txt_dim,
        "num_identities": dataset.num_identities,
        "count": dataset.count,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for r in dataset.records:
            obj = {
                "id": r.id,
                "label": int(r.label),
                "camera": None if r.camera is None else int(r.camera),
                "image_vec": _floats(r.image_vec),
                "text_tokens": [_floats(t) for t in r.text_tokens],
            }
            fh.write(json.dumps(obj) + "\n")


def load_jsonl(path) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetParseError(f"{path}: line 1: missing header")
    try:
        header = json.loads(lines[0])
        ds = Dataset(
            int(header["img_dim"]), int(header["txt_dim"]), int(header["num_identities"])
        )
        count = int(header["count"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DatasetParseError(f"{path}: line 1: bad header: {exc}") from None
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            camera = obj.get("camera")
            rec = EmbeddingRecord(
                id=str(obj["id"]),
                label=int(obj["label"]),
                camera=None if camera is None else int(camera),
                image_vec=np.array(obj["image_vec"], dtype=np.float32),
                text_tokens=np.array(obj["text_tokens"], dtype=np.float32),
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetParseError(f"{path}: line {lineno}: {exc}") from None
        validate_record(rec, ds.img_dim, ds.txt_dim, ds.num_identities)
        ds.records.append(rec)
    if ds.count != count:
        raise DatasetValidationError(f"{path}: header count {count} but {ds.count} records")
    ds.validate()
    return ds


# binary --------------------------------------------------------------------

def save_binary(dataset: Dataset, path) -> None:
    parts = [
        _HEADER.pack(
            MAGIC, VERSION, dataset.img_dim, dataset.txt_dim, dataset.num_identities, dataset.count
        )
    ]
    for r in dataset.records:
        raw_id = r.id.encode("utf-8")
        cam = -1 if r.camera is None else int(r.camera)
        parts.append(struct.pack("<H", len(raw_id)) + raw_id)
        parts.append(struct.pack("<IqH", int(r.label), cam, r.text_tokens.shape[0]))
        parts.append(r.image_vec.astype("<f4").tobytes())
        parts.append(r.text_tokens.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_binary(path) -> Dataset:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise DatasetParseError(f"{path}: truncated header")
    magic, version, img_dim, txt_dim, m, count = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise DatasetParseError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise DatasetParseError(f"{path}: unsupported version {version}")
    ds = Dataset(img_dim, txt_dim, m)
    off = _HEADER.size
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, off)
            off += 2
            rid = buf[off : off + n].decode("utf-8")
            off += n
            label, cam, n_tok = struct.unpack_from("<IqH", buf, off)
            off += 14
            img = np.frombuffer(buf, dtype="<f4", count=img_dim, offset=off).astype(np.float32)
            off += 4 * img_dim
            tok = np.frombuffer(buf, dtype="<f4", count=n_tok * txt_dim, offset=off)
            off += 4 * n_tok * txt_dim
            rec = EmbeddingRecord(
                rid, label, None if cam == -1 else cam, img,
                tok.astype(np.float32).reshape(n_tok, txt_dim),
            )
            validate_record(rec, img_dim, txt_dim, m)
            ds.records.append(rec)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, DatasetValidationError):
            raise
        raise DatasetParseError(f"{path}: record {len(ds.records)}: {exc}") from None
    if off != len(buf):
        raise DatasetParseError(f"{path}: {len(buf) - off} trailing bytes")
    ds.validate()
    return ds


def _is_binary(path) -> bool:
    with open(path, "rb") as fh:
        return fh.read(4) == MAGIC


def load_dataset(path) -> Dataset:
    """Load either format; binary is recognised by its magic bytes."""
    return load_binary(path) if _is_binary(path) else load_jsonl(path)


def save_dataset(dataset: Dataset, path, fmt: str | None = None) -> None:
    if fmt is None:
        fmt = "jsonl" if str(path).endswith((".jsonl", ".json")) else "bin"
    if fmt == "jsonl":
        save_jsonl(dataset, path)
    elif fmt == "bin":
        save_binary(dataset, path)
    else:
        raise ValueError(f"unknown dataset format {fmt!r}")


# synthetic -----------------------------------------------------------------

def gen_synthetic(
    m_identities: int,
    per_id: int,
    img_dim: int = 2048,
    txt_dim: int = 768,
    n_tokens: int = 4,
    noise_sigma: float = 0.1,
    seed: int = 0,
    *,
    text_noise_sigma: float | None = None,
    cameras: int | None = None,
    sample_seed: int | None = None,
    id_prefix: str = "",
) -> Dataset:
    """Low-rank two-modality dataset with one gaussian latent per identity.

    ``image_vec = A @ latent + noise`` and every token is ``B @ latent + noise``;
    the latents and the mixing maps ``A``, ``B`` depend on ``seed`` alone, while
    ``sample_seed`` (default: ``seed``) drives the noise. Two calls sharing
    ``seed`` but with different ``sample_seed`` give fresh samples of the same
    identities. ``text_noise_sigma`` defaults to ``noise_sigma``.
    """
    if min(m_identities, per_id, img_dim, txt_dim, n_tokens) < 1:
        raise ValueError("all counts must be >= 1")
    if noise_sigma < 0 or (text_noise_sigma is not None and text_noise_sigma < 0):
        raise ValueError("noise must be >= 0")
    txt_sigma = noise_sigma if text_noise_sigma is None else text_noise_sigma
    rng = np.random.default_rng(seed)
    latents = rng.normal(size=(m_identities, LATENT_DIM))
    a = rng.normal(size=(img_dim, LATENT_DIM)) / np.sqrt(LATENT_DIM)
    b = rng.normal(size=(txt_dim, LATENT_DIM)) / np.sqrt(LATENT_DIM)
    noise = np.random.default_rng([seed, seed if sample_seed is None else sample_seed, 1])
    ds = Dataset(img_dim, txt_dim, m_identities)
    for label in range(m_identities):
        img_clean = a @ latents[label]
        txt_clean = b @ latents[label]
        for j in range(per_id):
            img = img_clean + noise_sigma * noise.normal(size=img_dim)
            tok = txt_clean[None, :] + txt_sigma * noise.normal(size=(n_tokens, txt_dim))
            ds.records.append(
                EmbeddingRecord(
                    id=f"{id_prefix}{label:04d}_{j:04d}",
                    label=label,
                    camera=None if not cameras else j % cameras,
                    image_vec=img.astype(np.float32),
                    text_tokens=tok.astype(np.float32),
                )
            )
    return ds


# PK sampling ---------------------------------------------------------------

def pk_sample_indices(labels, p: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of ``p`` random identities with ``k`` random samples each, shuffled.

    ``labels`` is a label array or a :class:`Dataset`.
    """
    if isinstance(labels, Dataset):
        labels = labels.labels
    by_label: dict[int, list[int]] = {}
    for i, lab in enumerate(np.asarray(labels).tolist()):
        by_label.setdefault(lab, []).append(i)
    eligible = sorted(lab for lab, idx in by_label.items() if len(idx) >= k)
    if len(eligible) < p:
        raise SamplingError(
            f"need {p} identities with >= {k} samples each, only {len(eligible)} qualify"
        )
    chosen = rng.choice(len(eligible), size=p, replace=False)
    picks = []
    for c in chosen:
        pool = by_label[eligible[c]]
        picks.extend(pool[j] for j in rng.choice(len(pool), size=k, replace=False))
    picks = np.array(picks, dtype=np.int64)
    rng.shuffle(picks)
    return picks


def pk_sample(dataset: Dataset, p: int, k: int, rng: np.random.Generator) -> list[EmbeddingRecord]:
    return [dataset.records[i] for i in pk_sample_indices(dataset.labels, p, k, rng)]
