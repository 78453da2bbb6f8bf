"""File formats and the synthetic dataset generator.

Two binary formats, both little-endian:

* FEMB (embeddings): magic ``FEMB``, u32 version, u32 feature dim D,
  u64 record count, then per record a u16-length-prefixed UTF-8 id,
  u32 frame count T, and T*D float32 values.  Storage is 32-bit;
  reading upconverts to float64.
* FCKP (checkpoints): magic ``FCKP``, u32 version, u32-length-prefixed
  UTF-8 JSON metadata, u32 tensor count, then per tensor a u16-length-
  prefixed name, u32 rank, u32 dims, and float64 data.

Labels and predictions are CSV with fixed headers.  Every writer/reader
pair round-trips bit-exactly.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .metrics import (
    ATTRIBUTE_RANGE,
    EMOTION_CODES,
    clamp_attributes,
    code_to_index,
    validate_attributes,
)

EMB_MAGIC = b"FEMB"
EMB_VERSION = 1
CKPT_MAGIC = b"FCKP"
CKPT_VERSION = 1

SPLITS = ("train", "dev", "test1")

LABELS_HEADER = ["id", "split", "emotion", "arousal", "valence", "dominance"]
PREDICTIONS_HEADER = ["id", "emotion", "arousal", "valence", "dominance"]


class FormatError(ValueError):
    """Malformed binary file; carries the byte offset of the defect."""

    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


# ---------------------------------------------------------------------------
# embeddings (FEMB)

def write_embeddings(path, items: Sequence[tuple[str, np.ndarray]], dim: int | None = None) -> None:
    """Write (id, T x D float matrix) pairs; ``dim`` is required when empty."""
    if items:
        first = np.asarray(items[0][1])
        if first.ndim != 2:
            raise ValueError(f"embeddings must be T x D matrices, got shape {first.shape}")
        if dim is None:
            dim = first.shape[1]
    elif dim is None:
        raise ValueError("dim is required when writing an empty embeddings file")
    with open(path, "wb") as f:
        f.write(struct.pack("<4sIIQ", EMB_MAGIC, EMB_VERSION, dim, len(items)))
        for name, mat in items:
            arr = np.asarray(mat, dtype=np.float64)
            if arr.ndim != 2 or arr.shape[1] != dim:
                raise ValueError(
                    f"record {name!r}: expected T x {dim} matrix, got shape {arr.shape}"
                )
            if arr.shape[0] < 1:
                raise ValueError(f"record {name!r}: empty frame sequence")
            encoded = name.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise ValueError(f"record id too long: {name!r}")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.shape[0]))
            f.write(arr.astype("<f4").tobytes())


def _read_exact(f, n: int, offset: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file while reading {what}", offset)
    return buf


def read_embeddings(path) -> list[tuple[str, np.ndarray]]:
    """Read an FEMB file into (id, T x D float64 matrix) pairs."""
    with open(path, "rb") as f:
        offset = 0
        header = _read_exact(f, 20, offset, "header")
        magic, version, dim, count = struct.unpack("<4sIIQ", header)
        if magic != EMB_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {EMB_MAGIC!r}", 0)
        if version != EMB_VERSION:
            raise FormatError(f"unsupported version {version}", 4)
        offset = 20
        out: list[tuple[str, np.ndarray]] = []
        for _ in range(count):
            (id_len,) = struct.unpack("<H", _read_exact(f, 2, offset, "id length"))
            offset += 2
            name = _read_exact(f, id_len, offset, "record id").decode("utf-8")
            offset += id_len
            (frames,) = struct.unpack("<I", _read_exact(f, 4, offset, "frame count"))
            offset += 4
            nbytes = frames * dim * 4
            raw = _read_exact(f, nbytes, offset, f"record {name!r} data")
            offset += nbytes
            mat = np.frombuffer(raw, dtype="<f4").reshape(frames, dim).astype(np.float64)
            out.append((name, mat))
        if f.read(1):
            raise FormatError("trailing bytes after last record", offset)
    return out


# ---------------------------------------------------------------------------
# labels and records

@dataclass
class UtteranceRecord:
    id: str
    split: str
    speech_frames: np.ndarray | None = None
    text_tokens: np.ndarray | None = None
    emotion: str | None = None
    attributes: tuple[float, float, float] | None = None

    def __post_init__(self) -> None:
        if self.split not in SPLITS:
            raise ValueError(f"record {self.id!r}: unknown split {self.split!r}")
        if self.emotion is None and self.attributes is None:
            raise ValueError(f"record {self.id!r}: needs an emotion or attributes")
        if self.emotion is not None:
            code_to_index(self.emotion)
        if self.attributes is not None:
            self.attributes = validate_attributes(self.attributes)
        for name, mat in (("speech_frames", self.speech_frames), ("text_tokens", self.text_tokens)):
            if mat is not None and (mat.ndim != 2 or mat.shape[0] < 1):
                raise ValueError(f"record {self.id!r}: {name} must be a T x D matrix with T >= 1")


@dataclass(frozen=True)
class LabelRow:
    id: str
    split: str
    emotion: str | None
    attributes: tuple[float, float, float] | None


def read_labels(path) -> list[LabelRow]:
    rows: list[LabelRow] = []
    seen: set[str] = set()
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty labels file") from None
        if header != LABELS_HEADER:
            raise ValueError(f"{path}: line 1: bad header {header!r}")
        for lineno, cells in enumerate(reader, start=2):
            if len(cells) != 6:
                raise ValueError(f"{path}: line {lineno}: expected 6 fields, got {len(cells)}")
            rid, split, emotion, *attrs = cells
            if rid in seen:
                raise ValueError(f"{path}: line {lineno}: duplicate id {rid!r}")
            seen.add(rid)
            if split not in SPLITS:
                raise ValueError(f"{path}: line {lineno}: unknown split {split!r}")
            emo = emotion or None
            if emo is not None and emo not in EMOTION_CODES:
                raise ValueError(f"{path}: line {lineno}: unknown emotion code {emo!r}")
            filled = [a for a in attrs if a != ""]
            if filled and len(filled) != 3:
                raise ValueError(f"{path}: line {lineno}: partial attribute triple")
            triple = None
            if filled:
                try:
                    vals = tuple(float(a) for a in attrs)
                except ValueError:
                    raise ValueError(f"{path}: line {lineno}: non-numeric attribute") from None
                lo, hi = ATTRIBUTE_RANGE
                for name, v in zip(("arousal", "valence", "dominance"), vals):
                    if not lo <= v <= hi:
                        raise ValueError(
                            f"{path}: line {lineno}: attribute {name} out of range "
                            f"[{lo:g}, {hi:g}]: {v}"
                        )
                triple = vals
            if emo is None and triple is None:
                raise ValueError(f"{path}: line {lineno}: neither emotion nor attributes present")
            rows.append(LabelRow(id=rid, split=split, emotion=emo, attributes=triple))
    return rows


def write_labels(path, rows: Sequence[LabelRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(LABELS_HEADER)
        for row in rows:
            attrs = ["", "", ""] if row.attributes is None else [repr(v) for v in row.attributes]
            writer.writerow([row.id, row.split, row.emotion or ""] + attrs)


def assemble_records(
    labels: Sequence[LabelRow],
    speech: Sequence[tuple[str, np.ndarray]] | None = None,
    text: Sequence[tuple[str, np.ndarray]] | None = None,
) -> list[UtteranceRecord]:
    """Join label rows with per-modality embeddings by id."""
    smap = dict(speech) if speech is not None else {}
    tmap = dict(text) if text is not None else {}
    records = []
    for row in labels:
        sf = smap.get(row.id)
        tt = tmap.get(row.id)
        if speech is not None and sf is None:
            raise ValueError(f"record {row.id!r}: missing speech embeddings")
        if text is not None and tt is None:
            raise ValueError(f"record {row.id!r}: missing text embeddings")
        records.append(
            UtteranceRecord(
                id=row.id,
                split=row.split,
                speech_frames=sf,
                text_tokens=tt,
                emotion=row.emotion,
                attributes=row.attributes,
            )
        )
    return records


# ---------------------------------------------------------------------------
# synthetic data

DEFAULT_ANCHORS = np.array(
    [
        # arousal, valence, dominance per class, conventional affect positions
        [5.8, 2.0, 5.2],  # A anger
        [3.4, 2.4, 4.6],  # C contempt
        [4.4, 1.8, 4.0],  # D disgust
        [5.4, 2.2, 2.2],  # F fear
        [5.0, 6.2, 5.0],  # H happiness
        [4.0, 4.0, 4.0],  # N neutral
        [2.4, 1.9, 2.4],  # S sadness
        [5.6, 4.8, 3.4],  # U surprise
    ]
)


@dataclass(frozen=True)
class SynthConfig:
    class_counts: tuple[int, ...] = (250,) * 8
    speech_dim: int = 12
    text_dim: int = 12
    frame_range: tuple[int, int] = (4, 10)
    separation: float = 1.5
    noise_sigma: float = 0.3
    anchors: np.ndarray = field(default_factory=lambda: DEFAULT_ANCHORS.copy())
    split_fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
    seed: int = 0

    def __post_init__(self) -> None:
        counts = tuple(int(c) for c in self.class_counts)
        if len(counts) != 8 or any(c < 0 for c in counts):
            raise ValueError("class_counts must be 8 non-negative integers")
        if sum(1 for c in counts if c > 0) < 2:
            raise ValueError("need at least 2 non-empty classes")
        object.__setattr__(self, "class_counts", counts)
        if self.speech_dim < 1 or self.text_dim < 1:
            raise ValueError("feature dims must be >= 1")
        lo, hi = self.frame_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad frame range {self.frame_range}")
        if self.noise_sigma <= 0:
            raise ValueError("noise_sigma must be > 0")
        if self.separation < 0:
            raise ValueError("separation must be >= 0")
        a = np.asarray(self.anchors, dtype=np.float64)
        if a.shape != (8, 3):
            raise ValueError(f"anchors must be 8 x 3, got shape {a.shape}")
        rlo, rhi = ATTRIBUTE_RANGE
        if a.min() < rlo or a.max() > rhi:
            raise ValueError(f"anchors must lie in [{rlo:g}, {rhi:g}]")
        object.__setattr__(self, "anchors", a)
        fr = self.split_fractions
        if len(fr) != 3 or any(x < 0 for x in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError("split_fractions must be 3 non-negative values summing to 1")


def _unit_direction(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


def gen_synthetic(cfg: SynthConfig) -> list[UtteranceRecord]:
    """Seeded synthetic records with class-informative features.

    Each class gets a unit direction per modality; frames are that
    direction scaled by the separation plus Gaussian noise.  Attributes
    are the class anchor plus noise, clamped to the attribute range.
    Output is a deterministic function of the config.
    """
    rng = np.random.default_rng(cfg.seed)
    lo, hi = cfg.frame_range
    records: list[UtteranceRecord] = []
    uid = 0
    for c, count in enumerate(cfg.class_counts):
        if count == 0:
            continue
        s_dir = _unit_direction(rng, cfg.speech_dim) * cfg.separation
        t_dir = _unit_direction(rng, cfg.text_dim) * cfg.separation
        class_records = []
        for _ in range(count):
            ts = int(rng.integers(lo, hi + 1))
            tt = int(rng.integers(lo, hi + 1))
            frames = s_dir + rng.normal(0.0, cfg.noise_sigma, size=(ts, cfg.speech_dim))
            tokens = t_dir + rng.normal(0.0, cfg.noise_sigma, size=(tt, cfg.text_dim))
            attrs = cfg.anchors[c] + rng.normal(0.0, cfg.noise_sigma, size=3)
            attrs, _ = clamp_attributes(attrs)
            class_records.append((frames, tokens, attrs))
        # stratified split so each class appears in every non-empty split
        n = len(class_records)
        n_dev = int(n * cfg.split_fractions[1])
        n_test = int(n * cfg.split_fractions[2])
        n_train = n - n_dev - n_test
        splits = ["train"] * n_train + ["dev"] * n_dev + ["test1"] * n_test
        for (frames, tokens, attrs), split in zip(class_records, splits):
            records.append(
                UtteranceRecord(
                    id=f"synth-{uid:05d}",
                    split=split,
                    speech_frames=frames,
                    text_tokens=tokens,
                    emotion=EMOTION_CODES[c],
                    attributes=attrs,
                )
            )
            uid += 1
    return records


def write_dataset(out_dir, records: Sequence[UtteranceRecord]) -> dict[str, Path]:
    """Write speech/text FEMB files plus the labels CSV into a directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "speech": out / "speech.femb",
        "text": out / "text.femb",
        "labels": out / "labels.csv",
    }
    speech = [(r.id, r.speech_frames) for r in records if r.speech_frames is not None]
    text = [(r.id, r.text_tokens) for r in records if r.text_tokens is not None]
    sdim = speech[0][1].shape[1] if speech else 0
    tdim = text[0][1].shape[1] if text else 0
    write_embeddings(paths["speech"], speech, dim=sdim)
    write_embeddings(paths["text"], text, dim=tdim)
    rows = [
        LabelRow(id=r.id, split=r.split, emotion=r.emotion, attributes=r.attributes)
        for r in records
    ]
    write_labels(paths["labels"], rows)
    return paths


def load_dataset(data_dir) -> list[UtteranceRecord]:
    d = Path(data_dir)
    labels = read_labels(d / "labels.csv")
    speech = read_embeddings(d / "speech.femb") if (d / "speech.femb").exists() else None
    text = read_embeddings(d / "text.femb") if (d / "text.femb").exists() else None
    return assemble_records(labels, speech=speech, text=text)


# ---------------------------------------------------------------------------
# checkpoints (FCKP)

def write_checkpoint(path, tensors: dict[str, np.ndarray], metadata: dict) -> None:
    names = list(tensors)
    if len(set(names)) != len(names):
        raise ValueError("duplicate tensor names")
    meta_bytes = json.dumps(metadata, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<4sI", CKPT_MAGIC, CKPT_VERSION))
        f.write(struct.pack("<I", len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<I", len(names)))
        for name in names:
            arr = np.ascontiguousarray(np.asarray(tensors[name], dtype=np.float64))
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f8").tobytes())


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        offset = 0
        magic, version = struct.unpack("<4sI", _read_exact(f, 8, offset, "header"))
        if magic != CKPT_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {CKPT_MAGIC!r}", 0)
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported version {version}", 4)
        offset = 8
        (meta_len,) = struct.unpack("<I", _read_exact(f, 4, offset, "metadata length"))
        offset += 4
        metadata = json.loads(_read_exact(f, meta_len, offset, "metadata").decode("utf-8"))
        offset += meta_len
        (count,) = struct.unpack("<I", _read_exact(f, 4, offset, "tensor count"))
        offset += 4
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, offset, "tensor name length"))
            offset += 2
            name = _read_exact(f, name_len, offset, "tensor name").decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack("<I", _read_exact(f, 4, offset, "tensor rank"))
            offset += 4
            shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, offset, "tensor shape"))
            offset += 4 * rank
            nbytes = int(np.prod(shape, dtype=np.int64)) * 8 if rank else 8
            raw = _read_exact(f, nbytes, offset, f"tensor {name!r} data")
            offset += nbytes
            tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        if f.read(1):
            raise FormatError("trailing bytes after last tensor", offset)
    return tensors, metadata


# ---------------------------------------------------------------------------
# prediction sets

@dataclass
class PredictionSet:
    task: str
    ids: list[str] = field(default_factory=list)
    labels: dict[str, str] = field(default_factory=dict)
    logits: dict[str, np.ndarray] = field(default_factory=dict)
    attributes: dict[str, tuple[float, float, float]] = field(default_factory=dict)
    clamped: set[str] = field(default_factory=set)

    def add_label(self, rid: str, label: str, logits: np.ndarray | None = None) -> None:
        self.ids.append(rid)
        self.labels[rid] = label
        if logits is not None:
            self.logits[rid] = logits

    def add_attributes(self, rid: str, triple, clamped: bool = False) -> None:
        self.ids.append(rid)
        self.attributes[rid] = tuple(float(v) for v in triple)
        if clamped:
            self.clamped.add(rid)


def write_predictions(path, preds: PredictionSet) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(PREDICTIONS_HEADER)
        for rid in preds.ids:
            emo = preds.labels.get(rid, "")
            triple = preds.attributes.get(rid)
            attrs = ["", "", ""] if triple is None else [repr(v) for v in triple]
            writer.writerow([rid, emo] + attrs)


def read_predictions(path) -> PredictionSet:
    preds = PredictionSet(task="unknown")
    has_labels = False
    has_attrs = False
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != PREDICTIONS_HEADER:
            raise ValueError(f"{path}: bad predictions header {header!r}")
        for lineno, cells in enumerate(reader, start=2):
            if len(cells) != 5:
                raise ValueError(f"{path}: line {lineno}: expected 5 fields")
            rid, emo, *attrs = cells
            preds.ids.append(rid)
            if emo:
                if emo not in EMOTION_CODES:
                    raise ValueError(f"{path}: line {lineno}: unknown emotion code {emo!r}")
                preds.labels[rid] = emo
                has_labels = True
            filled = [a for a in attrs if a != ""]
            if filled:
                if len(filled) != 3:
                    raise ValueError(f"{path}: line {lineno}: partial attribute triple")
                preds.attributes[rid] = tuple(float(a) for a in attrs)
                has_attrs = True
    if has_labels and has_attrs:
        preds.task = "both"
    elif has_attrs:
        preds.task = "attributes"
    elif has_labels:
        preds.task = "categorical"
    return preds
