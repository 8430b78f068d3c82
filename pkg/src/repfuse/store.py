"""On-disk formats: EMB1 embedding dumps, line-JSON manifests, character vocabulary.

EMB1 layout (all little-endian): magic ``EMB1``, u32 version (=1), u32 T,
u32 d, then T*d float32 values in row-major order. One file holds the frames
of one (utterance, model, layer, variant) combination; everything else lives
in the manifest.

A manifest is UTF-8 line-delimited JSON. Each line: ``id``, ``transcript``,
``paths`` (object mapping "model/layer/variant" to a path relative to the
manifest file), optional ``duration_s``.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import (
    FormatError,
    ManifestParseError,
    ShapeError,
    TruncationError,
    ValidationError,
)

EMB_MAGIC = b"EMB1"
EMB_VERSION = 1
_HEADER = struct.Struct("<4sIII")

VARIANTS = ("pretrained", "finetuned", "delta")
BLANK = "<blank>"


@dataclass(frozen=True, eq=False)
class EmbeddingSequence:
    """One utterance's T x d frame matrix from one model / layer / variant."""

    utterance_id: str
    model_tag: str
    layer: int
    variant: str
    frames: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, EmbeddingSequence):
            return NotImplemented
        return (
            (self.utterance_id, self.model_tag, self.layer, self.variant)
            == (other.utterance_id, other.model_tag, other.layer, other.variant)
            and self.frames.shape == other.frames.shape
            and self.frames.tobytes() == other.frames.tobytes()
        )

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.layer < 0:
            raise ValidationError(f"layer must be >= 0, got {self.layer}")
        frames = np.ascontiguousarray(self.frames, dtype=np.float32)
        if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] < 1:
            raise ShapeError(f"frames must be a non-empty 2-D matrix, got shape {frames.shape}")
        if not np.isfinite(frames).all():
            raise ValidationError("frames must be finite")
        object.__setattr__(self, "frames", frames)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


def write_emb(seq: EmbeddingSequence, path) -> None:
    t, d = seq.frames.shape
    try:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(EMB_MAGIC, EMB_VERSION, t, d))
            fh.write(seq.frames.astype("<f4", copy=False).tobytes())
    except OSError as exc:
        raise OSError(f"cannot write embedding file {path}: {exc}") from exc


def read_emb(path, *, utterance_id: str = "", model_tag: str = "",
             layer: int = 0, variant: str = "finetuned") -> EmbeddingSequence:
    """Read an EMB1 file; metadata keywords fill the fields the file does not carry."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read embedding file {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise TruncationError(f"{path}: file shorter than EMB1 header")
    magic, version, t, d = _HEADER.unpack_from(raw)
    if magic != EMB_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {EMB_MAGIC!r}")
    if version != EMB_VERSION:
        raise FormatError(f"{path}: unsupported EMB1 version {version}")
    if t < 1 or d < 1:
        raise FormatError(f"{path}: invalid dimensions T={t}, d={d}")
    expected = _HEADER.size + 4 * t * d
    if len(raw) < expected:
        raise TruncationError(
            f"{path}: header declares {t}x{d} frames ({expected} bytes) but file has {len(raw)}"
        )
    if len(raw) > expected:
        raise FormatError(f"{path}: {len(raw) - expected} trailing bytes after payload")
    frames = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(t, d).copy()
    return EmbeddingSequence(utterance_id, model_tag, layer, variant, frames)


def normalize_text(text: str) -> str:
    """Lowercase, keep letters/digits/apostrophes, drop other punctuation, collapse spaces."""
    out = []
    for ch in text.lower():
        if ch.isalnum() or ch == "'":
            out.append(ch)
        elif ch.isspace():
            out.append(" ")
        # other punctuation dropped outright
    return " ".join("".join(out).split())


def format_stream_key(model_tag: str, layer: int, variant: str) -> str:
    return f"{model_tag}/{layer}/{variant}"


def parse_stream_key(key: str) -> tuple[str, int, str]:
    parts = key.split("/")
    if len(parts) != 3:
        raise ValidationError(f"path key {key!r} is not model/layer/variant")
    model_tag, layer_s, variant = parts
    try:
        layer = int(layer_s)
    except ValueError:
        raise ValidationError(f"path key {key!r} has non-integer layer") from None
    if variant not in VARIANTS:
        raise ValidationError(f"path key {key!r} has unknown variant {variant!r}")
    return model_tag, layer, variant


@dataclass(frozen=True)
class UtteranceRecord:
    """Binds an utterance id and normalized transcript to its dump files."""

    utterance_id: str
    transcript: str
    dump_paths: dict[str, str] = field(default_factory=dict)  # "model/layer/variant" -> relpath
    duration_s: float | None = None

    def path_for(self, model_tag: str, layer: int, variant: str) -> str | None:
        return self.dump_paths.get(format_stream_key(model_tag, layer, variant))

    def streams(self) -> list[tuple[str, int, str]]:
        return [parse_stream_key(k) for k in self.dump_paths]


def load_manifest(path) -> list[UtteranceRecord]:
    """Parse and validate a line-JSON manifest, preserving record order."""
    records: list[UtteranceRecord] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestParseError(f"invalid JSON ({exc.msg})", line_no) from None
            if not isinstance(obj, dict):
                raise ManifestParseError("record is not a JSON object", line_no)
            for key in ("id", "transcript"):
                if key not in obj:
                    raise ManifestParseError(f"missing field {key!r}", line_no)
            utt_id = str(obj["id"])
            if utt_id in seen:
                raise ValidationError(f"duplicate utterance id {utt_id!r} (line {line_no})")
            seen.add(utt_id)
            transcript = normalize_text(str(obj["transcript"]))
            if not transcript:
                raise ValidationError(
                    f"utterance {utt_id!r} has empty transcript after normalization (line {line_no})"
                )
            raw_paths = obj.get("paths", {})
            if not isinstance(raw_paths, dict):
                raise ManifestParseError("'paths' must be an object", line_no)
            paths: dict[str, str] = {}
            for key, rel in raw_paths.items():
                parse_stream_key(key)  # validates the key shape
                paths[key] = str(rel)
            duration = obj.get("duration_s")
            records.append(
                UtteranceRecord(utt_id, transcript, paths, None if duration is None else float(duration))
            )
    return records


def save_manifest(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            obj = {"id": rec.utterance_id, "transcript": rec.transcript, "paths": dict(rec.dump_paths)}
            if rec.duration_s is not None:
                obj["duration_s"] = rec.duration_s
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


def load_sequence(record: UtteranceRecord, model_tag: str, layer: int, variant: str,
                  root) -> EmbeddingSequence:
    """Read the dump a record points at for one stream, filling in metadata."""
    rel = record.path_for(model_tag, layer, variant)
    if rel is None:
        from .errors import PairingError

        raise PairingError(
            f"utterance {record.utterance_id!r} has no dump for "
            f"{format_stream_key(model_tag, layer, variant)}"
        )
    return read_emb(
        os.path.join(root, rel),
        utterance_id=record.utterance_id,
        model_tag=model_tag,
        layer=layer,
        variant=variant,
    )


@dataclass(frozen=True)
class Vocab:
    """Character inventory for the CTC head. Index 0 is always the blank."""

    chars: tuple[str, ...]

    blank_index = 0

    def __post_init__(self):
        if len(self.chars) < 2:
            raise ValidationError("vocab needs the blank plus at least one symbol")
        if self.chars[0] != BLANK:
            raise ValidationError(f"vocab must start with the blank symbol {BLANK!r}")
        if len(set(self.chars)) != len(self.chars):
            raise ValidationError("vocab symbols must be unique")

    @cached_property
    def _index(self) -> dict[str, int]:
        return {c: i for i, c in enumerate(self.chars)}

    def __len__(self) -> int:
        return len(self.chars)

    def encode(self, text: str) -> list[int]:
        try:
            return [self._index[c] for c in text]
        except KeyError as exc:
            raise ValidationError(f"character {exc.args[0]!r} not in vocab") from None

    def decode(self, ids) -> str:
        return "".join(self.chars[i] for i in ids)


def build_vocab(records) -> Vocab:
    """Blank plus the sorted set of characters seen in the records' transcripts."""
    records = list(records)
    if not records:
        raise ValidationError("cannot build a vocab from zero records")
    symbols = sorted({ch for rec in records for ch in rec.transcript})
    return Vocab((BLANK, *symbols))
