"""Synthetic paired-stream dataset for end-to-end verification at desk scale.

The generator writes pre-trained and fine-tuned dumps for two pseudo-models
plus train/dev/test manifests. Character acoustics are class means plus
Gaussian noise, and two designated letter pairs share their class mean in
every fine-tuned stream: from the reference stream alone those letters are
indistinguishable in principle. The pre-trained stream of each model is its
fine-tuned stream minus a per-character disambiguation vector, so the delta
stream recovers that vector exactly and carries precisely the information
the reference is missing.

All values are kept on a 2^-10 grid, which makes every stream sum and
difference exact in float32 (grid multiples are exactly representable far
beyond the value range used here); the fine-tuned minus pre-trained
subtraction therefore reproduces the disambiguation vectors bit-for-bit.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .store import EmbeddingSequence, UtteranceRecord, format_stream_key, save_manifest, write_emb

ALPHABET = "abcdefgh"
CONFUSABLE_PAIRS = (("a", "b"), ("c", "d"))
SYMBOLS = ALPHABET + " "
REF_MODEL = "ssl_ref"
AUX_MODEL = "ssl_aux"

GRID = 2.0 ** -10
MEAN_SCALE = 1.5
DELTA_SCALE = 1.0


@dataclass
class SynthConfig:
    seed: int = 0
    n_train: int = 500
    n_dev: int = 100
    n_test: int = 100
    dim: int = 32
    sigma: float = 0.5
    frames_min: int = 2
    frames_max: int = 4
    words_min: int = 2
    words_max: int = 5
    word_len_min: int = 2
    word_len_max: int = 6


def _quantize(a: np.ndarray) -> np.ndarray:
    return (np.round(np.asarray(a, dtype=np.float64) / GRID) * GRID).astype(np.float32)


def _class_tables(rng: np.random.Generator, dim: int):
    shared = {b: a for a, b in CONFUSABLE_PAIRS}
    means: dict[str, np.ndarray] = {}
    for sym in SYMBOLS:
        if sym in shared:
            means[sym] = means[shared[sym]].copy()  # confusable partner: identical mean
        else:
            means[sym] = _quantize(rng.normal(0.0, MEAN_SCALE, size=dim))
    deltas = {sym: _quantize(rng.normal(0.0, DELTA_SCALE, size=dim)) for sym in SYMBOLS}
    return means, deltas


def _sentence(rng: np.random.Generator, cfg: SynthConfig) -> str:
    words = []
    for _ in range(int(rng.integers(cfg.words_min, cfg.words_max + 1))):
        length = int(rng.integers(cfg.word_len_min, cfg.word_len_max + 1))
        chars = []
        for _ in range(length):
            choices = [c for c in ALPHABET if not chars or c != chars[-1]]
            chars.append(choices[int(rng.integers(0, len(choices)))])
        words.append("".join(chars))
    return " ".join(words)


def generate_dataset(out_dir, cfg: SynthConfig) -> dict:
    """Write dumps + manifests under `out_dir`; returns the ground-truth tables."""
    rng = np.random.default_rng(cfg.seed)
    means, deltas = _class_tables(rng, cfg.dim)
    dump_dir = os.path.join(out_dir, "dumps")
    os.makedirs(dump_dir, exist_ok=True)

    alignments: dict[str, str] = {}
    split_ids: dict[str, list[str]] = {}
    for split, count in (("train", cfg.n_train), ("dev", cfg.n_dev), ("test", cfg.n_test)):
        records = []
        split_ids[split] = []
        for i in range(count):
            utt_id = f"{split}-{i:04d}"
            transcript = _sentence(rng, cfg)
            frame_syms: list[str] = []
            for sym in transcript:
                frame_syms.extend(sym * int(rng.integers(cfg.frames_min, cfg.frames_max + 1)))
            t = len(frame_syms)
            mean_rows = np.stack([means[s] for s in frame_syms])
            delta_rows = np.stack([deltas[s] for s in frame_syms])
            paths: dict[str, str] = {}
            for model in (REF_MODEL, AUX_MODEL):
                noise = _quantize(rng.normal(0.0, cfg.sigma, size=(t, cfg.dim)))
                ft = mean_rows + noise          # exact: both addends on the grid
                pt = ft - delta_rows
                for variant, frames in (("finetuned", ft), ("pretrained", pt)):
                    name = f"{utt_id}__{model}__L0__{variant}.emb"
                    write_emb(
                        EmbeddingSequence(utt_id, model, 0, variant, frames),
                        os.path.join(dump_dir, name),
                    )
                    paths[format_stream_key(model, 0, variant)] = f"dumps/{name}"
            records.append(UtteranceRecord(utt_id, transcript, paths))
            alignments[utt_id] = "".join(frame_syms)
            split_ids[split].append(utt_id)
        save_manifest(records, os.path.join(out_dir, f"{split}.jsonl"))

    truth = {
        "alphabet": ALPHABET,
        "confusable_pairs": [list(p) for p in CONFUSABLE_PAIRS],
        "class_means": {s: means[s].tolist() for s in SYMBOLS},
        "delta_vectors": {s: deltas[s].tolist() for s in SYMBOLS},
        "frame_alignments": alignments,
        "split_ids": split_ids,
        "models": [REF_MODEL, AUX_MODEL],
    }
    with open(os.path.join(out_dir, "truth.json"), "w", encoding="utf-8") as fh:
        json.dump(truth, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return truth
