import json
import os
from pathlib import Path

import numpy as np
import pytest

from repfuse.fusion import compute_delta
from repfuse.store import load_manifest, load_sequence
from repfuse.synth import (
    AUX_MODEL,
    CONFUSABLE_PAIRS,
    REF_MODEL,
    SYMBOLS,
    SynthConfig,
    generate_dataset,
)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthgen")
    truth = generate_dataset(str(root), SynthConfig(seed=5, n_train=8, n_dev=4, n_test=4))
    return str(root), truth


def test_confusable_pairs_share_reference_means_exactly(dataset):
    _, truth = dataset
    for a, b in CONFUSABLE_PAIRS:
        assert truth["class_means"][a] == truth["class_means"][b]


def test_delta_vectors_distinguish_confusable_pairs(dataset):
    _, truth = dataset
    for a, b in CONFUSABLE_PAIRS:
        assert truth["delta_vectors"][a] != truth["delta_vectors"][b]


def test_compute_delta_recovers_disambiguation_vectors_exactly(dataset):
    root, truth = dataset
    records = load_manifest(os.path.join(root, "train.jsonl"))
    for rec in records[:4]:
        align = truth["frame_alignments"][rec.utterance_id]
        expected = np.stack(
            [np.asarray(truth["delta_vectors"][sym], np.float32) for sym in align]
        )
        for model in (REF_MODEL, AUX_MODEL):
            ft = load_sequence(rec, model, 0, "finetuned", root)
            pt = load_sequence(rec, model, 0, "pretrained", root)
            delta = compute_delta(ft, pt)
            assert delta.frames.tobytes() == expected.tobytes()


def test_streams_frame_aligned_across_models_and_variants(dataset):
    root, truth = dataset
    records = load_manifest(os.path.join(root, "dev.jsonl"))
    for rec in records:
        t_counts = {
            load_sequence(rec, model, 0, variant, root).n_frames
            for model in (REF_MODEL, AUX_MODEL)
            for variant in ("finetuned", "pretrained")
        }
        assert len(t_counts) == 1
        assert t_counts.pop() == len(truth["frame_alignments"][rec.utterance_id])


def test_transcripts_cover_alphabet_and_split_sizes(dataset):
    root, truth = dataset
    sizes = {"train": 8, "dev": 4, "test": 4}
    for split, n in sizes.items():
        records = load_manifest(os.path.join(root, f"{split}.jsonl"))
        assert len(records) == n
        for rec in records:
            assert set(rec.transcript) <= set(SYMBOLS)


def test_frame_alignment_matches_transcript_order(dataset):
    root, truth = dataset
    records = load_manifest(os.path.join(root, "test.jsonl"))
    for rec in records:
        align = truth["frame_alignments"][rec.utterance_id]
        collapsed = "".join(c for i, c in enumerate(align) if i == 0 or align[i - 1] != c)
        assert collapsed == rec.transcript


def test_same_seed_reproduces_identical_bytes(tmp_path):
    cfg = SynthConfig(seed=9, n_train=4, n_dev=2, n_test=2)
    a = tmp_path / "a"
    b = tmp_path / "b"
    generate_dataset(str(a), cfg)
    generate_dataset(str(b), cfg)
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (a / rel).read_bytes() == (b / rel).read_bytes()


def test_no_adjacent_repeated_letters_within_words(dataset):
    root, _ = dataset
    for split in ("train", "dev", "test"):
        for rec in load_manifest(os.path.join(root, f"{split}.jsonl")):
            for word in rec.transcript.split():
                assert all(x != y for x, y in zip(word, word[1:]))
