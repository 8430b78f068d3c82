import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from repfuse.errors import (
    FormatError,
    ManifestParseError,
    TruncationError,
    ValidationError,
)
from repfuse.store import (
    BLANK,
    EmbeddingSequence,
    UtteranceRecord,
    build_vocab,
    load_manifest,
    normalize_text,
    read_emb,
    save_manifest,
    write_emb,
)


def _seq(frames, utt="u1", model="m", layer=0, variant="finetuned"):
    return EmbeddingSequence(utt, model, layer, variant, np.asarray(frames, np.float32))


class TestEmbFormat:
    def test_file_size_matches_layout(self, tmp_path):
        path = tmp_path / "a.emb"
        write_emb(_seq(np.zeros((2, 3))), path)
        assert path.stat().st_size == 4 + 4 + 4 + 4 + 2 * 3 * 4

    def test_round_trip_bit_identical(self, tmp_path):
        frames = np.random.default_rng(0).normal(0, 1, (7, 5)).astype(np.float32)
        path = tmp_path / "b.emb"
        write_emb(_seq(frames), path)
        back = read_emb(path, utterance_id="u1", model_tag="m", layer=0, variant="finetuned")
        assert back.frames.tobytes() == frames.tobytes()
        assert back == _seq(frames)

    def test_unwritable_target(self, tmp_path):
        with pytest.raises(OSError):
            write_emb(_seq(np.zeros((1, 1))), tmp_path)  # a directory, not a file

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "c.emb"
        write_emb(_seq(np.zeros((1, 1))), path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            read_emb(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "d.emb"
        write_emb(_seq(np.zeros((10, 4))), path)
        raw = path.read_bytes()
        path.write_bytes(raw[: 16 + 5 * 4 * 4])  # only 5 of 10 rows
        with pytest.raises(TruncationError):
            read_emb(path)

    def test_unsupported_version(self, tmp_path):
        path = tmp_path / "e.emb"
        write_emb(_seq(np.zeros((1, 1))), path)
        raw = bytearray(path.read_bytes())
        raw[4] = 9
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            read_emb(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "f.emb"
        write_emb(_seq(np.zeros((1, 1))), path)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(FormatError):
            read_emb(path)

    @settings(max_examples=40, deadline=None)
    @given(
        t=st.integers(min_value=1, max_value=12),
        d=st.integers(min_value=1, max_value=9),
        seed=st.integers(min_value=0, max_value=2**31),
    )
    def test_round_trip_property(self, tmp_path_factory, t, d, seed):
        frames = np.random.default_rng(seed).normal(0, 100, (t, d)).astype(np.float32)
        path = tmp_path_factory.mktemp("rt") / "x.emb"
        write_emb(_seq(frames), path)
        assert read_emb(path).frames.tobytes() == frames.tobytes()


class TestNormalizeText:
    @pytest.mark.parametrize(
        "raw,expected",
        [
            ("Hello, World!", "hello world"),
            ("  don't   STOP  ", "don't stop"),
            ("a\tb\nc", "a b c"),
            ("it's 2 o'clock?!", "it's 2 o'clock"),
            ("semi-colon;test", "semicolontest"),
        ],
    )
    def test_policy(self, raw, expected):
        assert normalize_text(raw) == expected


class TestManifest:
    def _write(self, path, lines):
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    def test_order_preserved(self, tmp_path):
        path = tmp_path / "m.jsonl"
        self._write(path, [
            json.dumps({"id": f"u{i}", "transcript": f"text {i}", "paths": {}})
            for i in range(3)
        ])
        records = load_manifest(path)
        assert [r.utterance_id for r in records] == ["u0", "u1", "u2"]

    def test_duplicate_id_named(self, tmp_path):
        path = tmp_path / "m.jsonl"
        self._write(path, [
            json.dumps({"id": "dup", "transcript": "a", "paths": {}}),
            json.dumps({"id": "dup", "transcript": "b", "paths": {}}),
        ])
        with pytest.raises(ValidationError, match="dup"):
            load_manifest(path)

    def test_empty_transcript_after_normalization(self, tmp_path):
        path = tmp_path / "m.jsonl"
        self._write(path, [json.dumps({"id": "u", "transcript": "?!...", "paths": {}})])
        with pytest.raises(ValidationError, match="empty transcript"):
            load_manifest(path)

    def test_malformed_line_reports_number(self, tmp_path):
        path = tmp_path / "m.jsonl"
        self._write(path, [
            json.dumps({"id": "u0", "transcript": "ok", "paths": {}}),
            "{not json",
        ])
        with pytest.raises(ManifestParseError, match="line 2"):
            load_manifest(path)

    def test_bad_path_key_rejected(self, tmp_path):
        path = tmp_path / "m.jsonl"
        self._write(path, [json.dumps({"id": "u", "transcript": "ok", "paths": {"weird": "x.emb"}})])
        with pytest.raises(ValidationError):
            load_manifest(path)

    def test_save_load_round_trip(self, tmp_path):
        records = [
            UtteranceRecord("u0", "hello there", {"m/0/finetuned": "d/u0.emb"}, 1.5),
            UtteranceRecord("u1", "bye", {"m/0/pretrained": "d/u1.emb"}),
        ]
        path = tmp_path / "m.jsonl"
        save_manifest(records, path)
        assert load_manifest(path) == records


class TestVocab:
    def test_chars_without_space(self):
        records = [UtteranceRecord("u0", "ab"), UtteranceRecord("u1", "ba")]
        assert build_vocab(records).chars == (BLANK, "a", "b")

    def test_space_included_when_present(self):
        assert build_vocab([UtteranceRecord("u0", "a b")]).chars == (BLANK, " ", "a", "b")

    def test_deterministic(self):
        records = [UtteranceRecord("u0", "xyz zyx")]
        assert build_vocab(records) == build_vocab(records)

    def test_pure_function_of_character_multiset(self):
        a = [UtteranceRecord("u0", "abc"), UtteranceRecord("u1", "cab x")]
        b = [UtteranceRecord("v0", "x bac"), UtteranceRecord("v1", "cba")]
        assert build_vocab(a).chars == build_vocab(b).chars

    def test_encode_decode(self):
        vocab = build_vocab([UtteranceRecord("u", "ab")])
        assert vocab.encode("ba") == [2, 1]
        assert vocab.decode([1, 2]) == "ab"
        with pytest.raises(ValidationError):
            vocab.encode("q")

    def test_empty_records_rejected(self):
        with pytest.raises(ValidationError):
            build_vocab([])
