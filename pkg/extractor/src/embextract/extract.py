"""Dump per-layer transformer hidden states from speech SSL checkpoints.

Works with wav2vec2-family encoders (wav2vec 2.0, HuBERT, WavLM) published on
the Hugging Face hub or stored locally. The base encoder is loaded without
any task head (loading through ``AutoModel`` drops a CTC head if the
checkpoint carries one), run in inference mode at batch size 1, and every
requested layer's hidden states are written as one EMB1 file per
(utterance, layer) plus a manifest the fusion toolkit can consume directly.

Layer indexing follows the encoder's ``hidden_states`` tuple: index 0 is the
convolutional front-end output after feature projection (before the first
transformer block), indices 1..L are the transformer block outputs taken
before any final encoder layer norm. The tap point is recorded in the
extraction metadata.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .audio import AudioError, load_wav
from .emb1 import read_emb1_header, write_emb1

VARIANTS = ("pretrained", "finetuned")
TAP_POINT = (
    "hidden_states[i] from the base encoder: 0 = post-CNN feature projection, "
    "1..L = transformer block outputs (pre final encoder layer norm)"
)


class ExtractError(Exception):
    """Extraction cannot proceed (bad config, bad audio list, bad layer)."""


@dataclass(frozen=True)
class AudioEntry:
    utterance_id: str
    path: str
    transcript: str


@dataclass
class ExtractJob:
    model_id: str
    checkpoint_variant: str          # pretrained | finetuned
    layers: list[int]
    audio_list: list[AudioEntry]
    out_dir: str
    model_tag: str = ""

    def __post_init__(self):
        if self.checkpoint_variant not in VARIANTS:
            raise ExtractError(
                f"checkpoint_variant must be one of {VARIANTS}, got {self.checkpoint_variant!r}"
            )
        if not self.layers:
            raise ExtractError("no layers requested")
        if not self.model_tag:
            self.model_tag = sanitize_tag(self.model_id)


def sanitize_tag(model_id: str) -> str:
    base = os.path.basename(os.path.normpath(str(model_id)))
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in base) or "model"


def read_audio_list(path) -> list[AudioEntry]:
    """TSV with columns: id, wav path, transcript. Paths are relative to the TSV."""
    root = os.path.dirname(os.path.abspath(path))
    entries = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for line_no, row in enumerate(csv.reader(fh, delimiter="\t"), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) < 3:
                raise ExtractError(f"{path} line {line_no}: need id<TAB>path<TAB>transcript")
            wav = row[1]
            if not os.path.isabs(wav):
                wav = os.path.join(root, wav)
            entries.append(AudioEntry(row[0], wav, row[2]))
    if not entries:
        raise ExtractError(f"{path}: empty audio list")
    seen = set()
    for e in entries:
        if e.utterance_id in seen:
            raise ExtractError(f"duplicate utterance id {e.utterance_id!r} in audio list")
        seen.add(e.utterance_id)
    return entries


def _load_model(model_id: str):
    import torch
    from transformers import AutoModel

    model = AutoModel.from_pretrained(model_id)
    model.eval()
    torch.set_grad_enabled(False)
    return model


def extract(job: ExtractJob) -> str:
    """Run the job; returns the path of the manifest it wrote."""
    import torch

    model = _load_model(job.model_id)
    depth = int(model.config.num_hidden_layers)
    hidden = int(model.config.hidden_size)
    for layer in job.layers:
        if not 0 <= layer <= depth:
            raise ExtractError(f"layer {layer} out of range for a {depth}-layer encoder")

    dump_dir = os.path.join(job.out_dir, "dumps")
    os.makedirs(dump_dir, exist_ok=True)
    records = []
    for entry in job.audio_list:
        wave = load_wav(entry.path, entry.utterance_id)
        with torch.no_grad():
            out = model(
                input_values=torch.from_numpy(wave)[None, :],
                output_hidden_states=True,
            )
        states = out.hidden_states  # tuple of (1, T, d), length depth + 1
        paths = {}
        for layer in job.layers:
            frames = states[layer][0].cpu().numpy().astype(np.float32)
            name = f"{entry.utterance_id}__{job.model_tag}__L{layer}__{job.checkpoint_variant}.emb"
            write_emb1(frames, os.path.join(dump_dir, name))
            paths[f"{job.model_tag}/{layer}/{job.checkpoint_variant}"] = f"dumps/{name}"
        records.append({
            "id": entry.utterance_id,
            "transcript": entry.transcript,
            "paths": paths,
            "duration_s": len(wave) / 16000.0,
        })

    manifest_path = os.path.join(job.out_dir, "manifest.jsonl")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    meta = {
        "model_id": job.model_id,
        "model_tag": job.model_tag,
        "checkpoint_variant": job.checkpoint_variant,
        "layers": list(job.layers),
        "hidden_size": hidden,
        "num_hidden_layers": depth,
        "tap_point": TAP_POINT,
        "frame_stride_s": 0.02,
    }
    with open(os.path.join(job.out_dir, "extract_meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return manifest_path


def _manifest_frames(manifest_path) -> dict[str, dict[str, tuple[int, int]]]:
    """{utterance_id: {"layer": (T, d)}} read from EMB1 headers."""
    root = os.path.dirname(os.path.abspath(manifest_path))
    table: dict[str, dict[str, tuple[int, int]]] = {}
    with open(manifest_path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            per_layer = {}
            for key, rel in rec.get("paths", {}).items():
                layer = key.split("/")[1]
                per_layer[layer] = read_emb1_header(os.path.join(root, rel))
            table[str(rec["id"])] = per_layer
    return table


def verify_alignment(manifest_ft, manifest_pt, report_path=None) -> tuple[list[dict], int]:
    """Check that both variants agree on T per (utterance, layer).

    Returns the report lines and the mismatch count; optionally writes the
    report as line-delimited JSON.
    """
    ft = _manifest_frames(manifest_ft)
    pt = _manifest_frames(manifest_pt)
    lines = []
    mismatches = 0
    for utt in sorted(set(ft) | set(pt)):
        layers = sorted(set(ft.get(utt, {})) | set(pt.get(utt, {})), key=int)
        for layer in layers:
            t_ft = ft.get(utt, {}).get(layer, (None, None))[0]
            t_pt = pt.get(utt, {}).get(layer, (None, None))[0]
            match = t_ft is not None and t_ft == t_pt
            if not match:
                mismatches += 1
            lines.append({
                "id": utt,
                "layer": int(layer),
                "t_finetuned": t_ft,
                "t_pretrained": t_pt,
                "match": match,
            })
    lines.append({"summary": {"pairs_checked": len(lines), "mismatches": mismatches}})
    if report_path is not None:
        with open(report_path, "w", encoding="utf-8") as fh:
            for line in lines:
                fh.write(json.dumps(line, sort_keys=True) + "\n")
    return lines, mismatches
