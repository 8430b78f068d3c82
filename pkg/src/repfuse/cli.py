"""Command-line surface: delta extraction, training, evaluation, similarity, synth data.

Every command resolves its settings from an optional JSON config file plus
flag overrides (flags win), then writes the fully resolved configuration to
``run.json`` in the output directory before doing any work, so a finished
run directory always records how it was produced.

Exit codes: 0 success, 1 config/usage error, 2 data/pairing error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import metrics, synth
from .errors import (
    ConfigError,
    FormatError,
    ManifestParseError,
    NumericalError,
    PairingError,
    RepfuseError,
    TruncationError,
    ValidationError,
)
from .fusion import KINDS, compute_delta, mean_gate_weight, moe_gate
from .similarity import DEFAULT_MAX_FRAMES, layerwise_cca
from .store import (
    UtteranceRecord,
    load_manifest,
    load_sequence,
    format_stream_key,
    save_manifest,
    write_emb,
)
from .train import (
    StreamSpec,
    TrainConfig,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)

logger = logging.getLogger("repfuse")

THREADS_ENV = "REPFUSE_THREADS"


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage problems; the toolkit reserves 2 for data errors
    def error(self, message):
        raise ConfigError(message)


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config file < explicit flags."""
    resolved = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path:
        with open(config_path, "r", encoding="utf-8") as fh:
            loaded = json.load(fh)
        for key, value in loaded.items():
            if key not in defaults:
                raise ConfigError(f"unknown config key {key!r}")
            resolved[key] = value
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def _write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _start_run(out_dir, command: str, resolved: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    threads = os.environ.get(THREADS_ENV, "0")
    if threads not in ("", "0"):
        logger.warning("%s=%s requested; running sequentially (the only mode built in)",
                       THREADS_ENV, threads)
    _write_json({"command": command, "config": resolved, "threads": threads},
                os.path.join(out_dir, "run.json"))


# ---------------------------------------------------------------------------
# delta
# ---------------------------------------------------------------------------

def cmd_delta(args) -> int:
    resolved = _resolve(args, {"ft_manifest": None, "pt_manifest": None, "out": None})
    for key in ("ft_manifest", "pt_manifest", "out"):
        if not resolved[key]:
            raise ConfigError(f"missing required setting {key!r}")
    _start_run(resolved["out"], "delta", resolved)
    ft_records = load_manifest(resolved["ft_manifest"])
    pt_records = {r.utterance_id: r for r in load_manifest(resolved["pt_manifest"])}
    ft_ids = {r.utterance_id for r in ft_records}
    for missing in sorted(ft_ids - set(pt_records)):
        raise PairingError(f"utterance {missing!r} present in ft manifest but not pt manifest")
    for missing in sorted(set(pt_records) - ft_ids):
        raise PairingError(f"utterance {missing!r} present in pt manifest but not ft manifest")

    ft_root = os.path.dirname(os.path.abspath(resolved["ft_manifest"]))
    pt_root = os.path.dirname(os.path.abspath(resolved["pt_manifest"]))
    out_dir = resolved["out"]
    dump_dir = os.path.join(out_dir, "dumps")
    os.makedirs(dump_dir, exist_ok=True)

    out_records = []
    n_files = 0
    for rec in ft_records:
        pt_rec = pt_records[rec.utterance_id]
        if pt_rec.transcript != rec.transcript:
            raise PairingError(f"utterance {rec.utterance_id!r}: transcripts differ between manifests")
        pairs = [
            (model, layer)
            for (model, layer, variant) in rec.streams()
            if variant == "finetuned" and pt_rec.path_for(model, layer, "pretrained")
        ]
        if not pairs:
            raise PairingError(
                f"utterance {rec.utterance_id!r} has no (finetuned, pretrained) dump pair"
            )
        paths = dict(rec.dump_paths)
        # keep the source streams reachable from the new manifest's directory
        paths = {
            key: os.path.relpath(os.path.join(ft_root, rel), out_dir)
            for key, rel in paths.items()
        }
        for model, layer in sorted(pairs):
            ft_seq = load_sequence(rec, model, layer, "finetuned", ft_root)
            pt_seq = load_sequence(pt_rec, model, layer, "pretrained", pt_root)
            delta = compute_delta(ft_seq, pt_seq)
            name = f"{rec.utterance_id}__{model}__L{layer}__delta.emb"
            write_emb(delta, os.path.join(dump_dir, name))
            paths[format_stream_key(model, layer, "delta")] = f"dumps/{name}"
            n_files += 1
        out_records.append(
            UtteranceRecord(rec.utterance_id, rec.transcript, paths, rec.duration_s)
        )
    save_manifest(out_records, os.path.join(out_dir, "manifest.jsonl"))
    logger.info("wrote %d delta dumps for %d utterances", n_files, len(out_records))
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

_TRAIN_DEFAULTS = {
    "train": None,
    "dev": None,
    "ref_stream": None,
    "delta_stream": None,
    "fusion": "concat",
    "out": None,
    "learning_rate": 1e-3,
    "batch_size": 16,
    "max_epochs": 50,
    "patience": 5,
    "seed": 0,
    "optimizer": "adam",
    "heads": 8,
}


def cmd_train(args) -> int:
    resolved = _resolve(args, _TRAIN_DEFAULTS)
    for key in ("train", "dev", "ref_stream", "out"):
        if not resolved[key]:
            raise ConfigError(f"missing required setting {key!r}")
    if resolved["fusion"] not in KINDS:
        raise ConfigError(f"fusion must be one of {KINDS}, got {resolved['fusion']!r}")
    if resolved["fusion"] != "none" and not resolved["delta_stream"]:
        raise ConfigError(f"fusion {resolved['fusion']!r} requires delta_stream")
    _start_run(resolved["out"], "train", resolved)

    cfg = TrainConfig(
        fusion_kind=resolved["fusion"],
        learning_rate=float(resolved["learning_rate"]),
        batch_size=int(resolved["batch_size"]),
        max_epochs=int(resolved["max_epochs"]),
        patience=int(resolved["patience"]),
        seed=int(resolved["seed"]),
        optimizer=resolved["optimizer"],
        heads=int(resolved["heads"]),
    )
    cfg.validate()
    ref_spec = StreamSpec.parse(resolved["ref_stream"])
    delta_spec = StreamSpec.parse(resolved["delta_stream"]) if resolved["delta_stream"] else None

    model = train(resolved["train"], resolved["dev"], (ref_spec, delta_spec), cfg)
    out_dir = resolved["out"]
    save_checkpoint(model, cfg, (ref_spec, delta_spec), os.path.join(out_dir, "checkpoint.bin"))
    _write_json(
        {
            "best_epoch": model.best_epoch,
            "epochs": [{"train_loss": h.train_loss, "dev_loss": h.dev_loss} for h in model.history],
        },
        os.path.join(out_dir, "history.json"),
    )
    logger.info("trained %s fusion for %d epochs (best dev loss at epoch %d)",
                cfg.fusion_kind, len(model.history), model.best_epoch)
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    resolved = _resolve(args, {"checkpoint": None, "test": None, "baseline_hyps": None,
                               "out": None, "bootstrap_resamples": 10000, "bootstrap_seed": 0})
    for key in ("checkpoint", "test", "out"):
        if not resolved[key]:
            raise ConfigError(f"missing required setting {key!r}")
    _start_run(resolved["out"], "eval", resolved)
    model, _, streams = load_checkpoint(resolved["checkpoint"])
    result = evaluate(model, resolved["test"], streams)

    summary = {"wer": result.wer, "cer": result.cer, "n_utterances": len(result.utterances)}
    if resolved["baseline_hyps"]:
        baseline = _read_hyps(resolved["baseline_hyps"])
        ids = [u["id"] for u in result.utterances]
        if sorted(baseline) != sorted(ids):
            raise PairingError("baseline hypothesis ids do not match the test set")
        refs = [u["ref"] for u in result.utterances]
        hyps_b = [baseline[i] for i in ids]
        _, base_pairs = metrics.wer(refs, hyps_b, ids)
        summary["baseline_wer"] = sum(p.edits.total for p in base_pairs) / sum(
            len(p.ref_words) for p in base_pairs
        )
        summary["p_value"] = metrics.paired_bootstrap(
            base_pairs, result.pairs,
            resamples=int(resolved["bootstrap_resamples"]),
            seed=int(resolved["bootstrap_seed"]),
        )
    out_dir = resolved["out"]
    with open(os.path.join(out_dir, "utterances.jsonl"), "w", encoding="utf-8") as fh:
        for utt in result.utterances:
            fh.write(json.dumps(utt, sort_keys=True) + "\n")
        fh.write(json.dumps({"summary": summary}, sort_keys=True) + "\n")
    _write_json(summary, os.path.join(out_dir, "summary.json"))
    logger.info("WER %.4f CER %.4f over %d utterances", result.wer, result.cer,
                len(result.utterances))
    return 0


def _read_hyps(path) -> dict[str, str]:
    hyps = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestParseError(f"invalid JSON ({exc.msg})", line_no) from None
            if "summary" in obj:
                continue
            if "id" not in obj or "hyp" not in obj:
                raise ManifestParseError("hypothesis line needs 'id' and 'hyp'", line_no)
            hyps[str(obj["id"])] = str(obj["hyp"])
    return hyps


# ---------------------------------------------------------------------------
# cca
# ---------------------------------------------------------------------------

def cmd_cca(args) -> int:
    resolved = _resolve(args, {
        "manifest_a": None, "manifest_b": None, "layers": None,
        "stream_a": None, "stream_b": None,
        "max_frames": DEFAULT_MAX_FRAMES, "seed": 0, "out": None,
    })
    for key in ("manifest_a", "manifest_b", "layers", "out"):
        if not resolved[key]:
            raise ConfigError(f"missing required setting {key!r}")
    _start_run(resolved["out"], "cca", resolved)
    layers = _parse_layers(str(resolved["layers"]))
    stream_a = _resolve_view(resolved["manifest_a"], resolved["stream_a"], "stream_a")
    stream_b = _resolve_view(resolved["manifest_b"], resolved["stream_b"], "stream_b")
    report = layerwise_cca(
        resolved["manifest_a"], stream_a, resolved["manifest_b"], stream_b,
        layers, max_frames=int(resolved["max_frames"]), seed=int(resolved["seed"]),
    )
    out_dir = resolved["out"]
    with open(os.path.join(out_dir, "similarity.json"), "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    report.write_csv(os.path.join(out_dir, "similarity.csv"))
    logger.info("similarity over %d layers written to %s", len(report.per_layer), out_dir)
    return 0


def _parse_layers(spec: str) -> list[int]:
    """Accepts e.g. "0,3,7" and ranges "0..24" (inclusive), possibly mixed."""
    layers: list[int] = []
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            lo_s, hi_s = part.split("..", 1)
            try:
                lo, hi = int(lo_s), int(hi_s)
            except ValueError:
                raise ConfigError(f"bad layer range {part!r}") from None
            if hi < lo:
                raise ConfigError(f"bad layer range {part!r}")
            layers.extend(range(lo, hi + 1))
        else:
            try:
                layers.append(int(part))
            except ValueError:
                raise ConfigError(f"bad layer index {part!r}") from None
    if not layers:
        raise ConfigError("no layers requested")
    return layers


def _resolve_view(manifest_path, stream: str | None, flag: str) -> tuple[str, str]:
    """A view is (model_tag, variant); inferred when the manifest holds exactly one."""
    if stream:
        parts = stream.split(":")
        if len(parts) != 2:
            raise ConfigError(f"{flag} must be model:variant, got {stream!r}")
        return parts[0], parts[1]
    views = {(m, v) for rec in load_manifest(manifest_path) for (m, _, v) in rec.streams()}
    if len(views) != 1:
        raise ConfigError(
            f"{flag} is required because the manifest holds {len(views)} (model, variant) views"
        )
    return next(iter(views))


# ---------------------------------------------------------------------------
# moe
# ---------------------------------------------------------------------------

def cmd_moe(args) -> int:
    resolved = _resolve(args, {"checkpoint": None, "test": None, "out": None})
    for key in ("checkpoint", "test", "out"):
        if not resolved[key]:
            raise ConfigError(f"missing required setting {key!r}")
    _start_run(resolved["out"], "moe", resolved)
    model, _, streams = load_checkpoint(resolved["checkpoint"])
    if model.fusion.kind != "moe":
        raise ConfigError(f"checkpoint holds {model.fusion.kind!r} fusion, moe analysis needs 'moe'")
    ref_spec = streams[0]
    records = load_manifest(resolved["test"])
    root = os.path.dirname(os.path.abspath(resolved["test"]))
    gates = [
        moe_gate(load_sequence(rec, ref_spec.model_tag, ref_spec.layer, ref_spec.variant,
                               root).frames, model.fusion.moe_w)
        for rec in records
    ]
    result = evaluate(model, resolved["test"], streams)
    report = {"mean_w_ft": mean_gate_weight(gates), "wer": result.wer}
    _write_json(report, os.path.join(resolved["out"], "moe.json"))
    logger.info("mean reference gate %.4f, WER %.4f", report["mean_w_ft"], report["wer"])
    return 0


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

_SYNTH_DEFAULTS = {
    "out": None, "seed": 0, "utts": 500, "dev_utts": 100, "test_utts": 100,
    "d": 32, "sigma": 0.5,
}


def cmd_synth(args) -> int:
    resolved = _resolve(args, _SYNTH_DEFAULTS)
    if not resolved["out"]:
        raise ConfigError("missing required setting 'out'")
    _start_run(resolved["out"], "synth", resolved)
    cfg = synth.SynthConfig(
        seed=int(resolved["seed"]),
        n_train=int(resolved["utts"]),
        n_dev=int(resolved["dev_utts"]),
        n_test=int(resolved["test_utts"]),
        dim=int(resolved["d"]),
        sigma=float(resolved["sigma"]),
    )
    synth.generate_dataset(resolved["out"], cfg)
    logger.info("synthetic dataset (%d/%d/%d utterances, d=%d) written to %s",
                cfg.n_train, cfg.n_dev, cfg.n_test, cfg.dim, resolved["out"])
    return 0


# ---------------------------------------------------------------------------
# parser / entry
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="repfuse", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("delta", help="compute delta dumps from paired ft/pt manifests")
    p.add_argument("--ft-manifest", dest="ft_manifest")
    p.add_argument("--pt-manifest", dest="pt_manifest")
    p.add_argument("--out")
    p.add_argument("--config")
    p.set_defaults(func=cmd_delta)

    p = sub.add_parser("train", help="train the linear CTC head plus fusion parameters")
    p.add_argument("--train")
    p.add_argument("--dev")
    p.add_argument("--ref-stream", dest="ref_stream", help="model:layer:variant")
    p.add_argument("--delta-stream", dest="delta_stream", help="model:layer:variant")
    p.add_argument("--fusion", choices=KINDS)
    p.add_argument("--out")
    p.add_argument("--config")
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    p.add_argument("--heads", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="decode a test manifest and score WER/CER")
    p.add_argument("--checkpoint")
    p.add_argument("--test")
    p.add_argument("--baseline-hyps", dest="baseline_hyps")
    p.add_argument("--out")
    p.add_argument("--config")
    p.add_argument("--bootstrap-resamples", dest="bootstrap_resamples", type=int)
    p.add_argument("--bootstrap-seed", dest="bootstrap_seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cca", help="layer-wise PWCCA similarity between two dump sets")
    p.add_argument("--manifest-a", dest="manifest_a")
    p.add_argument("--manifest-b", dest="manifest_b")
    p.add_argument("--layers", help="e.g. 0,3,7 or 0..24")
    p.add_argument("--stream-a", dest="stream_a", help="model:variant (inferred when unique)")
    p.add_argument("--stream-b", dest="stream_b", help="model:variant (inferred when unique)")
    p.add_argument("--max-frames", dest="max_frames", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--config")
    p.set_defaults(func=cmd_cca)

    p = sub.add_parser("moe", help="mean gating weight and WER for a moe checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--test")
    p.add_argument("--out")
    p.add_argument("--config")
    p.set_defaults(func=cmd_moe)

    p = sub.add_parser("synth", help="generate the synthetic verification dataset")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--utts", type=int, help="training utterances")
    p.add_argument("--dev-utts", dest="dev_utts", type=int)
    p.add_argument("--test-utts", dest="test_utts", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--config")
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return 1
    except (PairingError, ValidationError, FormatError, TruncationError,
            ManifestParseError, OSError) as exc:
        logger.error("data error: %s", exc)
        return 2
    except (NumericalError, np.linalg.LinAlgError) as exc:
        logger.error("numerical failure: %s", exc)
        return 3
    except RepfuseError as exc:
        logger.error("%s", exc)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
