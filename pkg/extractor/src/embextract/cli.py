"""CLI: dump per-layer hidden states, and check frame alignment across variants.

Exit codes: 0 success, 1 config/usage error, 2 data error (audio or files).
"""

from __future__ import annotations

import argparse
import logging
import sys

from .audio import AudioError
from .extract import AudioEntry, ExtractError, ExtractJob, extract, read_audio_list, verify_alignment

logger = logging.getLogger("embextract")

_VARIANT_ALIASES = {"pt": "pretrained", "ft": "finetuned",
                    "pretrained": "pretrained", "finetuned": "finetuned"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ExtractError(message)


def _parse_layers(spec: str) -> list[int]:
    layers = []
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            lo, hi = part.split("..", 1)
            layers.extend(range(int(lo), int(hi) + 1))
        else:
            layers.append(int(part))
    if not layers:
        raise ExtractError("no layers requested")
    return layers


def cmd_extract(args) -> int:
    variant = _VARIANT_ALIASES.get(args.variant)
    if variant is None:
        raise ExtractError(f"--variant must be pt or ft, got {args.variant!r}")
    job = ExtractJob(
        model_id=args.model,
        checkpoint_variant=variant,
        layers=_parse_layers(args.layers),
        audio_list=read_audio_list(args.audio_list),
        out_dir=args.out,
        model_tag=args.tag or "",
    )
    manifest = extract(job)
    logger.info("wrote %s", manifest)
    return 0


def cmd_verify(args) -> int:
    _, mismatches = verify_alignment(args.ft_manifest, args.pt_manifest, args.out)
    logger.info("%d mismatches%s", mismatches,
                f", report at {args.out}" if args.out else "")
    return 0 if mismatches == 0 else 2


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="embextract", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="dump hidden states for every utterance in a TSV list")
    p.add_argument("--model", required=True, help="checkpoint id or local path")
    p.add_argument("--variant", required=True, help="pt or ft")
    p.add_argument("--layers", required=True, help="e.g. 0..24 or 0,12,24")
    p.add_argument("--audio-list", dest="audio_list", required=True,
                   help="TSV: id<TAB>wav path<TAB>transcript")
    p.add_argument("--out", required=True)
    p.add_argument("--tag", help="model tag used in manifest keys (default: from --model)")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("verify-alignment",
                       help="check per-utterance frame counts agree across two manifests")
    p.add_argument("--ft-manifest", dest="ft_manifest", required=True)
    p.add_argument("--pt-manifest", dest="pt_manifest", required=True)
    p.add_argument("--out", help="optional line-JSON report path")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ExtractError as exc:
        logger.error("config error: %s", exc)
        return 1
    except (AudioError, OSError, ValueError) as exc:
        logger.error("data error: %s", exc)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
