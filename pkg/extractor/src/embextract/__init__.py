"""Per-layer hidden-state dumps from speech SSL checkpoints, in EMB1 format."""

from .audio import AudioError, load_wav
from .emb1 import read_emb1_header, write_emb1
from .extract import (
    AudioEntry,
    ExtractError,
    ExtractJob,
    extract,
    read_audio_list,
    verify_alignment,
)

__version__ = "0.1.0"

__all__ = [
    "AudioEntry",
    "AudioError",
    "ExtractError",
    "ExtractJob",
    "extract",
    "load_wav",
    "read_audio_list",
    "read_emb1_header",
    "verify_alignment",
    "write_emb1",
]
