import os

import numpy as np
import pytest
import scipy.io.wavfile

os.environ.setdefault("HF_HUB_DISABLE_PROGRESS_BARS", "1")
os.environ.setdefault("HF_HUB_OFFLINE", "1")
os.environ.setdefault("TRANSFORMERS_VERBOSITY", "error")


def _build_checkpoint(path, seed):
    """Randomly initialized 1024-dim wav2vec2-family encoder saved locally."""
    import torch
    from transformers import Wav2Vec2Config, Wav2Vec2Model

    torch.manual_seed(seed)
    config = Wav2Vec2Config(
        hidden_size=1024,
        num_hidden_layers=2,
        num_attention_heads=16,
        intermediate_size=2048,
    )
    Wav2Vec2Model(config).save_pretrained(path)
    return str(path)


@pytest.fixture(scope="session")
def checkpoint_pt(tmp_path_factory):
    return _build_checkpoint(tmp_path_factory.mktemp("ckpt_pt"), seed=0)


@pytest.fixture(scope="session")
def checkpoint_ft(tmp_path_factory):
    # independently initialized weights, same architecture: a stand-in for the
    # fine-tuned counterpart of checkpoint_pt
    return _build_checkpoint(tmp_path_factory.mktemp("ckpt_ft"), seed=1)


def _write_wav(path, seconds, rate=16000, channels=1, freq=440.0):
    n = int(seconds * rate)
    t = np.arange(n) / rate
    wave = (0.4 * np.sin(2 * np.pi * freq * t) * 32767).astype(np.int16)
    if channels > 1:
        wave = np.stack([wave] * channels, axis=1)
    scipy.io.wavfile.write(path, rate, wave)
    return str(path)


@pytest.fixture(scope="session")
def audio_setup(tmp_path_factory):
    root = tmp_path_factory.mktemp("audio")
    wavs = {
        "utt-a": (_write_wav(root / "a.wav", 1.00), 1.00, "hello there"),
        "utt-b": (_write_wav(root / "b.wav", 0.73, freq=220.0), 0.73, "good bye now"),
    }
    tsv = root / "list.tsv"
    with open(tsv, "w", encoding="utf-8") as fh:
        for utt, (path, _, text) in wavs.items():
            fh.write(f"{utt}\t{os.path.basename(path)}\t{text}\n")
    bad_rate = _write_wav(root / "slow.wav", 0.5, rate=8000)
    stereo = _write_wav(root / "stereo.wav", 0.5, channels=2)
    return {"root": str(root), "tsv": str(tsv), "wavs": wavs,
            "bad_rate": bad_rate, "stereo": stereo}
