"""Joint training of the linear CTC head and fusion parameters on frozen dumps.

The embedding streams are never touched: each step fuses the stored frames,
projects through the linear head, and backpropagates the CTC loss into the
head and the fusion parameters only. Batches are processed sample by sample
in a fixed order and averaged, which keeps every run bit-reproducible for a
given seed; samples whose target cannot fit their frame count are skipped
with a warning.
"""

from __future__ import annotations

import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import metrics
from .ctc import CtcHead, ctc_loss, ctc_loss_grad, greedy_decode, log_softmax_rows, min_frames
from .errors import ConfigError, FormatError, PairingError, TrainingError
from .fusion import FusionParams, fusion_backward, fusion_forward, read_fusion, write_fusion
from .store import VARIANTS, Vocab, build_vocab, load_manifest, load_sequence

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

_HEAD_MAGIC = b"HEAD"
_HEAD_HEADER = struct.Struct("<4sII")


@dataclass(frozen=True)
class StreamSpec:
    """Which dump a stream comes from: model tag, layer index, variant."""

    model_tag: str
    layer: int
    variant: str

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown stream variant {self.variant!r}")

    @classmethod
    def parse(cls, text: str) -> "StreamSpec":
        parts = text.split(":")
        if len(parts) != 3:
            raise ConfigError(f"stream spec {text!r} must be model:layer:variant")
        try:
            layer = int(parts[1])
        except ValueError:
            raise ConfigError(f"stream spec {text!r} has a non-integer layer") from None
        return cls(parts[0], layer, parts[2])

    def __str__(self) -> str:
        return f"{self.model_tag}:{self.layer}:{self.variant}"


@dataclass
class TrainConfig:
    fusion_kind: str = "concat"
    learning_rate: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    optimizer: str = "adam"
    heads: int = 8

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if not 0 < self.patience <= self.max_epochs:
            raise ConfigError(
                f"patience must be in [1, max_epochs={self.max_epochs}], got {self.patience}"
            )
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be adam or sgd, got {self.optimizer!r}")


@dataclass(frozen=True)
class EpochStats:
    train_loss: float
    dev_loss: float


@dataclass
class TrainedFusionModel:
    fusion: FusionParams
    head: CtcHead
    history: list[EpochStats]
    best_epoch: int


@dataclass(frozen=True)
class Sample:
    utterance_id: str
    transcript: str
    ref: np.ndarray
    delta: np.ndarray | None
    target: tuple[int, ...]

    @property
    def feasible(self) -> bool:
        return self.ref.shape[0] >= min_frames(self.target)


def load_samples(manifest_path, ref_spec: StreamSpec, delta_spec: StreamSpec | None,
                 vocab: Vocab) -> list[Sample]:
    records = load_manifest(manifest_path)
    root = os.path.dirname(os.path.abspath(manifest_path))
    samples = []
    for rec in records:
        ref = load_sequence(rec, ref_spec.model_tag, ref_spec.layer, ref_spec.variant, root)
        delta = None
        if delta_spec is not None:
            delta_seq = load_sequence(
                rec, delta_spec.model_tag, delta_spec.layer, delta_spec.variant, root
            )
            if delta_seq.n_frames != ref.n_frames:
                raise PairingError(
                    f"utterance {rec.utterance_id!r}: reference has {ref.n_frames} frames "
                    f"but delta stream has {delta_seq.n_frames}"
                )
            delta = delta_seq.frames
        samples.append(
            Sample(rec.utterance_id, rec.transcript, ref.frames, delta,
                   tuple(vocab.encode(rec.transcript)))
        )
    if not samples:
        raise TrainingError(f"manifest {manifest_path} has no records")
    return samples


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float):
        self.params = params
        self.lr = lr
        self.t = 0
        self.m = {k: np.zeros(v.shape, dtype=np.float64) for k, v in params.items()}
        self.v = {k: np.zeros(v.shape, dtype=np.float64) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - ADAM_BETA1 ** self.t
        bc2 = 1.0 - ADAM_BETA2 ** self.t
        for key in sorted(self.params):
            g = np.asarray(grads[key], dtype=np.float64)
            self.m[key] = ADAM_BETA1 * self.m[key] + (1.0 - ADAM_BETA1) * g
            self.v[key] = ADAM_BETA2 * self.v[key] + (1.0 - ADAM_BETA2) * g * g
            update = self.lr * (self.m[key] / bc1) / (np.sqrt(self.v[key] / bc2) + ADAM_EPS)
            self.params[key][...] = (self.params[key].astype(np.float64) - update).astype(np.float32)


class Sgd:
    def __init__(self, params: dict[str, np.ndarray], lr: float):
        self.params = params
        self.lr = lr

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for key in sorted(self.params):
            g = np.asarray(grads[key], dtype=np.float64)
            self.params[key][...] = (
                self.params[key].astype(np.float64) - self.lr * g
            ).astype(np.float32)


def _sample_loss(sample: Sample, fusion: FusionParams, head: CtcHead) -> float:
    fused, _ = fusion_forward(fusion, sample.ref, sample.delta)
    log_probs = log_softmax_rows(head.logits(fused))
    return ctc_loss(log_probs, sample.target)


def _sample_grads(sample: Sample, fusion: FusionParams, head: CtcHead):
    """Loss plus gradients for head weights/bias and fusion parameters."""
    fused, cache = fusion_forward(fusion, sample.ref, sample.delta)
    log_probs = log_softmax_rows(head.logits(fused))
    loss, d_logits = ctc_loss_grad(log_probs, sample.target)
    if math.isinf(loss):
        return loss, None
    fused64 = fused.astype(np.float64)
    grads = {
        "head.w": fused64.T @ d_logits,
        "head.b": d_logits.sum(axis=0),
    }
    d_fused = d_logits @ head.w.astype(np.float64).T
    fusion_grads, _, _ = fusion_backward(fusion, cache, d_fused)
    for key, val in fusion_grads.items():
        grads[f"fusion.{key}"] = val
    return loss, grads


def _mean_dev_loss(samples: list[Sample], fusion: FusionParams, head: CtcHead) -> float:
    losses = [_sample_loss(s, fusion, head) for s in samples if s.feasible]
    if not losses:
        raise TrainingError("no feasible sample in the dev set")
    return float(np.mean(losses))


def _stream_dims(samples: list[Sample]) -> tuple[int, int | None]:
    d_ref = samples[0].ref.shape[1]
    d_delta = None if samples[0].delta is None else samples[0].delta.shape[1]
    for s in samples:
        if s.ref.shape[1] != d_ref:
            raise PairingError(f"utterance {s.utterance_id!r}: reference width {s.ref.shape[1]} != {d_ref}")
        sd = None if s.delta is None else s.delta.shape[1]
        if sd != d_delta:
            raise PairingError(f"utterance {s.utterance_id!r}: delta width {sd} != {d_delta}")
    return d_ref, d_delta


def train(train_manifest, dev_manifest, streams: tuple[StreamSpec, StreamSpec | None],
          cfg: TrainConfig) -> TrainedFusionModel:
    """Train head + fusion params; keeps the epoch with the lowest dev loss."""
    cfg.validate()
    ref_spec, delta_spec = streams
    if cfg.fusion_kind != "none" and delta_spec is None:
        raise ConfigError(f"fusion kind {cfg.fusion_kind!r} needs a delta stream")
    # vocab over train+dev so the dev loss is always defined
    vocab = build_vocab(load_manifest(train_manifest) + load_manifest(dev_manifest))
    train_samples = load_samples(train_manifest, ref_spec, delta_spec, vocab)
    dev_samples = load_samples(dev_manifest, ref_spec, delta_spec, vocab)
    d_ref, d_delta = _stream_dims(train_samples + dev_samples)

    for s in train_samples:
        if not s.feasible:
            logger.warning(
                "skipping %s: target needs %d frames but only %d available",
                s.utterance_id, min_frames(s.target), s.ref.shape[0],
            )
    feasible_train = [s for s in train_samples if s.feasible]
    if not feasible_train:
        raise TrainingError("every training sample is infeasible for CTC")

    rng_init = np.random.default_rng([cfg.seed, 0])
    rng_shuffle = np.random.default_rng([cfg.seed, 1])
    fusion = FusionParams.create(cfg.fusion_kind, d_ref, d_delta, heads=cfg.heads, rng=rng_init)
    head = CtcHead.zeros(fusion.fused_dim(d_ref, d_delta), vocab)

    params = {"head.w": head.w, "head.b": head.b}
    params.update({f"fusion.{k}": v for k, v in fusion.trainable().items()})
    opt_cls = Adam if cfg.optimizer == "adam" else Sgd
    opt = opt_cls(params, cfg.learning_rate)

    history: list[EpochStats] = []
    best_dev = math.inf
    best_epoch = -1
    best_fusion = fusion.clone()
    best_head = CtcHead(head.w.copy(), head.b.copy(), vocab)
    stale = 0
    n = len(feasible_train)
    for epoch in range(cfg.max_epochs):
        order = rng_shuffle.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = [feasible_train[i] for i in order[start:start + cfg.batch_size]]
            acc: dict[str, np.ndarray] = {}
            count = 0
            for sample in batch:
                loss, grads = _sample_grads(sample, fusion, head)
                if grads is None:
                    continue
                epoch_loss += loss
                count += 1
                for key, val in grads.items():
                    if key in acc:
                        acc[key] += val
                    else:
                        acc[key] = val.copy() if isinstance(val, np.ndarray) else np.asarray(val)
            if count == 0:
                continue
            opt.step({k: v / count for k, v in acc.items()})
        train_loss = epoch_loss / n
        dev_loss = _mean_dev_loss(dev_samples, fusion, head)
        history.append(EpochStats(train_loss, dev_loss))
        if dev_loss < best_dev:
            best_dev = dev_loss
            best_epoch = epoch
            best_fusion = fusion.clone()
            best_head = CtcHead(head.w.copy(), head.b.copy(), vocab)
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return TrainedFusionModel(best_fusion, best_head, history, best_epoch)


@dataclass
class EvalResult:
    utterances: list[dict]
    wer: float
    cer: float
    pairs: list[metrics.ScoredPair]


def evaluate(model: TrainedFusionModel, test_manifest,
             streams: tuple[StreamSpec, StreamSpec | None]) -> EvalResult:
    """Greedy-decode every test utterance and score corpus WER/CER."""
    ref_spec, delta_spec = streams
    records = load_manifest(test_manifest)
    root = os.path.dirname(os.path.abspath(test_manifest))
    ids, refs, hyps = [], [], []
    for rec in records:
        ref = load_sequence(rec, ref_spec.model_tag, ref_spec.layer, ref_spec.variant, root)
        delta = None
        if delta_spec is not None:
            delta_seq = load_sequence(
                rec, delta_spec.model_tag, delta_spec.layer, delta_spec.variant, root
            )
            if delta_seq.n_frames != ref.n_frames:
                raise PairingError(
                    f"utterance {rec.utterance_id!r}: reference has {ref.n_frames} frames "
                    f"but delta stream has {delta_seq.n_frames}"
                )
            delta = delta_seq.frames
        fused, _ = fusion_forward(model.fusion, ref.frames, delta)
        log_probs = log_softmax_rows(model.head.logits(fused))
        ids.append(rec.utterance_id)
        refs.append(rec.transcript)
        hyps.append(greedy_decode(log_probs, model.head.vocab))
    corpus_wer, pairs = metrics.wer(refs, hyps, ids)
    corpus_cer, _ = metrics.cer(refs, hyps, ids)
    utterances = [
        {
            "id": p.utterance_id,
            "ref": " ".join(p.ref_words),
            "hyp": " ".join(p.hyp_words),
            "wer": p.edits.total / len(p.ref_words),
            "edits": {"sub": p.edits.sub, "ins": p.edits.ins, "del": p.edits.dele},
        }
        for p in pairs
    ]
    return EvalResult(utterances, corpus_wer, corpus_cer, pairs)


# ---------------------------------------------------------------------------
# checkpointing: FUS1 fusion block + HEAD block, JSON sidecar alongside
# ---------------------------------------------------------------------------

def sidecar_path(checkpoint_path) -> str:
    return os.fspath(checkpoint_path) + ".json"


def save_checkpoint(model: TrainedFusionModel, cfg: TrainConfig,
                    streams: tuple[StreamSpec, StreamSpec | None], path) -> None:
    with open(path, "wb") as fh:
        write_fusion(model.fusion, fh)
        d_fused, v = model.head.w.shape
        fh.write(_HEAD_HEADER.pack(_HEAD_MAGIC, d_fused, v))
        fh.write(model.head.w.astype("<f4", copy=False).tobytes())
        fh.write(model.head.b.astype("<f4", copy=False).tobytes())
    ref_spec, delta_spec = streams
    sidecar = {
        "config": asdict(cfg),
        "streams": {
            "ref": str(ref_spec),
            "delta": None if delta_spec is None else str(delta_spec),
        },
        "vocab": list(model.head.vocab.chars),
        "history": [asdict(h) for h in model.history],
        "best_epoch": model.best_epoch,
    }
    with open(sidecar_path(path), "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_checkpoint(path) -> tuple[TrainedFusionModel, TrainConfig, tuple[StreamSpec, StreamSpec | None]]:
    with open(sidecar_path(path), "r", encoding="utf-8") as fh:
        sidecar = json.load(fh)
    vocab = Vocab(tuple(sidecar["vocab"]))
    with open(path, "rb") as fh:
        fusion = read_fusion(fh)
        header = fh.read(_HEAD_HEADER.size)
        if len(header) < _HEAD_HEADER.size:
            raise FormatError(f"{path}: missing head block")
        magic, d_fused, v = _HEAD_HEADER.unpack(header)
        if magic != _HEAD_MAGIC:
            raise FormatError(f"{path}: bad head magic {magic!r}")
        w_bytes = fh.read(4 * d_fused * v)
        b_bytes = fh.read(4 * v)
        if len(w_bytes) < 4 * d_fused * v or len(b_bytes) < 4 * v:
            raise FormatError(f"{path}: head block truncated")
        w = np.frombuffer(w_bytes, dtype="<f4").reshape(d_fused, v).copy()
        b = np.frombuffer(b_bytes, dtype="<f4").copy()
    head = CtcHead(w, b, vocab)
    cfg = TrainConfig(**sidecar["config"])
    history = [EpochStats(**h) for h in sidecar["history"]]
    model = TrainedFusionModel(fusion, head, history, sidecar["best_epoch"])
    ref_spec = StreamSpec.parse(sidecar["streams"]["ref"])
    delta_raw = sidecar["streams"]["delta"]
    delta_spec = None if delta_raw is None else StreamSpec.parse(delta_raw)
    return model, cfg, (ref_spec, delta_spec)
