"""Delta streams and the fusion operators that combine them with a reference stream.

A delta stream is the frame-wise difference between a model's fine-tuned and
pre-trained embeddings of the same audio. Fusion operators combine the
fine-tuned reference stream with such a delta stream frame by frame:

* ``concat``   -- widths add, nothing learned
* ``weighted`` -- convex combination, one learnable scalar squashed by a sigmoid
* ``xattn``    -- one multi-head cross-attention block (reference queries the
                  delta stream) with a residual layer norm
* ``moe``      -- frame-wise two-expert gate computed from the reference stream
* ``none``     -- pass the reference through unchanged (baseline systems)

Every learnable operator has an analytic backward pass for its parameters and
both inputs; the test suite checks each against central finite differences.
Forward math runs in float64 internally and returns float32.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError, FormatError, PairingError, ShapeError
from .store import EmbeddingSequence
from .tensor import DEFAULT_LN_EPS

KINDS = ("none", "concat", "weighted", "xattn", "moe")
FUSION_MAGIC = b"FUS1"
_FUS_HEADER = struct.Struct("<4sB3xII")
_TENSOR_HEADER = struct.Struct("<II")

# serialization order of the learnable tensors, per kind
_TENSOR_ORDER = {
    "none": (),
    "concat": (),
    "weighted": ("theta",),
    "xattn": ("wq", "wk", "wv", "wo", "ln_gain", "ln_bias"),
    "moe": ("moe_w",),
}


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def compute_delta(ft: EmbeddingSequence, pt: EmbeddingSequence) -> EmbeddingSequence:
    """Fine-tuned minus pre-trained frames for one utterance/model/layer."""
    mismatches = []
    if ft.utterance_id != pt.utterance_id:
        mismatches.append(f"utterance {ft.utterance_id!r} vs {pt.utterance_id!r}")
    if ft.model_tag != pt.model_tag:
        mismatches.append(f"model {ft.model_tag!r} vs {pt.model_tag!r}")
    if ft.layer != pt.layer:
        mismatches.append(f"layer {ft.layer} vs {pt.layer}")
    if ft.variant != "finetuned" or pt.variant != "pretrained":
        mismatches.append(f"variants ({ft.variant}, {pt.variant}), expected (finetuned, pretrained)")
    if ft.frames.shape != pt.frames.shape:
        mismatches.append(f"shapes {ft.frames.shape} vs {pt.frames.shape}")
    if mismatches:
        raise PairingError(
            f"cannot pair {ft.utterance_id}/{ft.model_tag}/L{ft.layer} with "
            f"{pt.utterance_id}/{pt.model_tag}/L{pt.layer}: " + "; ".join(mismatches)
        )
    # plain float32 subtraction: streams built as x and x - delta recover delta exactly
    return EmbeddingSequence(
        ft.utterance_id, ft.model_tag, ft.layer, "delta", ft.frames - pt.frames
    )


def _check_paired(ref, delta, equal_dims: bool) -> tuple[np.ndarray, np.ndarray]:
    ref = np.asarray(ref, dtype=np.float32)
    delta = np.asarray(delta, dtype=np.float32)
    if ref.ndim != 2 or delta.ndim != 2:
        raise ShapeError(f"streams must be 2-D, got {ref.shape} and {delta.shape}")
    if ref.shape[0] != delta.shape[0]:
        raise ShapeError(f"frame counts differ: {ref.shape} vs {delta.shape}")
    if equal_dims and ref.shape[1] != delta.shape[1]:
        raise ShapeError(f"stream widths differ: {ref.shape} vs {delta.shape}")
    return ref, delta


def fuse_concat(ref, delta) -> np.ndarray:
    ref, delta = _check_paired(ref, delta, equal_dims=False)
    return np.concatenate([ref, delta], axis=1)


def fuse_weighted(ref, delta, theta: float) -> np.ndarray:
    ref, delta = _check_paired(ref, delta, equal_dims=True)
    lam = sigmoid(float(theta))
    out = lam * ref.astype(np.float64) + (1.0 - lam) * delta.astype(np.float64)
    return out.astype(np.float32)


def fuse_xattn(ref, delta, params: "FusionParams") -> np.ndarray:
    ref, delta = _check_paired(ref, delta, equal_dims=True)
    fused, _ = _xattn_forward(ref, delta, params)
    return fused


def moe_gate(ref, moe_w) -> np.ndarray:
    """Frame-wise softmax gate over the two experts; column 0 weights the reference."""
    ref = np.asarray(ref, dtype=np.float32)
    moe_w = np.asarray(moe_w)
    if ref.ndim != 2 or moe_w.ndim != 2 or moe_w.shape != (ref.shape[1], 2):
        raise ShapeError(f"gate weight must be {ref.shape[1]}x2, got {moe_w.shape}")
    logits = ref.astype(np.float64) @ moe_w.astype(np.float64)
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return (e / e.sum(axis=1, keepdims=True)).astype(np.float32)


def moe_fuse(ref, delta, gates) -> np.ndarray:
    ref, delta = _check_paired(ref, delta, equal_dims=True)
    gates = np.asarray(gates, dtype=np.float64)
    if gates.shape != (ref.shape[0], 2):
        raise ShapeError(f"gates must be {ref.shape[0]}x2, got {gates.shape}")
    if np.abs(gates.sum(axis=1) - 1.0).max() > 1e-5:
        raise DomainError("gate rows must sum to 1")
    out = gates[:, :1] * ref.astype(np.float64) + gates[:, 1:] * delta.astype(np.float64)
    return out.astype(np.float32)


def mean_gate_weight(gates_per_utt) -> float:
    """Mean reference-expert weight over all frames of all utterances."""
    gates_per_utt = list(gates_per_utt)
    if not gates_per_utt:
        raise DomainError("mean_gate_weight needs at least one gate matrix")
    col0 = np.concatenate([np.asarray(g, dtype=np.float64)[:, 0] for g in gates_per_utt])
    return float(col0.mean())


@dataclass
class FusionParams:
    """Learnable state of one fusion operator; only the active kind's fields are set."""

    kind: str
    heads: int = 0
    theta: np.ndarray | None = None      # () float32
    wq: np.ndarray | None = None         # (d, d) float32
    wk: np.ndarray | None = None
    wv: np.ndarray | None = None
    wo: np.ndarray | None = None
    ln_gain: np.ndarray | None = None    # (d,) float32
    ln_bias: np.ndarray | None = None
    moe_w: np.ndarray | None = None      # (d, 2) float32

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown fusion kind {self.kind!r}, expected one of {KINDS}")
        active = {name for name in _ALL_TENSORS if getattr(self, name) is not None}
        expected = set(_TENSOR_ORDER[self.kind])
        if active != expected:
            raise ConfigError(
                f"fusion kind {self.kind!r} requires exactly tensors {sorted(expected)}, got {sorted(active)}"
            )
        if self.kind == "xattn":
            d = self.wq.shape[0]
            if self.heads < 1:
                raise ConfigError("xattn needs heads >= 1")
            if d % self.heads != 0:
                raise ConfigError(f"embedding dim {d} not divisible by heads {self.heads}")
            for name in ("wq", "wk", "wv", "wo"):
                arr = getattr(self, name)
                if arr.shape != (d, d):
                    raise ConfigError(f"{name} must be {d}x{d}, got {arr.shape}")
            for name in ("ln_gain", "ln_bias"):
                if getattr(self, name).shape != (d,):
                    raise ConfigError(f"{name} must have length {d}")

    @classmethod
    def create(cls, kind: str, d_ref: int, d_delta: int | None = None,
               heads: int = 8, rng: np.random.Generator | None = None) -> "FusionParams":
        """Fresh parameters: theta=0 (lambda=0.5), zero gate, seeded uniform projections."""
        if kind in ("none", "concat"):
            return cls(kind)
        if d_delta is None or d_ref != d_delta:
            raise ConfigError(
                f"fusion kind {kind!r} needs equal stream widths, got {d_ref} and {d_delta}"
            )
        if kind == "weighted":
            return cls(kind, theta=np.zeros((), dtype=np.float32))
        if kind == "moe":
            return cls(kind, moe_w=np.zeros((d_ref, 2), dtype=np.float32))
        if kind == "xattn":
            if heads < 1 or d_ref % heads != 0:
                raise ConfigError(f"embedding dim {d_ref} not divisible by heads {heads}")
            if rng is None:
                rng = np.random.default_rng(0)
            bound = 1.0 / math.sqrt(d_ref)
            proj = lambda: rng.uniform(-bound, bound, size=(d_ref, d_ref)).astype(np.float32)
            return cls(
                kind,
                heads=heads,
                wq=proj(), wk=proj(), wv=proj(), wo=proj(),
                ln_gain=np.ones(d_ref, dtype=np.float32),
                ln_bias=np.zeros(d_ref, dtype=np.float32),
            )
        raise ConfigError(f"unknown fusion kind {kind!r}")

    def trainable(self) -> dict[str, np.ndarray]:
        """Learnable tensors in a fixed order (empty for none/concat)."""
        return {name: getattr(self, name) for name in _TENSOR_ORDER[self.kind]}

    def clone(self) -> "FusionParams":
        kwargs = {name: getattr(self, name).copy() for name in _TENSOR_ORDER[self.kind]}
        return FusionParams(self.kind, heads=self.heads, **kwargs)

    def fused_dim(self, d_ref: int, d_delta: int | None) -> int:
        if self.kind == "concat":
            if d_delta is None:
                raise ConfigError("concat fusion needs a delta stream")
            return d_ref + d_delta
        return d_ref


_ALL_TENSORS = ("theta", "wq", "wk", "wv", "wo", "ln_gain", "ln_bias", "moe_w")


# ---------------------------------------------------------------------------
# forward / backward used by the trainer
# ---------------------------------------------------------------------------

def fusion_forward(params: FusionParams, ref, delta):
    """Fuse one utterance; returns (fused float32, cache for the backward pass)."""
    if params.kind == "none":
        ref = np.asarray(ref, dtype=np.float32)
        return ref.copy(), {"t": ref.shape[0], "d_delta": None if delta is None else delta.shape[1]}
    if delta is None:
        raise ConfigError(f"fusion kind {params.kind!r} needs a delta stream")
    if params.kind == "concat":
        fused = fuse_concat(ref, delta)
        return fused, {"d_ref": np.asarray(ref).shape[1], "d_delta": np.asarray(delta).shape[1]}
    if params.kind == "weighted":
        ref, delta = _check_paired(ref, delta, equal_dims=True)
        theta = float(params.theta)
        lam = sigmoid(theta)
        x, y = ref.astype(np.float64), delta.astype(np.float64)
        fused = lam * x + (1.0 - lam) * y
        return fused.astype(np.float32), {"x": x, "y": y, "lam": lam, "z64": fused}
    if params.kind == "xattn":
        ref, delta = _check_paired(ref, delta, equal_dims=True)
        return _xattn_forward(ref, delta, params)
    if params.kind == "moe":
        ref, delta = _check_paired(ref, delta, equal_dims=True)
        x, y = ref.astype(np.float64), delta.astype(np.float64)
        logits = x @ params.moe_w.astype(np.float64)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        gates = e / e.sum(axis=1, keepdims=True)
        fused = gates[:, :1] * x + gates[:, 1:] * y
        return fused.astype(np.float32), {"x": x, "y": y, "gates": gates, "z64": fused}
    raise ConfigError(f"unknown fusion kind {params.kind!r}")


def fusion_backward(params: FusionParams, cache: dict, d_fused):
    """Gradients of a scalar loss wrt parameters and both input streams.

    Returns ``(param_grads, d_ref, d_delta)`` with keys matching
    ``params.trainable()``; ``d_delta`` is None for kind "none".
    """
    g = np.asarray(d_fused, dtype=np.float64)
    if params.kind == "none":
        return {}, g.copy(), None
    if params.kind == "concat":
        d_ref = cache["d_ref"]
        return {}, g[:, :d_ref].copy(), g[:, d_ref:].copy()
    if params.kind == "weighted":
        x, y, lam = cache["x"], cache["y"], cache["lam"]
        d_theta = lam * (1.0 - lam) * float((g * (x - y)).sum())
        return (
            {"theta": np.asarray(d_theta, dtype=np.float64)},
            lam * g,
            (1.0 - lam) * g,
        )
    if params.kind == "xattn":
        return _xattn_backward(params, cache, g)
    if params.kind == "moe":
        x, y, gates = cache["x"], cache["y"], cache["gates"]
        d_gates = np.stack([(g * x).sum(axis=1), (g * y).sum(axis=1)], axis=1)
        d_logits = gates * (d_gates - (d_gates * gates).sum(axis=1, keepdims=True))
        grads = {"moe_w": x.T @ d_logits}
        d_ref = gates[:, :1] * g + d_logits @ params.moe_w.astype(np.float64).T
        d_delta = gates[:, 1:] * g
        return grads, d_ref, d_delta
    raise ConfigError(f"unknown fusion kind {params.kind!r}")


def _split_heads(m: np.ndarray, heads: int) -> np.ndarray:
    t, d = m.shape
    return m.reshape(t, heads, d // heads).transpose(1, 0, 2)  # (h, T, dh)


def _merge_heads(m: np.ndarray) -> np.ndarray:
    h, t, dh = m.shape
    return m.transpose(1, 0, 2).reshape(t, h * dh)


def _xattn_forward(ref: np.ndarray, delta: np.ndarray, params: FusionParams):
    x = ref.astype(np.float64)
    y = delta.astype(np.float64)
    d = x.shape[1]
    heads = params.heads
    scale = 1.0 / math.sqrt(d // heads)
    wq, wk, wv, wo = (getattr(params, n).astype(np.float64) for n in ("wq", "wk", "wv", "wo"))
    g64 = params.ln_gain.astype(np.float64)
    b64 = params.ln_bias.astype(np.float64)

    q, k, v = x @ wq, y @ wk, y @ wv
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    scores = scale * (qh @ kh.transpose(0, 2, 1))                     # (h, T, T)
    p = np.exp(scores - scores.max(axis=2, keepdims=True))
    p /= p.sum(axis=2, keepdims=True)
    oh = p @ vh                                                       # (h, T, dh)
    o = _merge_heads(oh)                                              # (T, d)
    a = o @ wo
    r = x + a
    mu = r.mean(axis=1, keepdims=True)
    var = r.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + DEFAULT_LN_EPS)
    yhat = (r - mu) * inv
    z = g64 * yhat + b64
    cache = {"x": x, "y": y, "qh": qh, "kh": kh, "vh": vh, "p": p, "o": o,
             "inv": inv, "yhat": yhat, "scale": scale, "z64": z}
    return z.astype(np.float32), cache


def _xattn_backward(params: FusionParams, cache: dict, g: np.ndarray):
    x, y = cache["x"], cache["y"]
    qh, kh, vh, p = cache["qh"], cache["kh"], cache["vh"], cache["p"]
    o, inv, yhat, scale = cache["o"], cache["inv"], cache["yhat"], cache["scale"]
    heads = params.heads
    wq, wk, wv, wo = (getattr(params, n).astype(np.float64) for n in ("wq", "wk", "wv", "wo"))
    g64 = params.ln_gain.astype(np.float64)

    # layer norm
    d_bias = g.sum(axis=0)
    d_gain = (g * yhat).sum(axis=0)
    d_yhat = g * g64
    d_r = inv * (
        d_yhat
        - d_yhat.mean(axis=1, keepdims=True)
        - yhat * (d_yhat * yhat).mean(axis=1, keepdims=True)
    )

    # residual: r = x + o @ wo
    d_x = d_r.copy()
    d_a = d_r
    d_wo = o.T @ d_a
    d_o = d_a @ wo.T

    # attention
    d_oh = _split_heads(d_o, heads)
    d_p = d_oh @ vh.transpose(0, 2, 1)
    d_vh = p.transpose(0, 2, 1) @ d_oh
    d_scores = p * (d_p - (d_p * p).sum(axis=2, keepdims=True))
    d_qh = scale * (d_scores @ kh)
    d_kh = scale * (d_scores.transpose(0, 2, 1) @ qh)

    d_q, d_k, d_v = _merge_heads(d_qh), _merge_heads(d_kh), _merge_heads(d_vh)
    grads = {
        "wq": x.T @ d_q,
        "wk": y.T @ d_k,
        "wv": y.T @ d_v,
        "wo": d_wo,
        "ln_gain": d_gain,
        "ln_bias": d_bias,
    }
    d_x += d_q @ wq.T
    d_y = d_k @ wk.T + d_v @ wv.T
    return grads, d_x, d_y


# ---------------------------------------------------------------------------
# serialization (FUS1 block)
# ---------------------------------------------------------------------------

def write_fusion(params: FusionParams, fh) -> None:
    """Append the FUS1 block for `params` to a binary stream."""
    order = _TENSOR_ORDER[params.kind]
    fh.write(_FUS_HEADER.pack(FUSION_MAGIC, KINDS.index(params.kind), params.heads, len(order)))
    for name in order:
        arr = np.atleast_2d(np.asarray(getattr(params, name), dtype=np.float32))
        fh.write(_TENSOR_HEADER.pack(arr.shape[0], arr.shape[1]))
        fh.write(arr.astype("<f4", copy=False).tobytes())


def read_fusion(fh) -> FusionParams:
    header = fh.read(_FUS_HEADER.size)
    if len(header) < _FUS_HEADER.size:
        raise FormatError("fusion block truncated before header")
    magic, kind_code, heads, n_tensors = _FUS_HEADER.unpack(header)
    if magic != FUSION_MAGIC:
        raise FormatError(f"bad fusion magic {magic!r}, expected {FUSION_MAGIC!r}")
    if kind_code >= len(KINDS):
        raise FormatError(f"unknown fusion kind code {kind_code}")
    kind = KINDS[kind_code]
    order = _TENSOR_ORDER[kind]
    if n_tensors != len(order):
        raise FormatError(f"fusion kind {kind!r} expects {len(order)} tensors, header says {n_tensors}")
    kwargs = {}
    for name in order:
        th = fh.read(_TENSOR_HEADER.size)
        if len(th) < _TENSOR_HEADER.size:
            raise FormatError(f"fusion tensor {name!r} truncated")
        rows, cols = _TENSOR_HEADER.unpack(th)
        payload = fh.read(4 * rows * cols)
        if len(payload) < 4 * rows * cols:
            raise FormatError(f"fusion tensor {name!r} payload truncated")
        arr = np.frombuffer(payload, dtype="<f4").reshape(rows, cols).copy()
        if name == "theta":
            arr = arr.reshape(()).copy()
        elif name in ("ln_gain", "ln_bias"):
            arr = arr.reshape(-1).copy()
        kwargs[name] = arr
    return FusionParams(kind, heads=heads, **kwargs)
