"""Character-level CTC: loss, analytic logit gradients, greedy decoding.

The forward-backward dynamic program runs entirely in log space (log-sum-exp
over the usual stay / advance / skip transitions on the blank-extended label
sequence), which is robust for float32 inputs without probability rescaling.

A target that cannot fit in the available frames yields ``math.inf`` from
``ctc_loss`` and a zero matrix from ``ctc_grad``; callers treat that pair as
the "infeasible" flag and skip the sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError
from .store import Vocab

NEG_INF = -np.inf


@dataclass
class CtcHead:
    """Linear projection from fused features to per-character logits."""

    w: np.ndarray  # (d_fused, V) float32
    b: np.ndarray  # (V,) float32
    vocab: Vocab

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float32)
        self.b = np.asarray(self.b, dtype=np.float32)
        v = len(self.vocab)
        if v < 2:
            raise DomainError("vocab must contain the blank plus at least one symbol")
        if self.w.ndim != 2 or self.w.shape[1] != v or self.b.shape != (v,):
            raise ShapeError(f"head shapes {self.w.shape}/{self.b.shape} do not match |vocab|={v}")

    @classmethod
    def zeros(cls, d_fused: int, vocab: Vocab) -> "CtcHead":
        # zero init: every frame starts exactly uniform, so the initial loss is T*log(V)
        v = len(vocab)
        return cls(np.zeros((d_fused, v), dtype=np.float32), np.zeros(v, dtype=np.float32), vocab)

    def logits(self, feats) -> np.ndarray:
        feats = np.asarray(feats)
        if feats.ndim != 2 or feats.shape[1] != self.w.shape[0]:
            raise ShapeError(f"features {feats.shape} do not match head input dim {self.w.shape[0]}")
        return feats.astype(np.float64) @ self.w.astype(np.float64) + self.b.astype(np.float64)


def log_softmax_rows(logits) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _validate(log_probs, target) -> tuple[np.ndarray, list[int]]:
    lp = np.asarray(log_probs, dtype=np.float64)
    if lp.ndim != 2:
        raise ShapeError(f"log_probs must be 2-D, got shape {lp.shape}")
    v = lp.shape[1]
    if v < 2:
        raise DomainError("need at least blank plus one symbol")
    row_sums = np.exp(lp).sum(axis=1)
    if np.abs(row_sums - 1.0).max() > 1e-5:
        raise DomainError("rows of exp(log_probs) must sum to 1 (pass normalized log probabilities)")
    ids = [int(i) for i in target]
    for i in ids:
        if not 1 <= i <= v - 1:
            raise DomainError(f"target id {i} outside [1, {v - 1}]")
    return lp, ids


def min_frames(target) -> int:
    """Fewest frames that can emit the target: its length plus one blank per repeat."""
    ids = list(target)
    repeats = sum(1 for a, b in zip(ids, ids[1:]) if a == b)
    return len(ids) + repeats


def _extend(ids: list[int]) -> tuple[np.ndarray, np.ndarray]:
    ext = np.zeros(2 * len(ids) + 1, dtype=np.int64)
    ext[1::2] = ids
    # skip s-2 -> s allowed only into a non-blank that differs from the label two back
    allow = np.zeros(ext.shape[0], dtype=bool)
    allow[2:] = (ext[2:] != 0) & (ext[2:] != ext[:-2])
    return ext, np.flatnonzero(allow)


def _forward(lp_ext: np.ndarray, skip_to: np.ndarray) -> np.ndarray:
    t_len, s_len = lp_ext.shape
    alpha = np.full((t_len, s_len), NEG_INF)
    alpha[0, 0] = lp_ext[0, 0]
    if s_len > 1:
        alpha[0, 1] = lp_ext[0, 1]
    acc = np.empty(s_len)
    for t in range(1, t_len):
        prev = alpha[t - 1]
        acc[:] = prev
        np.logaddexp(acc[1:], prev[:-1], out=acc[1:])
        if skip_to.size:
            acc[skip_to] = np.logaddexp(acc[skip_to], prev[skip_to - 2])
        np.add(acc, lp_ext[t], out=alpha[t])
    return alpha


def _backward(lp_ext: np.ndarray, skip_to: np.ndarray) -> np.ndarray:
    t_len, s_len = lp_ext.shape
    beta = np.full((t_len, s_len), NEG_INF)
    beta[t_len - 1, s_len - 1] = 0.0
    if s_len > 1:
        beta[t_len - 1, s_len - 2] = 0.0
    acc = np.empty(s_len)
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1] + lp_ext[t + 1]
        acc[:] = nxt
        np.logaddexp(acc[:-1], nxt[1:], out=acc[:-1])
        if skip_to.size:
            # transition s -> s+2 mirrors the forward skip rule
            acc[skip_to - 2] = np.logaddexp(acc[skip_to - 2], nxt[skip_to])
        beta[t] = acc
    return beta


def _log_total(alpha: np.ndarray) -> float:
    s_len = alpha.shape[1]
    if s_len > 1:
        return float(np.logaddexp(alpha[-1, s_len - 1], alpha[-1, s_len - 2]))
    return float(alpha[-1, 0])


def ctc_loss(log_probs, target) -> float:
    """Negative log probability of all alignments that collapse to `target`.

    Returns ``math.inf`` when the target cannot be emitted in the given
    number of frames.
    """
    lp, ids = _validate(log_probs, target)
    if lp.shape[0] < min_frames(ids):
        return math.inf
    ext, skip_to = _extend(ids)
    alpha = _forward(lp[:, ext], skip_to)
    return -_log_total(alpha)


def ctc_loss_grad(log_probs, target) -> tuple[float, np.ndarray]:
    """Loss and its gradient wrt pre-softmax logits in one forward-backward pass.

    The gradient is softmax(logits) minus the alignment-posterior marginals;
    infeasible targets give (inf, zero matrix).
    """
    lp, ids = _validate(log_probs, target)
    t_len, v = lp.shape
    if t_len < min_frames(ids):
        return math.inf, np.zeros((t_len, v))
    ext, skip_to = _extend(ids)
    lp_ext = lp[:, ext]
    alpha = _forward(lp_ext, skip_to)
    beta = _backward(lp_ext, skip_to)
    log_z = _log_total(alpha)
    occupancy = np.exp(alpha + beta - log_z)  # (T, S), rows sum to 1
    gamma = np.zeros((t_len, v))
    for s, label in enumerate(ext):
        gamma[:, label] += occupancy[:, s]
    return -log_z, np.exp(lp) - gamma


def ctc_grad(log_probs, target) -> np.ndarray:
    """Gradient of ctc_loss wrt pre-softmax logits: softmax minus posterior marginals."""
    return ctc_loss_grad(log_probs, target)[1]


def greedy_decode(log_probs, vocab: Vocab) -> str:
    """Best-path decoding: frame argmax, collapse repeats, drop blanks.

    Ties break to the lowest index, so decoding is deterministic.
    """
    lp = np.asarray(log_probs)
    if lp.ndim != 2 or lp.shape[1] != len(vocab):
        raise ShapeError(f"log_probs {lp.shape} do not match |vocab|={len(vocab)}")
    path = np.argmax(lp, axis=1)
    out = []
    prev = -1
    for idx in path:
        if idx != prev and idx != vocab.blank_index:
            out.append(vocab.chars[idx])
        prev = idx
    return "".join(out)
