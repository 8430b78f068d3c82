"""Error-rate metrics and paired-bootstrap significance between two systems.

Corpus WER is total (substitutions + insertions + deletions) over total
reference words; the per-pair edit decomposition comes from a Levenshtein
backtrace with a fixed tie preference (substitution, then deletion, then
insertion) so results are deterministic. CER applies the same machinery to
character sequences with spaces removed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, PairingError, ShapeError


@dataclass(frozen=True)
class EditCounts:
    sub: int
    ins: int
    dele: int

    @property
    def total(self) -> int:
        return self.sub + self.ins + self.dele


@dataclass(frozen=True)
class ScoredPair:
    utterance_id: str
    ref_words: tuple[str, ...]
    hyp_words: tuple[str, ...]
    edits: EditCounts


def edit_ops(ref_tokens, hyp_tokens) -> EditCounts:
    """Minimal edit decomposition of hyp vs ref via DP with backtrace."""
    ref = list(ref_tokens)
    hyp = list(hyp_tokens)
    n, m = len(ref), len(hyp)
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)  # deleting all ref tokens
    dist[0, :] = np.arange(m + 1)  # inserting all hyp tokens
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub_cost = dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            dist[i, j] = min(sub_cost, dist[i - 1, j] + 1, dist[i, j - 1] + 1)
    sub = ins = dele = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            sub += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and dist[i, j] == dist[i - 1, j] + 1:
            dele += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditCounts(sub=int(sub), ins=int(ins), dele=int(dele))


def _score(refs, hyps, ids, tokenize) -> tuple[float, list[ScoredPair]]:
    refs = list(refs)
    hyps = list(hyps)
    if len(refs) != len(hyps):
        raise ShapeError(f"got {len(refs)} references but {len(hyps)} hypotheses")
    if ids is None:
        ids = [str(i) for i in range(len(refs))]
    else:
        ids = [str(i) for i in ids]
        if len(ids) != len(refs):
            raise ShapeError(f"got {len(ids)} ids for {len(refs)} utterances")
    pairs = []
    for utt_id, ref, hyp in zip(ids, refs, hyps):
        ref_toks = tuple(tokenize(ref))
        hyp_toks = tuple(tokenize(hyp))
        pairs.append(ScoredPair(utt_id, ref_toks, hyp_toks, edit_ops(ref_toks, hyp_toks)))
    total_ref = sum(len(p.ref_words) for p in pairs)
    if total_ref == 0:
        raise DomainError("total reference length is zero")
    rate = sum(p.edits.total for p in pairs) / total_ref
    return rate, pairs


def wer(refs, hyps, ids=None) -> tuple[float, list[ScoredPair]]:
    """Corpus word error rate plus per-utterance scored pairs."""
    return _score(refs, hyps, ids, lambda s: s.split())


def cer(refs, hyps, ids=None) -> tuple[float, list[ScoredPair]]:
    """Corpus character error rate (spaces removed before comparison)."""
    return _score(refs, hyps, ids, lambda s: list(s.replace(" ", "")))


def paired_bootstrap(pairs_a, pairs_b, resamples: int = 10000, seed: int = 0) -> float:
    """One-sided paired bootstrap; system B is hypothesized better than A.

    Resamples utterances with replacement and returns the fraction of
    resamples where B fails to improve on A, i.e. WER(A) <= WER(B). Ties
    count against B, so comparing a system with itself yields p = 1.0.
    Each resample derives its RNG from ``seed + index``, so the result is
    deterministic and resamples are order-independent.
    """
    pairs_a = list(pairs_a)
    pairs_b = list(pairs_b)
    ids_a = [p.utterance_id for p in pairs_a]
    ids_b = [p.utterance_id for p in pairs_b]
    if ids_a != ids_b:
        raise PairingError("paired bootstrap needs the same utterance ids in the same order")
    if any(a.ref_words != b.ref_words for a, b in zip(pairs_a, pairs_b)):
        raise PairingError("paired bootstrap needs identical references in both systems")
    if not pairs_a:
        raise DomainError("paired bootstrap needs at least one utterance")
    edits_a = np.array([p.edits.total for p in pairs_a], dtype=np.int64)
    edits_b = np.array([p.edits.total for p in pairs_b], dtype=np.int64)
    n = len(pairs_a)
    # same references on both sides, so comparing WERs reduces to comparing edit sums
    hits = 0
    for i in range(resamples):
        idx = np.random.default_rng(seed + i).integers(0, n, size=n)
        if edits_a[idx].sum() <= edits_b[idx].sum():
            hits += 1
    return hits / resamples
