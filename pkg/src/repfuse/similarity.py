"""Canonical correlation analysis between paired frame sets, and PWCCA scores.

Both views are mean-centered; canonical correlations are the singular values
of the whitened cross-covariance ``Sxx^{-1/2} Sxy Syy^{-1/2}``, with a small
ridge added to both auto-covariances because real last-layer dumps are often
near rank-deficient. The PWCCA scalar weights each correlation by how much
its canonical component accounts for the FIRST view: components are
``h_i = X~ v_i`` and the raw weight of component i is the summed absolute
inner product between ``h_i`` and the coordinate series of the centered
first view.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import PairingError, SampleSizeError, ShapeError
from .store import UtteranceRecord, load_manifest, load_sequence
from .tensor import svd_symmetric

DEFAULT_REG_EPS = 1e-8
DEFAULT_MAX_FRAMES = 100_000


@dataclass(frozen=True)
class CcaResult:
    rho: np.ndarray     # (k,) descending, clamped to [0, 1]
    x_proj: np.ndarray  # (d1, k) projections for the first view
    y_proj: np.ndarray  # (d2, k)
    warnings: tuple[str, ...] = ()


def _centered(view, name: str) -> np.ndarray:
    x = np.asarray(view, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {x.shape}")
    return x - x.mean(axis=0, keepdims=True)


def _inv_sqrt(cov: np.ndarray, reg_eps: float, name: str, warnings: list[str]) -> np.ndarray:
    w, v = svd_symmetric(cov)
    floor = max(w[0], 1.0) * 1e-14
    if w[-1] < floor:
        warnings.append(f"{name} nearly rank-deficient beyond ridge (min eigenvalue {w[-1]:.3e})")
        w = np.maximum(w, floor)
    return (v / np.sqrt(w)) @ v.T


def cca_correlations(x, y, reg_eps: float = DEFAULT_REG_EPS) -> CcaResult:
    """Canonical correlations (descending) and the paired projection vectors."""
    xc = _centered(x, "x")
    yc = _centered(y, "y")
    n, d1 = xc.shape
    n2, d2 = yc.shape
    if n != n2:
        raise ShapeError(f"views disagree on sample count: {n} vs {n2}")
    if n <= max(d1, d2):
        raise SampleSizeError(f"need more samples than dimensions: n={n}, dims=({d1}, {d2})")
    warnings: list[str] = []
    denom = n - 1
    sxx = xc.T @ xc / denom + reg_eps * np.eye(d1)
    syy = yc.T @ yc / denom + reg_eps * np.eye(d2)
    sxy = xc.T @ yc / denom
    isx = _inv_sqrt(sxx, reg_eps, "first view covariance", warnings)
    isy = _inv_sqrt(syy, reg_eps, "second view covariance", warnings)
    u, sv, vt = np.linalg.svd(isx @ sxy @ isy)
    k = min(d1, d2)
    rho = np.clip(sv[:k], 0.0, 1.0)
    return CcaResult(rho, isx @ u[:, :k], isy @ vt[:k].T, tuple(warnings))


def pwcca_components(x, y, reg_eps: float = DEFAULT_REG_EPS):
    """PWCCA score plus its normalized weights and the underlying correlations."""
    res = cca_correlations(x, y, reg_eps)
    xc = _centered(x, "x")
    h = xc @ res.x_proj                     # canonical components of the first view
    raw = np.abs(xc.T @ h).sum(axis=0)      # how much each component explains the view
    total = raw.sum()
    alpha = raw / total if total > 0 else np.full(raw.shape, 1.0 / raw.shape[0])
    return float(alpha @ res.rho), alpha, res


def pwcca_score(x, y, reg_eps: float = DEFAULT_REG_EPS) -> float:
    """Projection-weighted similarity scalar in [0, 1]; the first view weights it."""
    score, _, _ = pwcca_components(x, y, reg_eps)
    return score


@dataclass(frozen=True)
class LayerSimilarity:
    layer: int
    canonical_corrs: tuple[float, ...]
    pwcca: float
    n_frames: int
    warnings: tuple[str, ...] = ()


@dataclass(frozen=True)
class SimilarityReport:
    model_pair: tuple[str, str]
    per_layer: tuple[LayerSimilarity, ...]

    def to_json(self) -> str:
        obj = {
            "model_pair": list(self.model_pair),
            "per_layer": [
                {
                    "layer": ls.layer,
                    "canonical_corrs": list(ls.canonical_corrs),
                    "pwcca": ls.pwcca,
                    "n_frames": ls.n_frames,
                    "warnings": list(ls.warnings),
                }
                for ls in self.per_layer
            ],
        }
        return json.dumps(obj, sort_keys=True, indent=2) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer", "pwcca"])
            for ls in self.per_layer:
                writer.writerow([ls.layer, repr(ls.pwcca)])


def _stack_layer(records_a: list[UtteranceRecord], records_b: list[UtteranceRecord],
                 stream_a, stream_b, layer: int, root_a, root_b):
    xs, ys = [], []
    for rec_a, rec_b in zip(records_a, records_b):
        seq_a = load_sequence(rec_a, stream_a[0], layer, stream_a[1], root_a)
        seq_b = load_sequence(rec_b, stream_b[0], layer, stream_b[1], root_b)
        if seq_a.n_frames != seq_b.n_frames:
            raise PairingError(
                f"utterance {rec_a.utterance_id!r} layer {layer}: frame counts "
                f"{seq_a.n_frames} vs {seq_b.n_frames} are misaligned"
            )
        xs.append(seq_a.frames)
        ys.append(seq_b.frames)
    return np.vstack(xs), np.vstack(ys)


def layerwise_cca(manifest_a, stream_a: tuple[str, str], manifest_b, stream_b: tuple[str, str],
                  layers, max_frames: int = DEFAULT_MAX_FRAMES, seed: int = 0,
                  reg_eps: float = DEFAULT_REG_EPS) -> SimilarityReport:
    """PWCCA per layer over frames pooled across utterances.

    ``stream_a``/``stream_b`` are (model_tag, variant) pairs; the layer index
    varies. Frames beyond ``max_frames`` are subsampled with a seeded RNG
    using the same indices for both views, so reruns are byte-identical.
    """
    records_a = load_manifest(manifest_a)
    records_b = load_manifest(manifest_b)
    ids_a = [r.utterance_id for r in records_a]
    ids_b = {r.utterance_id: r for r in records_b}
    if set(ids_a) != set(ids_b):
        missing = sorted(set(ids_a) ^ set(ids_b))
        raise PairingError(f"manifests cover different utterances, e.g. {missing[:3]}")
    ordered_b = [ids_b[i] for i in ids_a]
    root_a = os.path.dirname(os.path.abspath(manifest_a))
    root_b = os.path.dirname(os.path.abspath(manifest_b))

    per_layer = []
    for layer in layers:
        x, y = _stack_layer(records_a, ordered_b, stream_a, stream_b, layer, root_a, root_b)
        n = x.shape[0]
        if n > max_frames:
            rng = np.random.default_rng([seed, layer])
            idx = np.sort(rng.choice(n, size=max_frames, replace=False))
            x, y = x[idx], y[idx]
        score, _, res = pwcca_components(x, y, reg_eps)
        per_layer.append(
            LayerSimilarity(
                layer=int(layer),
                canonical_corrs=tuple(float(r) for r in res.rho),
                pwcca=score,
                n_frames=x.shape[0],
                warnings=res.warnings,
            )
        )
    pair = (f"{stream_a[0]}:{stream_a[1]}", f"{stream_b[0]}:{stream_b[1]}")
    return SimilarityReport(pair, tuple(per_layer))
