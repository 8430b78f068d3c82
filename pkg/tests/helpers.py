"""Shared test utilities: finite differences, relative error, pipeline setup."""

import os

import numpy as np

from repfuse import cli


def fd_grad(loss_fn, arr, h=1e-3):
    """Central finite differences of loss_fn() wrt every entry of `arr`.

    `arr` is perturbed in place and restored. The divisor uses the actually
    applied step (read back after assignment) so float32 parameter storage
    does not bias the estimate.
    """
    grad = np.zeros(arr.shape, dtype=np.float64)
    it = np.nditer(np.zeros(arr.shape), flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = arr[idx].copy()
        arr[idx] = orig + h
        hi = float(arr[idx])
        f_hi = loss_fn()
        arr[idx] = orig - h
        lo = float(arr[idx])
        f_lo = loss_fn()
        arr[idx] = orig
        grad[idx] = (f_hi - f_lo) / (hi - lo)
    return grad


def rel_err(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = max(np.linalg.norm(numeric), np.linalg.norm(analytic), 1e-12)
    return np.linalg.norm(analytic - numeric) / denom


def run_cli(args):
    return cli.main([str(a) for a in args])


def fusion_gradcheck(kind, seed, t=3, d=8, heads=2):
    """Worst relative error between analytic and FD gradients for one instance.

    Covers every trainable tensor plus both input streams. The probe loss
    reads the float64 pre-rounding output so the check itself accumulates in
    float64.
    """
    from repfuse.fusion import FusionParams, fusion_backward, fusion_forward

    rng = np.random.default_rng(seed)
    ref = rng.normal(0, 1, (t, d)).astype(np.float32)
    delta = rng.normal(0, 1, (t, d)).astype(np.float32)
    params = FusionParams.create(kind, d, d, heads=heads, rng=rng)
    if kind == "weighted":
        params.theta[...] = rng.normal(0, 1)
    if kind == "moe":
        params.moe_w[...] = rng.normal(0, 0.5, params.moe_w.shape)
    probe = rng.normal(0, 1, (t, d))

    def loss():
        fused, cache = fusion_forward(params, ref, delta)
        z = cache.get("z64", fused.astype(np.float64))
        return float((z * probe).sum())

    _, cache = fusion_forward(params, ref, delta)
    grads, d_ref, d_delta = fusion_backward(params, cache, probe)
    worst = 0.0
    for name, arr in params.trainable().items():
        worst = max(worst, rel_err(grads[name], fd_grad(loss, arr)))
    worst = max(worst, rel_err(d_ref, fd_grad(loss, ref)))
    worst = max(worst, rel_err(d_delta, fd_grad(loss, delta)))
    return worst


def build_synth_pipeline(root, seed=1, utts=(60, 20, 20), d=32, sigma=0.5):
    """synth + delta over all three splits; returns manifest paths per split."""
    data = os.path.join(root, "data")
    rc = run_cli(["synth", "--out", data, "--seed", seed,
                  "--utts", utts[0], "--dev-utts", utts[1], "--test-utts", utts[2],
                  "--d", d, "--sigma", sigma])
    assert rc == 0
    manifests = {}
    for split in ("train", "dev", "test"):
        out = os.path.join(root, f"delta_{split}")
        rc = run_cli(["delta", "--ft-manifest", os.path.join(data, f"{split}.jsonl"),
                      "--pt-manifest", os.path.join(data, f"{split}.jsonl"), "--out", out])
        assert rc == 0
        manifests[split] = os.path.join(out, "manifest.jsonl")
    manifests["data"] = data
    return manifests
