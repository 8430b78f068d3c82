"""Fuse frozen speech-representation streams with delta embeddings.

The toolkit computes delta streams (fine-tuned minus pre-trained frame
embeddings), fuses them with a reference model's fine-tuned stream, trains a
linear CTC head over the frozen fused features, scores WER/CER with paired
bootstrap significance, and measures representation similarity with
CCA/PWCCA.
"""

from .ctc import CtcHead, ctc_grad, ctc_loss, greedy_decode
from .fusion import (
    FusionParams,
    compute_delta,
    fuse_concat,
    fuse_weighted,
    fuse_xattn,
    mean_gate_weight,
    moe_fuse,
    moe_gate,
)
from .metrics import cer, paired_bootstrap, wer
from .similarity import cca_correlations, layerwise_cca, pwcca_score
from .store import (
    EmbeddingSequence,
    UtteranceRecord,
    Vocab,
    build_vocab,
    load_manifest,
    normalize_text,
    read_emb,
    save_manifest,
    write_emb,
)
from .tensor import layer_norm, matmul, matrix, softmax_rows, svd_symmetric
from .train import StreamSpec, TrainConfig, TrainedFusionModel, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "CtcHead",
    "EmbeddingSequence",
    "FusionParams",
    "StreamSpec",
    "TrainConfig",
    "TrainedFusionModel",
    "UtteranceRecord",
    "Vocab",
    "build_vocab",
    "cca_correlations",
    "cer",
    "compute_delta",
    "ctc_grad",
    "ctc_loss",
    "evaluate",
    "fuse_concat",
    "fuse_weighted",
    "fuse_xattn",
    "greedy_decode",
    "layer_norm",
    "layerwise_cca",
    "load_manifest",
    "matmul",
    "matrix",
    "mean_gate_weight",
    "moe_fuse",
    "moe_gate",
    "normalize_text",
    "paired_bootstrap",
    "pwcca_score",
    "read_emb",
    "save_manifest",
    "softmax_rows",
    "svd_symmetric",
    "train",
    "wer",
    "write_emb",
]
