"""Sparse Sinkhorn token translation at desk scale."""

from .autodiff import NumericalError, Tape, Tensor, backward, register_custom_op
from .coupling import (
    Coupling,
    Marginals,
    dense_sinkhorn_project,
    dykstra_project,
    dykstra_vjp,
    entropy,
    marginal_residual,
    projection_objective,
    sparsity,
    transport_objective,
)
from .lm import EvalReport, LmConfig, LmParams, evaluate, forward_logits, init_params, nll_loss
from .simplex import SimplexScale, SparsemaxResult, softmax_scaled, sparsemax, sparsemax_vjp
from .tokenizer import (
    Corpus,
    TokenizerModel,
    byte_tokenizer,
    compression_ratio,
    decode,
    encode,
    pack_sequences,
    train_bpe,
)
from .translation import (
    build_translated_model,
    translate_embeddings,
    translate_head,
    truncation_resize,
    unconstrained_translate,
)

__version__ = "0.1.0"
