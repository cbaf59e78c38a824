"""Convolution, local self-attention and involution as instances of one
kernel-driven aggregation operator (Evolution)."""

from .classic_ops import (
    ConvWeights,
    InvolutionWeights,
    PosEncoding,
    SaWeights,
    attention_probabilities,
    channelwise_local_attention,
    conv2d,
    involution_apply,
    involution_kernel,
    local_self_attention,
)
from .core import (
    EvolutionKernel,
    ev_apply,
    ev_fn_channelwise_sa,
    ev_fn_conv,
    ev_fn_conv_as_msa,
    ev_fn_involution,
    ev_fn_relpos_constant,
    ev_fn_sa,
)
from .equivalence import OperatorSpec, compare_tensors, matrix_rank, run_scenario
from .tensor import ConfigurationError, InvalidShapeError, matmul, pad_spatial, prng_fill, softmax

__version__ = "0.1.0"
