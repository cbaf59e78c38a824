"""The Evolution operator and the kernel generators for each operator family.

An Evolution Kernel is a materialised H x W x K x K x N x D_out tensor with a
group count G, where N = D_in / G. Applying it to a feature map is

    Y[i,j,m] = sum_{p,q} sum_{n<N} X[i-l+p, j-l+q, g*N + n] * W[i,j,p,q,n,m]

with ``g = floor(m * G / D_out)`` the group of output channel m. G = 1 gives
full channel aggregation (convolution-like); G = D_in = D_out gives depthwise
aggregation (involution-like).

Every ``ev_fn_*`` function builds the kernel for one family so that
``ev_apply(x, kernel)`` reproduces the corresponding classic operator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .classic_ops import (
    ConvWeights,
    InvolutionWeights,
    SaWeights,
    _check_window,
    group_index,
    involution_kernel,
)
from .tensor import ConfigurationError, InvalidShapeError, as_tensor, pad_spatial, softmax

__all__ = [
    "FAMILIES",
    "EvolutionKernel",
    "ev_apply",
    "ev_fn_conv",
    "ev_fn_sa",
    "ev_fn_involution",
    "ev_fn_conv_as_msa",
    "ev_fn_relpos_constant",
    "ev_fn_channelwise_sa",
    "one_hot_patches",
    "relpos_scores",
]

FAMILIES = ("conv", "sa", "msa", "involution", "conv_as_msa", "relpos_const", "channelwise")


@dataclass(frozen=True)
class EvolutionKernel:
    w: np.ndarray
    groups: int = 1
    meta: str = "conv"

    def __post_init__(self):
        w = as_tensor(self.w, rank=6, name="evolution kernel")
        if w.shape[2] != w.shape[3]:
            raise InvalidShapeError(f"kernel window must be square, got {w.shape[2:4]}")
        _check_window(w.shape[2])
        if self.groups < 1 or w.shape[5] % self.groups:
            raise InvalidShapeError(f"D_out={w.shape[5]} is not divisible by G={self.groups}")
        if self.meta not in FAMILIES:
            raise ConfigurationError(f"unknown kernel family {self.meta!r}")
        object.__setattr__(self, "w", w)

    @property
    def k(self) -> int:
        return self.w.shape[2]

    @property
    def n(self) -> int:
        return self.w.shape[4]

    @property
    def d_in(self) -> int:
        return self.n * self.groups

    @property
    def d_out(self) -> int:
        return self.w.shape[5]

    def channel_window(self, m: int) -> range:
        """Input channels aggregated into output channel ``m``."""
        g = (m * self.groups) // self.d_out
        return range(g * self.n, (g + 1) * self.n)

    def is_spatially_constant(self) -> bool:
        """Exact (bitwise) equality of every pixel's block with pixel (0, 0)."""
        return bool(np.array_equal(self.w, np.broadcast_to(self.w[:1, :1], self.w.shape)))


def ev_apply(x, kern: EvolutionKernel) -> np.ndarray:
    x = as_tensor(x, rank=3, name="x")
    h, wd, d_in = x.shape
    w = kern.w
    if w.shape[:2] != (h, wd):
        raise InvalidShapeError(f"kernel spatial extent {w.shape[:2]} does not match input {(h, wd)}")
    if d_in != kern.d_in:
        raise InvalidShapeError(f"input depth {d_in} != N*G = {kern.n}*{kern.groups}")
    k, n = kern.k, kern.n
    base = group_index(kern.d_out, kern.groups) * n
    xp = pad_spatial(x, k // 2)
    y = np.zeros((h, wd, kern.d_out))
    # fixed order: window row, window column, channel within the group
    for p in range(k):
        for q in range(k):
            patch = xp[p:p + h, q:q + wd]
            for c in range(n):
                y += patch[:, :, base + c] * w[:, :, p, q, c]
    return y


def ev_fn_conv(w: ConvWeights, h: int, wd: int) -> EvolutionKernel:
    """Copy the shared convolution weights to every pixel."""
    if h < 1 or wd < 1:
        raise InvalidShapeError(f"spatial extents must be positive, got {(h, wd)}")
    full = np.broadcast_to(w.w, (h, wd) + w.w.shape).copy()
    return EvolutionKernel(full, groups=1, meta="conv")


def _patches(xp: np.ndarray, k: int) -> np.ndarray:
    """H x W x K x K x D neighbourhoods of a map already padded by K // 2."""
    return sliding_window_view(xp, (k, k), axis=(0, 1)).transpose(0, 1, 3, 4, 2)


def _probability_patches(x: np.ndarray, w: SaWeights, k: int) -> np.ndarray:
    """Softmaxed score patches per head, H x W x M x K x K.

    Queries and keys are 1x1 projections of the (optionally position-shifted)
    input; each pixel's query is then contracted with its gathered key patch.
    """
    h, wd, d_in = x.shape
    if d_in != w.d_in:
        raise InvalidShapeError(f"input depth {d_in} does not match D_in={w.d_in}")
    pos = w.pos
    xs = x
    if pos.kind == "absolute":
        if pos.p.shape != x.shape:
            raise InvalidShapeError(f"absolute encoding {pos.p.shape} must match input {x.shape}")
        xs = x + pos.p
    elif pos.kind == "relative" and pos.r_table.shape[:2] != (k, k):
        raise InvalidShapeError(f"relative table must cover a {k}x{k} window")

    out = np.empty((h, wd, w.heads, k, k))
    for head in range(w.heads):
        queries = np.einsum("hwc,cd->hwd", xs, w.wq[head])
        keys = np.einsum("hwc,cd->hwd", xs, w.wk[head])
        key_patches = _patches(pad_spatial(keys, k // 2), k)
        scores = np.einsum("hwd,hwpqd->hwpq", queries, key_patches)
        if pos.kind == "relative":
            rel = np.einsum("pqe,ed->pqd", pos.r_table, pos.wk_hat[head])
            scores = (
                scores
                + np.einsum("hwd,pqd->hwpq", queries, rel)
                + np.einsum("d,hwpqd->hwpq", pos.u[head], key_patches)
                + np.einsum("d,pqd->pq", pos.v[head], rel)
            )
        out[:, :, head] = softmax(scores.reshape(h, wd, k * k)).reshape(h, wd, k, k)
    return out


def _fused_kernel(probs: np.ndarray, w: SaWeights) -> np.ndarray:
    """Sum over heads of probability patch times ``wv^p @ wo^p``."""
    mixed = np.stack([w.wv[p] @ w.head_out_projection(p) for p in range(w.heads)])
    return np.einsum("hwzpq,zcm->hwpqcm", probs, mixed)


def ev_fn_sa(x, w: SaWeights, k: int, m: int | None = None, fuse_output_projection: bool = False) -> EvolutionKernel:
    """Self-attention kernel: probability patch times value weights.

    With one head the entry is ``prob[i,j,p,q] * wv[c,m]``. With several
    heads the unfused kernel stacks the heads along the output axis (depth
    M * D_h, the caller applies ``wo``); the fused kernel absorbs ``wo`` so
    that a single application yields the complete multi-head output.
    """
    x = as_tensor(x, rank=3, name="x")
    _check_window(k)
    if m is not None and m != w.heads:
        raise ConfigurationError(f"weights carry {w.heads} heads, caller asked for {m}")
    if fuse_output_projection and w.heads == 1:
        raise ConfigurationError("a single head has no output projection to fuse")
    probs = _probability_patches(x, w, k)
    if fuse_output_projection:
        return EvolutionKernel(_fused_kernel(probs, w), groups=1, meta="msa")
    # head p owns output channels [p*D_h, (p+1)*D_h)
    kern = np.einsum("hwzpq,zcm->hwpqczm", probs, w.wv)
    h, wd = x.shape[:2]
    kern = kern.reshape(h, wd, k, k, w.d_in, w.heads * w.d_h)
    return EvolutionKernel(kern, groups=1, meta="sa" if w.heads == 1 else "msa")


def ev_fn_involution(x, w: InvolutionWeights, k: int | None = None) -> EvolutionKernel:
    """Depthwise kernel (G = D, N = 1) carrying each pixel's involution kernel."""
    x = as_tensor(x, rank=3, name="x")
    if k is not None and k != w.k:
        raise ConfigurationError(f"involution weights generate {w.k}x{w.k} kernels, not {k}x{k}")
    inv = involution_kernel(x, w)
    d = x.shape[2]
    g_of = group_index(d, w.groups)
    kern = inv[:, :, :, :, g_of][:, :, :, :, None, :]
    return EvolutionKernel(np.ascontiguousarray(kern), groups=d, meta="involution")


def one_hot_patches(k: int) -> np.ndarray:
    """K*K one-hot K x K patches; head m selects window position (m // K, m % K)."""
    _check_window(k)
    return np.eye(k * k).reshape(k * k, k, k)


def ev_fn_conv_as_msa(wv_heads, wo, h: int, wd: int) -> EvolutionKernel:
    """Fused multi-head kernel whose heads attend to fixed one-hot positions.

    With K*K heads and head m always looking at window position
    (m // K, m % K), the kernel at that position is ``wv^m @ wo^m``.
    """
    wv_heads = as_tensor(wv_heads, rank=3, name="wv_heads")
    wo = as_tensor(wo, rank=2, name="wo")
    heads, d_in, d_h = wv_heads.shape
    k = int(round(heads ** 0.5))
    if k * k != heads:
        raise ConfigurationError(f"head count {heads} is not a perfect square")
    _check_window(k)
    if wo.shape[0] != heads * d_h:
        raise ConfigurationError(f"wo needs {heads * d_h} rows, got {wo.shape[0]}")
    zeros = np.zeros((heads, d_in, 1))
    w = SaWeights(wq=zeros, wk=zeros, wv=wv_heads, wo=wo)
    probs = np.broadcast_to(one_hot_patches(k), (h, wd, heads, k, k))
    return EvolutionKernel(_fused_kernel(probs, w), groups=1, meta="conv_as_msa")


def relpos_scores(v, wk_hat, r_table) -> np.ndarray:
    """Input-independent K x K scores ``v . (wk_hat^T r[p, q])``."""
    v = as_tensor(v, rank=1, name="v")
    wk_hat = as_tensor(wk_hat, rank=2, name="wk_hat")
    r_table = as_tensor(r_table, rank=3, name="r_table")
    if r_table.shape[0] != r_table.shape[1] or r_table.shape[2] != wk_hat.shape[0]:
        raise InvalidShapeError(f"r_table {r_table.shape} incompatible with wk_hat {wk_hat.shape}")
    if wk_hat.shape[1] != v.shape[0]:
        raise InvalidShapeError(f"v has length {v.shape[0]}, wk_hat projects to {wk_hat.shape[1]}")
    return (r_table @ wk_hat) @ v


def ev_fn_relpos_constant(v, wk_hat, r_table, wv, h: int, wd: int) -> EvolutionKernel:
    """Attention kernel when only the relative-position term survives.

    With zero query and key projections the scores depend on the shift alone,
    so one probability patch serves every pixel.
    """
    scores = relpos_scores(v, wk_hat, r_table)
    k = scores.shape[0]
    _check_window(k)
    wv = as_tensor(wv, rank=2, name="wv")
    prob = softmax(scores.reshape(-1)).reshape(k, k)
    block = prob[:, :, None, None] * wv
    return EvolutionKernel(np.broadcast_to(block, (h, wd) + block.shape).copy(), groups=1, meta="relpos_const")


def ev_fn_channelwise_sa(x, wq_c, wk_c, wv, k: int) -> EvolutionKernel:
    """Spatial- and channel-specific kernel: one attention map per input channel."""
    x = as_tensor(x, rank=3, name="x")
    _check_window(k)
    wq_c = as_tensor(wq_c, rank=3, name="wq_c")
    wk_c = as_tensor(wk_c, rank=3, name="wk_c")
    wv = as_tensor(wv, rank=2, name="wv")
    h, wd, d_in = x.shape
    if wq_c.shape[0] != d_in or wk_c.shape[0] != d_in or wq_c.shape != wk_c.shape:
        raise ConfigurationError(f"need {d_in} matching per-channel query/key pairs")
    if wv.shape[0] != d_in:
        raise InvalidShapeError(f"wv must have {d_in} rows, got {wv.shape}")
    x_patches = _patches(pad_spatial(x, k // 2), k)
    probs = np.empty((h, wd, k, k, d_in))
    for c in range(d_in):
        queries = x @ wq_c[c]
        key_patches = np.einsum("hwpqe,ed->hwpqd", x_patches, wk_c[c])
        scores = np.einsum("hwd,hwpqd->hwpq", queries, key_patches)
        probs[..., c] = softmax(scores.reshape(h, wd, k * k)).reshape(h, wd, k, k)
    kern = probs[..., None] * wv
    return EvolutionKernel(kern, groups=1, meta="channelwise")
