"""Reference operators written directly from their textbook formulas.

These are the oracles the Evolution formulations are checked against, so
they deliberately avoid any kernel materialisation: each one loops over the
K x K window offsets and aggregates shifted copies of the padded input.

Conventions shared by every operator here:

* feature maps are H x W x D float64 arrays;
* windows are K x K with K odd, ``l = K // 2``, stride 1, same-size output;
* window index ``(p, q)`` in ``[0, K)`` addresses the neighbour
  ``(i - l + p, j - l + q)``, which is ``xpad[i + p, j + q]`` after zero
  padding by ``l``;
* out-of-image neighbours are zeros and, for attention, still take part in
  the softmax (their key vectors are zero).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ConfigurationError, InvalidShapeError, as_tensor, pad_spatial, softmax

__all__ = [
    "ConvWeights",
    "PosEncoding",
    "SaWeights",
    "InvolutionWeights",
    "conv2d",
    "attention_scores",
    "attention_probabilities",
    "local_self_attention",
    "channelwise_local_attention",
    "involution_kernel",
    "involution_apply",
    "group_index",
]

POS_KINDS = ("none", "absolute", "relative")


def _check_window(k: int) -> int:
    if k < 1 or k % 2 == 0:
        raise ConfigurationError(f"window size K must be odd and positive, got {k}")
    return k // 2


def _feature_map(x, name: str = "x") -> np.ndarray:
    return as_tensor(x, rank=3, name=name)


def group_index(channels: int, groups: int) -> np.ndarray:
    """Group owning each of ``channels`` channels: ``floor(m * groups / channels)``."""
    if groups < 1 or channels % groups:
        raise ConfigurationError(f"{channels} channels cannot be split into {groups} groups")
    return (np.arange(channels) * groups) // channels


@dataclass(frozen=True)
class ConvWeights:
    """Spatially shared K x K x D_in x D_out convolution weights (no bias)."""

    w: np.ndarray

    def __post_init__(self):
        w = as_tensor(self.w, rank=4, name="conv weights")
        if w.shape[0] != w.shape[1]:
            raise InvalidShapeError(f"conv window must be square, got {w.shape[:2]}")
        _check_window(w.shape[0])
        object.__setattr__(self, "w", w)

    @property
    def k(self) -> int:
        return self.w.shape[0]


@dataclass(frozen=True)
class PosEncoding:
    """Positional-encoding payload for local self-attention.

    ``kind="absolute"`` needs ``p`` (H x W x D_in), added to the input before
    the query and key projections only.

    ``kind="relative"`` needs the shift table ``r_table`` (K x K x D_p, indexed
    by window position) and, per head, ``wk_hat`` (D_p x D_k), ``u`` and ``v``
    (D_k each). The score then has four terms::

        q.k + q.(wk_hat^T r) + u.k + v.(wk_hat^T r)
    """

    kind: str = "none"
    p: np.ndarray | None = None
    r_table: np.ndarray | None = None
    wk_hat: np.ndarray | None = None
    u: np.ndarray | None = None
    v: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in POS_KINDS:
            raise ConfigurationError(f"unknown positional encoding kind {self.kind!r}")
        if self.kind == "absolute":
            if self.p is None:
                raise ConfigurationError("absolute encoding requires the table p")
            object.__setattr__(self, "p", as_tensor(self.p, rank=3, name="p"))
        elif self.kind == "relative":
            missing = [n for n in ("r_table", "wk_hat", "u", "v") if getattr(self, n) is None]
            if missing:
                raise ConfigurationError(f"relative encoding requires {', '.join(missing)}")
            object.__setattr__(self, "r_table", as_tensor(self.r_table, rank=3, name="r_table"))
            object.__setattr__(self, "wk_hat", as_tensor(self.wk_hat, rank=3, name="wk_hat"))
            object.__setattr__(self, "u", as_tensor(self.u, rank=2, name="u"))
            object.__setattr__(self, "v", as_tensor(self.v, rank=2, name="v"))

    def relative_keys(self, head: int) -> np.ndarray:
        """Projected shift encodings ``wk_hat^T r`` for one head, shape K x K x D_k."""
        return self.r_table @ self.wk_hat[head]


@dataclass(frozen=True)
class SaWeights:
    """Per-head projections for (multi-head) local self-attention.

    ``wq``/``wk`` are M x D_in x D_k, ``wv`` is M x D_in x D_h and ``wo`` is
    (M * D_h) x D_out. ``wo`` is only used (and required) when M > 1.
    """

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray | None = None
    pos: PosEncoding = field(default_factory=PosEncoding)

    def __post_init__(self):
        wq = as_tensor(self.wq, rank=3, name="wq")
        wk = as_tensor(self.wk, rank=3, name="wk")
        wv = as_tensor(self.wv, rank=3, name="wv")
        if wq.shape != wk.shape:
            raise InvalidShapeError(f"wq {wq.shape} and wk {wk.shape} must match")
        if wv.shape[:2] != wq.shape[:2]:
            raise InvalidShapeError(f"wv {wv.shape} must share heads and D_in with wq {wq.shape}")
        object.__setattr__(self, "wq", wq)
        object.__setattr__(self, "wk", wk)
        object.__setattr__(self, "wv", wv)
        m, _, d_h = wv.shape
        if self.wo is not None:
            wo = as_tensor(self.wo, rank=2, name="wo")
            if wo.shape[0] != m * d_h:
                raise InvalidShapeError(f"wo needs {m * d_h} rows, got {wo.shape[0]}")
            object.__setattr__(self, "wo", wo)
        elif m > 1:
            raise ConfigurationError("multi-head attention requires an output projection wo")
        pos = self.pos
        if pos.kind == "relative":
            if pos.wk_hat.shape[0] != m or pos.u.shape[0] != m or pos.v.shape[0] != m:
                raise ConfigurationError("relative encoding needs one wk_hat, u and v per head")
            if pos.wk_hat.shape[2] != wq.shape[2]:
                raise InvalidShapeError("wk_hat must project onto D_k")

    @classmethod
    def single_head(cls, wq, wk, wv, pos: PosEncoding | None = None) -> "SaWeights":
        """Build M = 1 weights from plain D_in x D_k / D_in x D_out matrices."""
        return cls(
            wq=np.asarray(wq, dtype=np.float64)[None],
            wk=np.asarray(wk, dtype=np.float64)[None],
            wv=np.asarray(wv, dtype=np.float64)[None],
            pos=pos if pos is not None else PosEncoding(),
        )

    @property
    def heads(self) -> int:
        return self.wq.shape[0]

    @property
    def d_in(self) -> int:
        return self.wq.shape[1]

    @property
    def d_h(self) -> int:
        return self.wv.shape[2]

    @property
    def d_out(self) -> int:
        if self.heads == 1:
            return self.d_h
        return self.wo.shape[1]

    def head_out_projection(self, head: int) -> np.ndarray:
        """Rows of ``wo`` that consume the given head's output."""
        return self.wo[head * self.d_h:(head + 1) * self.d_h]


@dataclass(frozen=True)
class InvolutionWeights:
    """Bottleneck kernel generator ``w1 @ relu(gamma * (w0 @ x) + beta)``.

    ``w0`` is (D/r) x D and ``w1`` is (K*K*G) x (D/r). The generated vector of
    length K*K*G is laid out group-major, then row-major over the window:
    entry ``g*K*K + p*K + q``. The per-channel affine (gamma, beta) stands
    in for inference-time batch normalisation.
    """

    w0: np.ndarray
    w1: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    r: int
    k: int
    groups: int = 1

    def __post_init__(self):
        w0 = as_tensor(self.w0, rank=2, name="w0")
        w1 = as_tensor(self.w1, rank=2, name="w1")
        gamma = as_tensor(self.gamma, rank=1, name="gamma")
        beta = as_tensor(self.beta, rank=1, name="beta")
        _check_window(self.k)
        if self.r < 1:
            raise ConfigurationError(f"reduction ratio must be positive, got {self.r}")
        d = w0.shape[1]
        if d % self.r:
            raise ConfigurationError(f"channel count {d} is not divisible by r={self.r}")
        if w0.shape[0] != d // self.r:
            raise InvalidShapeError(f"w0 must be {d // self.r} x {d}, got {w0.shape}")
        if w1.shape != (self.k * self.k * self.groups, d // self.r):
            raise InvalidShapeError(
                f"w1 must be {self.k * self.k * self.groups} x {d // self.r}, got {w1.shape}"
            )
        if gamma.shape != (d // self.r,) or beta.shape != (d // self.r,):
            raise InvalidShapeError("gamma and beta must have length D/r")
        group_index(d, self.groups)
        for name, val in (("w0", w0), ("w1", w1), ("gamma", gamma), ("beta", beta)):
            object.__setattr__(self, name, val)

    @property
    def channels(self) -> int:
        return self.w0.shape[1]


def conv2d(x, w: ConvWeights) -> np.ndarray:
    """Same-size, stride-1, zero-padded 2-D convolution without bias.

    ``Y[i,j,m] = sum_{p,q,c} W[p,q,c,m] * X[i-l+p, j-l+q, c]``
    """
    x = _feature_map(x)
    h, wd, d_in = x.shape
    k = w.k
    if w.w.shape[2] != d_in:
        raise InvalidShapeError(f"input depth {d_in} does not match weights {w.w.shape}")
    l = k // 2
    xp = pad_spatial(x, l)
    y = np.zeros((h, wd, w.w.shape[3]))
    for p in range(k):
        for q in range(k):
            patch = xp[p:p + h, q:q + wd]
            for c in range(d_in):
                y += patch[:, :, c, None] * w.w[p, q, c]
    return y


def attention_scores(x, w: SaWeights, k: int) -> np.ndarray:
    """Pre-softmax scores, shape H x W x M x K x K.

    ``scores[i,j,h,p,q]`` compares the query at (i, j) with the key at
    window position (p, q) for head h.
    """
    x = _feature_map(x)
    l = _check_window(k)
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
    xsp = pad_spatial(xs, l)

    scores = np.empty((h, wd, w.heads, k, k))
    for head in range(w.heads):
        query = xs @ w.wq[head]
        rel = pos.relative_keys(head) if pos.kind == "relative" else None
        for p in range(k):
            for q in range(k):
                key = xsp[p:p + h, q:q + wd] @ w.wk[head]
                s = np.sum(query * key, axis=-1)
                if rel is not None:
                    s = s + query @ rel[p, q] + key @ pos.u[head] + pos.v[head] @ rel[p, q]
                scores[:, :, head, p, q] = s
    return scores


def attention_probabilities(x, w: SaWeights, k: int) -> np.ndarray:
    """Softmax of :func:`attention_scores` over each K x K window."""
    s = attention_scores(x, w, k)
    h, wd, m = s.shape[:3]
    return softmax(s.reshape(h, wd, m, k * k)).reshape(s.shape)


def local_self_attention(x, w: SaWeights, k: int, m: int | None = None) -> np.ndarray:
    """Local K x K self-attention with M heads.

    Each head aggregates ``X W_V`` over the window with its softmax
    probabilities; for M > 1 the head outputs are concatenated and projected
    by ``wo``.
    """
    x = _feature_map(x)
    if m is not None and m != w.heads:
        raise ConfigurationError(f"weights carry {w.heads} heads, caller asked for {m}")
    probs = attention_probabilities(x, w, k)
    h, wd, _ = x.shape
    xp = pad_spatial(x, k // 2)
    heads = []
    for head in range(w.heads):
        out = np.zeros((h, wd, w.d_h))
        for p in range(k):
            for q in range(k):
                value = xp[p:p + h, q:q + wd] @ w.wv[head]
                out += probs[:, :, head, p, q, None] * value
        heads.append(out)
    if w.heads == 1:
        return heads[0]
    return np.concatenate(heads, axis=-1) @ w.wo


def channelwise_local_attention(x, wq_c, wk_c, wv, k: int) -> np.ndarray:
    """Local attention with one score map per input channel.

    Channel c attends with its own query/key projections ``wq_c[c]`` and
    ``wk_c[c]`` (each D_in x D_k); its aggregated values then feed every
    output channel through ``wv[c, :]``.
    """
    x = _feature_map(x)
    l = _check_window(k)
    wq_c = as_tensor(wq_c, rank=3, name="wq_c")
    wk_c = as_tensor(wk_c, rank=3, name="wk_c")
    wv = as_tensor(wv, rank=2, name="wv")
    h, wd, d_in = x.shape
    if wq_c.shape[0] != d_in or wk_c.shape[0] != d_in:
        raise ConfigurationError(f"need {d_in} per-channel query/key pairs")
    xp = pad_spatial(x, l)
    y = np.zeros((h, wd, wv.shape[1]))
    for c in range(d_in):
        query = x @ wq_c[c]
        s = np.empty((h, wd, k * k))
        for p in range(k):
            for q in range(k):
                s[:, :, p * k + q] = np.sum(query * (xp[p:p + h, q:q + wd] @ wk_c[c]), axis=-1)
        prob = softmax(s)
        agg = np.zeros((h, wd))
        for p in range(k):
            for q in range(k):
                agg += prob[:, :, p * k + q] * xp[p:p + h, q:q + wd, c]
        y += agg[:, :, None] * wv[c]
    return y


def involution_kernel(x, w: InvolutionWeights) -> np.ndarray:
    """Per-pixel involution kernels, shape H x W x K x K x G."""
    x = _feature_map(x)
    h, wd, d = x.shape
    if d != w.channels:
        raise InvalidShapeError(f"input depth {d} does not match involution weights ({w.channels})")
    hidden = np.maximum(w.gamma * (x @ w.w0.T) + w.beta, 0.0)
    flat = hidden @ w.w1.T
    kern = flat.reshape(h, wd, w.groups, w.k, w.k)
    return np.ascontiguousarray(kern.transpose(0, 1, 3, 4, 2))


def involution_apply(x, kern) -> np.ndarray:
    """Aggregate each channel over its window with the pixel's own kernel.

    Channel m uses kernel slice ``floor(m * G / D)``.
    """
    x = _feature_map(x)
    kern = as_tensor(kern, rank=5, name="involution kernel")
    h, wd, d = x.shape
    if kern.shape[:2] != (h, wd) or kern.shape[2] != kern.shape[3]:
        raise InvalidShapeError(f"kernel {kern.shape} does not fit input {x.shape}")
    k = kern.shape[2]
    l = _check_window(k)
    try:
        g_of = group_index(d, kern.shape[4])
    except ConfigurationError as exc:
        raise InvalidShapeError(str(exc)) from exc
    xp = pad_spatial(x, l)
    y = np.zeros_like(x)
    for p in range(k):
        for q in range(k):
            y += kern[:, :, p, q][:, :, g_of] * xp[p:p + h, q:q + wd]
    return y
