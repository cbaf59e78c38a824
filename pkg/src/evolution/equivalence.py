"""Differential testing of classic operators against their Evolution forms.

A scenario (:class:`OperatorSpec`) names a family, its shapes and a seed.
All weights and the input map are drawn with :func:`prng_fill` from
consecutive sub-seeds, in this frozen order (``s`` is ``spec.seed``):

=============  =============================================================
family         sub-seeds
=============  =============================================================
conv           s: w (K,K,D_in,D_out); s+1: x
sa, msa        s: wq (M,D_in,D_k); s+1: wk; s+2: wv (M,D_in,D_h);
               s+3: wo (M*D_h,D_out); s+4: absolute P (H,W,D_in) or relative
               r_table (K,K,D_p); s+5: wk_hat (M,D_p,D_k); s+6: u (M,D_k);
               s+7: v (M,D_k); s+8: x
involution     s: w0 (D/r,D); s+1: w1 (K*K*G,D/r); s+2: gamma; s+3: beta;
               s+4: x
conv_as_msa    s: wv heads (K*K,D_in,D_h); s+1: wo (K*K*D_h,D_out); s+2: x
relpos_const   s: v (D_k); s+1: wk_hat (D_p,D_k); s+2: r_table (K,K,D_p);
               s+3: wv (D_in,D_out); s+4: x
channelwise    s: wq_c (D_in,D_in,D_k); s+1: wk_c; s+2: wv (D_in,D_out); s+3: x
=============  =============================================================

Slots a family does not use (``wo`` for a single head, positional tables
for ``pos_kind="none"``) are skipped, never reassigned.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from . import classic_ops as classic
from . import core
from .io import load_tensor
from .tensor import ConfigurationError, InvalidShapeError, as_tensor, prng_fill

__all__ = [
    "ShapeMismatchError",
    "OperatorSpec",
    "EquivalenceReport",
    "ScenarioRun",
    "compare_tensors",
    "matrix_rank",
    "build_scenario",
    "run_scenario",
    "regression_grid",
]

DEFAULT_TOLERANCE = 1e-9


class ShapeMismatchError(InvalidShapeError):
    """Two tensors that should be compared have different shapes."""


def compare_tensors(a, b, tol: float = DEFAULT_TOLERANCE) -> tuple[float, bool]:
    """Largest absolute elementwise difference and whether it is within ``tol``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"cannot compare shapes {a.shape} and {b.shape}")
    diff = float(np.max(np.abs(a - b))) if a.size else 0.0
    return diff, diff <= tol


def matrix_rank(m, tol: float = 1e-9) -> int:
    """Numerical rank by Gaussian elimination with partial pivoting.

    A pivot counts when its magnitude exceeds ``tol`` times the largest
    absolute entry of the original matrix (the first pivot partial pivoting
    could pick).
    """
    a = as_tensor(m, rank=2, name="matrix").copy()
    rows, cols = a.shape
    scale = float(np.max(np.abs(a))) if a.size else 0.0
    if scale == 0.0:
        return 0
    threshold = tol * scale
    rank = 0
    for col in range(cols):
        if rank == rows:
            break
        pivot = rank + int(np.argmax(np.abs(a[rank:, col])))
        if abs(a[pivot, col]) <= threshold:
            continue
        if pivot != rank:
            a[[rank, pivot]] = a[[pivot, rank]]
        below = a[rank + 1:, col] / a[rank, col]
        a[rank + 1:] -= np.outer(below, a[rank])
        rank += 1
    return rank


@dataclass(frozen=True)
class OperatorSpec:
    """One equivalence scenario.

    ``m`` is the head count (sa: 1, msa: > 1), ``g`` the involution group
    count, ``d_h`` the per-head value width (defaults to ``d_out // m`` for
    msa and ``d_out`` otherwise). ``fused`` selects, for msa, whether the
    output projection is folded into the kernel or applied afterwards.
    ``expected`` optionally points at a tensor file holding the expected
    operator output.
    """

    family: str
    h: int = 4
    w: int = 4
    d_in: int = 2
    d_out: int = 2
    k: int = 3
    m: int = 1
    g: int = 1
    r: int = 1
    d_k: int = 2
    d_p: int = 2
    d_h: int | None = None
    pos_kind: str = "none"
    fused: bool = True
    seed: int = 0
    tolerance: float = DEFAULT_TOLERANCE
    expected: str | None = None

    @property
    def head_width(self) -> int:
        if self.d_h is not None:
            return self.d_h
        if self.family == "msa":
            return max(1, self.d_out // self.m)
        if self.family == "conv_as_msa":
            return 1
        return self.d_out

    def validate(self) -> None:
        if self.family not in core.FAMILIES:
            raise ConfigurationError(f"unknown family {self.family!r}")
        for name in ("h", "w", "d_in", "d_out", "m", "g", "r", "d_k", "d_p"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.k < 1 or self.k % 2 == 0:
            raise ConfigurationError(f"K must be odd and positive, got {self.k}")
        if self.head_width < 1:
            raise ConfigurationError("d_h must be positive")
        if not self.tolerance >= 0:
            raise ConfigurationError("tolerance must be non-negative")
        if self.pos_kind not in classic.POS_KINDS:
            raise ConfigurationError(f"unknown pos_kind {self.pos_kind!r}")
        if self.pos_kind != "none" and self.family not in ("sa", "msa"):
            raise ConfigurationError(f"positional encoding does not apply to {self.family}")
        if self.family == "sa" and self.m != 1:
            raise ConfigurationError("family sa is single-head; use msa for m > 1")
        if self.family == "msa" and self.m < 2:
            raise ConfigurationError("family msa needs m >= 2")
        if self.family == "involution":
            if self.d_in != self.d_out:
                raise ConfigurationError("involution keeps the channel count (d_in == d_out)")
            if self.d_in % self.r:
                raise ConfigurationError(f"d_in={self.d_in} not divisible by r={self.r}")
            if self.d_in % self.g:
                raise ConfigurationError(f"d_in={self.d_in} not divisible by g={self.g}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "OperatorSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown scenario fields: {sorted(unknown)}")
        if "family" not in data:
            raise ConfigurationError("scenario needs a family")
        return cls(**data)

    def describe(self) -> str:
        parts = [f"H={self.h}", f"W={self.w}", f"Din={self.d_in}", f"Dout={self.d_out}", f"K={self.k}"]
        if self.family in ("sa", "msa"):
            parts.append(f"M={self.m}")
            parts.append(f"pos={self.pos_kind}")
        if self.family == "msa":
            parts.append("fused" if self.fused else "unfused")
        if self.family == "involution":
            parts.append(f"G={self.g}")
        parts.append(f"seed={self.seed}")
        return " ".join(parts)


@dataclass
class EquivalenceReport:
    spec: OperatorSpec
    max_abs_diff: float | None
    tolerance: float
    passed: bool
    classic_nanos: int = 0
    evolution_nanos: int = 0
    kernel_stats: dict[str, Any] = field(default_factory=dict)
    error: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "spec": self.spec.to_dict(),
            "max_abs_diff": self.max_abs_diff,
            "tolerance": self.tolerance,
            "pass": self.passed,
            "classic_nanos": self.classic_nanos,
            "evolution_nanos": self.evolution_nanos,
            "kernel_stats": self.kernel_stats,
            "error": self.error,
        }


@dataclass
class ScenarioRun:
    """Inputs and both outputs of one scenario, before comparison."""

    x: np.ndarray
    kernel: core.EvolutionKernel
    classic: np.ndarray
    evolution: np.ndarray
    classic_nanos: int
    evolution_nanos: int
    probabilities: np.ndarray | None = None


def _sa_weights(spec: OperatorSpec) -> classic.SaWeights:
    s, m, d_h = spec.seed, spec.m, spec.head_width
    wq = prng_fill((m, spec.d_in, spec.d_k), s)
    wk = prng_fill((m, spec.d_in, spec.d_k), s + 1)
    wv = prng_fill((m, spec.d_in, d_h), s + 2)
    wo = prng_fill((m * d_h, spec.d_out), s + 3) if m > 1 else None
    if spec.pos_kind == "absolute":
        pos = classic.PosEncoding("absolute", p=prng_fill((spec.h, spec.w, spec.d_in), s + 4))
    elif spec.pos_kind == "relative":
        pos = classic.PosEncoding(
            "relative",
            r_table=prng_fill((spec.k, spec.k, spec.d_p), s + 4),
            wk_hat=prng_fill((m, spec.d_p, spec.d_k), s + 5),
            u=prng_fill((m, spec.d_k), s + 6),
            v=prng_fill((m, spec.d_k), s + 7),
        )
    else:
        pos = classic.PosEncoding()
    return classic.SaWeights(wq=wq, wk=wk, wv=wv, wo=wo, pos=pos)


def _timed(fn, *args):
    start = time.perf_counter_ns()
    out = fn(*args)
    return out, time.perf_counter_ns() - start


def build_scenario(spec: OperatorSpec) -> ScenarioRun:
    """Derive all tensors from the seed and run both paths."""
    spec.validate()
    s, k = spec.seed, spec.k
    fam = spec.family
    probs = None

    if fam == "conv":
        w = classic.ConvWeights(prng_fill((k, k, spec.d_in, spec.d_out), s))
        x = prng_fill((spec.h, spec.w, spec.d_in), s + 1)
        ref, t_ref = _timed(classic.conv2d, x, w)
        kern = core.ev_fn_conv(w, spec.h, spec.w)
        out, t_ev = _timed(core.ev_apply, x, kern)

    elif fam in ("sa", "msa"):
        w = _sa_weights(spec)
        x = prng_fill((spec.h, spec.w, spec.d_in), s + 8)
        ref, t_ref = _timed(classic.local_self_attention, x, w, k)
        probs = classic.attention_probabilities(x, w, k)
        fuse = fam == "msa" and spec.fused
        kern = core.ev_fn_sa(x, w, k, spec.m, fuse)
        out, t_ev = _timed(core.ev_apply, x, kern)
        if fam == "msa" and not spec.fused:
            out = out @ w.wo

    elif fam == "involution":
        d = spec.d_in
        w = classic.InvolutionWeights(
            w0=prng_fill((d // spec.r, d), s),
            w1=prng_fill((k * k * spec.g, d // spec.r), s + 1),
            gamma=prng_fill((d // spec.r,), s + 2),
            beta=prng_fill((d // spec.r,), s + 3),
            r=spec.r,
            k=k,
            groups=spec.g,
        )
        x = prng_fill((spec.h, spec.w, d), s + 4)
        ref, t_ref = _timed(lambda: classic.involution_apply(x, classic.involution_kernel(x, w)))
        kern = core.ev_fn_involution(x, w, k)
        out, t_ev = _timed(core.ev_apply, x, kern)

    elif fam == "conv_as_msa":
        heads, d_h = k * k, spec.head_width
        wv = prng_fill((heads, spec.d_in, d_h), s)
        wo = prng_fill((heads * d_h, spec.d_out), s + 1)
        x = prng_fill((spec.h, spec.w, spec.d_in), s + 2)
        conv_w = np.stack([wv[z] @ wo[z * d_h:(z + 1) * d_h] for z in range(heads)])
        conv_w = classic.ConvWeights(conv_w.reshape(k, k, spec.d_in, spec.d_out))
        ref, t_ref = _timed(classic.conv2d, x, conv_w)
        kern = core.ev_fn_conv_as_msa(wv, wo, spec.h, spec.w)
        out, t_ev = _timed(core.ev_apply, x, kern)

    elif fam == "relpos_const":
        v = prng_fill((spec.d_k,), s)
        wk_hat = prng_fill((spec.d_p, spec.d_k), s + 1)
        r_table = prng_fill((k, k, spec.d_p), s + 2)
        wv = prng_fill((spec.d_in, spec.d_out), s + 3)
        x = prng_fill((spec.h, spec.w, spec.d_in), s + 4)
        sc = core.relpos_scores(v, wk_hat, r_table)
        e = np.exp(sc - sc.max())
        prob = e / e.sum()
        conv_w = classic.ConvWeights(prob[:, :, None, None] * wv)
        ref, t_ref = _timed(classic.conv2d, x, conv_w)
        kern = core.ev_fn_relpos_constant(v, wk_hat, r_table, wv, spec.h, spec.w)
        out, t_ev = _timed(core.ev_apply, x, kern)

    elif fam == "channelwise":
        wq_c = prng_fill((spec.d_in, spec.d_in, spec.d_k), s)
        wk_c = prng_fill((spec.d_in, spec.d_in, spec.d_k), s + 1)
        wv = prng_fill((spec.d_in, spec.d_out), s + 2)
        x = prng_fill((spec.h, spec.w, spec.d_in), s + 3)
        ref, t_ref = _timed(classic.channelwise_local_attention, x, wq_c, wk_c, wv, k)
        kern = core.ev_fn_channelwise_sa(x, wq_c, wk_c, wv, k)
        out, t_ev = _timed(core.ev_apply, x, kern)

    else:  # pragma: no cover - validate() rejects unknown families
        raise ConfigurationError(f"unknown family {fam!r}")

    return ScenarioRun(x, kern, ref, out, t_ref, t_ev, probs)


def kernel_stats(run: ScenarioRun, spec: OperatorSpec) -> dict[str, Any]:
    stats: dict[str, Any] = {
        "spatially_constant": run.kernel.is_spatially_constant(),
        "max_slice_rank": None,
    }
    if spec.family == "conv_as_msa":
        w = run.kernel.w
        stats["max_slice_rank"] = max(
            matrix_rank(w[0, 0, p, q]) for p in range(spec.k) for q in range(spec.k)
        )
    if run.probabilities is not None:
        sums = run.probabilities.sum(axis=(-2, -1))
        stats["max_prob_sum_error"] = float(np.max(np.abs(sums - 1.0)))
    return stats


def run_scenario(spec: OperatorSpec, base_dir: Path | None = None) -> EquivalenceReport:
    """Run one scenario; configuration problems are reported, not raised.

    When ``spec.expected`` names a tensor file (relative paths resolve
    against ``base_dir``), the Evolution output is also compared with it and
    ``max_abs_diff`` is the larger of the two discrepancies.
    """
    try:
        run = build_scenario(spec)
        diff, _ = compare_tensors(run.classic, run.evolution, spec.tolerance)
        stats = kernel_stats(run, spec)
        if spec.expected is not None:
            path = Path(spec.expected)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            fixture_diff, _ = compare_tensors(load_tensor(path), run.evolution, spec.tolerance)
            stats["expected_max_abs_diff"] = fixture_diff
            diff = max(diff, fixture_diff)
    except (ValueError, OSError) as exc:
        return EquivalenceReport(spec, None, spec.tolerance, False, error=f"{type(exc).__name__}: {exc}")
    return EquivalenceReport(
        spec,
        diff,
        spec.tolerance,
        diff <= spec.tolerance,
        classic_nanos=run.classic_nanos,
        evolution_nanos=run.evolution_nanos,
        kernel_stats=stats,
    )


def regression_grid(base_seed: int = 1000) -> list[OperatorSpec]:
    """Desk-scale grid (H, W <= 8; D <= 8; K in {1, 3, 5}; M in {1, 2, 4})."""
    specs: list[OperatorSpec] = []
    seed = base_seed

    def add(**kw):
        nonlocal seed
        specs.append(OperatorSpec(seed=seed, **kw))
        seed += 10

    sizes = [(4, 4), (5, 7), (8, 8), (1, 1), (3, 6)]
    depths = [(1, 1), (2, 3), (4, 4), (8, 5), (3, 8)]

    conv_extra = [((8, 3), (6, 2)), ((2, 8), (5, 7)), ((7, 7), (8, 8))]
    for k in (1, 3, 5):
        for (h, w), (d_in, d_out) in zip(sizes, depths):
            add(family="conv", h=h, w=w, d_in=d_in, d_out=d_out, k=k)
        for (h, w), (d_in, d_out) in conv_extra:
            add(family="conv", h=h, w=w, d_in=d_in, d_out=d_out, k=k)
        for (h, w), (d_in, d_out) in zip(sizes, depths):
            add(family="channelwise", h=h, w=w, d_in=d_in, d_out=d_out, k=k, d_k=3)
            add(family="relpos_const", h=h, w=w, d_in=d_in, d_out=d_out, k=k, d_k=3, d_p=4)
        for pos in classic.POS_KINDS:
            for (h, w), (d_in, d_out) in zip(sizes[:4], depths[1:]):
                add(family="sa", h=h, w=w, d_in=d_in, d_out=d_out, k=k, d_k=3, d_p=3, pos_kind=pos)
            for m in (2, 4):
                for fused in (True, False):
                    add(family="msa", h=5, w=6, d_in=4, d_out=8, k=k, m=m, d_k=2, d_p=3,
                        pos_kind=pos, fused=fused)
        for g in (1, 2):
            for (h, w), d, r in (((4, 4), 4, 2), ((6, 5), 8, 4), ((8, 8), 2, 1)):
                add(family="involution", h=h, w=w, d_in=d, d_out=d, k=k, g=g, r=r)
    for k in (1, 3, 5):
        for d_in, d_out, d_h in ((4, 4, 1), (6, 5, 2), (8, 8, 3), (2, 3, 4)):
            add(family="conv_as_msa", h=5, w=5, d_in=d_in, d_out=d_out, k=k, d_h=d_h)
    return specs
