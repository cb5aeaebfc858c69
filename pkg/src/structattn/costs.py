"""Closed-form parameter, FLOP, and key-cache accounting.

Counting convention: one FLOP per multiply-accumulate, so a (m,k)x(k,n)
matmul costs m*k*n. This matches the `macs` tally of the runtime meter (the
meter's `flops` field counts adds and muls separately and runs ~2x higher).

Fractional per-level terms (r_l / 2^(l-1)) are evaluated in exact rational
arithmetic; a final count that still comes out non-integral is rounded to the
nearest integer with a warning.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

from .structured import BTTSpec, LowRankSpec, MLRSpec
from .tensor import ShapeError


@dataclass(frozen=True)
class DenseSpec:
    """A plain unstructured D x D matrix, the Table-1 baseline."""
    d: int

    def __post_init__(self):
        if self.d < 1:
            raise ValueError(f"dense dim must be >= 1, got {self.d}")

    @property
    def family(self) -> str:
        return "dense"


@dataclass(frozen=True)
class CostReport:
    score_flops: int
    projection_flops: int
    params: int
    kv_cache_elements: int
    contraction_order: str
    rank_bound: int

    def __post_init__(self):
        for name in ("score_flops", "projection_flops", "params", "kv_cache_elements", "rank_bound"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 0:
                raise ValueError(f"CostReport.{name} must be a non-negative integer, got {v!r}")


def _as_int(value: Fraction, label: str) -> int:
    if value.denominator == 1:
        return int(value)
    warnings.warn(f"{label} evaluates to the non-integral {value}; rounding to nearest")
    return round(value)


def _level_weights(ranks: Sequence[int]) -> list[tuple[int, Fraction]]:
    """[(p_l = 2^(l-1), r_l)] with exact fractions."""
    return [(2 ** l, Fraction(int(r))) for l, r in enumerate(ranks)]


# ---------------------------------------------------------------------------
# bilinear MLR: the six contraction orders
# ---------------------------------------------------------------------------

# Identifiers name the contraction shapes:
#   low-rank            X Wq Wk^T X^T with the total rank r (the dense-low-rank baseline)
#   materialize-sum     X (sum_l blockdiag(Wq Wk^T)) X^T, summed into one D x D first
#   per-level-sandwich  sum_l X (blockdiag(Wq Wk^T)) X^T
#   optimal             sum_l (X blockdiag(Wq)) (blockdiag(Wk)^T X^T)
#   per-level-chain     sum_l X (blockdiag(Wq) blockdiag(Wk)^T X^T)
#   summed-chain        X sum_l (blockdiag(Wq) blockdiag(Wk)^T X^T)
MLR_CONTRACTION_ORDERS = (
    "low-rank",
    "materialize-sum",
    "per-level-sandwich",
    "optimal",
    "per-level-chain",
    "summed-chain",
)

_MLR_ORDER_ALIASES = {
    "low_rank": "low-rank",
    "low-rank baseline": "low-rank",
    "factored": "optimal",
}


def bilinear_mlr_flops(T: int, D: int, ranks: Sequence[int], order: str = "optimal") -> int:
    """FLOPs to form the T x T bilinear-MLR score matrix under one contraction order.

    The optimal order costs 2TDr + T^2 * sum_l 2^(l-1) r_l. The materialize-sum
    and per-level-sandwich rows carry composite lower-order terms that are
    evaluated verbatim as printed (per-level-sandwich scopes its sum over both
    composite terms), without re-derivation.
    """
    order = _MLR_ORDER_ALIASES.get(order, order)
    if order not in MLR_CONTRACTION_ORDERS:
        raise ValueError(f"unknown contraction order {order!r}; want one of {MLR_CONTRACTION_ORDERS}")
    ranks = [int(r) for r in ranks]
    L = len(ranks)
    if L < 1:
        raise ValueError("need at least one level")
    T, D = int(T), int(D)
    r = sum(ranks)
    lw = _level_weights(ranks)

    if order == "low-rank":
        total = Fraction(T * T * r + 2 * T * D * r)
    elif order == "materialize-sum":  # verbatim-formula
        tail = sum((rl / p for p, rl in lw), Fraction(0))
        tail += sum(Fraction(1, 2 * p) for p, _ in lw) - Fraction(1, 2)
        total = Fraction(T * T * D + T * D * D) + D * D * tail
    elif order == "per-level-sandwich":  # verbatim-formula
        total = Fraction(T * T * L * D)
        total += sum((D * D * rl / p + Fraction(T * D * D, p) for p, rl in lw), Fraction(0))
    elif order == "optimal":
        total = Fraction(2 * T * D * r + T * T * sum(p * rl for p, rl in lw))
    elif order == "per-level-chain":
        total = Fraction(L * T * T * D + 2 * T * D * r)
    else:  # summed-chain
        total = Fraction(T * T * D + 2 * T * D * r)
    return _as_int(total, f"bilinear_mlr_flops[{order}]")


# ---------------------------------------------------------------------------
# bilinear BTT: the two contraction orders (square-root regime)
# ---------------------------------------------------------------------------

BTT_CONTRACTION_ORDERS = ("qk-features", "chained")

_BTT_ORDER_ALIASES = {"optimal": "chained", "chosen": "chained"}


def _sqrt_dim(D: int) -> int:
    root = math.isqrt(int(D))
    if root * root != D:
        raise ShapeError(f"square-root btt regime needs a perfect-square D, got {D}")
    return root


def bilinear_btt_flops(T: int, D: int, s: int, order: str = "chained") -> int:
    """FLOPs to form the bilinear-BTT score matrix with a = b = c = d = sqrt(D).

    qk-features materializes per-head features first (s T^2 D + 2 s T D^(3/2));
    the chained order keeps the right product as a chain (T^2 D + 2 s T D^(3/2))
    and is the one used everywhere else in this package.
    """
    order = _BTT_ORDER_ALIASES.get(order, order)
    if order not in BTT_CONTRACTION_ORDERS:
        raise ValueError(f"unknown contraction order {order!r}; want one of {BTT_CONTRACTION_ORDERS}")
    T, D, s = int(T), int(D), int(s)
    d_32 = D * _sqrt_dim(D)  # D^(3/2), exact
    if order == "qk-features":
        return s * T * T * D + 2 * s * T * d_32
    return T * T * D + 2 * s * T * d_32


# ---------------------------------------------------------------------------
# MLR attention (distance-dependent compute)
# ---------------------------------------------------------------------------

def _check_divisibility(T: int, ranks: Sequence[int]):
    L = len(ranks)
    if L < 1:
        raise ValueError("need at least one level")
    p_max = 2 ** (L - 1)
    if T % p_max:
        raise ShapeError(f"sequence length {T} must be divisible by 2^(L-1) = {p_max}")


def mlr_attention_score_flops(T: int, ranks: Sequence[int]) -> int:
    """Score-product FLOPs T^2 * sum_l r_l / 2^(l-1) (projections excluded).

    The standard-attention counterpart of this quantity is T^2 r.
    """
    T = int(T)
    ranks = [int(r) for r in ranks]
    _check_divisibility(T, ranks)
    total = T * T * sum((rl / p for p, rl in _level_weights(ranks)), Fraction(0))
    return _as_int(total, "mlr_attention_score_flops")


def kv_cache_size(T: int, ranks: Sequence[int]) -> int:
    """Retained key scalars per head while decoding: T * sum_l r_l / 2^(l-1).

    Values are cached in full; the savings quoted here are for keys. The
    standard-attention baseline is T * r.
    """
    T = int(T)
    ranks = [int(r) for r in ranks]
    _check_divisibility(T, ranks)
    total = T * sum((rl / p for p, rl in _level_weights(ranks)), Fraction(0))
    return _as_int(total, "kv_cache_size")


# ---------------------------------------------------------------------------
# Table-1 style family summaries (square matrices, matvec cost)
# ---------------------------------------------------------------------------

def table1_summary(spec) -> CostReport:
    """Params and rank bound for a square D x D structured matrix, with the
    matvec FLOPs in score_flops (these families all cost ~1 FLOP per param).
    """
    if isinstance(spec, DenseSpec):
        d = spec.d
        return CostReport(d * d, 0, d * d, 0, "table1-matvec", d)
    if isinstance(spec, LowRankSpec):
        if spec.m != spec.n:
            raise ShapeError(f"table1_summary needs a square matrix, got {spec.m}x{spec.n}")
        d = spec.m
        return CostReport(2 * d * spec.r, 0, 2 * d * spec.r, 0, "table1-matvec", min(spec.r, d))
    if isinstance(spec, MLRSpec):
        if spec.m != spec.n:
            raise ShapeError(f"table1_summary needs a square matrix, got {spec.m}x{spec.n}")
        d = spec.m
        params = 2 * d * sum(spec.ranks)
        bound = min(d, sum(lev.rank * lev.blocks for lev in spec.levels))
        return CostReport(params, 0, params, 0, "table1-matvec", bound)
    if isinstance(spec, BTTSpec):
        if not (spec.a == spec.b == spec.c == spec.d):
            raise ShapeError(f"table1_summary uses the square-root regime; got a,b,c,d = "
                             f"{(spec.a, spec.b, spec.c, spec.d)}")
        d = spec.m
        params = 2 * d * _sqrt_dim(d) * spec.s
        return CostReport(params, 0, params, 0, "table1-matvec", d)
    raise TypeError(f"table1_summary: unsupported spec {type(spec).__name__}")


# ---------------------------------------------------------------------------
# per-configuration attention cost reports (feeds the flops CSV)
# ---------------------------------------------------------------------------

def attention_cost_report(family: str, T: int, D: int, *, r: int | None = None,
                          ranks: Sequence[int] | None = None, s: int | None = None,
                          order: str | None = None) -> CostReport:
    """Score/projection FLOPs, params, and retained key cache for one head.

    score_flops carries the quoted formula for the family and order (the
    Table-3/4 row totals; the score-product-only number for mlr-attention);
    projection_flops is the Q/K factor application reported separately so
    product-only and whole-layer numbers can both be composed.
    """
    T, D = int(T), int(D)
    if family in ("standard", "low-rank"):
        if r is None:
            raise ValueError(f"{family} needs r")
        return CostReport(T * T * r, 2 * T * D * r, 2 * D * r, T * r, "low-rank", min(r, D))
    if family == "bilinear-mlr":
        if not ranks:
            raise ValueError("bilinear-mlr needs ranks")
        order = order or "optimal"
        spec = MLRSpec.equal_blocks(D, D, ranks)
        rtot = sum(spec.ranks)
        inner = sum(lev.rank * lev.blocks for lev in spec.levels)
        return CostReport(bilinear_mlr_flops(T, D, ranks, order), 2 * T * D * rtot,
                          2 * D * rtot, T * inner, order, min(D, inner))
    if family == "bilinear-btt":
        if s is None:
            raise ValueError("bilinear-btt needs s")
        order = order or "chained"
        root = _sqrt_dim(D)
        return CostReport(bilinear_btt_flops(T, D, s, order), 2 * s * T * D * root,
                          2 * D * root * s, T * s * D, order, D)
    if family == "mlr-attention":
        if not ranks:
            raise ValueError("mlr-attention needs ranks")
        rtot = sum(int(x) for x in ranks)
        return CostReport(mlr_attention_score_flops(T, ranks), 2 * T * D * rtot,
                          2 * D * rtot, kv_cache_size(T, ranks), "blockwise", min(rtot, D))
    if family == "dense":
        return CostReport(T * T * D, 2 * T * D * D, D * D, T * D, "dense", D)
    raise ValueError(f"unknown family {family!r}")
