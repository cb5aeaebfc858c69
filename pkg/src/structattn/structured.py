"""Structured matrix families behind the attention score functions.

Four families over R^(m x n):

  low_rank   L R^T
  mlr        sum_l blockdiag_k( L_{l,k} R_{l,k}^T ), level l split into p_l
             diagonal blocks (2^(l-1) in the equal-block construction), so
             coarse levels are wide and cheap, fine levels narrow and local.
  btt        P_L blockdiag(L_1..L_b) P_R blockdiag(R_1^T..R_c^T) with
             L_k' in R^(a x cs), R_k in R^(d x bs), m = a*b, n = c*d, and
             fixed reshape-transpose permutations P_L, P_R.
  mlbtc      sum_l alpha_l P_L blockdiag_k'(L_{l,k'}) P_R blockdiag_k(R_{l,k}^T),
             the common generalization; each level needs
             left_blocks*left_rank == right_blocks*right_rank so the shared
             P_R typechecks. mlr is the identity-permutation case, btt the
             single-level case.

`materialize` evaluates the defining formula densely with plain numpy and is
the oracle; `apply`/`bilinear` run the factored contractions through the
tensor core (metered, differentiable) and never materialize.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    apply_permutation,
    concat,
    matmul_batched,
)


def parse_rank_allocation(text: str) -> tuple[int, ...]:
    """Parse a 'r1|r2|...|rL' per-level rank string, e.g. '32|8|6|4|4|4|4|2'."""
    try:
        ranks = tuple(int(p) for p in str(text).split("|"))
    except ValueError:
        raise ValueError(f"bad rank allocation {text!r}; want ints joined by '|'") from None
    if not ranks or any(r < 1 for r in ranks):
        raise ValueError(f"bad rank allocation {text!r}; ranks must be >= 1")
    return ranks


def format_rank_allocation(ranks: Sequence[int]) -> str:
    return "|".join(str(r) for r in ranks)


# ---------------------------------------------------------------------------
# permutations
# ---------------------------------------------------------------------------

class PermutationMap:
    """Index map pi stored forward: applying it sends slot i to slot pi[i].

    The identity map is size-agnostic, which is what lets one fixed pair of
    maps serve every level of an mlbtc whose levels have different block
    counts.
    """

    __slots__ = ("indices",)

    def __init__(self, indices=None):
        if indices is None:
            self.indices = None
        else:
            pi = np.asarray(indices, dtype=np.int64)
            if pi.ndim != 1 or not np.array_equal(np.sort(pi), np.arange(pi.size)):
                raise ValueError("permutation indices must be a bijection on 0..N-1")
            pi.flags.writeable = False
            self.indices = pi

    @classmethod
    def identity(cls) -> "PermutationMap":
        return cls(None)

    @property
    def is_identity(self) -> bool:
        return self.indices is None

    @property
    def size(self) -> int | None:
        return None if self.indices is None else int(self.indices.size)

    def apply(self, v, axis: int = 0):
        """out[pi[i]] = v[i] along the given axis; Tensor in, Tensor out."""
        if self.indices is None:
            return v
        if isinstance(v, Tensor):
            return apply_permutation(v, self.indices, axis=axis)
        v = np.asarray(v)
        if v.shape[axis] != self.indices.size:
            raise ShapeError(f"permutation of size {self.indices.size} applied along axis {axis} of {v.shape}")
        return np.take(v, np.argsort(self.indices), axis=axis)

    def inverse(self) -> "PermutationMap":
        if self.indices is None:
            return self
        return PermutationMap(np.argsort(self.indices))

    def matrix(self, size: int | None = None) -> np.ndarray:
        """Dense 0/1 matrix P with P v = self.apply(v)."""
        n = self.size if self.size is not None else size
        if n is None:
            raise ValueError("identity permutation needs an explicit size to materialize")
        p = np.zeros((n, n))
        if self.indices is None:
            np.fill_diagonal(p, 1.0)
        else:
            p[self.indices, np.arange(n)] = 1.0
        return p

    def __eq__(self, other):
        if not isinstance(other, PermutationMap):
            return NotImplemented
        if self.indices is None or other.indices is None:
            return self.indices is None and other.indices is None
        return np.array_equal(self.indices, other.indices)

    def __repr__(self):
        return "PermutationMap(identity)" if self.is_identity else f"PermutationMap(size={self.size})"


def perm_reshape_transpose(outer: int, inner: int, trailing: int = 1) -> PermutationMap:
    """The map realized by reshape(outer, inner, trailing) -> swap the first
    two axes -> flatten. Input slot (i, j, k) lands at output slot (j, i, k).
    """
    if min(outer, inner, trailing) < 1:
        raise ValueError(f"dims must be >= 1, got ({outer}, {inner}, {trailing})")
    i, j, k = np.indices((outer, inner, trailing))
    pi = (j * outer * trailing + i * trailing + k).reshape(-1)
    return PermutationMap(pi)


# ---------------------------------------------------------------------------
# family specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LowRankSpec:
    m: int
    n: int
    r: int

    def __post_init__(self):
        if min(self.m, self.n, self.r) < 1:
            raise ValueError(f"low_rank dims must be >= 1, got m={self.m} n={self.n} r={self.r}")

    @property
    def family(self) -> str:
        return "low_rank"


@dataclass(frozen=True)
class MLRLevelSpec:
    rank: int
    row_sizes: tuple[int, ...]
    col_sizes: tuple[int, ...]

    @property
    def blocks(self) -> int:
        return len(self.row_sizes)


@dataclass(frozen=True)
class MLRSpec:
    m: int
    n: int
    levels: tuple[MLRLevelSpec, ...]

    def __post_init__(self):
        if not self.levels:
            raise ValueError("mlr needs at least one level")
        for l, lev in enumerate(self.levels, start=1):
            if lev.rank < 1:
                raise ValueError(f"mlr level {l}: rank must be >= 1, got {lev.rank}")
            if len(lev.row_sizes) != len(lev.col_sizes):
                raise ShapeError(f"mlr level {l}: {len(lev.row_sizes)} row blocks vs {len(lev.col_sizes)} col blocks")
            if any(s < 1 for s in lev.row_sizes + lev.col_sizes):
                raise ShapeError(f"mlr level {l}: block sizes must be >= 1")
            if sum(lev.row_sizes) != self.m:
                raise ShapeError(f"mlr level {l}: row blocks sum to {sum(lev.row_sizes)}, expected m={self.m}")
            if sum(lev.col_sizes) != self.n:
                raise ShapeError(f"mlr level {l}: col blocks sum to {sum(lev.col_sizes)}, expected n={self.n}")

    @property
    def family(self) -> str:
        return "mlr"

    @property
    def ranks(self) -> tuple[int, ...]:
        return tuple(lev.rank for lev in self.levels)

    @classmethod
    def equal_blocks(cls, m: int, n: int, ranks: Sequence[int]) -> "MLRSpec":
        """Level l gets p_l = 2^(l-1) equal diagonal blocks."""
        levels = []
        for l, r in enumerate(ranks, start=1):
            p = 2 ** (l - 1)
            if m % p or n % p:
                raise ShapeError(f"mlr level {l}: 2^(l-1)={p} must divide m={m} and n={n}")
            levels.append(MLRLevelSpec(int(r), (m // p,) * p, (n // p,) * p))
        return cls(m, n, tuple(levels))


@dataclass(frozen=True)
class BTTSpec:
    a: int
    b: int
    c: int
    d: int
    s: int = 1

    def __post_init__(self):
        if min(self.a, self.b, self.c, self.d, self.s) < 1:
            raise ValueError(f"btt dims must be >= 1, got {self}")

    @property
    def family(self) -> str:
        return "btt"

    @property
    def m(self) -> int:
        return self.a * self.b

    @property
    def n(self) -> int:
        return self.c * self.d

    @property
    def perm_left(self) -> PermutationMap:
        # rows: (b, a) -> (a, b)
        return perm_reshape_transpose(self.b, self.a, 1)

    @property
    def perm_right(self) -> PermutationMap:
        # inner features: (c, b, s) -> (b, c, s)
        return perm_reshape_transpose(self.c, self.b, self.s)

    @classmethod
    def square_root(cls, dim: int, s: int = 1) -> "BTTSpec":
        """a = b = c = d = sqrt(dim), the regime the cost model quotes."""
        root = int(round(dim ** 0.5))
        if root * root != dim:
            raise ShapeError(f"square-root btt needs a perfect-square dim, got {dim}")
        return cls(root, root, root, root, s)


@dataclass(frozen=True)
class MLBTCLevelSpec:
    alpha: float
    left_rank: int
    right_rank: int
    left_row_sizes: tuple[int, ...]
    right_col_sizes: tuple[int, ...]

    @property
    def left_blocks(self) -> int:
        return len(self.left_row_sizes)

    @property
    def right_blocks(self) -> int:
        return len(self.right_col_sizes)


@dataclass(frozen=True)
class MLBTCSpec:
    m: int
    n: int
    levels: tuple[MLBTCLevelSpec, ...]
    perm_left: PermutationMap
    perm_right: PermutationMap

    def __post_init__(self):
        if not self.levels:
            raise ValueError("mlbtc needs at least one level")
        for l, lev in enumerate(self.levels, start=1):
            if min(lev.left_rank, lev.right_rank) < 1:
                raise ValueError(f"mlbtc level {l}: ranks must be >= 1")
            if any(s < 1 for s in lev.left_row_sizes + lev.right_col_sizes):
                raise ShapeError(f"mlbtc level {l}: block sizes must be >= 1")
            if sum(lev.left_row_sizes) != self.m:
                raise ShapeError(f"mlbtc level {l}: left row blocks sum to {sum(lev.left_row_sizes)}, expected m={self.m}")
            if sum(lev.right_col_sizes) != self.n:
                raise ShapeError(f"mlbtc level {l}: right col blocks sum to {sum(lev.right_col_sizes)}, expected n={self.n}")
            if lev.left_blocks * lev.left_rank != lev.right_blocks * lev.right_rank:
                raise ShapeError(
                    f"mlbtc level {l}: left_blocks*left_rank = {lev.left_blocks * lev.left_rank} "
                    f"must equal right_blocks*right_rank = {lev.right_blocks * lev.right_rank}")
        if not self.perm_left.is_identity and self.perm_left.size != self.m:
            raise ShapeError(f"perm_left has size {self.perm_left.size}, expected m={self.m}")
        if not self.perm_right.is_identity:
            # one fixed P_R must typecheck against every level that contributes
            for l, lev in enumerate(self.levels, start=1):
                if lev.alpha != 0.0 and lev.right_blocks * lev.right_rank != self.perm_right.size:
                    raise ShapeError(
                        f"mlbtc level {l}: inner size {lev.right_blocks * lev.right_rank} "
                        f"does not match shared perm_right size {self.perm_right.size}")

    @property
    def family(self) -> str:
        return "mlbtc"

    @classmethod
    def from_mlr(cls, spec: MLRSpec) -> "MLBTCSpec":
        """mlr as mlbtc: alpha_l = 1, identity permutations, symmetric ranks."""
        levels = tuple(
            MLBTCLevelSpec(1.0, lev.rank, lev.rank, lev.row_sizes, lev.col_sizes)
            for lev in spec.levels)
        return cls(spec.m, spec.n, levels, PermutationMap.identity(), PermutationMap.identity())

    @classmethod
    def from_btt(cls, spec: BTTSpec) -> "MLBTCSpec":
        """btt as a single-level mlbtc with its reshape-transpose permutations."""
        lev = MLBTCLevelSpec(1.0, spec.c * spec.s, spec.b * spec.s,
                             (spec.a,) * spec.b, (spec.d,) * spec.c)
        return cls(spec.m, spec.n, (lev,), spec.perm_left, spec.perm_right)


Spec = LowRankSpec | MLRSpec | BTTSpec | MLBTCSpec


# ---------------------------------------------------------------------------
# factors
# ---------------------------------------------------------------------------

@dataclass
class LowRankFactors:
    left: Tensor
    right: Tensor


@dataclass
class MLRFactors:
    left: list  # [level][block] Tensor (m_{l,k}, r_l)
    right: list  # [level][block] Tensor (n_{l,k}, r_l)


@dataclass
class BTTFactors:
    left: list  # b tensors (a, c*s)
    right: list  # c tensors (d, b*s)


@dataclass
class MLBTCFactors:
    left: list  # [level][block] Tensor (m_{l,k'}, r'_l)
    right: list  # [level][block] Tensor (n_{l,k}, r_l)


def init_factors(spec: Spec, rng: np.random.Generator, dtype=np.float64, requires_grad: bool = False):
    """i.i.d. normal factors with variance 1/fan-in of each factor's contraction.

    Right factors contract the input (fan-in = their block's column count);
    left factors contract the rank channel (fan-in = the level's rank).
    Draw order is fixed (levels outer, left blocks then right blocks) so equal
    seeds give equal matrices across reductions between families.
    """
    def draw(shape, fan_in):
        arr = rng.standard_normal(shape) / np.sqrt(fan_in)
        return Tensor(arr.astype(dtype), requires_grad=requires_grad)

    if isinstance(spec, LowRankSpec):
        return LowRankFactors(left=draw((spec.m, spec.r), spec.r),
                              right=draw((spec.n, spec.r), spec.n))
    if isinstance(spec, MLRSpec):
        left, right = [], []
        for lev in spec.levels:
            left.append([draw((mk, lev.rank), lev.rank) for mk in lev.row_sizes])
            right.append([draw((nk, lev.rank), nk) for nk in lev.col_sizes])
        return MLRFactors(left, right)
    if isinstance(spec, BTTSpec):
        cs, bs = spec.c * spec.s, spec.b * spec.s
        return BTTFactors(left=[draw((spec.a, cs), cs) for _ in range(spec.b)],
                          right=[draw((spec.d, bs), spec.d) for _ in range(spec.c)])
    if isinstance(spec, MLBTCSpec):
        left, right = [], []
        for lev in spec.levels:
            left.append([draw((mk, lev.left_rank), lev.left_rank) for mk in lev.left_row_sizes])
            right.append([draw((nk, lev.right_rank), nk) for nk in lev.right_col_sizes])
        return MLBTCFactors(left, right)
    raise TypeError(f"unknown spec type {type(spec).__name__}")


def factor_tensors(factors) -> list[Tensor]:
    """Canonical flat order: levels outer, left blocks then right blocks."""
    if isinstance(factors, LowRankFactors):
        return [factors.left, factors.right]
    if isinstance(factors, BTTFactors):
        return list(factors.left) + list(factors.right)
    if isinstance(factors, (MLRFactors, MLBTCFactors)):
        out = []
        for lev_left, lev_right in zip(factors.left, factors.right):
            out.extend(lev_left)
            out.extend(lev_right)
        return out
    raise TypeError(f"unknown factors type {type(factors).__name__}")


def factors_from_arrays(spec: Spec, arrays: Sequence[np.ndarray], requires_grad: bool = False):
    """Inverse of factor_tensors: rebuild (and shape-check) from the flat list."""
    arrays = list(arrays)
    expect = _factor_shapes(spec)
    if len(arrays) != len(expect):
        raise ShapeError(f"{spec.family}: expected {len(expect)} factor tensors, got {len(arrays)}")
    ts = []
    for i, (arr, shape) in enumerate(zip(arrays, expect)):
        if tuple(arr.shape) != shape:
            raise ShapeError(f"{spec.family}: factor {i} has shape {tuple(arr.shape)}, expected {shape}")
        ts.append(arr if isinstance(arr, Tensor) else Tensor(arr, requires_grad=requires_grad))
    if isinstance(spec, LowRankSpec):
        return LowRankFactors(ts[0], ts[1])
    if isinstance(spec, BTTSpec):
        return BTTFactors(ts[:spec.b], ts[spec.b:])
    left, right, i = [], [], 0
    for lev in spec.levels:
        nl = lev.blocks if isinstance(spec, MLRSpec) else lev.left_blocks
        nr = lev.blocks if isinstance(spec, MLRSpec) else lev.right_blocks
        left.append(ts[i:i + nl])
        i += nl
        right.append(ts[i:i + nr])
        i += nr
    return MLRFactors(left, right) if isinstance(spec, MLRSpec) else MLBTCFactors(left, right)


def _factor_shapes(spec: Spec) -> list[tuple[int, int]]:
    if isinstance(spec, LowRankSpec):
        return [(spec.m, spec.r), (spec.n, spec.r)]
    if isinstance(spec, MLRSpec):
        shapes = []
        for lev in spec.levels:
            shapes += [(mk, lev.rank) for mk in lev.row_sizes]
            shapes += [(nk, lev.rank) for nk in lev.col_sizes]
        return shapes
    if isinstance(spec, BTTSpec):
        return [(spec.a, spec.c * spec.s)] * spec.b + [(spec.d, spec.b * spec.s)] * spec.c
    if isinstance(spec, MLBTCSpec):
        shapes = []
        for lev in spec.levels:
            shapes += [(mk, lev.left_rank) for mk in lev.left_row_sizes]
            shapes += [(nk, lev.right_rank) for nk in lev.right_col_sizes]
        return shapes
    raise TypeError(f"unknown spec type {type(spec).__name__}")


def validate_factors(spec: Spec, factors):
    expect = _factor_shapes(spec)
    got = factor_tensors(factors)
    if len(got) != len(expect):
        raise ShapeError(f"{spec.family}: expected {len(expect)} factor tensors, got {len(got)}")
    for i, (t, shape) in enumerate(zip(got, expect)):
        if t.shape != shape:
            raise ShapeError(f"{spec.family}: factor {i} has shape {t.shape}, expected {shape}")


# ---------------------------------------------------------------------------
# materialize: the dense oracle (plain numpy, straight from the definitions)
# ---------------------------------------------------------------------------

def _block_diag(blocks: list[np.ndarray]) -> np.ndarray:
    rows = sum(b.shape[0] for b in blocks)
    cols = sum(b.shape[1] for b in blocks)
    out = np.zeros((rows, cols))
    i = j = 0
    for b in blocks:
        out[i:i + b.shape[0], j:j + b.shape[1]] = b
        i += b.shape[0]
        j += b.shape[1]
    return out


def materialize(spec: Spec, factors) -> np.ndarray:
    validate_factors(spec, factors)
    if isinstance(spec, LowRankSpec):
        return factors.left.data @ factors.right.data.T
    if isinstance(spec, MLRSpec):
        out = np.zeros((spec.m, spec.n))
        for lev_left, lev_right in zip(factors.left, factors.right):
            out += _block_diag([L.data @ R.data.T for L, R in zip(lev_left, lev_right)])
        return out
    if isinstance(spec, BTTSpec):
        bd_left = _block_diag([L.data for L in factors.left])
        bd_right_t = _block_diag([R.data.T for R in factors.right])
        return (spec.perm_left.matrix() @ bd_left @ spec.perm_right.matrix() @ bd_right_t)
    if isinstance(spec, MLBTCSpec):
        out = np.zeros((spec.m, spec.n))
        pl = spec.perm_left.matrix(spec.m)
        for lev, lev_left, lev_right in zip(spec.levels, factors.left, factors.right):
            bd_left = _block_diag([L.data for L in lev_left])
            bd_right_t = _block_diag([R.data.T for R in lev_right])
            pr = spec.perm_right.matrix(lev.right_blocks * lev.right_rank)
            out += lev.alpha * (pl @ bd_left @ pr @ bd_right_t)
        return out
    raise TypeError(f"unknown spec type {type(spec).__name__}")


# ---------------------------------------------------------------------------
# efficient paths (never materialize)
# ---------------------------------------------------------------------------

def _as_columns(x) -> tuple[Tensor, bool]:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if t.ndim == 1:
        return t.reshape(t.shape[0], 1), True
    if t.ndim == 2:
        return t, False
    raise ShapeError(f"apply expects a vector or a (n, q) column stack, got {t.shape}")


def _row_splits(sizes: Sequence[int]) -> list[tuple[int, int]]:
    offs = np.cumsum([0] + list(sizes))
    return [(int(offs[i]), int(offs[i + 1])) for i in range(len(sizes))]


def apply(spec: Spec, factors, x) -> Tensor:
    """M x through the factored contraction. x: (n,) or (n, q)."""
    validate_factors(spec, factors)
    xt, was_vector = _as_columns(x)
    if xt.shape[0] != spec.n:
        raise ShapeError(f"apply: x has {xt.shape[0]} rows, spec expects n={spec.n}")

    if isinstance(spec, LowRankSpec):
        out = matmul_batched(factors.left, matmul_batched(factors.right.mT, xt))
    elif isinstance(spec, MLRSpec):
        out = None
        for lev, lev_left, lev_right in zip(spec.levels, factors.left, factors.right):
            parts = []
            for (j0, j1), L, R in zip(_row_splits(lev.col_sizes), lev_left, lev_right):
                parts.append(matmul_batched(L, matmul_batched(R.mT, xt[j0:j1, :])))
            level_out = concat(parts, axis=0)
            out = level_out if out is None else out + level_out
    elif isinstance(spec, BTTSpec):
        out = _apply_mlbtc_level(xt, factors.right, factors.left,
                                 (spec.d,) * spec.c, spec.c * spec.s,
                                 spec.perm_right, spec.perm_left)
    elif isinstance(spec, MLBTCSpec):
        out = None
        for lev, lev_left, lev_right in zip(spec.levels, factors.left, factors.right):
            y = _apply_mlbtc_level(xt, lev_right, lev_left, lev.right_col_sizes,
                                   lev.left_rank, spec.perm_right, spec.perm_left)
            y = y * float(lev.alpha)
            out = y if out is None else out + y
    else:
        raise TypeError(f"unknown spec type {type(spec).__name__}")

    return out.reshape(out.shape[0]) if was_vector else out


def _apply_mlbtc_level(xt: Tensor, right_blocks, left_blocks, col_sizes,
                       left_rank: int, perm_right: PermutationMap,
                       perm_left: PermutationMap) -> Tensor:
    # u = blockdiag(R^T) x, chunked by the right blocks
    parts = [matmul_batched(R.mT, xt[j0:j1, :])
             for (j0, j1), R in zip(_row_splits(col_sizes), right_blocks)]
    u = concat(parts, axis=0)
    v = perm_right.apply(u, axis=0)
    # w = blockdiag(L) v, the permuted inner vector chunked by left_rank
    parts = [matmul_batched(L, v[k * left_rank:(k + 1) * left_rank, :])
             for k, L in enumerate(left_blocks)]
    w = concat(parts, axis=0)
    return perm_left.apply(w, axis=0)


def bilinear(spec: Spec, factors, x, y) -> Tensor:
    """x^T M y without materializing M. x: (m,) or (m, q1); y: (n,) or (n, q2)."""
    xt, x_vec = _as_columns(x)
    if xt.shape[0] != spec.m:
        raise ShapeError(f"bilinear: x has {xt.shape[0]} rows, spec expects m={spec.m}")
    my = apply(spec, factors, y)
    if my.ndim == 1:
        my = my.reshape(my.shape[0], 1)
        y_vec = True
    else:
        y_vec = False
    out = matmul_batched(xt.mT, my)
    if x_vec and y_vec:
        return out.reshape(())
    return out


# ---------------------------------------------------------------------------
# closed-form counts
# ---------------------------------------------------------------------------

def param_count(spec: Spec) -> int:
    if isinstance(spec, LowRankSpec):
        return spec.r * (spec.m + spec.n)
    if isinstance(spec, MLRSpec):
        return sum(lev.rank * (spec.m + spec.n) for lev in spec.levels)
    if isinstance(spec, BTTSpec):
        return spec.m * spec.c * spec.s + spec.n * spec.b * spec.s
    if isinstance(spec, MLBTCSpec):
        return sum(lev.left_rank * spec.m + lev.right_rank * spec.n for lev in spec.levels)
    raise TypeError(f"unknown spec type {type(spec).__name__}")


def rank_upper_bound(spec: Spec) -> int:
    if isinstance(spec, LowRankSpec):
        return min(spec.r, spec.m, spec.n)
    if isinstance(spec, MLRSpec):
        total = sum(sum(min(lev.rank, mk, nk) for mk, nk in zip(lev.row_sizes, lev.col_sizes))
                    for lev in spec.levels)
        return min(total, spec.m, spec.n)
    if isinstance(spec, BTTSpec):
        return min(spec.m, spec.n,
                   spec.b * min(spec.a, spec.c * spec.s),
                   spec.c * min(spec.d, spec.b * spec.s))
    if isinstance(spec, MLBTCSpec):
        total = 0
        aligned = spec.perm_left.is_identity and spec.perm_right.is_identity
        for lev in spec.levels:
            if lev.alpha == 0.0:
                continue
            if aligned and lev.left_blocks == lev.right_blocks:
                # identity permutations with matched blocks: plain per-block products
                total += sum(min(mk, lev.left_rank, nk)
                             for mk, nk in zip(lev.left_row_sizes, lev.right_col_sizes))
            else:
                total += min(lev.right_blocks * lev.right_rank,
                             sum(min(mk, lev.left_rank) for mk in lev.left_row_sizes),
                             sum(min(nk, lev.right_rank) for nk in lev.right_col_sizes))
        return min(total, spec.m, spec.n)
    raise TypeError(f"unknown spec type {type(spec).__name__}")


def numeric_rank(dense: np.ndarray, tol: float | None = None) -> int:
    """Singular values above tol (default 1e-8 * sigma_max) count toward rank."""
    dense = np.asarray(dense, dtype=np.float64)
    if dense.ndim != 2:
        raise ShapeError(f"numeric_rank expects a matrix, got shape {dense.shape}")
    sigma = np.linalg.svd(dense, compute_uv=False)
    if sigma.size == 0 or sigma[0] == 0.0:
        return 0
    if tol is None:
        tol = 1e-8 * float(sigma[0])
    return int(np.count_nonzero(sigma > tol))


# ---------------------------------------------------------------------------
# spec (de)serialization
# ---------------------------------------------------------------------------

def _check_keys(obj: dict, allowed: set, where: str):
    unknown = set(obj) - allowed
    if unknown:
        raise ValueError(f"{where}: unknown key {sorted(unknown)[0]!r}")


def spec_to_json(spec: Spec) -> dict:
    if isinstance(spec, LowRankSpec):
        return {"family": "low_rank", "m": spec.m, "n": spec.n, "r": spec.r}
    if isinstance(spec, MLRSpec):
        return {"family": "mlr", "m": spec.m, "n": spec.n,
                "levels": [{"rank": lev.rank, "row_sizes": list(lev.row_sizes),
                            "col_sizes": list(lev.col_sizes)} for lev in spec.levels]}
    if isinstance(spec, BTTSpec):
        return {"family": "btt", "a": spec.a, "b": spec.b, "c": spec.c, "d": spec.d, "s": spec.s}
    if isinstance(spec, MLBTCSpec):
        def perm_json(p: PermutationMap):
            return "identity" if p.is_identity else [int(i) for i in p.indices]
        return {"family": "mlbtc", "m": spec.m, "n": spec.n,
                "levels": [{"alpha": lev.alpha, "left_rank": lev.left_rank,
                            "right_rank": lev.right_rank,
                            "left_row_sizes": list(lev.left_row_sizes),
                            "right_col_sizes": list(lev.right_col_sizes)} for lev in spec.levels],
                "perm_left": perm_json(spec.perm_left),
                "perm_right": perm_json(spec.perm_right)}
    raise TypeError(f"unknown spec type {type(spec).__name__}")


def _perm_from_json(obj, where: str) -> PermutationMap:
    if obj == "identity" or obj is None:
        return PermutationMap.identity()
    if isinstance(obj, dict):
        _check_keys(obj, {"outer", "inner", "trailing"}, where)
        return perm_reshape_transpose(int(obj["outer"]), int(obj["inner"]), int(obj.get("trailing", 1)))
    if isinstance(obj, list):
        return PermutationMap(obj)
    raise ValueError(f"{where}: want 'identity', an index list, or outer/inner/trailing")


def spec_from_json(obj: dict) -> Spec:
    if not isinstance(obj, dict) or "family" not in obj:
        raise ValueError("spec json must be an object with a 'family' tag")
    family = obj["family"]
    if family == "low_rank":
        _check_keys(obj, {"family", "m", "n", "r"}, "low_rank spec")
        return LowRankSpec(int(obj["m"]), int(obj["n"]), int(obj["r"]))
    if family == "mlr":
        _check_keys(obj, {"family", "m", "n", "ranks", "levels"}, "mlr spec")
        m, n = int(obj["m"]), int(obj["n"])
        if "ranks" in obj:
            if "levels" in obj:
                raise ValueError("mlr spec: give 'ranks' (equal blocks) or explicit 'levels', not both")
            ranks = obj["ranks"]
            if isinstance(ranks, str):
                ranks = parse_rank_allocation(ranks)
            return MLRSpec.equal_blocks(m, n, [int(r) for r in ranks])
        levels = []
        for i, lev in enumerate(obj.get("levels", []), start=1):
            _check_keys(lev, {"rank", "row_sizes", "col_sizes"}, f"mlr level {i}")
            levels.append(MLRLevelSpec(int(lev["rank"]), tuple(int(v) for v in lev["row_sizes"]),
                                       tuple(int(v) for v in lev["col_sizes"])))
        return MLRSpec(m, n, tuple(levels))
    if family == "btt":
        _check_keys(obj, {"family", "a", "b", "c", "d", "s"}, "btt spec")
        return BTTSpec(int(obj["a"]), int(obj["b"]), int(obj["c"]), int(obj["d"]), int(obj.get("s", 1)))
    if family == "mlbtc":
        _check_keys(obj, {"family", "m", "n", "levels", "perm_left", "perm_right"}, "mlbtc spec")
        levels = []
        for i, lev in enumerate(obj.get("levels", []), start=1):
            _check_keys(lev, {"alpha", "left_rank", "right_rank", "left_row_sizes", "right_col_sizes"},
                        f"mlbtc level {i}")
            levels.append(MLBTCLevelSpec(float(lev.get("alpha", 1.0)), int(lev["left_rank"]),
                                         int(lev["right_rank"]),
                                         tuple(int(v) for v in lev["left_row_sizes"]),
                                         tuple(int(v) for v in lev["right_col_sizes"])))
        return MLBTCSpec(int(obj["m"]), int(obj["n"]), tuple(levels),
                         _perm_from_json(obj.get("perm_left"), "perm_left"),
                         _perm_from_json(obj.get("perm_right"), "perm_right"))
    raise ValueError(f"unknown family {family!r}; want low_rank, mlr, btt, or mlbtc")
