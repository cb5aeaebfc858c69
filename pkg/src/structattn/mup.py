"""Width-transfer (muP-style) initialization and Adam learning-rate rules.

Every weight matrix carries a role that fixes how its init standard
deviation and its per-matrix Adam learning rate scale with model width:

  dense maps (embedding / hidden-dense / output)
      sigma = 1/sqrt(d_in) * min(1, sqrt(d_out / d_in))
      lr    = eta * D1 / d_in
  multi-level low-rank score factors, level l with p_l = 2^(l-1) blocks
      sigma^2 = p_l / D          lr = eta * D1 * p_l / D2
  block tensor-train score cores
      left  (a x cs):  sigma^2 = 1/(cs)   lr = eta * D1 / (cs)
      right (d x bs):  sigma^2 = 1/d      lr = eta * D1 / a

D1 is the base width the base rate eta was tuned at, D2 the width being
instantiated. All Theta-level constants are 1; eta is the single tunable
that absorbs them. The output role is zero-initialized (sigma = 0) so a
fresh model predicts exactly 0, and its learning rate follows the dense
rule. Learning rates are reduced in exact rational arithmetic and rounded
to a float once at the end.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable

import numpy as np

from .tensor import Tensor

ROLES = ("embedding", "hidden-dense", "output", "mlr-factor", "btt-left", "btt-right")

# The base-rate sweep used by the learning-rate transfer experiment.
BASE_LR_GRID = (1e-3, 5e-4, 1e-4, 5e-5, 1e-5)


@dataclass(frozen=True)
class MupRule:
    """Scaling rule for one weight matrix.

    fan_in / fan_out describe the matrix as a map (storage layout and head
    batching do not matter). mlr-factor rules carry their 1-based level;
    btt-right rules carry `a`, the row count of the paired left cores,
    because their learning rate divides by it rather than by their own dims.
    """

    role: str
    fan_in: int
    fan_out: int
    base_lr: float
    base_width: int
    target_width: int
    level: int | None = None
    a: int | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}; want one of {ROLES}")
        for name in ("fan_in", "fan_out", "base_width", "target_width"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if not self.base_lr > 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if self.role == "mlr-factor":
            if self.level is None or self.level < 1:
                raise ValueError("mlr-factor rules need a 1-based level")
        elif self.level is not None:
            raise ValueError("level applies to mlr-factor rules only")
        if self.role == "btt-right":
            if self.a is None or self.a < 1:
                raise ValueError("btt-right rules need the left-core row count a")
        elif self.a is not None:
            raise ValueError("a applies to btt-right rules only")

    @property
    def blocks(self) -> int:
        """p_l = 2^(l-1) for an mlr-factor rule."""
        if self.role != "mlr-factor":
            raise ValueError(f"{self.role} rules have no level structure")
        return 2 ** (self.level - 1)


def init_std(rule: MupRule) -> float:
    """Initialization standard deviation prescribed by the rule."""
    if rule.role == "output":
        return 0.0
    if rule.role == "mlr-factor":
        return math.sqrt(rule.blocks / rule.target_width)
    if rule.role in ("btt-left", "btt-right"):
        return math.sqrt(1.0 / rule.fan_in)
    # embedding / hidden-dense
    return math.sqrt(1.0 / rule.fan_in) * min(1.0, math.sqrt(rule.fan_out / rule.fan_in))


def adam_lr(rule: MupRule) -> float:
    """Per-matrix Adam learning rate, evaluated exactly then rounded once."""
    eta = Fraction(rule.base_lr)
    if rule.role == "mlr-factor":
        exact = eta * rule.base_width * rule.blocks / rule.target_width
    elif rule.role == "btt-right":
        exact = eta * rule.base_width / rule.a
    else:
        # dense maps and btt-left cores: divide by the map's own fan-in
        exact = eta * rule.base_width / rule.fan_in
    return float(exact)


def zero_init_output(shape, dtype=np.float64, requires_grad: bool = True) -> Tensor:
    """All-zero readout weights, so a fresh model predicts exactly 0."""
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def lr_table_rows(named_rules: Iterable[tuple[str, MupRule]]) -> list[dict]:
    """Audit rows (parameter, role, fan_in, fan_out, sigma, lr), one per weight."""
    rows = []
    for path, rule in named_rules:
        rows.append({
            "parameter": path,
            "role": rule.role,
            "fan_in": rule.fan_in,
            "fan_out": rule.fan_out,
            "sigma": init_std(rule),
            "lr": adam_lr(rule),
        })
    return rows


LR_TABLE_COLUMNS = ("parameter", "role", "fan_in", "fan_out", "sigma", "lr")


def write_lr_table(named_rules: Iterable[tuple[str, MupRule]], path):
    """Write the per-parameter sigma/lr audit table as CSV."""
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=LR_TABLE_COLUMNS)
        w.writeheader()
        for row in lr_table_rows(named_rules):
            w.writerow(row)
