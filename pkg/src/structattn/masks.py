"""Attention mask specifications shared by the tensor softmax and the attention layers."""
from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np

MASK_KINDS = ("none", "causal", "sliding_window", "global_plus_swa")

# Within a 6-layer stack the two global layers sit at depths 1 and 4 (1-indexed);
# other depths scale those positions proportionally.
GLOBAL_LAYER_ANCHORS = (1, 4)
ANCHOR_DEPTH = 6


@dataclass(frozen=True)
class MaskSpec:
    """What a score matrix is allowed to look at.

    kind 'none' admits everything, 'causal' admits j' <= j, 'sliding_window'
    additionally requires j - j' <= window. 'global_plus_swa' is a per-stack
    policy (some layers causal, the rest sliding-window) and must be resolved
    to per-layer specs before it can mask a single score matrix.
    """

    kind: str = "causal"
    window: int | None = None

    def __post_init__(self):
        if self.kind not in MASK_KINDS:
            raise ValueError(f"mask kind {self.kind!r} not one of {MASK_KINDS}")
        if self.kind in ("sliding_window", "global_plus_swa"):
            if self.window is None or self.window < 0:
                raise ValueError(f"mask kind {self.kind!r} needs window >= 0")


def mask_matrix(spec: MaskSpec, t: int) -> np.ndarray:
    """Boolean (t, t) visibility matrix, True where row j may attend to column j'."""
    if spec.kind == "global_plus_swa":
        raise ValueError("global_plus_swa is a layer-stack policy; resolve_layer_masks first")
    if spec.kind == "none":
        return np.ones((t, t), dtype=bool)
    rows = np.arange(t)[:, None]
    cols = np.arange(t)[None, :]
    visible = cols <= rows
    if spec.kind == "sliding_window":
        visible &= (rows - cols) <= spec.window
    return visible


def global_layer_indices(depth: int) -> tuple[int, ...]:
    """1-indexed layers that stay fully causal under the global_plus_swa policy."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    idx = sorted({min(depth, math.ceil(a * depth / ANCHOR_DEPTH)) for a in GLOBAL_LAYER_ANCHORS})
    return tuple(idx)


def resolve_layer_masks(spec: MaskSpec, depth: int) -> list[MaskSpec]:
    """Expand a mask policy into one MaskSpec per layer of a depth-layer stack."""
    if spec.kind != "global_plus_swa":
        return [spec] * depth
    globals_ = set(global_layer_indices(depth))
    return [
        MaskSpec("causal") if (i + 1) in globals_ else MaskSpec("sliding_window", spec.window)
        for i in range(depth)
    ]
