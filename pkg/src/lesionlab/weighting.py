"""Per-voxel weight maps for cross-entropy reweighting.

Three schemes over the lesions of a reference mask:

* ``uniform``  - every voxel weighs 1 (plain BCE).
* ``lsr``      - size reweighting: a lesion of s voxels gets total weight
  W(s) = s + alpha*exp(-(s-1)/beta), spread evenly so each of its voxels
  weighs w(s) = 1 + (alpha/s)*exp(-(s-1)/beta).  Voxel weights are bounded
  by 1 + alpha/s, and W is non-decreasing in s whenever alpha <= beta.
* ``inverse``  - every lesion gets the same total weight (the image's mean
  lesion size), so voxel weight is mean_size/s.  Across mixed-size images
  these weights range over orders of magnitude.

Background voxels always weigh exactly 1.  Weights are derived in float64
and stored as f32.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from types import MappingProxyType

import numpy as np

from .grid import Dims, Volume
from .lesions import LabelMap, LesionRecord

SCHEME_NAMES = ("uniform", "lsr", "inverse")


@dataclass(frozen=True)
class WeightParams:
    """alpha scales the small-lesion boost, beta sets its size decay.

    alpha <= beta guarantees the lesion total weight is monotone in size;
    larger alpha is accepted (needed to demonstrate the violation) but the
    scheme constructor and the CLI sweep enforce the monotone regime.
    """

    alpha: float
    beta: float

    def __post_init__(self):
        if not (self.alpha >= 0 and math.isfinite(self.alpha)):
            raise ValueError(f"alpha must be finite and >= 0, got {self.alpha}")
        if not (self.beta > 0 and math.isfinite(self.beta)):
            raise ValueError(f"beta must be finite and > 0, got {self.beta}")

    @property
    def monotone(self) -> bool:
        return self.alpha <= self.beta


@dataclass(frozen=True)
class WeightScheme:
    """Selector: uniform, lsr(params), or inverse."""

    kind: str
    params: WeightParams | None = None

    def __post_init__(self):
        if self.kind not in SCHEME_NAMES:
            raise ValueError(f"scheme must be one of {SCHEME_NAMES}, got {self.kind!r}")
        if self.kind == "lsr":
            if self.params is None:
                raise ValueError("lsr scheme requires WeightParams")
            if not self.params.monotone:
                raise ValueError(
                    f"lsr scheme requires alpha <= beta, got alpha={self.params.alpha} beta={self.params.beta}"
                )
        elif self.params is not None:
            raise ValueError(f"{self.kind} scheme takes no params")

    @staticmethod
    def uniform() -> "WeightScheme":
        return WeightScheme("uniform")

    @staticmethod
    def lsr(alpha: float, beta: float) -> "WeightScheme":
        return WeightScheme("lsr", WeightParams(alpha, beta))

    @staticmethod
    def inverse() -> "WeightScheme":
        return WeightScheme("inverse")


@dataclass(frozen=True)
class WeightMap:
    """Per-voxel positive weights; background voxels are exactly 1."""

    dims: Dims
    weights: np.ndarray
    meta: MappingProxyType = MappingProxyType({})

    def __post_init__(self):
        arr = np.array(self.weights, dtype=np.float32, copy=True).reshape(-1)
        if arr.size != self.dims.count:
            raise ValueError(f"weights length {arr.size} != dims product {self.dims.count}")
        if not np.isfinite(arr).all() or (arr <= 0).any():
            raise ValueError("weights must be finite and > 0")
        arr.setflags(write=False)
        object.__setattr__(self, "weights", arr)
        object.__setattr__(self, "meta", MappingProxyType(dict(self.meta)))

    def as_volume(self) -> Volume:
        return Volume(self.dims, self.weights)


def lsr_voxel_weight(size: int, params: WeightParams) -> float:
    """Per-voxel weight 1 + (alpha/size)*exp(-(size-1)/beta)."""
    if size < 1:
        raise ValueError(f"lesion size must be >= 1, got {size}")
    return 1.0 + (params.alpha / size) * math.exp(-(size - 1) / params.beta)


def lsr_lesion_weight(size: int, params: WeightParams) -> float:
    """Lesion total weight size + alpha*exp(-(size-1)/beta)."""
    if size < 1:
        raise ValueError(f"lesion size must be >= 1, got {size}")
    return size + params.alpha * math.exp(-(size - 1) / params.beta)


def inverse_voxel_weight(size: int, mean_size: float) -> float:
    """Per-voxel weight mean_size/size, giving every lesion equal total weight."""
    if size < 1:
        raise ValueError(f"lesion size must be >= 1, got {size}")
    if not mean_size > 0:
        raise ValueError(f"mean lesion size must be > 0, got {mean_size}")
    return mean_size / size


def weight_map(labels: LabelMap, table: list[LesionRecord], scheme: WeightScheme) -> WeightMap:
    """Expand a scheme into a per-voxel map over the label grid.

    Every voxel of lesion j carries that lesion's scheme weight; background
    stays exactly 1.  The inverse scheme on an image without lesions has no
    mean size, so it falls back to the uniform map and flags that in
    ``meta["fallback"]``.
    """
    flat = labels.labels
    count = labels.component_count
    if count != len(table) or any(rec.id != j + 1 for j, rec in enumerate(table)):
        raise ValueError(
            f"lesion table ({len(table)} records) does not match label map ({count} components)"
        )
    weights = np.ones(flat.size, dtype=np.float64)
    meta = {"scheme": scheme.kind}
    if scheme.kind == "lsr":
        meta["alpha"] = repr(scheme.params.alpha)
        meta["beta"] = repr(scheme.params.beta)
        per_lesion = [lsr_voxel_weight(rec.size, scheme.params) for rec in table]
    elif scheme.kind == "inverse":
        if not table:
            meta["fallback"] = "uniform (no lesions, mean size undefined)"
            per_lesion = []
        else:
            mean_size = float(np.mean([rec.size for rec in table]))
            meta["mean_size"] = repr(mean_size)
            per_lesion = [inverse_voxel_weight(rec.size, mean_size) for rec in table]
    else:
        per_lesion = [1.0] * len(table)
    lut = np.ones(count + 1, dtype=np.float64)
    lut[1:] = per_lesion
    weights = lut[flat]
    return WeightMap(labels.dims, weights.astype(np.float32), MappingProxyType(meta))
