"""Loss values and analytic logit gradients for the compared families.

Four families over per-voxel logits z and binary targets y:

* ``bce``           mean softplus(z) - y*z
* ``wbce``          class-weighted BCE, positives scaled by pos_weight
* ``focal``         (1-p_t)^gamma modulated BCE, p_t the true-class probability
* ``weighted_bce``  BCE scaled by a per-voxel weight map (the vehicle for the
  size-reweighting and inverse schemes)

All values are means over the total voxel count N, NOT over the weight sum,
so the background contribution is identical across weighting schemes.  The
computation is fused on logits (log-sum-exp form) in float64; no probability
is ever clamped on this path.  The epsilon clamp applies only in
``loss_value_from_probs``, for callers that start from probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import Mask, Volume
from .weighting import WeightMap

FAMILIES = ("bce", "wbce", "focal", "weighted_bce")


def _flat64(x, name: str) -> np.ndarray:
    if isinstance(x, (Volume, Mask)):
        x = x.data
    elif isinstance(x, WeightMap):
        x = x.weights
    arr = np.asarray(x, dtype=np.float64).reshape(-1)
    if not np.isfinite(arr).all():
        raise ValueError(f"non-finite value in {name}")
    return arr


def sigmoid(z):
    """Numerically stable logistic; exact 0.5 at z=0, no overflow for |z|<=80."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


def softplus(z):
    """log(1 + exp(z)) without overflow."""
    z = np.asarray(z, dtype=np.float64)
    return np.where(z > 0, z + np.log1p(np.exp(-np.abs(z))), np.log1p(np.exp(z)))


def log_sigmoid(z):
    """log(sigmoid(z)) = -softplus(-z)."""
    return -softplus(-np.asarray(z, dtype=np.float64))


@dataclass(frozen=True)
class LossSpec:
    """Loss family plus its hyperparameters.

    ``weight_map`` is required for the weighted_bce family unless a map is
    passed to loss_value_grad directly (training feeds per-minibatch maps).
    """

    family: str
    pos_weight: float = 1.0
    gamma: float = 2.0
    epsilon: float = 1e-7
    weight_map: WeightMap | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if not self.pos_weight > 0:
            raise ValueError(f"pos_weight must be > 0, got {self.pos_weight}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not 0 < self.epsilon <= 1e-3:
            raise ValueError(f"epsilon must be in (0, 1e-3], got {self.epsilon}")


@dataclass(frozen=True)
class LossResult:
    value: float
    grad: np.ndarray = field(repr=False)


def _resolve_weights(spec: LossSpec, weight_map, n: int) -> np.ndarray:
    wm = weight_map if weight_map is not None else spec.weight_map
    if wm is None:
        raise ValueError("weighted_bce needs a weight map (in the spec or per call)")
    w = _flat64(wm, "weight map")
    if w.size != n:
        raise ValueError(f"weight map size {w.size} != logits size {n}")
    if (w <= 0).any():
        raise ValueError("weights must be > 0")
    return w


def loss_value_grad(logits, target, spec: LossSpec, weight_map=None) -> LossResult:
    """Mean loss and its exact per-voxel derivative w.r.t. the logits.

    grad[i] = d(value)/d(logits[i]); shapes must match.
    """
    z = _flat64(logits, "logits")
    y = _flat64(target, "target")
    if z.size != y.size:
        raise ValueError(f"shape mismatch: logits {z.size} voxels vs target {y.size}")
    n = z.size
    if n == 0:
        raise ValueError("empty input")

    if spec.family == "focal":
        # Work on the true-class logit z_t = s*z with s = +-1; p_t = sigmoid(z_t).
        s = 2.0 * y - 1.0
        zt = s * z
        log_pt = log_sigmoid(zt)
        one_minus_pt = sigmoid(-zt)
        pt = sigmoid(zt)
        mod = one_minus_pt ** spec.gamma
        per_voxel = mod * (-log_pt)
        value = float(per_voxel.mean())
        grad = s * (spec.gamma * pt * mod * log_pt - one_minus_pt ** (spec.gamma + 1.0)) / n
        return LossResult(value, grad)

    per_voxel = softplus(z) - y * z
    if spec.family == "bce":
        c = None
    elif spec.family == "wbce":
        c = spec.pos_weight * y + (1.0 - y)
    else:
        c = _resolve_weights(spec, weight_map, n)
    if c is None:
        value = float(per_voxel.mean())
        grad = (sigmoid(z) - y) / n
    else:
        value = float((c * per_voxel).mean())
        grad = c * (sigmoid(z) - y) / n
    return LossResult(value, grad)


def loss_value_from_probs(probs, target, spec: LossSpec, weight_map=None) -> float:
    """Loss value for callers holding probabilities instead of logits.

    Probabilities are clamped to [epsilon, 1-epsilon] before the logs; this
    is the only place the epsilon of the spec is applied.
    """
    p = _flat64(probs, "probs")
    y = _flat64(target, "target")
    if p.size != y.size:
        raise ValueError(f"shape mismatch: probs {p.size} voxels vs target {y.size}")
    p = np.clip(p, spec.epsilon, 1.0 - spec.epsilon)
    ce = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    if spec.family == "bce":
        return float(ce.mean())
    if spec.family == "wbce":
        return float(((spec.pos_weight * y + (1.0 - y)) * ce).mean())
    if spec.family == "focal":
        pt = p * y + (1.0 - p) * (1.0 - y)
        return float(((1.0 - pt) ** spec.gamma * ce).mean())
    w = _resolve_weights(spec, weight_map, p.size)
    return float((w * ce).mean())
