"""Desk-scale trainable segmenter: fixed voxel features + one-hidden-layer MLP.

The model is deliberately tiny so its gradients are exactly checkable: seven
fixed features per voxel (raw intensity, box means at radii 1/2/4, local sd
at radius 2, gradient magnitude, constant bias) feed a tanh MLP with one
hidden layer, trained by Adam under any LossSpec.  Everything runs in
float64 and is bitwise deterministic for a fixed seed: fixed shuffling,
fixed reduction order, sequential steps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .grid import Dims, Mask, Volume
from .losses import LossSpec, loss_value_grad, sigmoid
from .metrics import operating_report, rates, sweep_curves, voxel_counts
from .weighting import WeightScheme, weight_map
from .lesions import label_components, lesion_table

FEATURE_NAMES = ("raw", "box_mean_r1", "box_mean_r2", "box_mean_r4", "local_sd_r2", "grad_mag", "bias")
FEATURE_COUNT = len(FEATURE_NAMES)

SELECTION_TAUS = tuple(np.round(np.arange(0.05, 0.951, 0.05), 2))


class NumericalAbort(RuntimeError):
    """Training hit a non-finite loss; carries the instability diagnostics."""

    def __init__(self, epoch: int, step: int, family: str, max_weight: float):
        super().__init__(
            f"non-finite loss at epoch {epoch} step {step} "
            f"(loss family {family!r}, max |weight| in active map {max_weight:g})"
        )
        self.epoch = epoch
        self.step = step
        self.family = family
        self.max_weight = max_weight


def _box_mean(img3: np.ndarray, radius: int) -> np.ndarray:
    # Zero-padded box mean: the window always divides by its full volume.
    return ndimage.uniform_filter(img3, size=2 * radius + 1, mode="constant", cval=0.0)


def extract_features(image: Volume | np.ndarray, dims: Dims | None = None) -> np.ndarray:
    """Per-voxel feature matrix of shape (n_voxels, 7), float64.

    Borders are zero-padded for the box means, the local sd, and the central
    differences.  Deterministic: same image, same stack.
    """
    if isinstance(image, Volume):
        img3 = image.as3d().astype(np.float64)
    else:
        if dims is None:
            raise ValueError("dims required when image is a plain array")
        img3 = np.asarray(image, dtype=np.float64).reshape(dims.shape3d)
    if not np.isfinite(img3).all():
        raise ValueError("image must be finite")

    m2 = _box_mean(img3, 2)
    sq2 = _box_mean(img3 * img3, 2)
    sd2 = np.sqrt(np.clip(sq2 - m2 * m2, 0.0, None))

    padded = np.pad(img3, 1, mode="constant")
    gz = (padded[2:, 1:-1, 1:-1] - padded[:-2, 1:-1, 1:-1]) / 2.0
    gy = (padded[1:-1, 2:, 1:-1] - padded[1:-1, :-2, 1:-1]) / 2.0
    gx = (padded[1:-1, 1:-1, 2:] - padded[1:-1, 1:-1, :-2]) / 2.0
    gmag = np.sqrt(gx * gx + gy * gy + gz * gz)

    cols = (
        img3,
        _box_mean(img3, 1),
        m2,
        _box_mean(img3, 4),
        sd2,
        gmag,
        np.ones_like(img3),
    )
    return np.stack([c.reshape(-1) for c in cols], axis=1)


@dataclass(frozen=True)
class MlpParams:
    """One-hidden-layer tanh MLP: logit = w2 . tanh(W1^T x + b1) + b2."""

    W1: np.ndarray  # (n_features, hidden)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden,)
    b2: float

    def __post_init__(self):
        if self.W1.ndim != 2 or self.b1.shape != (self.W1.shape[1],) or self.w2.shape != self.b1.shape:
            raise ValueError("inconsistent parameter shapes")

    @property
    def n_features(self) -> int:
        return self.W1.shape[0]

    @property
    def hidden(self) -> int:
        return self.W1.shape[1]

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.W1.reshape(-1), self.b1, self.w2, [self.b2]])

    @staticmethod
    def from_vector(vec: np.ndarray, n_features: int, hidden: int) -> "MlpParams":
        vec = np.asarray(vec, dtype=np.float64)
        fh = n_features * hidden
        if vec.size != fh + 2 * hidden + 1:
            raise ValueError(f"vector length {vec.size} does not fit ({n_features}, {hidden})")
        return MlpParams(
            W1=vec[:fh].reshape(n_features, hidden).copy(),
            b1=vec[fh : fh + hidden].copy(),
            w2=vec[fh + hidden : fh + 2 * hidden].copy(),
            b2=float(vec[-1]),
        )


def init_params(seed_rng: np.random.Generator, n_features: int = FEATURE_COUNT, hidden: int = 16) -> MlpParams:
    """uniform(+-1/sqrt(fan_in)) weights, zero biases."""
    lim1 = 1.0 / np.sqrt(n_features)
    lim2 = 1.0 / np.sqrt(hidden)
    return MlpParams(
        W1=seed_rng.uniform(-lim1, lim1, (n_features, hidden)),
        b1=np.zeros(hidden),
        w2=seed_rng.uniform(-lim2, lim2, hidden),
        b2=0.0,
    )


def _check_finite_params(params: MlpParams) -> None:
    if not (
        np.isfinite(params.W1).all()
        and np.isfinite(params.b1).all()
        and np.isfinite(params.w2).all()
        and np.isfinite(params.b2)
    ):
        raise ValueError("non-finite parameter")


def forward(params: MlpParams, features: np.ndarray) -> np.ndarray:
    """Per-voxel logits for a (n_voxels, n_features) feature matrix."""
    _check_finite_params(params)
    hidden = np.tanh(features @ params.W1 + params.b1)
    return hidden @ params.w2 + params.b2


def backward(params: MlpParams, features: np.ndarray, target, spec: LossSpec, weights=None):
    """Loss value and its exact gradient w.r.t. every parameter (flat vector).

    Chain rule through loss_value_grad: dvalue/dparam = J^T (dvalue/dlogits).
    """
    _check_finite_params(params)
    a = np.tanh(features @ params.W1 + params.b1)
    logits = a @ params.w2 + params.b2
    res = loss_value_grad(logits, target, spec, weight_map=weights)
    dz = res.grad
    g_w2 = a.T @ dz
    g_b2 = dz.sum()
    dpre = (dz[:, None] * params.w2[None, :]) * (1.0 - a * a)
    g_w1 = features.T @ dpre
    g_b1 = dpre.sum(axis=0)
    grad = np.concatenate([g_w1.reshape(-1), g_b1, g_w2, [g_b2]])
    return res.value, grad


def fd_param_gradients(params: MlpParams, features: np.ndarray, target, spec: LossSpec,
                       weights=None, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of the loss value over all parameters.

    Uses only the forward+value path, never the analytic gradient.
    """
    vec = params.to_vector()
    out = np.zeros_like(vec)
    for i in range(vec.size):
        bumped = vec.copy()
        bumped[i] = vec[i] + h
        p_plus = MlpParams.from_vector(bumped, params.n_features, params.hidden)
        f_plus = loss_value_grad(forward(p_plus, features), target, spec, weight_map=weights).value
        bumped[i] = vec[i] - h
        p_minus = MlpParams.from_vector(bumped, params.n_features, params.hidden)
        f_minus = loss_value_grad(forward(p_minus, features), target, spec, weight_map=weights).value
        out[i] = (f_plus - f_minus) / (2.0 * h)
    return out


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """max_i |a-b| / max(|a|, |b|, floor); the floor keeps near-zero
    components from amplifying finite-difference roundoff."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


class Adam:
    """Textbook Adam with bias-corrected moments over a flat parameter vector."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if not (lr > 0 and 0 <= beta1 < 1 and 0 <= beta2 < 1 and eps > 0):
            raise ValueError("invalid Adam hyperparameters")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, vec: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(vec)
            self.v = np.zeros_like(vec)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return vec - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    loss: LossSpec
    scheme: WeightScheme = WeightScheme.uniform()
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 30
    minibatch: int = 2
    hidden: int = 16
    seed: int = 0
    connectivity: int = 26
    min_overlap_fraction: float = 0.1
    min_lesion_size: int = 3
    selection_taus: tuple = SELECTION_TAUS

    def __post_init__(self):
        if self.learning_rate < 0 or self.epochs < 1 or self.minibatch < 1 or self.hidden < 1:
            raise ValueError("rates and counts must be positive")


@dataclass
class Standardizer:
    """Per-feature shift/scale frozen on the training split.

    Constant features (the bias column) are left untouched so they survive
    standardization.
    """

    shift: np.ndarray
    scale: np.ndarray

    @staticmethod
    def fit(stacks: list[np.ndarray]) -> "Standardizer":
        allx = np.concatenate(stacks, axis=0)
        mean = allx.mean(axis=0)
        sd = allx.std(axis=0)
        constant = sd < 1e-12
        return Standardizer(
            shift=np.where(constant, 0.0, mean),
            scale=np.where(constant, 1.0, sd),
        )

    def apply(self, stack: np.ndarray) -> np.ndarray:
        return (stack - self.shift) / self.scale


@dataclass
class TrainResult:
    params: MlpParams
    standardizer: Standardizer
    log: list[dict]
    best_epoch: int
    best_val_sim_f1: float
    pos_weight_used: float | None


def _case_weights(cases, scheme: WeightScheme, connectivity: int) -> list[np.ndarray] | None:
    if scheme.kind == "uniform":
        return None
    maps = []
    for case in cases:
        labels = label_components(case.truth, connectivity)
        maps.append(weight_map(labels, lesion_table(labels), scheme).weights.astype(np.float64))
    return maps


def predict_probs(params: MlpParams, standardizer: Standardizer, image: Volume) -> np.ndarray:
    """Per-voxel foreground probabilities for one image (flat float64)."""
    return sigmoid(forward(params, standardizer.apply(extract_features(image))))


def train(train_cases, val_cases, config: TrainConfig) -> TrainResult:
    """Train the MLP; returns the parameters at the best validation
    simultaneous F1 plus the per-epoch log.

    Deterministic for a fixed config/seed/data: initialization and epoch
    shuffling come from one seeded generator, steps are sequential, and all
    reductions happen in fixed order.  A non-finite loss aborts with the
    instability diagnostics (the oversized-weight signature shows up there).
    """
    if not train_cases or not val_cases:
        raise ValueError("train and validation splits must be non-empty")
    rng = np.random.default_rng(config.seed)

    train_feats_raw = [extract_features(c.image) for c in train_cases]
    standardizer = Standardizer.fit(train_feats_raw)
    train_feats = [standardizer.apply(f) for f in train_feats_raw]
    del train_feats_raw
    val_feats = [standardizer.apply(extract_features(c.image)) for c in val_cases]
    train_targets = [c.truth.data.astype(np.float64) for c in train_cases]

    spec = config.loss
    pos_weight_used = None
    if spec.family == "wbce":
        fg = sum(t.sum() for t in train_targets)
        bg = sum(t.size for t in train_targets) - fg
        if fg == 0:
            raise ValueError("wbce needs at least one foreground voxel in the train split")
        pos_weight_used = float(bg / fg)
        spec = replace(spec, pos_weight=pos_weight_used)

    weights = _case_weights(train_cases, config.scheme, config.connectivity)
    max_w = 1.0 if weights is None else max(float(np.max(w)) for w in weights)

    params = init_params(rng, FEATURE_COUNT, config.hidden)
    vec = params.to_vector()
    opt = Adam(config.learning_rate, config.beta1, config.beta2, config.adam_eps)

    n_train = len(train_cases)
    best_vec = vec.copy()
    best_sim = -1.0
    best_epoch = 0
    log: list[dict] = []
    val_truths = [c.truth for c in val_cases]

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n_train)
        step_losses = []
        for step, lo in enumerate(range(0, n_train, config.minibatch), start=1):
            batch = order[lo : lo + config.minibatch]
            x = np.concatenate([train_feats[i] for i in batch], axis=0)
            y = np.concatenate([train_targets[i] for i in batch])
            w = None if weights is None else np.concatenate([weights[i] for i in batch])
            params = MlpParams.from_vector(vec, FEATURE_COUNT, config.hidden)
            value, grad = backward(params, x, y, spec, weights=w)
            if not np.isfinite(value):
                raise NumericalAbort(epoch, step, spec.family, max_w)
            vec = opt.step(vec, grad)
            if not np.isfinite(vec).all():
                raise NumericalAbort(epoch, step, spec.family, max_w)
            step_losses.append(value)

        params = MlpParams.from_vector(vec, FEATURE_COUNT, config.hidden)
        val_probs = [sigmoid(forward(params, f)) for f in val_feats]
        vc = voxel_counts(np.concatenate(val_probs), np.concatenate([t.data for t in val_truths]), 0.5)
        vox_f1 = rates(vc.tp, vc.fp, vc.fn).f1
        rows = sweep_curves(
            val_probs,
            val_truths,
            taus=config.selection_taus,
            connectivity=config.connectivity,
            min_overlap_fraction=config.min_overlap_fraction,
            min_lesion_size=config.min_lesion_size,
        )
        sim_f1 = operating_report(rows).simultaneous_f1
        log.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(step_losses)),
                "val_vox_f1": vox_f1,
                "val_sim_f1": sim_f1,
            }
        )
        if sim_f1 > best_sim:
            best_sim = sim_f1
            best_vec = vec.copy()
            best_epoch = epoch

    return TrainResult(
        params=MlpParams.from_vector(best_vec, FEATURE_COUNT, config.hidden),
        standardizer=standardizer,
        log=log,
        best_epoch=best_epoch,
        best_val_sim_f1=best_sim,
        pos_weight_used=pos_weight_used,
    )


def save_model(path, result: TrainResult, meta: dict | None = None) -> None:
    """Model file: JSON with layer sizes, flattened parameters, and the
    frozen feature-standardization constants."""
    params = result.params
    doc = {
        "feature_count": params.n_features,
        "hidden": params.hidden,
        "W1": params.W1.reshape(-1).tolist(),
        "b1": params.b1.tolist(),
        "w2": params.w2.tolist(),
        "b2": params.b2,
        "feat_shift": result.standardizer.shift.tolist(),
        "feat_scale": result.standardizer.scale.tolist(),
        "best_epoch": result.best_epoch,
        "best_val_sim_f1": result.best_val_sim_f1,
        "pos_weight_used": result.pos_weight_used,
        "meta": meta or {},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_model(path) -> tuple[MlpParams, Standardizer, dict]:
    with open(path) as fh:
        doc = json.load(fh)
    nf, hidden = int(doc["feature_count"]), int(doc["hidden"])
    params = MlpParams(
        W1=np.asarray(doc["W1"], dtype=np.float64).reshape(nf, hidden),
        b1=np.asarray(doc["b1"], dtype=np.float64),
        w2=np.asarray(doc["w2"], dtype=np.float64),
        b2=float(doc["b2"]),
    )
    standardizer = Standardizer(
        shift=np.asarray(doc["feat_shift"], dtype=np.float64),
        scale=np.asarray(doc["feat_scale"], dtype=np.float64),
    )
    return params, standardizer, doc
