"""Seeded synthetic 3D phantoms with a controlled lesion-size spectrum.

Each case is Gaussian background noise plus blob lesions grown by stochastic
region growing.  Counts are Poisson, target sizes lognormal (heavy right
tail: many small lesions, a few large ones).  Two mechanisms make small
lesions genuinely harder for a per-voxel model, which is what recreates the
detection-vs-segmentation operating-point split at desk scale:

* size-dependent contrast: lesion contrast is attenuated by
  ``small_contrast_attenuation * exp(-(size-1)/8)``, so the smallest
  lesions are the faintest;
* a partial-volume analogue: boundary voxels (those with a background
  6-neighbor) receive half the lesion's contrast, and small lesions are
  all boundary.

Generation is bitwise deterministic per seed.  Dataset case k derives its
seed as ``seed XOR splitmix64(k)``, so cases are independently reproducible
and order/parallelism of generation does not matter.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .grid import Dims, Mask, Volume
from .lesions import LesionRecord, label_components, lesion_table

_M64 = (1 << 64) - 1
SMALL_SIZE_DECAY = 8.0
PLACEMENT_ATTEMPTS = 1000

# Face-neighbor offsets used both for region growing and for the
# interior/boundary split; growth under 6-connectivity keeps every lesion a
# single component under any of the 6/18/26 labelings.
_FACE_OFFSETS = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))


class PhantomGenerationError(RuntimeError):
    pass


def splitmix64(k: int) -> int:
    """One step of the splitmix64 sequence; decorrelates per-case seeds."""
    x = (k + 0x9E3779B97F4A7C15) & _M64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _M64
    return x ^ (x >> 31)


@dataclass(frozen=True)
class PhantomSpec:
    dims: Dims
    lesion_count_mean: float = 9.0
    size_log_mean: float = 2.64
    size_log_sd: float = 1.3
    contrast: float = 2.0
    small_contrast_attenuation: float = 0.6
    noise_sd: float = 1.0
    seed: int = 0
    max_lesion_size: int = 400  # target-size clamp so draws always fit the grid

    def __post_init__(self):
        if min(self.dims.nx, self.dims.ny, self.dims.nz) < 8:
            raise ValueError("every dimension must be >= 8 to host lesions")
        if self.lesion_count_mean < 0:
            raise ValueError("lesion_count_mean must be >= 0")
        if self.size_log_sd < 0:
            raise ValueError("size_log_sd must be >= 0")
        if not self.contrast > 0:
            raise ValueError("contrast must be > 0")
        if not 0 <= self.small_contrast_attenuation < 1:
            raise ValueError("small_contrast_attenuation must be in [0, 1)")
        if not self.noise_sd > 0:
            raise ValueError("noise_sd must be > 0")
        if self.max_lesion_size < 1:
            raise ValueError("max_lesion_size must be >= 1")

    def to_dict(self) -> dict:
        return {
            "dims": [self.dims.nx, self.dims.ny, self.dims.nz],
            "lesion_count_mean": self.lesion_count_mean,
            "size_log_mean": self.size_log_mean,
            "size_log_sd": self.size_log_sd,
            "contrast": self.contrast,
            "small_contrast_attenuation": self.small_contrast_attenuation,
            "noise_sd": self.noise_sd,
            "seed": self.seed,
            "max_lesion_size": self.max_lesion_size,
        }

    @staticmethod
    def from_dict(d: dict) -> "PhantomSpec":
        d = dict(d)
        nx, ny, nz = d.pop("dims")
        return PhantomSpec(dims=Dims(int(nx), int(ny), int(nz)), **d)

    @staticmethod
    def from_json(path) -> "PhantomSpec":
        with open(path) as fh:
            return PhantomSpec.from_dict(json.load(fh))


@dataclass(frozen=True)
class PhantomCase:
    image: Volume
    truth: Mask
    table: list[LesionRecord] = field(repr=False)


def _grow_lesion(rng, dims: Dims, blocked: np.ndarray, target: int) -> list[int] | None:
    """Grow one 6-connected blob of `target` voxels avoiding blocked voxels.

    Returns flat indices, or None if growth stalled more than 1 voxel short.
    """
    nx, ny, nz = dims.nx, dims.ny, dims.nz
    free = np.flatnonzero(~blocked)
    if free.size == 0:
        return None
    start = int(free[rng.integers(free.size)])
    blob = [start]
    in_blob = {start}
    candidates: list[int] = []
    in_cand = set()

    def push_neighbors(idx: int):
        x = idx % nx
        y = (idx // nx) % ny
        z = idx // (nx * ny)
        for dx, dy, dz in _FACE_OFFSETS:
            X, Y, Z = x + dx, y + dy, z + dz
            if 0 <= X < nx and 0 <= Y < ny and 0 <= Z < nz:
                j = X + nx * (Y + ny * Z)
                if not blocked[j] and j not in in_blob and j not in in_cand:
                    candidates.append(j)
                    in_cand.add(j)

    push_neighbors(start)
    while len(blob) < target:
        if not candidates:
            return blob if len(blob) >= target - 1 else None
        pick = int(rng.integers(len(candidates)))
        j = candidates.pop(pick)
        in_cand.discard(j)
        blob.append(j)
        in_blob.add(j)
        push_neighbors(j)
    return blob


def _block_with_margin(blocked: np.ndarray, dims: Dims, blob: list[int]) -> None:
    """Mark the blob and its full 26-neighborhood, so distinct lesions never
    touch even diagonally and component labeling reproduces the layout."""
    nx, ny, nz = dims.nx, dims.ny, dims.nz
    idx = np.asarray(blob, dtype=np.int64)
    x = idx % nx
    y = (idx // nx) % ny
    z = idx // (nx * ny)
    for dx in (-1, 0, 1):
        X = x + dx
        okx = (X >= 0) & (X < nx)
        for dy in (-1, 0, 1):
            Y = y + dy
            oky = okx & (Y >= 0) & (Y < ny)
            for dz in (-1, 0, 1):
                Z = z + dz
                ok = oky & (Z >= 0) & (Z < nz)
                blocked[X[ok] + nx * (Y[ok] + ny * Z[ok])] = True


def lesion_contrast(size: int, contrast: float, attenuation: float) -> float:
    """Realized contrast of a lesion: small ones are attenuated."""
    return contrast * (1.0 - attenuation * np.exp(-(size - 1) / SMALL_SIZE_DECAY))


def generate(spec: PhantomSpec) -> PhantomCase:
    """Generate one phantom case, bitwise deterministic for a fixed spec.

    Draw order is fixed: lesion count, all target sizes, then placement
    (largest first), then the noise field.
    """
    rng = np.random.default_rng(spec.seed & _M64)
    dims = spec.dims
    n_vox = dims.count
    n_lesions = int(rng.poisson(spec.lesion_count_mean))
    if n_lesions:
        raw = rng.lognormal(spec.size_log_mean, spec.size_log_sd, n_lesions)
        targets = np.clip(np.rint(raw).astype(np.int64), 1, spec.max_lesion_size)
        targets = np.sort(targets)[::-1]  # place big ones while space is plentiful
    else:
        targets = np.zeros(0, dtype=np.int64)

    blocked = np.zeros(n_vox, dtype=bool)
    truth_flat = np.zeros(n_vox, dtype=np.uint8)
    blobs: list[list[int]] = []
    for target in targets:
        attempts = 0
        while True:
            attempts += 1
            if attempts > PLACEMENT_ATTEMPTS:
                raise PhantomGenerationError(
                    f"could not place a {int(target)}-voxel lesion after "
                    f"{PLACEMENT_ATTEMPTS} attempts; use larger dims or fewer/smaller lesions"
                )
            blob = _grow_lesion(rng, dims, blocked, int(target))
            if blob is not None:
                break
        blobs.append(blob)
        _block_with_margin(blocked, dims, blob)
        truth_flat[np.asarray(blob, dtype=np.int64)] = 1

    # Contrast field: interior voxels get the lesion's contrast, boundary
    # voxels (any background face-neighbor, grid border included) get half.
    signal = np.zeros(n_vox, dtype=np.float64)
    truth3 = truth_flat.reshape(dims.shape3d)
    nx, ny, nz = dims.nx, dims.ny, dims.nz
    for blob in blobs:
        idx = np.asarray(blob, dtype=np.int64)
        cimg = lesion_contrast(idx.size, spec.contrast, spec.small_contrast_attenuation)
        x = idx % nx
        y = (idx // nx) % ny
        z = idx // (nx * ny)
        interior = np.ones(idx.size, dtype=bool)
        for dx, dy, dz in _FACE_OFFSETS:
            X, Y, Z = x + dx, y + dy, z + dz
            inside = (X >= 0) & (X < nx) & (Y >= 0) & (Y < ny) & (Z >= 0) & (Z < nz)
            covered = np.zeros(idx.size, dtype=bool)
            covered[inside] = truth3[Z[inside], Y[inside], X[inside]] == 1
            interior &= covered
        signal[idx] = np.where(interior, cimg, cimg / 2.0)

    noise = rng.normal(0.0, spec.noise_sd, n_vox)
    image = Volume(dims, (noise + signal).astype(np.float32))
    truth = Mask(dims, truth_flat)
    table = lesion_table(label_components(truth))
    if sorted(rec.size for rec in table) != sorted(len(b) for b in blobs):
        raise AssertionError("component labeling does not reproduce the generated layout")
    return PhantomCase(image=image, truth=truth, table=table)


def generate_dataset(spec: PhantomSpec, n_volumes: int, seed: int | None = None) -> list[PhantomCase]:
    """n independent cases; case k runs on seed ``base XOR splitmix64(k)``."""
    if n_volumes < 1:
        raise ValueError("n_volumes must be >= 1")
    base = spec.seed if seed is None else seed
    return [generate(replace(spec, seed=(base ^ splitmix64(k)) & _M64)) for k in range(n_volumes)]


def case_seed(base: int, k: int) -> int:
    return (base ^ splitmix64(k)) & _M64
