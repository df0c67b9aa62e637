"""Connected lesions: component labeling, per-lesion records, size bins.

A lesion is a connected component of foreground voxels.  Components are
labeled 1..K in order of their first (lowest flat index) voxel, 0 is
background.  Size bins: tiny 1-2, small 3-10, medium 11-50, large 51+.
The tiny bin exists because generated masks can contain 1-2 voxel
components; those are weighted in losses but excluded from detection
metrics by default.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .grid import Dims, Mask

CONNECTIVITY_RANK = {6: 1, 18: 2, 26: 3}
DEFAULT_CONNECTIVITY = 26


class SizeBin(enum.Enum):
    TINY = "tiny"
    SMALL = "small"
    MEDIUM = "medium"
    LARGE = "large"


def size_bin(size: int) -> SizeBin:
    """Bin a lesion size: 1-2 tiny, 3-10 small, 11-50 medium, 51+ large."""
    if size < 1:
        raise ValueError(f"lesion size must be >= 1, got {size}")
    if size <= 2:
        return SizeBin.TINY
    if size <= 10:
        return SizeBin.SMALL
    if size <= 50:
        return SizeBin.MEDIUM
    return SizeBin.LARGE


@dataclass(frozen=True)
class LabelMap:
    """Integer component labels over a grid; 0 is background."""

    dims: Dims
    labels: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.array(self.labels, dtype=np.int32, copy=True).reshape(-1)
        if arr.size != self.dims.count:
            raise ValueError(f"labels length {arr.size} != dims product {self.dims.count}")
        if arr.size and arr.min() < 0:
            raise ValueError("labels must be non-negative")
        arr.setflags(write=False)
        object.__setattr__(self, "labels", arr)

    @property
    def component_count(self) -> int:
        return int(self.labels.max(initial=0))

    def as3d(self) -> np.ndarray:
        return self.labels.reshape(self.dims.shape3d)


@dataclass(frozen=True)
class LesionRecord:
    id: int
    size: int
    bin: SizeBin
    voxel_indices: np.ndarray = field(repr=False)

    def __post_init__(self):
        idx = np.asarray(self.voxel_indices, dtype=np.int64)
        if idx.size != self.size or self.size < 1:
            raise ValueError(f"size {self.size} != number of voxel indices {idx.size}")
        if idx.size > 1 and not (np.diff(idx) > 0).all():
            raise ValueError("voxel indices must be strictly increasing")
        object.__setattr__(self, "voxel_indices", idx)


def structure_for(connectivity: int) -> np.ndarray:
    """3x3x3 boolean neighborhood for 6, 18, or 26 connectivity."""
    if connectivity not in CONNECTIVITY_RANK:
        raise ValueError(f"connectivity must be one of 6, 18, 26; got {connectivity}")
    return ndimage.generate_binary_structure(3, CONNECTIVITY_RANK[connectivity])


def label_components(mask: Mask, connectivity: int = DEFAULT_CONNECTIVITY) -> LabelMap:
    """Label connected foreground components of a binary mask.

    Two foreground voxels share a label iff they are connected under the
    chosen neighborhood.  Labels are renumbered 1..K by the flat index of
    each component's first voxel, so the result is independent of the
    underlying labeling pass.
    """
    raw, count = ndimage.label(mask.as3d(), structure=structure_for(connectivity))
    flat = raw.reshape(-1)
    if count == 0:
        return LabelMap(mask.dims, flat)
    first = np.full(count + 1, flat.size, dtype=np.int64)
    np.minimum.at(first, flat, np.arange(flat.size, dtype=np.int64))
    order = np.argsort(first[1:], kind="stable")  # old label-1 -> rank
    remap = np.zeros(count + 1, dtype=np.int32)
    remap[order + 1] = np.arange(1, count + 1, dtype=np.int32)
    return LabelMap(mask.dims, remap[flat])


def lesion_table(labels: LabelMap) -> list[LesionRecord]:
    """One record per component, ordered by label id; sizes sum to the
    foreground voxel count."""
    flat = labels.labels
    count = labels.component_count
    if count == 0:
        return []
    sizes = np.bincount(flat, minlength=count + 1)
    order = np.argsort(flat, kind="stable")
    bounds = np.cumsum(sizes)
    records = []
    for j in range(1, count + 1):
        idx = np.sort(order[bounds[j - 1] : bounds[j]])
        records.append(LesionRecord(id=j, size=int(sizes[j]), bin=size_bin(int(sizes[j])), voxel_indices=idx))
    return records


def write_lesion_csv(path, table: list[LesionRecord]) -> None:
    """Serialize a lesion table as CSV with columns id,size,bin."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "size", "bin"])
        for rec in table:
            writer.writerow([rec.id, rec.size, rec.bin.value])
