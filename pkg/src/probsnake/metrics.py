"""Agreement metrics between two masks and the threshold/morphology baseline."""
from __future__ import annotations

from dataclasses import astuple, dataclass, fields

import numpy as np
from scipy import ndimage

from .errors import EmptyResultError, ParameterError, ShapeError
from .volcore import BinaryMask, Volume, mask_volume_cm3

__all__ = [
    "SegMetrics",
    "CSV_HEADER",
    "compare",
    "agreement_pct",
    "dice",
    "hausdorff",
    "ball",
    "baseline_segment",
]

CSV_HEADER = "dice,jaccard,vol_a_cm3,vol_b_cm3,agreement_pct,hausdorff_cm,sensitivity,specificity"


@dataclass(frozen=True)
class SegMetrics:
    dice: float
    jaccard: float
    volume_a_cm3: float
    volume_b_cm3: float
    agreement_pct: float
    hausdorff_cm: float
    sensitivity: float
    specificity: float

    def csv_row(self):
        return ",".join(repr(float(x)) for x in astuple(self))

    def to_csv(self):
        return CSV_HEADER + "\n" + self.csv_row() + "\n"

    @classmethod
    def from_csv_row(cls, row):
        vals = [float(x) for x in row.strip().split(",")]
        if len(vals) != len(fields(cls)):
            raise ParameterError(f"expected {len(fields(cls))} columns, got {len(vals)}")
        return cls(*vals)


def agreement_pct(va, vb):
    """``100 * min / max`` of two volumes; 100 when both are zero."""
    va, vb = float(va), float(vb)
    if va < 0 or vb < 0:
        raise ParameterError(f"volumes must be nonnegative, got {va}, {vb}")
    hi = max(va, vb)
    return 100.0 if hi == 0 else 100.0 * min(va, vb) / hi


def dice(a: BinaryMask, b: BinaryMask):
    """Dice overlap; two empty masks agree perfectly (1.0)."""
    _check(a, b)
    na, nb = a.count, b.count
    if na + nb == 0:
        return 1.0
    return 2.0 * np.count_nonzero(a.bits & b.bits) / (na + nb)


def _directed(a, b, spacing):
    # distance from every voxel to the nearest voxel of b, read off on a
    dist = ndimage.distance_transform_edt(~b, sampling=spacing)
    return dist[a]


def hausdorff(a: BinaryMask, b: BinaryMask, percentile=None):
    """Symmetric Hausdorff distance between the voxel-centre sets, in cm.

    Zero for two empty masks and infinite when exactly one is empty. With
    ``percentile`` (0-100) the given percentile of the pooled directed
    distances replaces the maximum.
    """
    _check(a, b)
    if a.count == 0 and b.count == 0:
        return 0.0
    if a.count == 0 or b.count == 0:
        return float("inf")
    dab = _directed(a.bits, b.bits, a.spacing)
    dba = _directed(b.bits, a.bits, a.spacing)
    if percentile is None:
        return float(max(dab.max(), dba.max()))
    if not 0 <= percentile <= 100:
        raise ParameterError(f"percentile must lie in [0, 100], got {percentile}")
    return float(np.percentile(np.concatenate([dab, dba]), percentile))


def _check(a, b):
    if a.dims != b.dims or a.spacing != b.spacing:
        raise ShapeError(f"mask grids differ: {a.dims}@{a.spacing} vs {b.dims}@{b.spacing}")


def compare(a: BinaryMask, b: BinaryMask, percentile=None) -> SegMetrics:
    """All agreement metrics; ``a`` is the reference for sensitivity/specificity.

    Sensitivity (specificity) is 1 when ``a`` has no foreground (background)
    voxels, since there is nothing to miss.
    """
    _check(a, b)
    tp = np.count_nonzero(a.bits & b.bits)
    fn = np.count_nonzero(a.bits & ~b.bits)
    fp = np.count_nonzero(~a.bits & b.bits)
    tn = a.bits.size - tp - fn - fp
    d = dice(a, b)
    va, vb = mask_volume_cm3(a), mask_volume_cm3(b)
    return SegMetrics(
        dice=d,
        jaccard=d / (2.0 - d),
        volume_a_cm3=va,
        volume_b_cm3=vb,
        agreement_pct=agreement_pct(va, vb),
        hausdorff_cm=hausdorff(a, b, percentile),
        sensitivity=tp / (tp + fn) if tp + fn else 1.0,
        specificity=tn / (tn + fp) if tn + fp else 1.0,
    )


def ball(r):
    """Digital ball structuring element of integer voxel radius ``r``."""
    r = int(r)
    g = np.arange(-r, r + 1)
    x, y, z = np.meshgrid(g, g, g, indexing="ij")
    return x * x + y * y + z * z <= r * r


def baseline_segment(v: Volume, threshold: float, erode_r: int = 1, dilate_r: int = 1) -> BinaryMask:
    """Threshold, erode, keep the largest 26-connected component, dilate.

    Voxels strictly above ``threshold`` are foreground. Radii are in voxels;
    zero skips the operation. Ties between equally large components go to
    the one met first in C (z-fastest) scan order.
    """
    for name, r in (("erode_r", erode_r), ("dilate_r", dilate_r)):
        if int(r) != r or r < 0:
            raise ParameterError(f"{name} must be a nonnegative integer, got {r}")
    m = v.data > threshold
    if erode_r > 0:
        m = ndimage.binary_erosion(m, structure=ball(erode_r))
    if not m.any():
        raise EmptyResultError("no voxels left after thresholding and erosion")
    labels, n = ndimage.label(m, structure=np.ones((3, 3, 3), dtype=bool))
    if n > 1:
        sizes = np.bincount(labels.ravel())[1:]
        m = labels == int(np.argmax(sizes)) + 1
    if dilate_r > 0:
        m = ndimage.binary_dilation(m, structure=ball(dilate_r))
    return BinaryMask(m, v.spacing)
