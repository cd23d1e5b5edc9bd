"""Masked PSNR/SSIM and the changed-area intersection mask.

Conventions recorded in report metadata: the PSNR peak is the whole-volume
maximum of the reference; SSIM uses a 3D Gaussian window (sigma 1.5,
truncated at 11^3) with C1=(0.01 L)^2, C2=(0.03 L)^2 where L is the
reference dynamic range; windows overhanging the border are renormalized
over the in-volume Gaussian mass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import reduce

import numpy as np
from scipy import ndimage

from .errors import DegenerateInputError
from .masks import head_mask
from .volume import BinaryMask, Volume3D, require_same_geometry

SSIM_SIGMA = 1.5
SSIM_WINDOW = 11

QUALITY_CONVENTIONS = {
    "psnr_peak": "whole-volume reference max",
    "ssim_window": f"gaussian sigma={SSIM_SIGMA} truncated {SSIM_WINDOW}^3",
    "ssim_border": "zero-padded gaussian renormalization",
}


def intersection_mask(masks) -> BinaryMask:
    """Voxelwise AND of one or more masks with identical geometry."""
    masks = list(masks)
    if not masks:
        raise ValueError("need at least one mask")
    for m in masks[1:]:
        require_same_geometry(masks[0], m, "masks")
    data = reduce(np.logical_and, (m.data for m in masks))
    return masks[0].with_data(data)


def psnr(reference: Volume3D, test: Volume3D, mask: BinaryMask) -> float:
    """10 log10(peak^2 / masked MSE) in dB; +inf when the masked MSE is 0."""
    require_same_geometry(reference, test, "reference and test volumes")
    require_same_geometry(reference, mask, "volume and mask")
    sel = mask.data
    if not sel.any():
        raise ValueError("mask is empty")
    peak = float(reference.data.max())
    mse = float(np.mean((reference.data[sel] - test.data[sel]) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_kernel():
    radius = SSIM_WINDOW // 2
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * SSIM_SIGMA**2))
    return k / k.sum()


def _local_mean(arr: np.ndarray, kernel: np.ndarray, mass: np.ndarray) -> np.ndarray:
    out = arr
    for axis in range(3):
        out = ndimage.correlate1d(out, kernel, axis=axis, mode="constant", cval=0.0)
    return out / mass


def ssim(reference: Volume3D, test: Volume3D, mask: BinaryMask) -> float:
    """Mean of the local SSIM map over voxels whose window center lies in the
    mask; value in [-1, 1]."""
    require_same_geometry(reference, test, "reference and test volumes")
    require_same_geometry(reference, mask, "volume and mask")
    if not mask.data.any():
        raise ValueError("mask is empty")
    x, y = reference.data, test.data
    dyn = float(x.max() - x.min())
    if dyn == 0.0:
        raise DegenerateInputError("reference has zero dynamic range")
    c1 = (0.01 * dyn) ** 2
    c2 = (0.03 * dyn) ** 2

    kernel = _gaussian_kernel()
    mass = _local_mean(np.ones_like(x), kernel, np.ones_like(x))
    mu_x = _local_mean(x, kernel, mass)
    mu_y = _local_mean(y, kernel, mass)
    var_x = _local_mean(x * x, kernel, mass) - mu_x * mu_x
    var_y = _local_mean(y * y, kernel, mass) - mu_y * mu_y
    cov = _local_mean(x * y, kernel, mass) - mu_x * mu_y

    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
        (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    )
    return float(ssim_map[mask.data].mean())


@dataclass(frozen=True)
class QualityRecord:
    """PSNR/SSIM for one candidate image over the whole head and the changed
    (face) area; the table-cell layout of the quality reports."""

    image: str
    psnr_head: float
    psnr_face: float
    ssim_head: float
    ssim_face: float


def quality_report(
    original: Volume3D,
    defaced: Volume3D,
    refaced: Volume3D,
    removed,
) -> list:
    """PSNR/SSIM of the defaced and refaced images against the original, over
    the original's head mask and over the changed-area mask.

    ``removed`` is one mask or an iterable of masks; with several, the
    changed area is their intersection (callers should name the masks used
    in report metadata).
    """
    if isinstance(removed, BinaryMask):
        removed = [removed]
    face = intersection_mask(removed)
    head = head_mask(original)
    records = []
    for name, img in (("defaced", defaced), ("refaced", refaced)):
        records.append(
            QualityRecord(
                image=name,
                psnr_head=psnr(original, img, head),
                psnr_face=psnr(original, img, face),
                ssim_head=ssim(original, img, head),
                ssim_face=ssim(original, img, face),
            )
        )
    return records
