"""Stack-level brain-ROI aggregation.

Per-slice raw segmentation masks are noisy, so a stack's region of interest
is derived jointly: small masks are discarded as unreliable, the remaining
centroids are combined into an area-weighted center and spread, and the
final ROI is a circle that covers every retained mask.

The area weights are normalized (``w_i = A_i / sum(A)``), which makes the
center a convex combination of the retained centroids and leaves the result
invariant under a common rescaling of all areas.  The unnormalized variant
(weights ``A_i / |B|``) is available behind ``literal_area_weights`` for
comparison; it is not scale-invariant and its center is generally far
outside the centroid hull.

Per-mask radius ``r_i`` is the maximum distance from the mask's centroid to
any of its pixels, so a circle at (q_i, r_i) covers the whole mask, and the
aggregate radius ``r = sigma + max r_i`` errs on the side of keeping tissue.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .data import Dataset, Slice, group_by_stack
from .errors import ConfigError, NoReliableMasksError

logger = logging.getLogger(__name__)

# Default area threshold as a fraction of the image pixel count: rejects
# speckle while keeping small-brain slices.
DEFAULT_AREA_MIN_FRAC = 0.01

DEFAULT_STUB_THRESHOLD = 0.5


@dataclass(frozen=True)
class RoiConfig:
    """Mask retention threshold (pixel count)."""

    area_min: int

    def __post_init__(self) -> None:
        if self.area_min < 1:
            raise ConfigError("area_min must be >= 1")

    @staticmethod
    def from_fraction(image_size: int, frac: float = DEFAULT_AREA_MIN_FRAC) -> "RoiConfig":
        return RoiConfig(area_min=max(1, int(round(frac * image_size * image_size))))


@dataclass(eq=False)
class RawMask:
    """Statistics of one per-slice segmentation mask.

    ``centroid`` and ``radius`` are ``None`` for an empty mask (the
    undefined flag); ``area`` is the number of set pixels.
    """

    mask: np.ndarray
    area: int
    centroid: tuple[float, float] | None
    radius: float | None

    @property
    def defined(self) -> bool:
        return self.area > 0


@dataclass(frozen=True)
class ROICircle:
    """Aggregated circular ROI: center (row, col), centroid spread, radius."""

    center: tuple[float, float]
    spread: float
    radius: float


def mask_stats(mask: np.ndarray) -> RawMask:
    """Area, centroid and covering radius of a binary mask.

    The centroid is the unweighted mean pixel coordinate; the radius is the
    max Euclidean distance from the centroid to any set pixel.  An all-zero
    mask yields area 0 with centroid and radius flagged undefined.
    """
    m = np.asarray(mask).astype(bool)
    coords = np.argwhere(m)
    area = int(coords.shape[0])
    if area == 0:
        return RawMask(mask=m, area=0, centroid=None, radius=None)
    center = coords.mean(axis=0)
    d = np.sqrt(((coords - center) ** 2).sum(axis=1))
    return RawMask(
        mask=m,
        area=area,
        centroid=(float(center[0]), float(center[1])),
        radius=float(d.max()),
    )


def aggregate_stack_roi(
    masks: Sequence[RawMask],
    config: RoiConfig,
    *,
    literal_area_weights: bool = False,
) -> ROICircle:
    """Combine per-slice masks into one circular stack ROI.

    Masks below ``config.area_min`` are dropped as unreliable; the rest
    contribute their centroid with weight proportional to area.  Raises
    ``NoReliableMasksError`` when nothing survives the filter.
    """
    retained = [m for m in masks if m.area >= config.area_min]
    if not retained:
        raise NoReliableMasksError("no reliable masks in stack")
    areas = np.array([m.area for m in retained], dtype=np.float64)
    cents = np.array([m.centroid for m in retained], dtype=np.float64)
    radii = np.array([m.radius for m in retained], dtype=np.float64)
    if literal_area_weights:
        w = areas / len(retained)
    else:
        w = areas / areas.sum()
    q = (w[:, None] * cents).sum(axis=0)
    var = float((w * ((cents - q) ** 2).sum(axis=1)).sum())
    # var can come out a hair negative from cancellation when centroids agree
    sigma = float(np.sqrt(max(var, 0.0)))
    r = sigma + float(radii.max())
    return ROICircle(center=(float(q[0]), float(q[1])), spread=sigma, radius=r)


def rasterize_circle(circle: ROICircle, shape: tuple[int, int]) -> np.ndarray:
    """Boolean grid: pixel (i, j) set iff (i-qr)^2 + (j-qc)^2 <= r^2.

    Pixel centers sit at integer coordinates; portions of the circle outside
    the image are clipped by construction.
    """
    qr, qc = circle.center
    rr = np.arange(shape[0], dtype=np.float64)[:, None] - qr
    cc = np.arange(shape[1], dtype=np.float64)[None, :] - qc
    return rr**2 + cc**2 <= circle.radius**2


def mask_pixels(pixels: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Elementwise product of an image with a binary mask."""
    if pixels.shape != mask.shape:
        raise ValueError(f"shape mismatch: {pixels.shape} vs {mask.shape}")
    return pixels * mask.astype(pixels.dtype)


def apply_mask(s: Slice, mask: np.ndarray) -> Slice:
    """Zero a slice outside the mask, preserving its identity fields."""
    return Slice(
        pixels=mask_pixels(s.pixels, mask),
        stack_id=s.stack_id,
        slice_index=s.slice_index,
    )


def threshold_segmenter_stub(
    s: Slice | np.ndarray, threshold: float = DEFAULT_STUB_THRESHOLD
) -> np.ndarray:
    """Intensity-threshold brain segmenter standing in for a learned model.

    Keeps the largest 8-connected component of ``pixels >= threshold``.
    Good enough on the synthetic phantoms; the aggregation step is what
    absorbs its failures on corrupted slices.
    """
    if not 0.0 < threshold < 1.0:
        raise ConfigError("threshold must lie in (0, 1)")
    pixels = s.pixels if isinstance(s, Slice) else np.asarray(s)
    binary = pixels >= threshold
    if not binary.any():
        return np.zeros_like(binary)
    labels, n = ndimage.label(binary, structure=np.ones((3, 3), dtype=int))
    if n == 1:
        return binary
    sizes = ndimage.sum_labels(binary, labels, index=np.arange(1, n + 1))
    return labels == (int(np.argmax(sizes)) + 1)


def compute_stack_rois(
    dataset: Dataset,
    area_min_frac: float = DEFAULT_AREA_MIN_FRAC,
    threshold: float = DEFAULT_STUB_THRESHOLD,
    *,
    literal_area_weights: bool = False,
) -> dict[str, np.ndarray]:
    """Rasterized circular ROI per stack, from stub masks of every slice.

    A stack in which no mask survives the area filter (for instance, all
    slices miss the brain) falls back to a full-image mask with a warning.
    """
    size = dataset.image_size
    config = RoiConfig.from_fraction(size, area_min_frac)
    rois: dict[str, np.ndarray] = {}
    for stack_id, entries in group_by_stack(dataset).items():
        masks = [mask_stats(threshold_segmenter_stub(s, threshold)) for s, _ in entries]
        try:
            circle = aggregate_stack_roi(
                masks, config, literal_area_weights=literal_area_weights
            )
            rois[stack_id] = rasterize_circle(circle, (size, size))
        except NoReliableMasksError:
            logger.warning(
                "stack %s: no reliable masks, falling back to full-image ROI",
                stack_id,
            )
            rois[stack_id] = np.ones((size, size), dtype=bool)
    return rois
