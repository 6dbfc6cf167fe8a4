"""Coronal body-surface depth images and per-organ 2D targets from volumes.

The simulation chain:

1. normalize the intensity volume to [0, 1] over its full range,
2. binarize with a strict ``>`` threshold,
3. clean the binary mask with a 3D morphological opening (6-connected
   cross element),
4. extract an orthographic coronal depth image: for every (x, z) column the
   anterior-most foreground voxel index ``y_surf`` gives a raw height
   ``y_surf * spacing_y``; heights are rescaled to [0, 1] over surface
   pixels only (near = 1, far = 0), empty columns are 0,
5. zero every value below the far-suppression threshold (strict ``<``),
6. apply a 2D grayscale opening (min filter then max filter over a square
   window of side ``2r + 1``).

Erosion treats voxels outside the volume as foreground and dilation treats
them as background, so the binary opening never eats into the body at the
grid faces and stays anti-extensive and idempotent. The grayscale filters
replicate edge values, which likewise makes the opening a pure min/max over
in-image windows.

Organ targets are orthographic projections of the 3D organ masks onto the
same X-Z grid, one channel per organ, computed independently per organ.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .voldata import (
    ORGAN_NAMES,
    BinaryVolume,
    DepthImage,
    GridInvariantError,
    MaskStack,
    Volume,
)


class ConstantVolumeError(ValueError):
    """The volume has zero intensity range and cannot be normalized."""


class EmptyBodyError(ValueError):
    """Binarization left no foreground voxel to extract a surface from."""


@dataclass(frozen=True)
class PipelineConfig:
    """Thresholds and window radii for the simulation chain."""

    binarize_threshold: float = 0.02
    far_suppress_threshold: float = 0.3
    binary_opening_radius: int = 1
    gray_opening_radius: int = 1

    def __post_init__(self):
        if not 0.0 <= self.binarize_threshold < 1.0:
            raise GridInvariantError("binarize threshold must lie in [0, 1)")
        if not 0.0 <= self.far_suppress_threshold <= 1.0:
            raise GridInvariantError("far-suppression threshold must lie in [0, 1]")
        if self.binary_opening_radius < 0 or self.gray_opening_radius < 0:
            raise GridInvariantError("opening radii must be non-negative")


def normalize_volume(volume):
    """Rescale intensities to [0, 1] over the volume's full value range."""

    values = volume.values
    lo = float(values.min())
    hi = float(values.max())
    if hi == lo:
        raise ConstantVolumeError("volume is constant; intensity range is zero")
    out = (values - np.float32(lo)) / np.float32(hi - lo)
    return Volume(volume.dims, volume.spacing, np.clip(out, 0.0, 1.0))


def binarize(volume, threshold):
    """Foreground = values strictly greater than ``threshold``."""

    mask = (volume.values > np.float32(threshold)).astype(np.uint8)
    return BinaryVolume(volume.dims, volume.spacing, mask)


def cross_element(radius):
    """6-connected cross: voxels within city-block distance ``radius``."""

    if radius < 0:
        raise GridInvariantError("element radius must be non-negative")
    n = 2 * radius + 1
    g = np.abs(np.arange(n) - radius)
    return (g[:, None, None] + g[None, :, None] + g[None, None, :]) <= radius


def binary_opening(mask, radius):
    """Morphological opening with a cross element.

    Erosion counts out-of-volume voxels as foreground and dilation counts
    them as background; the result is still contained in the input and a
    second application changes nothing.
    """

    if radius == 0:
        return mask
    el = cross_element(radius)
    m = mask.values.astype(bool)
    eroded = ndimage.binary_erosion(m, structure=el, border_value=1)
    opened = ndimage.binary_dilation(eroded, structure=el, border_value=0)
    return BinaryVolume(mask.dims, mask.spacing, opened.astype(np.uint8))


def grayscale_opening(values, radius):
    """Min filter then max filter over a (2r+1) square with replicated edges."""

    if radius == 0:
        return values
    size = 2 * radius + 1
    eroded = ndimage.grey_erosion(values, size=(size, size), mode="nearest")
    return ndimage.grey_dilation(eroded, size=(size, size), mode="nearest")


def extract_depth(body, config):
    """Depth image of the anterior surface of a cleaned binary volume.

    For each (x, z) column the anterior-most foreground voxel (largest y)
    defines the surface. Heights are normalized over surface pixels only;
    a constant-height surface maps to all ones. Values below the
    far-suppression threshold are zeroed, then the grayscale opening runs.
    """

    m = body.values.astype(bool)
    nx, ny, nz = body.dims
    has_surface = m.any(axis=1)
    if not has_surface.any():
        raise EmptyBodyError("no foreground voxels; cannot extract a surface")

    ys = np.arange(ny, dtype=np.int64)[None, :, None]
    y_surf = np.max(np.where(m, ys, -1), axis=1)
    heights = y_surf.astype(np.float64) * body.spacing[1]

    h_vals = heights[has_surface]
    h_min = h_vals.min()
    h_max = h_vals.max()
    if h_max == h_min:
        depth = has_surface.astype(np.float64)
    else:
        depth = np.where(has_surface, (heights - h_min) / (h_max - h_min), 0.0)
    depth[depth < config.far_suppress_threshold] = 0.0
    depth = grayscale_opening(depth, config.gray_opening_radius)
    return DepthImage(
        (nx, nz), (body.spacing[0], body.spacing[2]), depth.astype(np.float32)
    )


def project_masks(organ_labels):
    """Project each 3D organ mask onto the coronal plane, one channel each."""

    if len(organ_labels) != len(ORGAN_NAMES):
        raise GridInvariantError(
            f"expected {len(ORGAN_NAMES)} organ masks, got {len(organ_labels)}"
        )
    first = organ_labels[0]
    channels = np.empty((len(organ_labels), first.dims[0], first.dims[2]), dtype=np.uint8)
    for c, lab in enumerate(organ_labels):
        if lab.dims != first.dims or lab.spacing != first.spacing:
            raise GridInvariantError("organ masks must share one grid")
        channels[c] = lab.values.any(axis=1)
    return MaskStack(
        ORGAN_NAMES,
        (first.dims[0], first.dims[2]),
        (first.spacing[0], first.spacing[2]),
        channels,
    )


def simulate_case(case, config=PipelineConfig()):
    """Run the full chain on a phantom case: returns (depth, target stack)."""

    normalized = normalize_volume(case.volume)
    body = binarize(normalized, config.binarize_threshold)
    body = binary_opening(body, config.binary_opening_radius)
    depth = extract_depth(body, config)
    masks = project_masks(case.organ_labels)
    return depth, masks
