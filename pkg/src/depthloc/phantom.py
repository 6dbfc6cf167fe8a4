"""Deterministic synthetic full-body phantoms with labelled organs.

A phantom is a supine body on a thin table slab, rendered into a regular
voxel grid. The body is a union of superellipsoids (torso, pelvis, legs,
neck, head); eleven organs are ellipsoids placed at fixed fractional
positions inside a torso-anchored frame, with sizes proportional to the
sampled torso dimensions and centres perturbed by truncated normal jitter.

Bodies are rendered at a fixed anatomical-to-grid scale chosen so the
tallest sampleable body fills 96 % of the grid height. Sampled parameters
stay in true millimetres; the renderer maps them onto the grid.

Organ masks are pairwise disjoint (earlier organs in the canonical order
win overlapping voxels) and strictly interior to the body mask. Vertical
ordering of bladder, hips, the pancreas/stomach group, heart, and lung top
is guaranteed by construction: placement gaps exceed the largest possible
jitter displacement.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .voldata import (
    ORGAN_NAMES,
    BinaryVolume,
    GridInvariantError,
    Volume,
    read_dvol_payload,
    write_dvol_payload,
    write_volume,
)

DEFAULT_DIMS = (96, 48, 192)
DEFAULT_SPACING = (4.0, 4.0, 4.0)

HEIGHT_RANGE_MM = (1500.0, 1950.0)
TORSO_WIDTH_RANGE_MM = (280.0, 420.0)
TORSO_DEPTH_RANGE_MM = (180.0, 300.0)
FAT_RANGE_MM = (5.0, 35.0)
LATERALITY_RANGE_MM = (-15.0, 15.0)
ORGAN_JITTER_SIGMA_MM = 8.0
BLADDER_JITTER_SIGMA_MM = 15.0
JITTER_CLAMP_SIGMAS = 1.5

#: Fraction of the grid height occupied by the tallest sampleable body.
RENDER_FILL = 0.96
#: Torso centre sits at this fraction of grid height / of body height.
TORSO_ANCHOR_GRID = 0.67
TORSO_CENTER_BODY = 0.68

TABLE_LAYERS = 3
TABLE_INTENSITY = 0.05
BODY_INTENSITY = 0.5
NOISE_AMPLITUDE = 0.01

MIN_ORGAN_VOXELS = 4
MAX_SAMPLE_ATTEMPTS = 16

# Body parts: half-extents carry a scale mode: "w" = rendered torso width,
# "d" = lean torso depth, "t" = torso depth plus fat, "h" = body height.
_BODY_PARTS = (
    # name, cx_w, cz_h, (rx, mode), (ry, mode), rz_h, exponent
    ("torso", 0.0, 0.68, (0.50, "w"), (0.50, "t"), 0.19, 2.5),
    ("pelvis", 0.0, 0.50, (0.42, "w"), (0.45, "t"), 0.13, 2.5),
    ("leg_l", 0.20, 0.27, (0.14, "w"), (0.32, "d"), 0.26, 2.0),
    ("leg_r", -0.20, 0.27, (0.14, "w"), (0.32, "d"), 0.26, 2.0),
    ("neck", 0.0, 0.875, (0.040, "h"), (0.045, "h"), 0.045, 2.0),
    ("head", 0.0, 0.935, (0.060, "h"), (0.068, "h"), 0.062, 2.0),
)

# Organs: (name, paired, cx_w, cy_d, cz_h, rx_w, ry_d, rz_h, contrast).
# x offsets/extents scale with torso width, y with torso depth, z with body
# height. The liver contrast anchors the volume's intensity range so that
# background noise stays below the downstream binarization threshold.
_ORGAN_SHAPES = (
    ("hips", True, 0.29, -0.05, 0.53, 0.145, 0.22, 0.035, 0.30),
    ("femurs", True, 0.20, 0.00, 0.40, 0.065, 0.11, 0.085, 0.28),
    ("vertebra", False, 0.0, -0.26, 0.62, 0.065, 0.095, 0.024, 0.35),
    ("heart", False, 0.10, 0.08, 0.775, 0.155, 0.22, 0.048, 0.20),
    ("lungs", True, 0.235, -0.02, 0.79, 0.155, 0.30, 0.075, -0.25),
    ("kidneys", True, 0.19, -0.18, 0.565, 0.085, 0.13, 0.045, 0.15),
    ("liver", False, -0.17, 0.03, 0.63, 0.26, 0.30, 0.058, 0.52),
    ("pancreas", False, 0.04, -0.03, 0.595, 0.16, 0.085, 0.028, 0.10),
    ("spleen", False, 0.28, -0.10, 0.615, 0.09, 0.14, 0.038, 0.18),
    ("stomach", False, 0.12, 0.10, 0.615, 0.14, 0.17, 0.048, -0.10),
    ("urinary_bladder", False, 0.0, 0.00, 0.44, 0.095, 0.12, 0.032, -0.15),
)

assert tuple(s[0] for s in _ORGAN_SHAPES) == ORGAN_NAMES

_GOLDEN = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1
_NOISE_SALT = 0xA5A55A5AD00DF00D


class PhantomFitError(ValueError):
    """The sampled body cannot fit in the grid at the given spacing."""


class DegenerateOrganError(ValueError):
    """A parameter draw produced an empty or near-empty organ mask."""


@dataclass(frozen=True)
class BodyParams:
    """Sampled body-shape parameters, all in true millimetres."""

    height_mm: float
    torso_width_mm: float
    torso_depth_mm: float
    fat_thickness_mm: float
    laterality_shift_mm: float
    organ_jitter_mm: tuple[tuple[float, float, float], ...]
    rng_seed: int

    def __post_init__(self):
        if len(self.organ_jitter_mm) != len(ORGAN_NAMES):
            raise GridInvariantError("need one jitter triple per organ")


@dataclass(frozen=True, eq=False)
class PhantomCase:
    """A rendered phantom: intensity volume plus one mask per organ."""

    case_id: str
    volume: Volume
    organ_labels: tuple[BinaryVolume, ...]
    params: BodyParams | None = None


def _splitmix64_finalize(z):
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def case_seed(master_seed, index):
    """Seed for case ``index``: output ``index`` of a splitmix64 stream."""

    state = (master_seed + (index + 1) * _GOLDEN) & _MASK64
    return _splitmix64_finalize(state)


def sample_params(rng_seed):
    """Draw body parameters from the documented ranges, keyed by the seed.

    Jitter offsets are normal draws clamped to ±1.5 sigma so that organ
    ordering and containment stay guaranteed.
    """

    rng = np.random.default_rng(rng_seed)
    height = rng.uniform(*HEIGHT_RANGE_MM)
    width = rng.uniform(*TORSO_WIDTH_RANGE_MM)
    depth = rng.uniform(*TORSO_DEPTH_RANGE_MM)
    fat = rng.uniform(*FAT_RANGE_MM)
    lat = rng.uniform(*LATERALITY_RANGE_MM)
    jitter = []
    for name in ORGAN_NAMES:
        sigma = BLADDER_JITTER_SIGMA_MM if name == "urinary_bladder" else ORGAN_JITTER_SIGMA_MM
        bound = JITTER_CLAMP_SIGMAS * sigma
        draw = np.clip(rng.normal(0.0, sigma, 3), -bound, bound)
        jitter.append(tuple(float(v) for v in draw))
    return BodyParams(
        height_mm=float(height),
        torso_width_mm=float(width),
        torso_depth_mm=float(depth),
        fat_thickness_mm=float(fat),
        laterality_shift_mm=float(lat),
        organ_jitter_mm=tuple(jitter),
        rng_seed=int(rng_seed),
    )


def _paint(mask, spacing, center, half, exponent):
    """OR a superellipsoid into ``mask``; voxel centres at (i + 0.5) * spacing."""

    dims = mask.shape
    slices = []
    axes = []
    for d in range(3):
        lo = int(np.floor((center[d] - half[d]) / spacing[d] - 0.5))
        hi = int(np.ceil((center[d] + half[d]) / spacing[d] - 0.5)) + 1
        lo = max(lo, 0)
        hi = min(hi, dims[d])
        if lo >= hi:
            return
        slices.append(slice(lo, hi))
        coords = (np.arange(lo, hi) + 0.5) * spacing[d]
        axes.append(np.abs((coords - center[d]) / half[d]))
    ux, uy, uz = axes
    if exponent == 2.0:
        tx, ty, tz = ux * ux, uy * uy, uz * uz
    else:
        # u**2.5 written as u*u*sqrt(u), cheaper than a general power
        tx = ux * ux * np.sqrt(ux)
        ty = uy * uy * np.sqrt(uy)
        tz = uz * uz * np.sqrt(uz)
    inside = tx[:, None, None] + ty[None, :, None] + tz[None, None, :] <= 1.0
    mask[tuple(slices)] |= inside


_CROSS3 = ndimage.generate_binary_structure(3, 1)


def build_phantom(params, dims=DEFAULT_DIMS, spacing=DEFAULT_SPACING, case_id="case"):
    """Render a :class:`PhantomCase` from body parameters.

    Raises :class:`PhantomFitError` when the body cannot fit in the grid and
    :class:`DegenerateOrganError` when a jitter draw leaves an organ with
    fewer than ``MIN_ORGAN_VOXELS`` voxels after carving.
    """

    dims = tuple(int(d) for d in dims)
    spacing = tuple(float(s) for s in spacing)
    extent = tuple(d * s for d, s in zip(dims, spacing))
    scale = RENDER_FILL * extent[2] / HEIGHT_RANGE_MM[1]

    h_mm = params.height_mm * scale
    w_mm = params.torso_width_mm * scale
    d_mm = params.torso_depth_mm * scale
    trunk_mm = (params.torso_depth_mm + params.fat_thickness_mm) * scale
    z_anchor = TORSO_ANCHOR_GRID * extent[2]

    def z_at(frac):
        return z_anchor + (frac - TORSO_CENTER_BODY) * h_mm

    xc = 0.5 * extent[0] + params.laterality_shift_mm * scale
    yc = TABLE_LAYERS * spacing[1] + 0.5 * trunk_mm

    feet = z_at(0.0)
    crown = z_at(1.0)
    if feet < spacing[2] or crown > extent[2] - spacing[2]:
        raise PhantomFitError(
            f"body of height {params.height_mm:.0f} mm does not fit the grid "
            f"Z extent {extent[2]:.0f} mm"
        )
    if xc - 0.5 * w_mm < spacing[0] or xc + 0.5 * w_mm > extent[0] - spacing[0]:
        raise PhantomFitError("torso width does not fit the grid X extent")
    if yc + 0.5 * trunk_mm > extent[1] - spacing[1]:
        raise PhantomFitError("torso depth does not fit the grid Y extent")

    scale_of = {"w": w_mm, "d": d_mm, "t": trunk_mm, "h": h_mm}
    body = np.zeros(dims, dtype=bool)
    for _, cx_w, cz_h, (rx, rx_mode), (ry, ry_mode), rz_h, expo in _BODY_PARTS:
        center = (xc + cx_w * w_mm, yc, z_at(cz_h))
        half = (rx * scale_of[rx_mode], ry * scale_of[ry_mode], rz_h * h_mm)
        _paint(body, spacing, center, half, expo)

    interior = ndimage.binary_erosion(body, structure=_CROSS3, border_value=0)
    occupied = np.zeros(dims, dtype=bool)
    organ_masks = []
    for k, (name, paired, cx, cy, cz, rx, ry, rz, _) in enumerate(_ORGAN_SHAPES):
        dx, dy, dz = params.organ_jitter_mm[k]
        half = (rx * w_mm, ry * d_mm, rz * h_mm)
        m = np.zeros(dims, dtype=bool)
        signs = (1.0, -1.0) if paired else (1.0,)
        for sgn in signs:
            center = (xc + sgn * cx * w_mm + dx, yc + cy * d_mm + dy, z_at(cz) + dz)
            _paint(m, spacing, center, half, 2.0)
        m &= interior
        m &= ~occupied
        if int(m.sum()) < MIN_ORGAN_VOXELS:
            raise DegenerateOrganError(
                f"{case_id}: organ {name!r} is empty or near-empty after carving"
            )
        occupied |= m
        organ_masks.append(m)

    values = np.zeros(dims, dtype=np.float32)
    values[body] = BODY_INTENSITY
    for m, shape in zip(organ_masks, _ORGAN_SHAPES):
        values[m] = BODY_INTENSITY + shape[8]
    values[:, :TABLE_LAYERS, :] = TABLE_INTENSITY
    noise_rng = np.random.default_rng(_splitmix64_finalize(params.rng_seed ^ _NOISE_SALT))
    values += noise_rng.uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE, dims).astype(np.float32)

    labels = tuple(
        BinaryVolume(dims, spacing, m.astype(np.uint8)) for m in organ_masks
    )
    return PhantomCase(
        case_id=case_id,
        volume=Volume(dims, spacing, values),
        organ_labels=labels,
        params=params,
    )


def sample_case(seed, dims=DEFAULT_DIMS, spacing=DEFAULT_SPACING, case_id="case"):
    """Sample parameters and render a case, resampling degenerate draws.

    Degenerate draws (an organ carved down to nothing) are rare; when one
    occurs, a fresh seed is derived from the failing one and the draw is
    repeated. Returns ``(case, seed_used)``.
    """

    attempt_seed = int(seed)
    for _ in range(MAX_SAMPLE_ATTEMPTS):
        params = sample_params(attempt_seed)
        try:
            return build_phantom(params, dims, spacing, case_id), attempt_seed
        except DegenerateOrganError:
            attempt_seed = _splitmix64_finalize(attempt_seed + _GOLDEN)
    raise DegenerateOrganError(
        f"{case_id}: no valid draw after {MAX_SAMPLE_ATTEMPTS} attempts"
    )


def label_codes(organ_labels):
    """Pack disjoint organ masks into one uint8 grid (0 = background)."""

    codes = np.zeros(organ_labels[0].dims, dtype=np.uint8)
    for k, lab in enumerate(organ_labels):
        m = lab.values.astype(bool)
        if (codes[m] != 0).any():
            raise GridInvariantError("organ masks overlap; cannot pack labels")
        codes[m] = k + 1
    return codes


def organ_labels_from_codes(codes, spacing):
    """Inverse of :func:`label_codes`."""

    codes = np.asarray(codes)
    if codes.max(initial=0) > len(ORGAN_NAMES):
        raise GridInvariantError("label grid holds an out-of-range organ code")
    return tuple(
        BinaryVolume(codes.shape, spacing, (codes == k + 1).astype(np.uint8))
        for k in range(len(ORGAN_NAMES))
    )


def volume_filename(case_id):
    return f"{case_id}_volume.dvol"


def labels_filename(case_id):
    return f"{case_id}_labels.dvol"


def write_case(out_dir, case):
    """Write a case's intensity volume and packed label grid."""

    out_dir = Path(out_dir)
    write_volume(out_dir / volume_filename(case.case_id), case.volume)
    write_dvol_payload(
        out_dir / labels_filename(case.case_id),
        label_codes(case.organ_labels),
        case.volume.spacing,
    )


def read_case(case_dir, case_id):
    """Load a case written by :func:`write_case` (params are not stored)."""

    case_dir = Path(case_dir)
    values, spacing = read_dvol_payload(case_dir / volume_filename(case_id))
    if values.dtype != np.float32:
        raise GridInvariantError(f"{case_id}: intensity volume must be float32")
    codes, lspacing = read_dvol_payload(case_dir / labels_filename(case_id))
    if codes.dtype != np.uint8:
        raise GridInvariantError(f"{case_id}: label grid must be uint8")
    if codes.shape != values.shape or lspacing != spacing:
        raise GridInvariantError(f"{case_id}: volume and label grids disagree")
    return PhantomCase(
        case_id=case_id,
        volume=Volume(values.shape, spacing, values),
        organ_labels=organ_labels_from_codes(codes, spacing),
    )


MANIFEST_FIELDS = ("case_id", "seed", "height_mm", "torso_width_mm", "torso_depth_mm")


def generate_cohort(out_dir, n, master_seed, dims=DEFAULT_DIMS, spacing=DEFAULT_SPACING):
    """Generate ``n`` cases into ``out_dir`` and write ``manifest.csv``.

    Case ``i`` is seeded by output ``i`` of a splitmix64 stream over the
    master seed. Returns the manifest rows as a list of dicts.
    """

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(int(n)):
        cid = f"case{i:04d}"
        case, used_seed = sample_case(case_seed(master_seed, i), dims, spacing, cid)
        write_case(out_dir, case)
        rows.append(
            {
                "case_id": cid,
                "seed": used_seed,
                "height_mm": case.params.height_mm,
                "torso_width_mm": case.params.torso_width_mm,
                "torso_depth_mm": case.params.torso_depth_mm,
            }
        )
    write_manifest(out_dir / "manifest.csv", rows)
    return rows


def write_manifest(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS)
        writer.writeheader()
        writer.writerows(rows)


def read_manifest(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != MANIFEST_FIELDS:
            raise GridInvariantError(f"{path}: unexpected manifest columns")
        return [dict(row) for row in reader]
