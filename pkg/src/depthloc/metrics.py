"""Overlap, surface-distance, and offset metrics plus a paired sign test.

Conventions, applied uniformly:

* Dice of two empty masks is 1; empty against non-empty is 0.
* A boundary pixel is a foreground pixel with at least one 4-neighbour
  that is background; pixels beyond the image border count as background.
* ASSD averages the two directed mean nearest-boundary distances, with
  coordinates scaled per axis by the pixel spacing in millimetres.
* Bounding boxes use pixel-edge coordinates: a box covering pixel columns
  ``[i0, i1]`` spans ``i0 * sx`` to ``(i1 + 1) * sx``.
* The offset error (DOE) of a prediction is the largest absolute offset
  among the four box sides (left, right, top, bottom).
* ``percentile95`` interpolates linearly at rank ``1 + 0.95 * (n - 1)``.
* The Wilcoxon signed-rank test drops zero differences, averages tied
  ranks, and uses the exact null distribution up to 12 pairs, switching
  to a tie-corrected normal approximation with continuity correction
  beyond that. Fewer than five non-zero differences is an error.

An organ counts as *undetected* in a case when the prediction is empty
while the reference is not; such records contribute a Dice of 0 but are
excluded from distance and offset statistics.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .voldata import ORGAN_NAMES, GridInvariantError, MaskStack


class EmptyMaskError(ValueError):
    """A metric that needs a non-empty mask received an empty one."""


class TooFewPairsError(ValueError):
    """The signed-rank test needs at least five non-zero differences."""


def _as_mask(mask):
    m = np.asarray(mask)
    if m.ndim != 2:
        raise GridInvariantError("expected a 2D mask")
    return m.astype(bool)


def dice(a, b):
    """Dice overlap 2|A∩B| / (|A| + |B|); two empty masks score 1."""

    a = _as_mask(a)
    b = _as_mask(b)
    if a.shape != b.shape:
        raise GridInvariantError("masks must share one grid")
    sa = int(a.sum())
    sb = int(b.sum())
    if sa + sb == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / (sa + sb)


_PLUS2 = ndimage.generate_binary_structure(2, 1)


def boundary(mask):
    """Coordinates (N, 2) of foreground pixels with a 4-neighbour background.

    The image border counts as background, so foreground pixels on the
    edge of the grid are boundary pixels.
    """

    m = _as_mask(mask)
    if not m.any():
        raise EmptyMaskError("mask has no foreground; no boundary exists")
    interior = ndimage.binary_erosion(m, structure=_PLUS2, border_value=0)
    return np.argwhere(m & ~interior)


def assd(a, b, spacing):
    """Average symmetric surface distance between two masks, in mm.

    Mean over boundary pixels of A of the nearest-boundary-of-B Euclidean
    distance, averaged with the opposite direction. Pixel coordinates are
    scaled per axis by ``spacing``.
    """

    sp = np.asarray(spacing, dtype=np.float64)
    if sp.shape != (2,) or (sp <= 0).any():
        raise GridInvariantError("spacing must be two positive floats")
    pa = boundary(a) * sp
    pb = boundary(b) * sp
    d_ab = cKDTree(pb).query(pa)[0].mean()
    d_ba = cKDTree(pa).query(pb)[0].mean()
    return float(0.5 * (d_ab + d_ba))


@dataclass(frozen=True)
class BBox2D:
    """Axis-aligned box in mm, pixel-edge convention (left < right, top < bottom)."""

    left: float
    right: float
    top: float
    bottom: float


def bbox(mask, spacing):
    """Tight bounding box of a non-empty mask in mm.

    Left/right bound the occupied X range, top/bottom the occupied Z
    range; the far edge of the last pixel is included, so a single pixel
    (i, j) at spacing (sx, sz) spans [i*sx, (i+1)*sx] x [j*sz, (j+1)*sz].
    """

    m = _as_mask(mask)
    if not m.any():
        raise EmptyMaskError("cannot take the bounding box of an empty mask")
    sx, sz = float(spacing[0]), float(spacing[1])
    xs, zs = np.nonzero(m)
    return BBox2D(
        left=float(xs.min()) * sx,
        right=float(xs.max() + 1) * sx,
        top=float(zs.min()) * sz,
        bottom=float(zs.max() + 1) * sz,
    )


def doe(reference, predicted):
    """Detection offset error: the largest absolute side offset in mm."""

    return max(
        abs(predicted.left - reference.left),
        abs(predicted.right - reference.right),
        abs(predicted.top - reference.top),
        abs(predicted.bottom - reference.bottom),
    )


def percentile95(values):
    """95th percentile with linear interpolation at rank 1 + 0.95*(n - 1)."""

    vals = np.sort(np.asarray(values, dtype=np.float64))
    if vals.size == 0:
        raise GridInvariantError("percentile of an empty sequence")
    pos = 0.95 * (vals.size - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, vals.size - 1)
    frac = pos - lo
    return float(vals[lo] * (1.0 - frac) + vals[hi] * frac)


def _average_ranks(values):
    # Rank from 1; tied values share the mean of their positions.
    _, inverse, counts = np.unique(values, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    starts = ends - counts + 1
    return ((starts + ends) / 2.0)[inverse]


def wilcoxon_signed_rank(x, y):
    """Two-sided paired signed-rank test; returns (W, p).

    Zero differences are dropped; |differences| are ranked with tie
    averaging; W is the smaller of the positive- and negative-rank sums.
    With n <= 12 retained pairs the p-value enumerates all 2^n sign
    assignments exactly; beyond that a normal approximation with tie
    correction and a 0.5 continuity correction is used.
    """

    d = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    if d.ndim != 1:
        raise GridInvariantError("expected paired 1D samples")
    d = d[d != 0.0]
    n = int(d.size)
    if n < 5:
        raise TooFewPairsError(f"only {n} non-zero differences; need at least 5")
    ranks = _average_ranks(np.abs(d))
    w_pos = float(ranks[d > 0].sum())
    w_neg = float(ranks[d < 0].sum())
    w = min(w_pos, w_neg)
    total = ranks.sum()

    if n <= 12:
        signs = (np.arange(1 << n)[:, None] >> np.arange(n)) & 1
        w_plus_all = signs @ ranks
        count = int((w_plus_all <= w).sum() + (w_plus_all >= total - w).sum())
        p = min(1.0, count / float(1 << n))
    else:
        _, counts = np.unique(np.abs(d), return_counts=True)
        mu = n * (n + 1) / 4.0
        sigma2 = n * (n + 1) * (2 * n + 1) / 24.0 - float(
            ((counts**3 - counts).sum()) / 48.0
        )
        gap = max(0.0, mu - w - 0.5)
        p = min(1.0, math.erfc(gap / math.sqrt(2.0 * sigma2)))
    return w, p


@dataclass(frozen=True)
class OrganRecord:
    """Per-case, per-organ evaluation result. Distances are None when undefined."""

    case_id: str
    organ: str
    dice: float
    assd_mm: float | None
    doe_mm: float | None
    detected: bool


def evaluate_case(case_id, predicted, reference):
    """Score one predicted stack against its reference stack."""

    if not isinstance(predicted, MaskStack) or not isinstance(reference, MaskStack):
        raise TypeError("evaluate_case expects MaskStack inputs")
    if predicted.organ_names != reference.organ_names:
        raise GridInvariantError("stacks name different organs")
    if predicted.dims != reference.dims or predicted.spacing != reference.spacing:
        raise GridInvariantError("stacks live on different grids")
    records = []
    for c, organ in enumerate(reference.organ_names):
        pred = predicted.channels[c].astype(bool)
        ref = reference.channels[c].astype(bool)
        has_pred = bool(pred.any())
        has_ref = bool(ref.any())
        detected = has_pred or not has_ref
        d = dice(pred, ref)
        if has_pred and has_ref:
            a = assd(pred, ref, reference.spacing)
            offset = doe(bbox(ref, reference.spacing), bbox(pred, predicted.spacing))
        else:
            a = None
            offset = None
        records.append(
            OrganRecord(
                case_id=case_id,
                organ=organ,
                dice=d,
                assd_mm=a,
                doe_mm=offset,
                detected=detected,
            )
        )
    return records


def evaluate_cases(case_ids, predictions, references):
    """Score many cases; returns (records, aggregate).

    ``aggregate`` maps each organ name, plus ``"pooled"``, to a row with
    dice mean/std, ASSD mean/std (detected cases only), the 95th
    percentile of DOE, and detection counts. The pooled dice and ASSD
    statistics summarize the 11 per-organ means (standard deviation across
    organs, ddof=1); the pooled DOE percentile pools every offset.
    """

    if not (len(case_ids) == len(predictions) == len(references)):
        raise GridInvariantError("case ids, predictions, and references disagree")
    if not case_ids:
        raise GridInvariantError("no cases to evaluate")
    records = []
    for cid, pred, ref in zip(case_ids, predictions, references):
        records.extend(evaluate_case(cid, pred, ref))
    return records, aggregate_records(records)


def _mean_std(values):
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return mean, std


def aggregate_records(records):
    organ_rows = {}
    all_doe = []
    for organ in ORGAN_NAMES:
        rows = [r for r in records if r.organ == organ]
        if not rows:
            raise GridInvariantError(f"no records for organ {organ!r}")
        dice_mean, dice_std = _mean_std([r.dice for r in rows])
        assds = [r.assd_mm for r in rows if r.assd_mm is not None]
        does = [r.doe_mm for r in rows if r.doe_mm is not None]
        all_doe.extend(does)
        assd_mean, assd_std = _mean_std(assds) if assds else (None, None)
        organ_rows[organ] = {
            "dice_mean": dice_mean,
            "dice_std": dice_std,
            "assd_mean_mm": assd_mean,
            "assd_std_mm": assd_std,
            "doe_p95_mm": percentile95(does) if does else None,
            "n_detected": sum(1 for r in rows if r.detected),
            "n_cases": len(rows),
        }
    organ_dice = [row["dice_mean"] for row in organ_rows.values()]
    organ_assd = [
        row["assd_mean_mm"] for row in organ_rows.values() if row["assd_mean_mm"] is not None
    ]
    dice_mean, dice_std = _mean_std(organ_dice)
    assd_mean, assd_std = _mean_std(organ_assd) if organ_assd else (None, None)
    pooled = {
        "dice_mean": dice_mean,
        "dice_std": dice_std,
        "assd_mean_mm": assd_mean,
        "assd_std_mm": assd_std,
        "doe_p95_mm": percentile95(all_doe) if all_doe else None,
        "n_detected": sum(row["n_detected"] for row in organ_rows.values()),
        "n_cases": sum(row["n_cases"] for row in organ_rows.values()),
    }
    aggregate = dict(organ_rows)
    aggregate["pooled"] = pooled
    return aggregate


def per_case_mean_dice(records):
    """Mean Dice across organs for each case, in first-seen case order."""

    per_case = {}
    for r in records:
        per_case.setdefault(r.case_id, []).append(r.dice)
    return {cid: float(np.mean(vals)) for cid, vals in per_case.items()}


REPORT_FIELDS = ("case_id", "organ", "dice", "assd_mm", "doe_mm", "detected")


def write_report_csv(path, records):
    """Per-case report: one row per (case, organ); blank cells mean undefined."""

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_FIELDS)
        for r in records:
            writer.writerow(
                [
                    r.case_id,
                    r.organ,
                    f"{r.dice:.6f}",
                    "" if r.assd_mm is None else f"{r.assd_mm:.6f}",
                    "" if r.doe_mm is None else f"{r.doe_mm:.6f}",
                    int(r.detected),
                ]
            )


def write_aggregate_json(path, aggregate, extra=None):
    """Aggregate table as JSON; ``extra`` merges provenance keys in."""

    payload = {"organs": {k: v for k, v in aggregate.items() if k != "pooled"}}
    payload["pooled"] = aggregate["pooled"]
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
