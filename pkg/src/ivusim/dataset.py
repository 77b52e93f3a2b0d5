"""Dataset ingestion: contour annotations, tissue masks, echogenicity maps,
polar-domain augmentation and synthetic phantoms for dataset-free runs.

Tissue masks exist in both domains. Cartesian masks come from even-odd
polygon rasterization of the two contours; polar masks are built directly
from the per-angle boundary radii so the radial ordering
LUMEN < MEDIA < EXTERNA holds along every ray by construction.
"""
from __future__ import annotations

import glob
import logging
import os
import re
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .imaging import CartesianImage, TissueClass, read_png

log = logging.getLogger(__name__)

ROTATION_STEPS = 12
RADIAL_SHIFT_FRACTION = 0.02


def _points_in_polygon(xs, ys, poly):
    """Vectorized even-odd rule test; xs/ys broadcast, poly is (V, 2)."""
    inside = np.zeros(np.broadcast(xs, ys).shape, dtype=bool)
    v = np.asarray(poly, dtype=np.float64)
    for k in range(len(v)):
        x1, y1 = v[k]
        x2, y2 = v[(k + 1) % len(v)]
        if y1 == y2:
            continue
        crosses = (y1 > ys) != (y2 > ys)
        x_cross = x1 + (ys - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (xs < x_cross)
    return inside


def _point_on_boundary(x, y, poly, tol=1e-9):
    v = np.asarray(poly, dtype=np.float64)
    a = v
    b = np.roll(v, -1, axis=0)
    ab = b - a
    ap = np.stack([x - a[:, 0], y - a[:, 1]], axis=1)
    denom = np.maximum((ab**2).sum(axis=1), tol)
    t = np.clip((ap * ab).sum(axis=1) / denom, 0.0, 1.0)
    closest = a + t[:, None] * ab
    d2 = ((np.array([x, y]) - closest) ** 2).sum(axis=1)
    return bool((d2 <= tol**2).any())


@dataclass(frozen=True)
class ContourAnnotation:
    """Closed lumen and EEL contours in Cartesian pixel coordinates."""

    lumen_contour: np.ndarray
    eel_contour: np.ndarray
    source_image_id: str = ""

    def __post_init__(self):
        lumen = np.asarray(self.lumen_contour, dtype=np.float64)
        eel = np.asarray(self.eel_contour, dtype=np.float64)
        for name, c in (("lumen", lumen), ("eel", eel)):
            if c.ndim != 2 or c.shape[1] != 2 or c.shape[0] < 3:
                raise ValueError(
                    f"{name} contour must be (>=3, 2) points, got shape {c.shape}"
                )
        for x, y in lumen:
            if _point_on_boundary(x, y, eel) or not _points_in_polygon(
                np.array(x), np.array(y), eel
            ):
                raise ValueError(
                    f"nesting violation in {self.source_image_id or 'annotation'}: "
                    f"lumen vertex ({x:.2f}, {y:.2f}) is not strictly inside "
                    f"the EEL contour"
                )
        object.__setattr__(self, "lumen_contour", lumen)
        object.__setattr__(self, "eel_contour", eel)


@dataclass(frozen=True)
class TissueLabelMask:
    """Per-pixel tissue class grid; domain is 'polar' or 'cart'."""

    data: np.ndarray
    domain: str

    def __post_init__(self):
        data = np.asarray(self.data)
        if self.domain not in ("polar", "cart"):
            raise ValueError(f"domain must be 'polar' or 'cart', got {self.domain!r}")
        if data.ndim != 2:
            raise ValueError(f"mask must be 2D, got shape {data.shape}")
        if not np.isin(data, [int(c) for c in TissueClass]).all():
            raise ValueError("mask contains values outside the tissue classes")
        object.__setattr__(self, "data", data.astype(np.uint8))

    def class_counts(self) -> dict[TissueClass, int]:
        return {c: int((self.data == c).sum()) for c in TissueClass}


@dataclass(frozen=True)
class EchogenicityMap:
    """Per-pixel mean reflectivity in the polar domain (finite, >= 0)."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ValueError(f"echogenicity map must be 2D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("echogenicity map contains non-finite values")
        if data.min() < 0:
            raise ValueError(f"echogenicity must be >= 0, min is {data.min():.4g}")
        object.__setattr__(self, "data", data)


@dataclass(frozen=True)
class DatasetSplit:
    train_ids: tuple
    test_ids: tuple

    def __post_init__(self):
        overlap = set(self.train_ids) & set(self.test_ids)
        if overlap:
            raise ValueError(f"split is not disjoint: {sorted(overlap)[:5]}")


# ---------------------------------------------------------------------------
# Rasterization

def rasterize_mask(ann: ContourAnnotation, side: int) -> TissueLabelMask:
    """Label a side x side Cartesian grid: inside lumen -> LUMEN, inside EEL
    but not lumen -> MEDIA, else EXTERNA (even-odd interior rule, pixel
    centers at index + 0.5).
    """
    if side < 2:
        raise ValueError(f"side must be >= 2, got {side}")
    xs = (np.arange(side) + 0.5)[np.newaxis, :]
    ys = (np.arange(side) + 0.5)[:, np.newaxis]
    in_lumen = _points_in_polygon(xs, ys, ann.lumen_contour)
    in_eel = _points_in_polygon(xs, ys, ann.eel_contour)
    data = np.full((side, side), int(TissueClass.EXTERNA), dtype=np.uint8)
    data[in_eel] = int(TissueClass.MEDIA)
    data[in_lumen] = int(TissueClass.LUMEN)
    return TissueLabelMask(data, domain="cart")


def _ray_crossing_radius(poly, center, alpha):
    # Largest positive-t crossing of ray center + t*(cos a, sin a) with the
    # polygon boundary; 0.0 if the ray never crosses.
    v = np.asarray(poly, dtype=np.float64)
    a = v
    b = np.roll(v, -1, axis=0)
    dx, dy = np.cos(alpha), np.sin(alpha)
    ex = b[:, 0] - a[:, 0]
    ey = b[:, 1] - a[:, 1]
    denom = dx * ey - dy * ex
    best = 0.0
    eps = 1e-12
    for k in range(len(v)):
        if denom[k] == 0.0:
            continue
        rx = a[k, 0] - center[0]
        ry = a[k, 1] - center[1]
        t = (rx * ey[k] - ry * ex[k]) / denom[k]
        s = (rx * dy - ry * dx) / denom[k]
        # closed interval with slack so rays through a vertex register on at
        # least one of the two adjacent edges; max() dedupes double hits
        if t > 0.0 and -eps <= s <= 1.0 + eps:
            best = max(best, t)
    return best


def contour_radii(ann: ContourAnnotation, side: int, n_angular: int):
    """Per-angle boundary radii (lumen, eel) as fractions of side/2, measured
    from the image center along the polar angle grid.
    """
    center = (side / 2.0, side / 2.0)
    radius = side / 2.0
    alphas = 2.0 * np.pi * np.arange(n_angular) / n_angular
    r_lumen = np.array(
        [_ray_crossing_radius(ann.lumen_contour, center, a) for a in alphas]
    )
    r_eel = np.array(
        [_ray_crossing_radius(ann.eel_contour, center, a) for a in alphas]
    )
    if np.any(r_lumen >= r_eel):
        j = int(np.argmax(r_lumen - r_eel))
        raise ValueError(
            f"contours of {ann.source_image_id or 'annotation'} are not "
            f"radially nested at angle index {j}"
        )
    return r_lumen / radius, r_eel / radius


def mask_from_boundary_radii(r_lumen, r_eel, n_radial: int) -> TissueLabelMask:
    """Build a polar mask from per-angle boundary radii in [0, 1] units."""
    r_lumen = np.asarray(r_lumen, dtype=np.float64)
    r_eel = np.asarray(r_eel, dtype=np.float64)
    if r_lumen.shape != r_eel.shape or r_lumen.ndim != 1:
        raise ValueError("boundary radii must be matching 1D arrays")
    if np.any(r_lumen >= r_eel):
        raise ValueError("lumen boundary must lie strictly inside the EEL boundary")
    rows = (np.arange(n_radial, dtype=np.float64) / n_radial)[:, np.newaxis]
    data = np.full((n_radial, r_lumen.size), int(TissueClass.EXTERNA), dtype=np.uint8)
    data[rows < r_eel[np.newaxis, :]] = int(TissueClass.MEDIA)
    data[rows < r_lumen[np.newaxis, :]] = int(TissueClass.LUMEN)
    return TissueLabelMask(data, domain="polar")


def rasterize_mask_polar(
    ann: ContourAnnotation, side: int, n_radial: int, n_angular: int
) -> TissueLabelMask:
    """Polar-domain mask for an annotation whose contours live on a
    side x side Cartesian frame.
    """
    r_lumen, r_eel = contour_radii(ann, side, n_angular)
    return mask_from_boundary_radii(r_lumen, r_eel, n_radial)


# ---------------------------------------------------------------------------
# Echogenicity

DEFAULT_ECHOGENICITY = {
    TissueClass.LUMEN: (0.05, 0.1),
    TissueClass.MEDIA: (0.35, 0.1),
    TissueClass.EXTERNA: (0.60, 0.1),
}


def mask_to_echogenicity(
    mask: TissueLabelMask,
    params: dict[TissueClass, tuple[float, float]] | None = None,
    seed: int = 0,
) -> EchogenicityMap:
    """Assign per-class mean reflectivity with optional within-class texture.

    Pixel value = class_mean * (1 + spread * u) with u ~ Uniform[-1, 1]
    drawn from a generator seeded with ``seed``; bit-reproducible.
    """
    if mask.domain != "polar":
        raise ValueError("echogenicity maps are built from polar-domain masks")
    params = DEFAULT_ECHOGENICITY if params is None else params
    for cls, (mean, _) in params.items():
        if mean < 0:
            raise ValueError(f"negative class mean for {TissueClass(cls).name}: {mean}")
    rng = np.random.default_rng(seed)
    u = rng.uniform(-1.0, 1.0, size=mask.data.shape)
    out = np.zeros(mask.data.shape, dtype=np.float64)
    for cls, (mean, spread) in params.items():
        sel = mask.data == int(cls)
        out[sel] = mean * (1.0 + spread * u[sel])
    return EchogenicityMap(out)


def calibrate_echogenicity(
    images, masks, spread: float = 0.1
) -> dict[TissueClass, tuple[float, float]]:
    """Derive class means from per-region mean intensities of annotated images."""
    sums = {c: 0.0 for c in TissueClass}
    counts = {c: 0 for c in TissueClass}
    for img, mask in zip(images, masks):
        for c in TissueClass:
            sel = mask.data == int(c)
            sums[c] += float(img.data[sel].sum())
            counts[c] += int(sel.sum())
    out = {}
    for c in TissueClass:
        if counts[c] == 0:
            raise ValueError(f"no {c.name} pixels in the calibration set")
        out[c] = (sums[c] / counts[c], spread)
    return out


# ---------------------------------------------------------------------------
# Augmentation

def rotation_shift(step: int, n_angular: int) -> int:
    """Column shift realizing rotation step ``step`` out of ROTATION_STEPS."""
    return int(round(step * n_angular / ROTATION_STEPS)) % n_angular


def radial_shift_rows(n_radial: int) -> int:
    return int(round(RADIAL_SHIFT_FRACTION * n_radial))


def rotate_polar(mask: TissueLabelMask, step: int) -> TissueLabelMask:
    if mask.domain != "polar":
        raise ValueError("rotation by column shift applies to polar masks")
    return TissueLabelMask(
        np.roll(mask.data, rotation_shift(step, mask.data.shape[1]), axis=1),
        domain="polar",
    )


def shift_radial(mask: TissueLabelMask, rows: int) -> TissueLabelMask:
    """Translate along the radial axis by ``rows`` with edge replication."""
    if mask.domain != "polar":
        raise ValueError("radial shifts apply to polar masks")
    data = mask.data
    out = np.empty_like(data)
    if rows == 0:
        out[:] = data
    elif rows > 0:
        out[rows:] = data[:-rows]
        out[:rows] = data[0]
    else:
        out[:rows] = data[-rows:]
        out[rows:] = data[-1]
    return TissueLabelMask(out, domain="polar")


def augment_plan(n_radial: int) -> list[tuple[int, int]]:
    """The 36 (rotation_step, radial_shift_rows) variants, original first."""
    k = radial_shift_rows(n_radial)
    return [(step, shift) for step in range(ROTATION_STEPS) for shift in (0, k, -k)]


def augment(mask: TissueLabelMask) -> list[TissueLabelMask]:
    """12 rotations x {no shift, +2%, -2% radial translation} = 36 variants."""
    out = []
    for step, shift in augment_plan(mask.data.shape[0]):
        out.append(shift_radial(rotate_polar(mask, step), shift))
    return out


# ---------------------------------------------------------------------------
# Synthetic phantoms

@dataclass(frozen=True)
class PhantomParams:
    """Radius ranges are fractions of the valid radius; harmonics perturb the
    two boundary circles into smooth closed curves.
    """

    n_radial: int = 256
    n_angular: int = 256
    lumen_radius: tuple[float, float] = (0.18, 0.32)
    eel_radius: tuple[float, float] = (0.48, 0.68)
    n_harmonics: int = 4
    harmonic_amplitude: float = 0.06
    echogenicity: dict[TissueClass, tuple[float, float]] = field(
        default_factory=lambda: dict(DEFAULT_ECHOGENICITY)
    )

    def __post_init__(self):
        worst_lumen = self.lumen_radius[1] * (1.0 + self.harmonic_amplitude)
        best_eel = self.eel_radius[0] * (1.0 - self.harmonic_amplitude)
        if worst_lumen >= best_eel:
            raise ValueError(
                f"infeasible radius ranges: lumen can reach {worst_lumen:.3f} "
                f"but EEL can shrink to {best_eel:.3f}"
            )
        if not 0 < self.lumen_radius[0] <= self.lumen_radius[1]:
            raise ValueError(f"bad lumen radius range {self.lumen_radius}")
        if not self.eel_radius[0] <= self.eel_radius[1] < 1.0:
            raise ValueError(f"bad EEL radius range {self.eel_radius}")


def _harmonic_boundary(rng, base_range, n_harmonics, amplitude, n_angular):
    base = rng.uniform(*base_range)
    alphas = 2.0 * np.pi * np.arange(n_angular) / n_angular
    wobble = np.zeros(n_angular)
    if n_harmonics > 0:
        # amplitude budget split across harmonics so the total stays bounded
        weights = rng.uniform(-1.0, 1.0, size=n_harmonics) / n_harmonics
        phases = rng.uniform(0.0, 2.0 * np.pi, size=n_harmonics)
        for h in range(n_harmonics):
            wobble += weights[h] * np.cos((h + 1) * alphas + phases[h])
    return base * (1.0 + amplitude * wobble)


def synth_phantom(
    seed: int, params: PhantomParams | None = None
) -> tuple[TissueLabelMask, EchogenicityMap]:
    """Random smooth vessel phantom: two nested closed boundary curves from a
    low-order harmonic series, plus its echogenicity map. Deterministic per seed.
    """
    params = params or PhantomParams()
    rng = np.random.default_rng(seed)
    r_lumen = _harmonic_boundary(
        rng, params.lumen_radius, params.n_harmonics,
        params.harmonic_amplitude, params.n_angular,
    )
    r_eel = _harmonic_boundary(
        rng, params.eel_radius, params.n_harmonics,
        params.harmonic_amplitude, params.n_angular,
    )
    mask = mask_from_boundary_radii(r_lumen, r_eel, params.n_radial)
    tex_seed = int(rng.integers(0, 2**63 - 1))
    emap = mask_to_echogenicity(mask, params.echogenicity, seed=tex_seed)
    return mask, emap


# ---------------------------------------------------------------------------
# Loader

@dataclass(frozen=True)
class DatasetLayout:
    """Filesystem layout of an IVUS-challenge-style dataset.

    Contour files hold whitespace-separated ``x y`` pairs, one per line; the
    ``{id}`` placeholder in the contour patterns is the image filename stem.
    """

    image_dir: str = "images"
    image_pattern: str = "*.png"
    lumen_contour_pattern: str = "contours/lum_{id}.txt"
    eel_contour_pattern: str = "contours/eel_{id}.txt"
    patient_id_regex: str = r"frame_(\d+)_"


class DatasetItem(NamedTuple):
    image_id: str
    image: "CartesianImage"
    annotation: "ContourAnnotation | None"


@dataclass(frozen=True)
class LoadedDataset:
    items: list
    n_images: int
    n_annotated: int
    n_skipped: int


def _read_contour(path) -> np.ndarray:
    points = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            points.append((float(parts[0]), float(parts[1])))
    return np.asarray(points, dtype=np.float64)


def load_dataset(root, layout: DatasetLayout | None = None) -> LoadedDataset:
    """Load every image under the layout; attach an annotation wherever both
    contour files exist and are valid. Unreadable images are skipped with a
    warning; malformed contours drop only the annotation.
    """
    layout = layout or DatasetLayout()
    image_glob = os.path.join(root, layout.image_dir, layout.image_pattern)
    items = []
    n_annotated = 0
    n_skipped = 0
    for path in sorted(glob.glob(image_glob)):
        image_id = os.path.splitext(os.path.basename(path))[0]
        try:
            img = CartesianImage(read_png(path))
        except Exception as exc:
            log.warning("skipping unreadable image %s: %s", path, exc)
            n_skipped += 1
            continue
        ann = None
        lum_path = os.path.join(root, layout.lumen_contour_pattern.format(id=image_id))
        eel_path = os.path.join(root, layout.eel_contour_pattern.format(id=image_id))
        if os.path.exists(lum_path) and os.path.exists(eel_path):
            try:
                ann = ContourAnnotation(
                    _read_contour(lum_path), _read_contour(eel_path), image_id
                )
            except (ValueError, IndexError) as exc:
                log.warning("rejecting annotation for %s: %s", image_id, exc)
                ann = None
        if ann is not None:
            n_annotated += 1
        items.append(DatasetItem(image_id, img, ann))
    log.info(
        "loaded %d images (%d annotated, %d skipped) from %s",
        len(items), n_annotated, n_skipped, root,
    )
    return LoadedDataset(items, len(items), n_annotated, n_skipped)


def split_by_patient(
    image_ids, test_patients, patient_id_regex: str = r"frame_(\d+)_"
) -> DatasetSplit:
    """Hold out whole patients for testing."""
    pat = re.compile(patient_id_regex)
    test_patients = {str(p) for p in test_patients}
    train, test = [], []
    for image_id in image_ids:
        m = pat.search(image_id)
        if m is None:
            raise ValueError(
                f"image id {image_id!r} does not match {patient_id_regex!r}"
            )
        (test if m.group(1).lstrip("0") in test_patients
         or m.group(1) in test_patients else train).append(image_id)
    return DatasetSplit(tuple(train), tuple(test))
