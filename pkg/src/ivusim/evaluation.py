"""Speckle-statistics evaluation and the Visual Turing Test harness.

Region PMFs are 256-bin histograms of polar image intensities over [0, 1],
pooled across a seeded sample of annotated images. Divergences between
PMFs use the Jensen-Shannon divergence with base-2 logarithms, so every
value lands in [0, 1].
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from .dataset import TissueLabelMask
from .imaging import PolarImage, TissueClass, write_png

N_BINS = 256
LOG_BASE = 2

CLASS_PAIRS = (
    (TissueClass.LUMEN, TissueClass.MEDIA),
    (TissueClass.MEDIA, TissueClass.EXTERNA),
    (TissueClass.LUMEN, TissueClass.EXTERNA),
)


@dataclass(frozen=True)
class RegionPMF:
    """Normalized intensity histogram of one tissue region."""

    mass: np.ndarray
    region: TissueClass
    n_pixels: int

    def __post_init__(self):
        mass = np.asarray(self.mass, dtype=np.float64)
        if mass.ndim != 1:
            raise ValueError("mass must be a 1D array")
        if self.n_pixels <= 0:
            raise ValueError(f"empty region for class {self.region.name}")
        if np.any(mass < 0):
            raise ValueError("negative probability mass")
        if abs(mass.sum() - 1.0) > 1e-9:
            raise ValueError(f"mass sums to {mass.sum()}, expected 1")
        object.__setattr__(self, "mass", mass)


def _region_values(img: PolarImage, mask: TissueLabelMask, cls: TissueClass):
    if mask.domain != "polar":
        raise ValueError(f"expected a polar-domain mask, got {mask.domain!r}")
    if img.data.shape != mask.data.shape:
        raise ValueError(
            f"image grid {img.data.shape} does not match mask grid {mask.data.shape}"
        )
    return img.data[mask.data == int(cls)]


def pmf_from_values(values: np.ndarray, cls: TissueClass) -> RegionPMF:
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError(f"region {cls.name} is empty")
    counts, _ = np.histogram(values, bins=N_BINS, range=(0.0, 1.0))
    return RegionPMF(counts / values.size, cls, int(values.size))


def region_pmf(img: PolarImage, mask: TissueLabelMask, cls: TissueClass) -> RegionPMF:
    """PMF of image intensities inside one labeled region."""
    return pmf_from_values(_region_values(img, mask, cls), cls)


def pooled_region_pmf(items, cls: TissueClass) -> RegionPMF:
    """PMF over region pixels pooled across (image, mask) pairs."""
    chunks = [_region_values(img, mask, cls) for img, mask in items]
    return pmf_from_values(np.concatenate(chunks) if chunks else np.empty(0), cls)


def _as_mass(p) -> np.ndarray:
    return p.mass if isinstance(p, RegionPMF) else np.asarray(p, dtype=np.float64)


def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence, base-2 logs: 0.5*KL(p||m) + 0.5*KL(q||m)
    with m the midpoint distribution and 0*log 0 taken as 0."""
    pm, qm = _as_mass(p), _as_mass(q)
    if pm.shape != qm.shape:
        raise ValueError(f"PMF length mismatch: {pm.shape} vs {qm.shape}")
    m = 0.5 * (pm + qm)

    def kl(a):
        nz = a > 0
        return float(np.sum(a[nz] * np.log2(a[nz] / m[nz])))

    return 0.5 * kl(pm) + 0.5 * kl(qm)


# ---------------------------------------------------------------------------
# table reports


@dataclass(frozen=True)
class Table1Report:
    """Real-vs-simulated divergence per tissue class for one source."""

    per_class: dict[TissueClass, float]
    n_images: int
    seed: int
    log_base: int = LOG_BASE


@dataclass(frozen=True)
class Table2Report:
    """Pairwise between-class divergences within one source."""

    per_pair: dict[tuple[TissueClass, TissueClass], float]
    n_images: int
    seed: int
    log_base: int = LOG_BASE


def _sample_items(items, n: int, seed: int, what: str):
    items = list(items)
    if len(items) < n:
        raise ValueError(
            f"need at least {n} annotated {what} images, have {len(items)}"
        )
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(items), size=n, replace=False)
    return [items[i] for i in idx]


def table1_report(real, sim, n: int = 30, seed: int = 0) -> Table1Report:
    """Per-class JS divergence between pooled real and simulated PMFs.

    `real` and `sim` are sequences of (PolarImage, TissueLabelMask); n
    images are sampled from each with the given seed.
    """
    real_s = _sample_items(real, n, seed, "real")
    sim_s = _sample_items(sim, n, seed, "simulated")
    per_class = {}
    for cls in (TissueClass.LUMEN, TissueClass.MEDIA, TissueClass.EXTERNA):
        p = pooled_region_pmf(real_s, cls)
        q = pooled_region_pmf(sim_s, cls)
        per_class[cls] = js_divergence(p, q)
    return Table1Report(per_class, n, seed)


def table2_report(items, n: int = 30, seed: int = 0) -> Table2Report:
    """JS divergence between each pair of tissue-class PMFs in one corpus."""
    sample = _sample_items(items, n, seed, "annotated")
    pmfs = {
        cls: pooled_region_pmf(sample, cls)
        for cls in (TissueClass.LUMEN, TissueClass.MEDIA, TissueClass.EXTERNA)
    }
    per_pair = {(a, b): js_divergence(pmfs[a], pmfs[b]) for a, b in CLASS_PAIRS}
    return Table2Report(per_pair, n, seed)


def table1_to_text(rows: dict[str, Table1Report]) -> str:
    lines = ["region-wise JS divergence vs real (base-2 logs)"]
    lines.append(f"{'source':<16}{'lumen':>10}{'media':>10}{'externa':>10}")
    for name, rep in rows.items():
        lines.append(
            f"{name:<16}"
            f"{rep.per_class[TissueClass.LUMEN]:>10.4f}"
            f"{rep.per_class[TissueClass.MEDIA]:>10.4f}"
            f"{rep.per_class[TissueClass.EXTERNA]:>10.4f}"
        )
    return "\n".join(lines) + "\n"


def table2_to_text(rows: dict[str, Table2Report]) -> str:
    lines = ["between-class JS divergence (base-2 logs)"]
    lines.append(
        f"{'source':<16}{'lum-med':>10}{'med-ext':>10}{'lum-ext':>10}"
    )
    for name, rep in rows.items():
        cells = "".join(f"{rep.per_pair[pair]:>10.4f}" for pair in CLASS_PAIRS)
        lines.append(f"{name:<16}{cells}")
    return "\n".join(lines) + "\n"


def table1_to_csv(rows: dict[str, Table1Report], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["source", "lumen", "media", "externa", "n_images", "seed"])
        for name, rep in rows.items():
            writer.writerow(
                [
                    name,
                    f"{rep.per_class[TissueClass.LUMEN]:.6f}",
                    f"{rep.per_class[TissueClass.MEDIA]:.6f}",
                    f"{rep.per_class[TissueClass.EXTERNA]:.6f}",
                    rep.n_images,
                    rep.seed,
                ]
            )


def table2_to_csv(rows: dict[str, Table2Report], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["source", "lumen_media", "media_externa", "lumen_externa", "n_images", "seed"]
        )
        for name, rep in rows.items():
            writer.writerow(
                [name]
                + [f"{rep.per_pair[pair]:.6f}" for pair in CLASS_PAIRS]
                + [rep.n_images, rep.seed]
            )


# ---------------------------------------------------------------------------
# Visual Turing Test


@dataclass(frozen=True)
class VTTPair:
    pair_id: int
    left: str
    right: str


@dataclass(frozen=True)
class VTTManifest:
    """Presented pairs plus a separately stored answer key.

    `truth` holds, per pair, which side ('L' or 'R') shows the real image;
    it is never written into the pair listing itself.
    """

    pairs: list[VTTPair]
    truth: list[str]
    seed: int


@dataclass(frozen=True)
class VTTScore:
    accuracy: float
    ci_low: float
    ci_high: float
    n: int


def vtt_export(real, sim, n_pairs: int, seed: int, out_dir: str) -> VTTManifest:
    """Write side-by-side image pairs with randomized left/right placement.

    `real` and `sim` are sequences of CartesianImage. Each pair samples one
    image from each corpus (without replacement). File names carry only the
    pair id and side; pairs.csv lists the presented files and key.csv the
    hidden truth.
    """
    real = list(real)
    sim = list(sim)
    if len(real) < n_pairs or len(sim) < n_pairs:
        raise ValueError(
            f"need {n_pairs} images per corpus, have {len(real)} real / {len(sim)} simulated"
        )
    rng = np.random.default_rng(seed)
    real_idx = rng.choice(len(real), size=n_pairs, replace=False)
    sim_idx = rng.choice(len(sim), size=n_pairs, replace=False)
    os.makedirs(out_dir, exist_ok=True)

    pairs: list[VTTPair] = []
    truth: list[str] = []
    for i in range(n_pairs):
        left_path = os.path.join(out_dir, f"pair_{i:04d}_L.png")
        right_path = os.path.join(out_dir, f"pair_{i:04d}_R.png")
        real_img = real[real_idx[i]]
        sim_img = sim[sim_idx[i]]
        real_data = getattr(real_img, "data", real_img)
        sim_data = getattr(sim_img, "data", sim_img)
        if rng.random() < 0.5:
            write_png(left_path, real_data)
            write_png(right_path, sim_data)
            truth.append("L")
        else:
            write_png(left_path, sim_data)
            write_png(right_path, real_data)
            truth.append("R")
        pairs.append(VTTPair(i, left_path, right_path))

    with open(os.path.join(out_dir, "pairs.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pair_id", "left", "right"])
        for p in pairs:
            writer.writerow([p.pair_id, os.path.basename(p.left), os.path.basename(p.right)])
    with open(os.path.join(out_dir, "key.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pair_id", "real_side"])
        for p, side in zip(pairs, truth):
            writer.writerow([p.pair_id, side])

    return VTTManifest(pairs, truth, seed)


def load_vtt_key(path: str) -> list[str]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [row["real_side"] for row in rows]


def wilson_interval(correct: int, n: int, z: float = 1.959963984540054):
    """95% Wilson score interval for a binomial proportion."""
    if n <= 0:
        raise ValueError("need at least one trial")
    phat = correct / n
    denom = 1.0 + z * z / n
    center = (phat + z * z / (2 * n)) / denom
    half = z * math.sqrt(phat * (1 - phat) / n + z * z / (4 * n * n)) / denom
    return center - half, center + half


def vtt_score(manifest: VTTManifest, responses: list[str]) -> VTTScore:
    """Accuracy of which-side-is-real responses with a 95% Wilson interval."""
    if len(responses) != len(manifest.pairs):
        raise ValueError(
            f"got {len(responses)} responses for {len(manifest.pairs)} pairs"
        )
    for r in responses:
        if r not in ("L", "R"):
            raise ValueError(f"responses must be 'L' or 'R', got {r!r}")
    correct = sum(r == t for r, t in zip(responses, manifest.truth))
    n = len(responses)
    lo, hi = wilson_interval(correct, n)
    return VTTScore(correct / n, lo, hi, n)
