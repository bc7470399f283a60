"""Dataset handling: manifest I/O, stratified splitting, and a deterministic
synthetic fruit generator for desk-scale experiments.

Synthetic images are elliptical shaded blobs on a plain or cluttered
background. Grade is a pure function of the fraction of the fruit covered by
dark defect dots, so the label signal is known exactly and monotone.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import imgio
from .errors import DataError
from .preprocess import BinaryMask, resize_bilinear

GRADE_NAMES = ("A", "B", "C")
GRADE_TO_INDEX = {name: i for i, name in enumerate(GRADE_NAMES)}

# defect-area fraction thresholds separating the grades
A_MAX_DEFECT = 0.01
B_MAX_DEFECT = 0.08

# generation bands keep samples comfortably inside their grade
DEFECT_BANDS = {
    0: (0.0, 0.004),
    1: (0.02, 0.065),
    2: (0.10, 0.20),
}

SPLITS = ("train", "val", "test")
_SPLIT_CODE = {"train": 0, "val": 1, "test": 2}


def grade_from_defect_fraction(frac: float) -> int:
    """Monotone defect-area -> grade rule (larger area, worse grade)."""
    if frac < 0 or frac > 1:
        raise ValueError(f"defect fraction {frac} outside [0, 1]")
    if frac <= A_MAX_DEFECT:
        return 0
    if frac <= B_MAX_DEFECT:
        return 1
    return 2


def largest_remainder_quotas(n: int, fractions: Sequence[float]) -> List[int]:
    """Integer quotas summing to n, proportional to fractions."""
    if n < 0:
        raise ValueError("n must be non-negative")
    exact = [n * f for f in fractions]
    base = [int(np.floor(e)) for e in exact]
    short = n - sum(base)
    order = sorted(range(len(fractions)), key=lambda i: exact[i] - base[i], reverse=True)
    for i in order[:short]:
        base[i] += 1
    return base


@dataclass(frozen=True)
class ManifestEntry:
    filename: str
    grade: int
    mask_filename: Optional[str] = None


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic dataset generator."""

    n_train: int
    n_val: int = 0
    n_test: int = 0
    image_size: int = 64
    grade_mix: Tuple[float, float, float] = (0.32, 0.37, 0.31)
    background: str = "plain"  # or "cluttered"
    label_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_train < 0 or self.n_val < 0 or self.n_test < 0:
            raise ValueError("split sizes must be non-negative")
        if self.image_size < 16:
            raise ValueError("image size must be at least 16")
        if abs(sum(self.grade_mix) - 1.0) > 1e-9:
            raise ValueError("grade mix must sum to 1")
        if self.background not in ("plain", "cluttered"):
            raise ValueError(f"unknown background mode {self.background!r}")
        if not 0.0 <= self.label_noise < 1.0:
            raise ValueError("label noise must be in [0, 1)")


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _render_background(size: int, cluttered: bool, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / float(size - 1)
    if cluttered:
        g1, g2 = rng.uniform(0.50, 0.95, size=2)
        phi = rng.uniform(0, 2 * np.pi)
        t = xx * np.cos(phi) + yy * np.sin(phi)
        t = (t - t.min()) / max(t.max() - t.min(), 1e-6)
        base = g1 + (g2 - g1) * t
    else:
        base = 0.82 + 0.11 * yy
    tint = rng.uniform(0.92, 1.0, size=3).astype(np.float32)
    img = base[None, :, :] * tint[:, None, None]

    if cluttered:
        # distractor shapes: colored rectangles plus dark defect-lookalike dots
        for _ in range(rng.integers(3, 7)):
            w = int(rng.uniform(0.1, 0.4) * size)
            h = int(rng.uniform(0.1, 0.4) * size)
            x0 = int(rng.uniform(0, size - w))
            y0 = int(rng.uniform(0, size - h))
            color = rng.uniform(0.2, 0.9, size=3).astype(np.float32)
            img[:, y0:y0 + h, x0:x0 + w] = color[:, None, None]
        yy2, xx2 = np.mgrid[0:size, 0:size].astype(np.float32)
        for _ in range(rng.integers(1, 4)):
            r = rng.uniform(0.03, 0.08) * size
            cx = rng.uniform(r, size - r)
            cy = rng.uniform(r, size - r)
            dot = (xx2 - cx) ** 2 + (yy2 - cy) ** 2 <= r * r
            shade = np.float32(rng.uniform(0.10, 0.22))
            img[:, dot] = shade
    img += rng.normal(0.0, 0.015, size=img.shape).astype(np.float32)
    return img


def _place_defects(mask: np.ndarray, cx: float, cy: float, rx: float, ry: float,
                   target: float, size: int, rng: np.random.Generator) -> np.ndarray:
    """Dark-dot mask covering approximately `target` of the fruit area."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    fruit_area = float(mask.sum())
    defects = np.zeros((size, size), dtype=bool)
    for _ in range(60):
        current = float(defects.sum()) / fruit_area
        remaining = target - current
        if remaining * fruit_area < 2.0:
            break
        r = np.sqrt(remaining * fruit_area / np.pi)
        r = float(np.clip(r, 1.2, 0.09 * size))
        for _ in range(20):
            px = cx + rng.uniform(-0.85, 0.85) * rx
            py = cy + rng.uniform(-0.85, 0.85) * ry
            if ((px - cx) / rx) ** 2 + ((py - cy) / ry) ** 2 <= 0.75:
                break
        dot = ((xx - px) ** 2 + (yy - py) ** 2 <= r * r) & mask
        defects |= dot
    return defects


def render_sample(size: int, grade: int, cluttered: bool,
                  rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, float, Tuple[float, float, float, float]]:
    """One synthetic fruit image.

    Returns (image (3,S,S) in [0,1], fruit mask (S,S) bool, defect fraction,
    (cx, cy, rx, ry)). The defect fraction is guaranteed to map back to
    `grade` under grade_from_defect_fraction.
    """
    img = _render_background(size, cluttered, rng)

    base_r = rng.uniform(0.30, 0.40) * size
    aspect = rng.uniform(0.78, 1.0)
    if cluttered:
        base_r *= rng.uniform(0.50, 0.72)
    rx = base_r
    ry = base_r * aspect
    max_off_x = max(size / 2 - rx - 2.0, 0.0)
    max_off_y = max(size / 2 - ry - 2.0, 0.0)
    if cluttered:
        off_x = rng.uniform(-1.0, 1.0) * max_off_x
        off_y = rng.uniform(-1.0, 1.0) * max_off_y
    else:
        off_x = rng.uniform(-1.0, 1.0) * min(0.04 * size, max_off_x)
        off_y = rng.uniform(-1.0, 1.0) * min(0.04 * size, max_off_y)
    cx = size / 2 + off_x
    cy = size / 2 + off_y

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    q = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2
    mask = q <= 1.0

    u = rng.uniform()
    c_lo = np.array([0.80, 0.62, 0.20], dtype=np.float32)
    c_hi = np.array([0.55, 0.72, 0.25], dtype=np.float32)
    base_color = c_lo + (c_hi - c_lo) * np.float32(u)
    base_color *= rng.uniform(0.9, 1.1)

    # radial shading with an offset highlight
    q_light = (((xx - (cx - 0.25 * rx)) / (1.3 * rx)) ** 2
               + ((yy - (cy - 0.25 * ry)) / (1.3 * ry)) ** 2)
    shade = 1.0 - 0.38 * np.clip(q_light, 0.0, 1.4)
    fruit = base_color[:, None, None] * shade[None, :, :]
    img = np.where(mask[None, :, :], fruit, img)

    band_lo, band_hi = DEFECT_BANDS[grade]
    for _ in range(8):
        target = rng.uniform(band_lo, band_hi)
        defects = _place_defects(mask, cx, cy, rx, ry, target, size, rng)
        frac = float(defects.sum()) / float(mask.sum())
        if grade_from_defect_fraction(frac) == grade:
            break
    else:
        raise DataError(f"could not hit grade {GRADE_NAMES[grade]} defect band")

    defect_color = np.array([0.16, 0.11, 0.05], dtype=np.float32)
    defect_color = defect_color * np.float32(rng.uniform(0.8, 1.2))
    img = np.where(defects[None, :, :], defect_color[:, None, None], img)
    img += rng.normal(0.0, 0.01, size=img.shape).astype(np.float32)
    return (np.clip(img, 0.0, 1.0).astype(np.float32), mask, frac,
            (cx, cy, rx, ry))


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _split_sizes(spec: SynthSpec) -> Dict[str, int]:
    return {"train": spec.n_train, "val": spec.n_val, "test": spec.n_test}


def generate_synthetic(spec: SynthSpec, out_root) -> Dict[str, List[ManifestEntry]]:
    """Write the dataset under out_root/{train,val,test}/ and return manifests.

    Pure function of its SynthSpec argument: per-image RNG streams are
    derived from (seed, split, index), so regenerating with the same settings
    is byte-identical regardless of ordering or parallelism.
    """
    out_root = Path(out_root)
    manifests: Dict[str, List[ManifestEntry]] = {}
    cluttered = spec.background == "cluttered"
    for split, n in _split_sizes(spec).items():
        split_dir = out_root / split
        split_dir.mkdir(parents=True, exist_ok=True)
        quotas = largest_remainder_quotas(n, spec.grade_mix)
        grades = np.repeat(np.arange(3), quotas)
        order_rng = np.random.default_rng(
            np.random.SeedSequence([spec.seed, _SPLIT_CODE[split], 999983]))
        order_rng.shuffle(grades)

        entries: List[ManifestEntry] = []
        meta_rows: List[Tuple] = []
        for i in range(n):
            rng = np.random.default_rng(
                np.random.SeedSequence([spec.seed, _SPLIT_CODE[split], i]))
            grade = int(grades[i])
            img, mask, frac, geom = render_sample(spec.image_size, grade,
                                                  cluttered, rng)
            label = grade
            if spec.label_noise > 0 and rng.uniform() < spec.label_noise:
                label = int(rng.choice([g for g in range(3) if g != grade]))
            name = f"img_{i:05d}.png"
            imgio.write_image(split_dir / name, img)
            imgio.write_mask(imgio.mask_path_for(split_dir / name), BinaryMask(mask))
            entries.append(ManifestEntry(name, label, imgio.mask_path_for(name).name))
            meta_rows.append((name, GRADE_NAMES[label], frac) + geom)

        save_manifest(split_dir, entries)
        with open(split_dir / "meta.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["filename", "grade", "defect_frac", "cx", "cy", "rx", "ry"])
            for row in meta_rows:
                w.writerow([row[0], row[1], f"{row[2]:.6f}"]
                           + [f"{v:.3f}" for v in row[3:]])
        manifests[split] = entries
    return manifests


# ---------------------------------------------------------------------------
# manifests and loading
# ---------------------------------------------------------------------------

def save_manifest(split_dir, entries: Sequence[ManifestEntry]) -> None:
    split_dir = Path(split_dir)
    split_dir.mkdir(parents=True, exist_ok=True)
    with open(split_dir / "labels.csv", "w", newline="") as f:
        f.write("filename,grade\n")
        for e in entries:
            f.write(f"{e.filename},{GRADE_NAMES[e.grade]}\n")


def load_manifest(split_dir, check_files: bool = True) -> List[ManifestEntry]:
    split_dir = Path(split_dir)
    labels_path = split_dir / "labels.csv"
    if not labels_path.exists():
        raise DataError(f"missing labels file: {labels_path}")
    entries: List[ManifestEntry] = []
    seen = set()
    with open(labels_path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["filename", "grade"]:
            raise DataError(f"{labels_path}: expected header 'filename,grade'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise DataError(f"{labels_path}:{lineno}: malformed row {row!r}")
            name, token = row[0].strip(), row[1].strip()
            if token not in GRADE_TO_INDEX:
                raise DataError(f"{labels_path}:{lineno}: unknown grade {token!r}")
            if name in seen:
                raise DataError(f"{labels_path}:{lineno}: duplicate entry {name!r}")
            seen.add(name)
            if check_files and not (split_dir / name).exists():
                raise DataError(f"{labels_path}:{lineno}: missing image {name}")
            mask_name = imgio.mask_path_for(name).name
            if not (split_dir / mask_name).exists():
                mask_name = None
            entries.append(ManifestEntry(name, GRADE_TO_INDEX[token], mask_name))
    if not entries:
        print(f"warning: empty manifest at {labels_path}")
    return entries


def load_dataset(root) -> Dict[str, List[ManifestEntry]]:
    """Load all three split manifests and print the grade distribution."""
    root = Path(root)
    manifests = {split: load_manifest(root / split) for split in SPLITS}
    for split, entries in manifests.items():
        counts = [0, 0, 0]
        for e in entries:
            counts[e.grade] += 1
        dist = " ".join(f"{g}={c}" for g, c in zip(GRADE_NAMES, counts))
        print(f"{split}: {len(entries)} samples ({dist})")
    return manifests


def load_split_arrays(split_dir, image_size: Optional[int] = None,
                      entries: Optional[Sequence[ManifestEntry]] = None):
    """Images as one float32 (N,3,S,S) array in [0,1], labels, filenames."""
    split_dir = Path(split_dir)
    if entries is None:
        entries = load_manifest(split_dir)
    images = []
    labels = []
    names = []
    for e in entries:
        img = imgio.read_image(split_dir / e.filename)
        if image_size is not None and img.shape[1:] != (image_size, image_size):
            img = resize_bilinear(img, image_size, image_size)
        images.append(img)
        labels.append(e.grade)
        names.append(e.filename)
    if not images:
        raise DataError(f"no images in {split_dir}")
    return np.stack(images), np.asarray(labels, dtype=np.int64), names


def load_meta(split_dir) -> Dict[str, float]:
    """filename -> defect fraction, from the generator's meta.csv."""
    path = Path(split_dir) / "meta.csv"
    if not path.exists():
        raise DataError(f"missing meta file: {path}")
    out: Dict[str, float] = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        for row in reader:
            out[row["filename"]] = float(row["defect_frac"])
    return out


def stratified_split(labels: Sequence[int], fractions: Tuple[float, float, float],
                     seed: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Index arrays (train, val, test) preserving per-grade proportions."""
    if any(f < 0 or f > 1 for f in fractions):
        raise ValueError("fractions must lie in [0, 1]")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    labels = np.asarray(labels)
    buckets: List[List[np.ndarray]] = [[], [], []]
    for g in np.unique(labels):
        idx = np.nonzero(labels == g)[0]
        rng = np.random.default_rng(np.random.SeedSequence([seed, 3, int(g)]))
        rng.shuffle(idx)
        counts = largest_remainder_quotas(len(idx), fractions)
        start = 0
        for s, c in enumerate(counts):
            buckets[s].append(idx[start:start + c])
            start += c
    return tuple(np.sort(np.concatenate(b)) if b else np.array([], dtype=np.intp)
                 for b in buckets)
