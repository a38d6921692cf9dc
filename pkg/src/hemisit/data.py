"""Volume files, manifests, stratified splits and the synthetic lesion generator."""
from __future__ import annotations

import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, SpecError
from .volume import Volume

VOLUME_MAGIC = b"SITVOL1\x00"
HEADER_BYTES = 8 + 12
MAX_VOXELS = 1 << 31
SPLITS = ("train", "val", "test")


def loader_threads():
    """Volume-reading threads; capped by ``SIT_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("SIT_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# SITVOL1 files
# ---------------------------------------------------------------------------

def write_volume(path, vol: Volume):
    data = np.ascontiguousarray(vol.data, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(VOLUME_MAGIC)
        fh.write(struct.pack("<3I", *data.shape))
        fh.write(data.tobytes())


def read_volume(path) -> Volume:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:8] != VOLUME_MAGIC:
        raise FormatError(f"{path}: bad volume magic", 0)
    if len(blob) < HEADER_BYTES:
        raise FormatError(f"{path}: truncated header", len(blob))
    extents = struct.unpack("<3I", blob[8:HEADER_BYTES])
    if min(extents) < 1:
        raise FormatError(f"{path}: zero extent {extents}", 8)
    count = int(np.prod(extents, dtype=np.int64))
    if count > MAX_VOXELS:
        raise FormatError(f"{path}: extents {extents} overflow the voxel limit", 8)
    need = HEADER_BYTES + 4 * count
    if len(blob) < need:
        raise FormatError(f"{path}: truncated payload, expected {need} bytes, got {len(blob)}", len(blob))
    if len(blob) > need:
        raise FormatError(f"{path}: {len(blob) - need} trailing bytes after payload", need)
    arr = np.frombuffer(blob, dtype="<f4", count=count, offset=HEADER_BYTES).reshape(extents)
    return Volume(arr.astype(np.float64))


# ---------------------------------------------------------------------------
# synthetic volumes
# ---------------------------------------------------------------------------

@dataclass
class SynthSpec:
    extents: tuple = (32, 36, 32)
    n_bumps: int = 10
    smoothness: float = 0.15        # bump sigma as a fraction of the smallest extent
    noise: float = 0.02
    lesion_radius: tuple = (2.5, 3.5)
    lesion_drop: tuple = (0.45, 0.6)
    # lesion centre in left-hemisphere voxel coordinates, and +/- jitter per axis
    lesion_center: tuple = (11.5, 19.5, 11.5)
    jitter: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.extents = tuple(int(e) for e in self.extents)
        self.lesion_radius = _pair(self.lesion_radius)
        self.lesion_drop = _pair(self.lesion_drop)
        self.lesion_center = tuple(float(c) for c in self.lesion_center)
        if min(self.extents) < 16:
            raise SpecError(f"synthetic extents must be >= 16 per axis, got {self.extents}")
        m = self.extents[0] // 2
        cx = self.lesion_center[0]
        reach = max(self.lesion_radius) + self.jitter
        if np.ceil(cx - reach) < 0 or np.floor(cx + reach) > m - 1:
            raise SpecError(f"lesion (centre x={cx}, reach {reach}) does not fit in a hemisphere of width {m}")
        for ax in (1, 2):
            c, n = self.lesion_center[ax], self.extents[ax]
            if np.ceil(c - reach) < 0 or np.floor(c + reach) > n - 1:
                raise SpecError(f"lesion does not fit along axis {ax} (centre {c}, extent {n})")
        if not 0.0 <= min(self.lesion_drop) <= max(self.lesion_drop) <= 1.0:
            raise SpecError("lesion drop must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def paper_scale(cls, **kw):
        """121x145x121 geometry with the lesion centred on a 25-voxel patch."""
        base = dict(extents=(121, 145, 121), lesion_radius=(8.0, 11.0),
                    lesion_center=(37.0, 87.0, 37.0), jitter=1.0)
        base.update(kw)
        return cls(**base)

    @classmethod
    def for_task(cls, task, paper_scale=False, **kw):
        """Synthetic stand-ins for the two diagnostic tasks.

        ``ad_cn`` uses clear lesions; ``pmci_smci`` uses fainter, smaller ones.
        """
        if task not in TASKS:
            raise SpecError(f"unknown task {task!r}; expected one of {', '.join(TASKS)}")
        opts = dict(TASKS[task])
        if paper_scale:
            opts["lesion_radius"] = tuple(r * 25 / 8 for r in opts.get("lesion_radius", (2.5, 3.5)))
        opts.update(kw)
        return cls.paper_scale(**opts) if paper_scale else cls(**opts)

    def to_dict(self):
        return asdict(self)


TASKS = {
    "ad_cn": {},
    "pmci_smci": {"lesion_drop": (0.2, 0.3), "lesion_radius": (2.0, 3.0)},
}


def _pair(v):
    if np.ndim(v) == 0:
        return (float(v), float(v))
    lo, hi = (float(x) for x in v)
    return (lo, hi)


def mirror(arr):
    """Reflect across the sagittal midplane (x -> X-1-x)."""
    return arr[::-1]


def _symmetrize(f):
    # (a + b) and (b + a) round identically, so the result is exactly mirror-symmetric
    return 0.5 * (f + mirror(f))


def _ball(extents, center, radius):
    grids = np.ogrid[tuple(slice(0, n) for n in extents)]
    d2 = sum((g - c) ** 2 for g, c in zip(grids, center))
    return d2 <= radius * radius


def generate_synthetic(spec: SynthSpec, label: int, seed: int):
    """One sample and its lesion mask, both as volumes with values in [0, 1].

    The base is a mirror-symmetric smooth blob.  Label 1 gets a single
    lesion in a randomly chosen hemisphere; label 0 gets either the same
    lesion mirrored into both hemispheres or none (equal odds).
    """
    if label not in (0, 1):
        raise SpecError(f"label must be 0 or 1, got {label}")
    rng = np.random.default_rng([spec.seed, seed, label])
    X, Y, Z = spec.extents
    sigma = spec.smoothness * min(spec.extents)
    grids = np.ogrid[0:X, 0:Y, 0:Z]
    f = np.zeros((X, Y, Z))
    for _ in range(spec.n_bumps):
        c = rng.uniform(0, 1, 3) * np.array([X, Y, Z])
        amp = rng.uniform(0.5, 1.0)
        d2 = sum((g - ci) ** 2 for g, ci in zip(grids, c))
        f += amp * np.exp(-d2 / (2 * sigma * sigma))
    f = _symmetrize(f)
    f = (f - f.min()) / (f.max() - f.min())
    base = 0.3 + 0.6 * f
    base = base + spec.noise * _symmetrize(rng.standard_normal((X, Y, Z)))
    vol = np.clip(base, 0.0, 1.0)

    radius = rng.uniform(*spec.lesion_radius)
    drop = rng.uniform(*spec.lesion_drop)
    jit = rng.uniform(-spec.jitter, spec.jitter, 3)
    center_l = np.array(spec.lesion_center) + jit
    ball_l = _ball(spec.extents, center_l, radius)
    ball_r = mirror(ball_l)
    if label == 1:
        mask = ball_l if rng.random() < 0.5 else ball_r
    elif rng.random() < 0.5:
        mask = ball_l | ball_r
    else:
        mask = np.zeros_like(ball_l)
    vol = np.where(mask, vol * (1.0 - drop), vol)
    return Volume(vol), Volume(mask.astype(np.float64))


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation by a Euclidean ball."""
    from scipy.ndimage import binary_dilation

    r = int(radius)
    ball = _ball((2 * r + 1,) * 3, (r, r, r), r)
    return binary_dilation(mask.astype(bool), structure=ball)


def asymmetry_fraction(vol: np.ndarray, mask: np.ndarray, dilation=2):
    """Share of hemispheric asymmetry energy that falls inside the dilated mask.

    Energy is ``|left - flip(right)|`` summed over voxel pairs, each pair
    counted once; the mask is folded the same way (a pair is inside when
    either of its voxels is).
    """
    X = vol.shape[0]
    m = X // 2
    left, right = vol[:m], vol[X - m:][::-1]
    diff = np.abs(left - right)
    dm = dilate(mask, dilation) if dilation else mask.astype(bool)
    folded = dm[:m] | dm[X - m:][::-1]
    total = diff.sum()
    return float(diff[folded].sum() / total) if total > 0 else float("nan"), float(total)


# ---------------------------------------------------------------------------
# manifests and datasets
# ---------------------------------------------------------------------------

@dataclass
class Record:
    path: str
    label: int
    split: str
    lesion_mask_path: str | None = None

    def to_json(self):
        d = {"path": self.path, "label": self.label, "split": self.split}
        if self.lesion_mask_path is not None:
            d["lesion_mask_path"] = self.lesion_mask_path
        return json.dumps(d, sort_keys=True)


@dataclass
class Manifest:
    root: Path
    records: list = field(default_factory=list)

    def split(self, name):
        return [r for r in self.records if r.split == name]

    def write(self, path=None):
        path = Path(path) if path else self.root / "manifest.jsonl"
        path.write_text("".join(r.to_json() + "\n" for r in self.records))
        return path

    def load_split(self, name):
        """Volumes stacked as ``(M, X, Y, Z)`` plus labels for one split."""
        recs = self.split(name)
        if not recs:
            return np.zeros((0, 0, 0, 0)), np.zeros(0, dtype=np.int64)
        with ThreadPoolExecutor(max_workers=loader_threads()) as pool:
            vols = np.stack([v.data for v in pool.map(read_volume, [self.root / r.path for r in recs])])
        return vols, np.array([r.label for r in recs], dtype=np.int64)


def read_manifest(path, root=None) -> Manifest:
    path = Path(path)
    root = Path(root) if root is not None else path.parent
    recs = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        d = json.loads(line)
        if d.get("label") not in (0, 1):
            raise SpecError(f"{path}:{lineno}: label must be 0 or 1")
        if d.get("split") not in SPLITS:
            raise SpecError(f"{path}:{lineno}: split must be one of {SPLITS}")
        rec = Record(d["path"], int(d["label"]), d["split"], d.get("lesion_mask_path"))
        if not (root / rec.path).exists():
            raise SpecError(f"{path}:{lineno}: {rec.path} does not resolve under {root}")
        recs.append(rec)
    return Manifest(root, recs)


def split_counts(n, fractions):
    """Per-split counts for ``n`` items; largest-remainder rounding."""
    raw = np.array(fractions, dtype=np.float64) * n
    counts = np.floor(raw).astype(int)
    short = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return [int(c) for c in counts]


def make_dataset(spec: SynthSpec, n_per_class: int, fractions=(0.7, 0.15, 0.15), seed=0,
                 root=None, write=True) -> Manifest:
    """Generate ``2 * n_per_class`` samples, split per class, and write them under ``root``."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise SpecError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    counts = split_counts(n_per_class, fractions)
    for c, f in zip(counts, fractions):
        if f > 0 and c == 0:
            raise SpecError(f"n_per_class={n_per_class} is too small to stratify fractions {fractions}")
    root = Path(root) if root is not None else Path(".")
    if write:
        os.makedirs(root / "volumes", exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for label in (0, 1):
        splits = np.repeat(np.array(SPLITS), counts)
        rng.shuffle(splits)
        for i in range(n_per_class):
            sample_seed = int(rng.integers(0, 2 ** 31))
            name = f"volumes/c{label}_{i:04d}"
            rec = Record(f"{name}.sitvol", label, str(splits[i]), f"{name}_mask.sitvol")
            if write:
                vol, mask = generate_synthetic(spec, label, sample_seed)
                write_volume(root / rec.path, vol)
                write_volume(root / rec.lesion_mask_path, mask)
            records.append(rec)
    man = Manifest(root, records)
    if write:
        man.write()
    return man
