"""Volumes, slice extraction, intensity normalization, subject splits,
manifests and the synthetic phantom corpus."""

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np
from scipy import ndimage

from .errors import DataError, FormatError, MetadataError, RangeError, ShapeError

DIAGNOSES = ("CN", "EMCI", "LMCI", "SMC", "AD")
MODALITIES = ("MRI", "PET")
# class totals of the 222-subject cohort, in DIAGNOSES order
COHORT_COUNTS = (72, 45, 31, 62, 12)
GROUPS = {"CN": "CN", "SMC": "CN", "EMCI": "MCI", "LMCI": "MCI", "AD": "AD"}

CENTRAL_FIRST, CENTRAL_LAST = 76, 176
EXTRA_SLICES = (124, 128, 130, 132)
MIN_DEPTH = CENTRAL_LAST + 1
MANIFEST_COLUMNS = ("subject_id", "diagnosis", "mri_path", "pet_path")


def diagnosis_group(diagnosis):
    """CN / MCI / AD grouping used for synthesis reports (SMC counts as CN)."""
    try:
        return GROUPS[diagnosis]
    except KeyError:
        raise MetadataError(f"unknown diagnosis {diagnosis!r}") from None


def binary_label(diagnosis):
    """0 for the CN group (CN, SMC), 1 for MCI/AD (EMCI, LMCI, AD)."""
    return 0 if diagnosis_group(diagnosis) == "CN" else 1


@dataclass
class Volume:
    voxels: np.ndarray
    subject_id: str
    diagnosis: str
    modality: str

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ShapeError(f"volume must be a non-empty 3D grid, got {self.voxels.shape}")
        if self.diagnosis not in DIAGNOSES:
            raise MetadataError(f"unknown diagnosis {self.diagnosis!r}")
        if self.modality not in MODALITIES:
            raise MetadataError(f"unknown modality {self.modality!r}")

    @property
    def shape(self):
        return self.voxels.shape

    @property
    def depth(self):
        return self.voxels.shape[0]


@dataclass
class SlicePair:
    mri: np.ndarray
    pet: Optional[np.ndarray]
    slice_index: int
    subject_id: str
    diagnosis: str


@dataclass
class DatasetSplit:
    train_subjects: List[str]
    test_subjects: List[str]
    seed: int


@dataclass
class ManifestRow:
    subject_id: str
    diagnosis: str
    mri_path: str
    pet_path: str


# ---------------------------------------------------------------------------
# Volume I/O

def _strip_nii(path):
    name = path.name
    for ext in (".nii.gz", ".nii"):
        if name.endswith(ext):
            return name[: -len(ext)]
    return path.stem


def sidecar_path(path):
    path = Path(path)
    return path.with_name(_strip_nii(path) + ".json")


def load_volume(path, subject_id=None, diagnosis=None, modality=None):
    """Read a NIfTI-1 file into a (depth, height, width) Volume.

    The NIfTI (x, y, z) array is transposed to C order, so a file declared
    256x256x170 yields shape (170, 256, 256). Metadata precedence: explicit
    arguments, then the JSON sidecar, then the ``<subject>_<MODALITY>``
    filename convention. A diagnosis must come from the first two.
    """
    import nibabel as nib

    path = Path(path)
    if not path.exists():
        raise FormatError(f"{path}: no such file")
    try:
        img = nib.load(str(path))
        data = np.asarray(img.get_fdata(dtype=np.float32))
    except Exception as exc:
        raise FormatError(f"{path}: unreadable volume ({exc})") from exc
    if data.ndim == 4 and data.shape[-1] == 1:
        data = data[..., 0]
    if data.ndim != 3:
        raise FormatError(f"{path}: expected a 3D volume, got shape {data.shape}")

    meta = {}
    side = sidecar_path(path)
    if side.exists():
        try:
            meta = json.loads(side.read_text())
        except json.JSONDecodeError as exc:
            raise MetadataError(f"{side}: invalid JSON ({exc})") from exc
    stem = _strip_nii(path)
    if "_" in stem:
        sid, mod = stem.rsplit("_", 1)
        meta.setdefault("subject_id", sid)
        if mod.upper() in MODALITIES:
            meta.setdefault("modality", mod.upper())
    subject_id = subject_id or meta.get("subject_id") or stem
    diagnosis = diagnosis or meta.get("diagnosis")
    modality = modality or meta.get("modality") or "MRI"
    if not diagnosis:
        raise MetadataError(f"{path}: no diagnosis in arguments or sidecar")
    return Volume(np.ascontiguousarray(data.T), subject_id, diagnosis, modality)


def save_volume(volume, path):
    """Write ``volume`` as NIfTI-1 plus a JSON sidecar with its metadata."""
    import nibabel as nib

    path = Path(path)
    img = nib.Nifti1Image(np.ascontiguousarray(volume.voxels.T), np.eye(4))
    nib.save(img, str(path))
    sidecar_path(path).write_text(json.dumps({
        "subject_id": volume.subject_id,
        "diagnosis": volume.diagnosis,
        "modality": volume.modality,
    }, sort_keys=True, indent=1) + "\n")
    return path


# ---------------------------------------------------------------------------
# Slices and intensities

def pad_axial_slice(slice_2d, target=256, fill=-1.0):
    """Center-pad the width of an (H, W<=target) slice to target x target."""
    s = np.asarray(slice_2d)
    if s.ndim != 2:
        raise ShapeError(f"expected a 2D slice, got shape {s.shape}")
    h, w = s.shape
    if h != target or w > target:
        raise ShapeError(f"slice {s.shape} cannot be padded to {target}x{target}")
    if w == target:
        return s
    left = (target - w) // 2
    out = np.full((target, target), fill, dtype=s.dtype)
    out[:, left:left + w] = s
    return out


def crop_center_width(slice_2d, width):
    s = np.asarray(slice_2d)
    left = (s.shape[1] - width) // 2
    return s[:, left:left + width]


def _depth(volume):
    depth = volume if isinstance(volume, (int, np.integer)) else volume.depth
    if depth < MIN_DEPTH:
        raise RangeError(f"volume depth {depth} < {MIN_DEPTH}")
    return depth


def select_training_slices(volume):
    """The 14 synthesis-training slices: stride 10 from 76 plus 124/128/130/132."""
    _depth(volume)
    return sorted(set(range(CENTRAL_FIRST, CENTRAL_LAST, 10)) | set(EXTRA_SLICES))


def select_classifier_slices(volume, diagnosis):
    """All of 76..176 for MCI/AD subjects, every other slice for the CN group."""
    _depth(volume)
    step = 2 if binary_label(diagnosis) == 0 else 1
    return list(range(CENTRAL_FIRST, CENTRAL_LAST + 1, step))


def evaluation_slices(slice_set="central100"):
    if slice_set == "central100":
        return list(range(CENTRAL_FIRST, CENTRAL_FIRST + 100))
    if slice_set == "train14":
        return select_training_slices(MIN_DEPTH)
    raise RangeError(f"unknown slice set {slice_set!r}")


def robust_bounds(voxels, low=0.5, high=99.5):
    lo, hi = np.percentile(np.asarray(voxels, dtype=np.float64), [low, high])
    return float(lo), float(hi)


def normalize_intensity(values, lo, hi):
    """Affine map lo -> -1, hi -> +1, clamped to [-1, 1]."""
    if not hi > lo:
        raise RangeError(f"degenerate intensity range lo={lo}, hi={hi}")
    x = np.asarray(values, dtype=np.float32)
    return np.clip(2.0 * (x - lo) / (hi - lo) - 1.0, -1.0, 1.0).astype(np.float32)


def normalized_slices(volume, indices, target=256):
    """Normalize ``volume`` with its robust bounds and return padded slices."""
    lo, hi = robust_bounds(volume.voxels)
    return [pad_axial_slice(normalize_intensity(volume.voxels[i], lo, hi), target)
            for i in indices]


# ---------------------------------------------------------------------------
# Subject splits

def _apportion(counts, fraction, total=None):
    """Largest-remainder allocation of ``round(sum * fraction)`` across classes.

    Remainder ties go to the earlier class.
    """
    n = sum(counts)
    if total is None:
        total = int(math.floor(n * fraction + 0.5))
    quotas = [c * total / n if n else 0.0 for c in counts]
    alloc = [int(math.floor(q)) for q in quotas]
    order = sorted(range(len(counts)), key=lambda i: (-(quotas[i] - alloc[i]), i))
    for i in order[: total - sum(alloc)]:
        alloc[i] += 1
    return alloc


def _class_order(labels):
    known = [d for d in DIAGNOSES if d in labels]
    return known + sorted(set(labels) - set(DIAGNOSES))


def stratified_split(subjects, train_fraction, seed):
    """Split (subject_id, diagnosis) pairs keeping class proportions.

    Per-class train counts come from a largest-remainder apportionment of
    ``round(N * train_fraction)``; members are drawn with a seeded shuffle.
    """
    if not 0 < train_fraction < 1:
        raise RangeError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    pairs = [(s.subject_id, s.diagnosis) if isinstance(s, ManifestRow) else tuple(s)
             for s in subjects]
    by_class = {}
    for sid, diag in pairs:
        by_class.setdefault(diag, []).append(sid)
    classes = _class_order(by_class)
    counts = [len(by_class[c]) for c in classes]
    n_train = _apportion(counts, train_fraction)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for cls, k in zip(classes, n_train):
        members = sorted(by_class[cls])
        perm = rng.permutation(len(members))
        chosen = [members[i] for i in perm]
        train += chosen[:k]
        test += chosen[k:]
    return DatasetSplit(sorted(train), sorted(test), seed)


def split_counts(split, diagnoses):
    """Per-class (train, test) tallies in DIAGNOSES order."""
    train = [sum(diagnoses[s] == d for s in split.train_subjects) for d in DIAGNOSES]
    test = [sum(diagnoses[s] == d for s in split.test_subjects) for d in DIAGNOSES]
    return tuple(train), tuple(test)


# ---------------------------------------------------------------------------
# Manifests

def read_manifest(path):
    """Rows of a ``subject_id,diagnosis,mri_path,pet_path`` CSV.

    Relative paths resolve against the manifest's directory; ``pet_path`` may
    be empty.
    """
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = set(MANIFEST_COLUMNS) - set(reader.fieldnames or ())
            if missing:
                raise FormatError(f"{path}: missing columns {sorted(missing)}")
            rows = list(reader)
    except FileNotFoundError:
        raise DataError(f"{path}: manifest not found") from None
    out = []
    for r in rows:
        if r["diagnosis"] not in DIAGNOSES:
            raise MetadataError(f"{path}: subject {r['subject_id']} has diagnosis {r['diagnosis']!r}")

        def resolve(p):
            return str(path.parent / p) if p and not Path(p).is_absolute() else (p or "")

        out.append(ManifestRow(r["subject_id"], r["diagnosis"],
                               resolve(r["mri_path"]), resolve(r["pet_path"])))
    return out


def write_manifest(rows, path):
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for r in rows:
            w.writerow([r.subject_id, r.diagnosis, r.mri_path, r.pet_path])
    return path


def load_pairs(row, indices, image_size=256):
    """Normalized, padded SlicePairs for one manifest row (pet None if absent)."""
    mri = load_volume(row.mri_path, row.subject_id, row.diagnosis, "MRI")
    mri_slices = normalized_slices(mri, indices, image_size)
    pet_slices = [None] * len(indices)
    if row.pet_path:
        pet = load_volume(row.pet_path, row.subject_id, row.diagnosis, "PET")
        if pet.shape != mri.shape:
            raise DataError(f"{row.subject_id}: MRI {mri.shape} and PET {pet.shape} differ")
        pet_slices = normalized_slices(pet, indices, image_size)
    return [SlicePair(m, p, i, row.subject_id, row.diagnosis)
            for m, p, i in zip(mri_slices, pet_slices, indices)]


# ---------------------------------------------------------------------------
# Phantoms

SEVERITY = {"CN": 0.0, "SMC": 0.15, "EMCI": 0.45, "LMCI": 0.65, "AD": 1.0}
PHANTOM_CENTER, PHANTOM_RADIUS = 126.0, 100.0


def _ellipse(yy, xx, cy, cx, ry, rx, angle=0.0):
    c, s = math.cos(angle), math.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    return u * u + v * v <= 1.0


def _phantom_params(rng, severity):
    return {
        "cy": rng.uniform(-0.05, 0.05), "cx": rng.uniform(-0.05, 0.05),
        "ry": rng.uniform(0.78, 0.9), "rx": rng.uniform(0.65, 0.8),
        "angle": rng.uniform(-0.2, 0.2),
        "gm": rng.uniform(0.5, 0.6), "wm": rng.uniform(0.75, 0.85),
        "blobs": [(rng.uniform(-0.5, 0.5), rng.uniform(-0.45, 0.45),
                   rng.uniform(0.08, 0.18), rng.uniform(-0.12, 0.12)) for _ in range(5)],
        "severity": float(np.clip(severity + rng.uniform(-0.05, 0.05), 0.0, 1.2)),
    }


def _phantom_slice(p, size, scale=1.0):
    """One MRI cross-section in [-1, 1]; ``scale`` shrinks the head (0 = empty)."""
    img = np.zeros((size, size), dtype=np.float64)
    if scale <= 0.05:
        return np.full((size, size), -1.0, dtype=np.float32)
    ax = np.linspace(-1.0, 1.0, size)
    yy, xx = np.meshgrid(ax, ax, indexing="ij")
    cy, cx, a = p["cy"], p["cx"], p["angle"]
    head = _ellipse(yy, xx, cy, cx, p["ry"] * scale, p["rx"] * scale, a)
    white = _ellipse(yy, xx, cy, cx, 0.7 * p["ry"] * scale, 0.7 * p["rx"] * scale, a)
    img[head] = p["gm"]
    img[white] = p["wm"]
    for by, bx, br, amp in p["blobs"]:
        img[_ellipse(yy, xx, cy + by * scale, cx + bx * scale, br * scale, br * scale) & head] += amp
    sev = p["severity"]
    vr_y, vr_x = (0.16 + 0.1 * sev) * scale, (0.05 + 0.09 * sev) * scale
    for side in (-1, 1):
        vent = _ellipse(yy, xx, cy, cx + side * (0.09 + 0.04 * sev) * scale, vr_y, vr_x, a)
        img[vent & head] = 0.15
    img = ndimage.gaussian_filter(img, sigma=max(0.5, size / 96))
    return np.clip(2.0 * img - 1.0, -1.0, 1.0).astype(np.float32)


def _gauss(yy, xx, cy, cx, w):
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * w * w))


def pet_from_mri(mri):
    """Deterministic smooth nonlinear map from a phantom MRI slice to PET.

    Intensity remap plus Gaussian "uptake" blobs placed relative to the
    anatomy's intensity centroid and spread; blob amplitude grows with the
    fraction of dark (ventricle-like) pixels inside the head.
    """
    m = np.asarray(mri, dtype=np.float64)
    u = (m + 1.0) / 2.0
    head = u > 0.05
    if not head.any():
        return np.full(m.shape, -1.0, dtype=np.float32)
    size_y, size_x = m.shape
    yy, xx = np.meshgrid(np.linspace(-1, 1, size_y), np.linspace(-1, 1, size_x), indexing="ij")
    w = u * head
    total = w.sum()
    cy, cx = (w * yy).sum() / total, (w * xx).sum() / total
    sy = math.sqrt(max(((yy - cy) ** 2)[head].mean(), 1e-6))
    sx = math.sqrt(max(((xx - cx) ** 2)[head].mean(), 1e-6))
    frac = float(((u < 0.35) & head).sum()) / float(head.sum())
    amp = min(0.25 + 3.0 * frac, 0.7)
    width = 0.22 * (sx + sy)
    uptake = sum(_gauss(yy, xx, cy + dy * sy, cx + dx * sx, width)
                 for dy, dx in ((-0.6, -0.7), (-0.6, 0.7), (0.5, -0.8), (0.5, 0.8)))
    pet = 0.7 * u * u + amp * uptake * head
    return (np.clip(pet, 0.0, 1.0) * 2.0 - 1.0).astype(np.float32)


def make_phantom_pair(seed, size=64, severity=0.0, subject_id=None, diagnosis="CN"):
    """Deterministic synthetic (MRI, PET) slice pair, both in [-1, 1]."""
    if size < 32:
        raise ShapeError(f"phantom size must be >= 32, got {size}")
    p = _phantom_params(np.random.default_rng(seed), severity)
    mri = _phantom_slice(p, size)
    return SlicePair(mri, pet_from_mri(mri), 0, subject_id or f"phantom{seed}", diagnosis)


def phantom_volumes(seed, diagnosis, size=256, depth=256, subject_id=None):
    """(MRI, PET) Volumes in raw units: MRI in [0, 1000], PET SUVR-like in [0, 3].

    The head cross-section shrinks away from slice 126 along the depth axis.
    """
    if size < 32:
        raise ShapeError(f"phantom size must be >= 32, got {size}")
    sid = subject_id or f"phantom{seed}"
    p = _phantom_params(np.random.default_rng(seed), SEVERITY[diagnosis])
    mri = np.empty((depth, size, size), dtype=np.float32)
    pet = np.empty_like(mri)
    for z in range(depth):
        r = (z - PHANTOM_CENTER) / PHANTOM_RADIUS
        m = _phantom_slice(p, size, math.sqrt(max(0.0, 1.0 - r * r)))
        mri[z] = m
        pet[z] = pet_from_mri(m)
    return (Volume((mri + 1.0) * 500.0, sid, diagnosis, "MRI"),
            Volume((pet + 1.0) * 1.5, sid, diagnosis, "PET"))


def phantom_diagnoses(n, seed):
    """Diagnoses for ``n`` phantom subjects, class sizes proportional to the cohort."""
    if n < 1:
        raise RangeError(f"need at least one subject, got {n}")
    counts = _apportion(list(COHORT_COUNTS), 1.0, total=n)
    labels = [d for d, c in zip(DIAGNOSES, counts) for _ in range(c)]
    rng = np.random.default_rng(seed)
    return [labels[i] for i in rng.permutation(n)]


def write_phantom_corpus(n_subjects, seed, out_dir, size=256, depth=256):
    """Write phantom NIfTI volumes plus ``manifest.csv``; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "volumes").mkdir(parents=True, exist_ok=True)
    rows = []
    for i, diag in enumerate(phantom_diagnoses(n_subjects, seed)):
        sid = f"sub{i:04d}"
        mri, pet = phantom_volumes(seed * 100003 + i, diag, size, depth, sid)
        save_volume(mri, out_dir / "volumes" / f"{sid}_MRI.nii.gz")
        save_volume(pet, out_dir / "volumes" / f"{sid}_PET.nii.gz")
        rows.append(ManifestRow(sid, diag, f"volumes/{sid}_MRI.nii.gz",
                                f"volumes/{sid}_PET.nii.gz"))
    return write_manifest(rows, out_dir / "manifest.csv")
