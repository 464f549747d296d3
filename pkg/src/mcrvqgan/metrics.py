"""Image-quality metrics, per-group aggregation and classification tallies.

The metric primitives (``mse``, ``psnr``, ``ssim``) take images already on
the [0, 1] scale; the evaluation drivers remap network outputs from [-1, 1]
with ``to_unit`` first.
"""

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .data import binary_label, diagnosis_group, evaluation_slices, load_pairs, load_volume, normalized_slices
from .errors import DataError, ShapeError

log = logging.getLogger(__name__)

SCHEMA_VERSION = "1.0"
PSNR_CAP_DB = 100.0
SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
SYNTHESIS_GROUPS = ("ALL", "CN", "MCI", "AD")
TALLY_GROUPS = ("overall", "CN", "MCI_AD")
METRIC_KEYS = ("mse", "psnr_db", "ssim")
CSV_HEADER = ("subject_id", "slice_index", "diagnosis", "mse", "psnr_db", "ssim")


def to_unit(x):
    """[-1, 1] -> [0, 1] as float64."""
    if torch.is_tensor(x):
        x = x.detach().cpu().numpy()
    return (np.asarray(x, dtype=np.float64) + 1.0) / 2.0


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def mse(a, b):
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(err, data_range=1.0):
    if err == 0:
        return PSNR_CAP_DB
    return float(min(PSNR_CAP_DB, 10.0 * np.log10(data_range ** 2 / err)))


def psnr(a, b, data_range=1.0):
    return psnr_from_mse(mse(a, b), data_range)


def gaussian_window(size=SSIM_WIN, sigma=SSIM_SIGMA):
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(a, b, data_range=1.0):
    """Local SSIM over every fully contained 11x11 Gaussian window."""
    a, b = _pair(a, b)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2D image, got shape {a.shape}")
    if min(a.shape) < SSIM_WIN:
        raise ShapeError(f"image {a.shape} smaller than the {SSIM_WIN}x{SSIM_WIN} window")
    w = gaussian_window()
    view = np.lib.stride_tricks.sliding_window_view

    def filt(x):
        return np.einsum("ijkl,kl->ij", view(x, (SSIM_WIN, SSIM_WIN)), w)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, data_range=1.0):
    return float(np.mean(ssim_map(a, b, data_range)))


def slice_metrics(y, y_hat):
    """All three metrics for one [-1, 1] slice pair, computed on [0, 1]."""
    a, b = to_unit(y), to_unit(y_hat)
    err = mse(a, b)
    return {"mse": err, "psnr_db": psnr_from_mse(err), "ssim": ssim(a, b)}


# ---------------------------------------------------------------------------
# Reports

@dataclass
class MetricsReport:
    records: list = field(default_factory=list)
    groups: dict = field(default_factory=dict)
    tallies: dict = field(default_factory=dict)
    subjects: list = field(default_factory=list)

    def to_dict(self, kind):
        out = {"schema_version": SCHEMA_VERSION, "kind": kind}
        if kind == "synthesis":
            out["groups"] = self.groups
        else:
            out["tallies"] = self.tallies
            out["subjects"] = self.subjects
        return out


def aggregate(records):
    """Mean and population std per metric for ALL and each diagnosis group."""
    out = {}
    for group in SYNTHESIS_GROUPS:
        sel = [r for r in records if group == "ALL" or diagnosis_group(r["diagnosis"]) == group]
        entry = {"n_slices": len(sel), "n_subjects": len({r["subject_id"] for r in sel})}
        for key in METRIC_KEYS:
            vals = np.array([r[key] for r in sel], dtype=np.float64)
            entry[key] = {"mean": float(vals.mean()) if len(vals) else None,
                          "std": float(vals.std()) if len(vals) else None}
        out[group] = entry
    return out


def write_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def write_records_csv(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow([r["subject_id"], r["slice_index"], r["diagnosis"],
                        repr(r["mse"]), repr(r["psnr_db"]), repr(r["ssim"])])
    return path


def read_records_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{"subject_id": r["subject_id"], "slice_index": int(r["slice_index"]),
             "diagnosis": r["diagnosis"], **{k: float(r[k]) for k in METRIC_KEYS}}
            for r in rows]


def load_schema(name):
    return json.loads((Path(__file__).parent / "schemas" / f"{name}.schema.json").read_text())


def validate_report(obj, name):
    import jsonschema

    jsonschema.validate(obj, load_schema(name))
    return obj


# ---------------------------------------------------------------------------
# Images

def save_png(arr_u8, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # pinned encoder settings keep reruns byte-identical
    Image.fromarray(arr_u8).save(path, format="PNG", optimize=False, compress_level=6)
    return path


def quantize_unit(x):
    return np.round(np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def render_difference_map(y, y_hat, path, mri=None, panel_path=None):
    """Write |y - y_hat| (on [0, 1]) as 8-bit grayscale; optionally the
    four-column MRI | real PET | synthetic PET | difference panel."""
    a, b = _pair(to_unit(y), to_unit(y_hat))
    diff = quantize_unit(np.abs(a - b))
    save_png(diff, path)
    if panel_path is not None:
        cols = [quantize_unit(to_unit(mri)) if mri is not None else np.zeros_like(diff),
                quantize_unit(a), quantize_unit(b), diff]
        save_png(np.concatenate(cols, axis=1), panel_path)
    return path


# ---------------------------------------------------------------------------
# Evaluation drivers

def generator_fn(generator):
    """Wrap a Generator as a batch translator (eval mode, no noise, no grad)."""
    generator.eval()

    @torch.no_grad()
    def translate(mri):
        return generator(mri)[0]

    return translate


def _translate_slices(translate, slices, batch_size):
    out = []
    for start in range(0, len(slices), batch_size):
        x = torch.from_numpy(np.stack(slices[start:start + batch_size]).astype(np.float32))
        out += list(translate(x.unsqueeze(1))[:, 0].cpu().numpy())
    return out


def synthesize_subject(translate, row, indices, image_size, batch_size=16):
    """SlicePairs for ``row`` plus the synthetic PET for each slice."""
    pairs = load_pairs(row, indices, image_size)
    fakes = _translate_slices(translate, [p.mri for p in pairs], batch_size)
    return pairs, fakes


def evaluate_synthesis(translate, rows, slice_set="central100", image_size=256,
                       diff_dir=None, batch_size=16):
    """Per-slice metrics over the evaluation slices of every test subject."""
    missing = [r.subject_id for r in rows if not r.pet_path or not Path(r.pet_path).exists()
               or not Path(r.mri_path).exists()]
    if missing:
        raise DataError(f"missing MRI/PET files for subjects: {', '.join(missing)}")
    indices = evaluation_slices(slice_set)
    records = []
    for row in rows:
        pairs, fakes = synthesize_subject(translate, row, indices, image_size, batch_size)
        for pair, fake in zip(pairs, fakes):
            rec = {"subject_id": row.subject_id, "slice_index": pair.slice_index,
                   "diagnosis": row.diagnosis}
            rec.update(slice_metrics(pair.pet, fake))
            records.append(rec)
            if diff_dir is not None:
                base = Path(diff_dir) / row.subject_id
                render_difference_map(pair.pet, fake, base / f"{pair.slice_index}.png",
                                      mri=pair.mri,
                                      panel_path=base / f"{pair.slice_index}_panel.png")
    return MetricsReport(records=records, groups=aggregate(records))


def classifier_eval_slices(depth):
    """Every slice of the 76..176 band; no class-dependent subsampling at test time."""
    return list(range(76, 177)) if depth >= 177 else []


def _empty_tally():
    return {g: {"correct": 0, "total": 0} for g in TALLY_GROUPS}


def evaluate_classifier(predict, rows, source="real", translate=None, image_size=256,
                        batch_size=16):
    """Subject-level accuracy tallies for one input source.

    ``predict`` maps a list of [-1, 1] slices to probabilities. For
    ``source="synthetic"`` the MRI slices are first passed through ``translate``.
    """
    from .trainer import aggregate_subject_prediction

    if source not in ("real", "synthetic"):
        raise DataError(f"unknown classifier input source {source!r}")
    if source == "synthetic" and translate is None:
        raise DataError("synthetic evaluation needs a generator")
    tally = _empty_tally()
    subjects = []
    for row in rows:
        if source == "real":
            if not row.pet_path:
                raise DataError(f"{row.subject_id}: real-source evaluation needs PET")
            vol = load_volume(row.pet_path, row.subject_id, row.diagnosis, "PET")
            slices = normalized_slices(vol, classifier_eval_slices(vol.depth), image_size)
        else:
            vol = load_volume(row.mri_path, row.subject_id, row.diagnosis, "MRI")
            mri = normalized_slices(vol, classifier_eval_slices(vol.depth), image_size)
            slices = _translate_slices(translate, mri, batch_size)
        if not slices:
            raise DataError(f"{row.subject_id}: volume too shallow for evaluation")
        pred = aggregate_subject_prediction(predict(slices))
        label = binary_label(row.diagnosis)
        ok = int(pred["label"] == label)
        for g in ("overall", "CN" if label == 0 else "MCI_AD"):
            tally[g]["correct"] += ok
            tally[g]["total"] += 1
        subjects.append({"subject_id": row.subject_id, "diagnosis": row.diagnosis,
                         "label": label, "predicted": pred["label"],
                         "mean_prob": pred["mean_prob"], "source": source})
    for entry in tally.values():
        entry["accuracy"] = entry["correct"] / entry["total"] if entry["total"] else None
    return MetricsReport(tallies={source: tally}, subjects=subjects)


def merge_classifier_reports(*reports):
    out = MetricsReport()
    for r in reports:
        out.tallies.update(r.tallies)
        out.subjects += r.subjects
    return out


def format_tally_table(tallies):
    lines = [f"{'group':<8}" + "".join(f"{s:>22}" for s in tallies)]
    for g in TALLY_GROUPS:
        cells = []
        for s in tallies:
            t = tallies[s][g]
            acc = f"{100 * t['accuracy']:.2f}%" if t["accuracy"] is not None else "n/a"
            cells.append(f"{t['correct']} / {t['total']} ({acc})")
        lines.append(f"{g:<8}" + "".join(f"{c:>22}" for c in cells))
    return "\n".join(lines) + "\n"

