import math

import numpy as np
import pytest
from PIL import Image

from mcrvqgan.data import ManifestRow, Volume, phantom_diagnoses, save_volume, stratified_split
from mcrvqgan.errors import DataError, ShapeError
from mcrvqgan.metrics import (SYNTHESIS_GROUPS, aggregate, evaluate_classifier, evaluate_synthesis,
                              gaussian_window, mse, psnr, psnr_from_mse, read_records_csv,
                              render_difference_map, ssim, validate_report, write_records_csv)


def ssim_oracle(a, b, L=1.0):
    """Direct double loop over every window position."""
    w = gaussian_window()
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    vals = []
    for i in range(a.shape[0] - 10):
        for j in range(a.shape[1] - 10):
            pa, pb = a[i:i + 11, j:j + 11], b[i:i + 11, j:j + 11]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va = (w * (pa - ma) ** 2).sum()
            vb = (w * (pb - mb) ** 2).sum()
            cov = (w * (pa - ma) * (pb - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


# -- primitives -----------------------------------------------------------------

def test_mse_examples():
    rng = np.random.default_rng(0)
    a, b = rng.random((16, 16)), rng.random((16, 16))
    assert mse(a, a) == 0
    assert mse(np.full((4, 4), 0.3), np.full((4, 4), 0.4)) == pytest.approx(0.01, abs=1e-15)
    assert mse(a, b) == mse(b, a)
    with pytest.raises(ShapeError):
        mse(a, b[:8])


def test_psnr_examples():
    assert psnr_from_mse(0.01) == pytest.approx(20.0, abs=1e-9)
    assert psnr(np.ones((4, 4)), np.ones((4, 4))) == 100.0
    assert psnr_from_mse(0.005) - psnr_from_mse(0.01) == pytest.approx(3.0103, abs=1e-4)
    assert psnr_from_mse(0.005) - psnr_from_mse(0.01) == pytest.approx(10 * math.log10(2), abs=1e-12)


def test_psnr_strictly_decreasing_in_mse():
    errs = np.sort(np.random.default_rng(1).uniform(1e-6, 1.0, 500))
    vals = [psnr_from_mse(e) for e in errs]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_ssim_identity_and_symmetry():
    rng = np.random.default_rng(2)
    for _ in range(20):
        a, b = rng.random((24, 20)), rng.random((24, 20))
        assert ssim(a, a) == pytest.approx(1.0, abs=1e-9)
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


def test_ssim_constant_images_luminance_only():
    c1, c2 = 0.3, 0.7
    expect = (2 * c1 * c2 + 1e-4) / (c1 ** 2 + c2 ** 2 + 1e-4)
    assert ssim(np.full((16, 16), c1), np.full((16, 16), c2)) == pytest.approx(expect, abs=1e-12)


def test_ssim_matches_loop_oracle():
    rng = np.random.default_rng(3)
    for _ in range(10):
        a, b = rng.random((16, 16)), rng.random((16, 16))
        assert ssim(a, b) == pytest.approx(ssim_oracle(a, b), abs=1e-6)
    a = rng.random((16, 16))
    b = np.clip(a + 0.05 * rng.standard_normal((16, 16)), 0, 1)
    assert ssim(a, b) == pytest.approx(ssim_oracle(a, b), abs=1e-6)


def test_ssim_matches_skimage():
    metrics = pytest.importorskip("skimage.metrics")
    rng = np.random.default_rng(4)
    a = rng.random((32, 32))
    b = np.clip(a + 0.1 * rng.standard_normal((32, 32)), 0, 1)
    _, full = metrics.structural_similarity(a, b, data_range=1.0, gaussian_weights=True,
                                            sigma=1.5, use_sample_covariance=False, full=True)
    assert ssim(a, b) == pytest.approx(full[5:-5, 5:-5].mean(), abs=1e-9)


def test_ssim_bounded_on_random_pairs():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        s = ssim(rng.random((11, 11)), rng.random((11, 11)))
        assert -1 <= s <= 1


def test_ssim_small_image():
    with pytest.raises(ShapeError):
        ssim(np.zeros((10, 30)), np.zeros((10, 30)))


def test_permutation_affects_ssim_only():
    rng = np.random.default_rng(6)
    a = rng.random((16, 16))
    b = np.clip(a + 0.1 * rng.standard_normal((16, 16)), 0, 1)
    perm = rng.permutation(256)
    pa, pb = a.ravel()[perm].reshape(16, 16), b.ravel()[perm].reshape(16, 16)
    assert mse(pa, pb) == pytest.approx(mse(a, b), abs=1e-15)
    assert psnr(pa, pb) == pytest.approx(psnr(a, b), abs=1e-9)
    assert abs(ssim(pa, pb) - ssim(a, b)) > 1e-3


# -- difference maps ------------------------------------------------------------

def test_difference_map_identity_is_black(tmp_path):
    y = np.random.default_rng(0).uniform(-1, 1, (16, 16))
    render_difference_map(y, y, tmp_path / "d.png")
    assert not np.asarray(Image.open(tmp_path / "d.png")).any()


def test_difference_map_single_pixel(tmp_path):
    y = np.full((8, 8), -1.0)
    y_hat = y.copy()
    y_hat[3, 5] = 1.0
    render_difference_map(y, y_hat, tmp_path / "d.png", mri=y, panel_path=tmp_path / "p.png")
    img = np.asarray(Image.open(tmp_path / "d.png"))
    assert img[3, 5] == 255 and img.sum() == 255
    assert np.asarray(Image.open(tmp_path / "p.png")).shape == (8, 32)


def test_difference_map_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    y, y_hat = rng.uniform(-1, 1, (20, 20)), rng.uniform(-1, 1, (20, 20))
    render_difference_map(y, y_hat, tmp_path / "d.png")
    decoded = np.asarray(Image.open(tmp_path / "d.png")) / 255.0
    assert np.abs(decoded - np.abs(y - y_hat) / 2).max() <= 1 / 255


# -- aggregation and evaluation -------------------------------------------------

@pytest.fixture(scope="module")
def test_split_rows(tmp_path_factory):
    """The 44 test subjects of a 222-subject phantom cohort as small random volumes."""
    out = tmp_path_factory.mktemp("split")
    diags = phantom_diagnoses(222, seed=1)
    subjects = [(f"s{i:03d}", d) for i, d in enumerate(diags)]
    split = stratified_split(subjects, 178 / 222, seed=0)
    lookup = dict(subjects)
    rows = []
    rng = np.random.default_rng(0)
    for sid in split.test_subjects:
        v = Volume(rng.random((177, 32, 8)).astype(np.float32), sid, lookup[sid], "PET")
        path = save_volume(v, out / f"{sid}_PET.nii.gz")
        rows.append(ManifestRow(sid, lookup[sid], str(path), str(path)))
    return rows


def test_identity_pipeline(test_split_rows, tmp_path):
    rows = test_split_rows[:3]
    report = evaluate_synthesis(lambda x: x, rows, "train14", 32, diff_dir=tmp_path)
    g = report.groups["ALL"]
    assert g["mse"]["mean"] == 0 and g["ssim"]["mean"] == 1 and g["psnr_db"]["mean"] == 100
    assert g["n_slices"] == 42
    png = tmp_path / rows[0].subject_id / "76.png"
    assert png.exists() and not np.asarray(Image.open(png)).any()


def test_group_sizes_on_test_split(test_split_rows):
    report = evaluate_synthesis(lambda x: x, test_split_rows, "train14", 32)
    sizes = {g: report.groups[g]["n_subjects"] for g in SYNTHESIS_GROUPS}
    assert sizes == {"ALL": 44, "CN": 26, "MCI": 15, "AD": 3}
    validate_report(report.to_dict("synthesis"), "synthesis_report")


def test_aggregates_recomputable_from_csv(tmp_path):
    rng = np.random.default_rng(7)
    diags = ["CN", "SMC", "EMCI", "LMCI", "AD"]
    records = [{"subject_id": f"s{i % 6}", "slice_index": 76 + i, "diagnosis": diags[i % 5],
                "mse": float(rng.random()), "psnr_db": float(rng.uniform(10, 40)),
                "ssim": float(rng.random())} for i in range(60)]
    write_records_csv(records, tmp_path / "r.csv")
    back = read_records_csv(tmp_path / "r.csv")
    assert back == records
    agg, again = aggregate(records), aggregate(back)
    members = {"ALL": diags, "CN": ("CN", "SMC"), "MCI": ("EMCI", "LMCI"), "AD": ("AD",)}
    for g in SYNTHESIS_GROUPS:
        for k in ("mse", "psnr_db", "ssim"):
            sel = [r[k] for r in back if r["diagnosis"] in members[g]]
            assert abs(again[g][k]["mean"] - np.mean(sel)) < 1e-9
            assert abs(agg[g][k]["std"] - np.std(sel)) < 1e-9


def test_missing_files_listed(tmp_path):
    rows = [ManifestRow("ghost", "CN", str(tmp_path / "a.nii"), str(tmp_path / "b.nii"))]
    with pytest.raises(DataError, match="ghost"):
        evaluate_synthesis(lambda x: x, rows, "train14", 32)


def test_constant_classifier_tally(test_split_rows):
    report = evaluate_classifier(lambda s: [0.9] * len(s), test_split_rows, "real", image_size=32)
    t = report.tallies["real"]
    assert (t["overall"]["correct"], t["overall"]["total"]) == (18, 44)
    assert (t["CN"]["correct"], t["CN"]["total"]) == (0, 26)
    assert (t["MCI_AD"]["correct"], t["MCI_AD"]["total"]) == (18, 18)


def test_real_and_synthetic_sources_agree(test_split_rows):
    rows = test_split_rows[:6]

    def predict(slices):
        return [float(np.mean(s) > -0.05) * 0.8 + 0.1 for s in slices]

    real = evaluate_classifier(predict, rows, "real", image_size=32)
    syn = evaluate_classifier(predict, rows, "synthetic", translate=lambda x: x, image_size=32)
    assert real.tallies["real"] == syn.tallies["synthetic"]
    t = real.tallies["real"]
    assert t["CN"]["correct"] + t["MCI_AD"]["correct"] == t["overall"]["correct"]
    assert t["CN"]["total"] + t["MCI_AD"]["total"] == t["overall"]["total"]


def test_synthetic_source_needs_generator(test_split_rows):
    with pytest.raises(DataError):
        evaluate_classifier(lambda s: s, test_split_rows[:1], "synthetic")
