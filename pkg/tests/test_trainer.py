import json
import math

import numpy as np
import pytest
import torch

from mcrvqgan.checkpoint import load_checkpoint
from mcrvqgan.config import gan_hash
from mcrvqgan.data import make_phantom_pair
from mcrvqgan.errors import DataError, DivergenceError, RangeError
from mcrvqgan.trainer import (ClassifierTrainer, GanTrainer, aggregate_subject_prediction,
                              classifier_training_data, cosine_lr, exp_lr, load_classifier,
                              load_generator, noise_sigma_sq, read_jsonl, smooth_real_labels,
                              train_classifier, train_gan, _as_batch)


def phantom_pairs(n, size=32, offset=0):
    return [make_phantom_pair(offset + i, size, severity=i / max(n - 1, 1)) for i in range(n)]


# -- schedules ----------------------------------------------------------------

def test_cosine_lr_points():
    assert cosine_lr(0) == 2e-4
    assert cosine_lr(250) == pytest.approx(1e-4, abs=1e-18)
    assert cosine_lr(500) == 0.0
    seq = [cosine_lr(e) for e in range(501)]
    assert all(a >= b for a, b in zip(seq, seq[1:]))
    with pytest.raises(RangeError):
        cosine_lr(501)
    with pytest.raises(RangeError):
        cosine_lr(-1)


def test_noise_schedule_points():
    assert noise_sigma_sq(0) == 0.1
    assert noise_sigma_sq(250) == 0.05
    assert noise_sigma_sq(500) == 0.0
    with pytest.raises(RangeError):
        noise_sigma_sq(600)


def test_exp_lr_points():
    assert exp_lr(0) == 2e-4
    assert exp_lr(1) == pytest.approx(1.96e-4, rel=1e-12)
    assert exp_lr(200) == pytest.approx(2e-4 * 0.98 ** 200, rel=1e-12)
    assert exp_lr(200) == pytest.approx(3.52e-6, abs=5e-9)
    seq = [exp_lr(e) for e in range(200)]
    assert all(a > b for a, b in zip(seq, seq[1:]))


def test_smoothed_labels():
    x = smooth_real_labels((100_000,), torch.Generator().manual_seed(0), dtype=torch.float64)
    assert x.min() >= 0.9 and x.max() <= 1.0
    assert abs(float(x.mean()) - 0.95) < 0.002
    y = smooth_real_labels((100_000,), torch.Generator().manual_seed(0), dtype=torch.float64)
    assert torch.equal(x, y)


@pytest.mark.parametrize("probs,label", [([0.6, 0.6, 0.4], 1), ([0.4, 0.4, 0.6], 0),
                                         ([0.6, 0.4], 0), ([0.9, 0.3], 1), ([0.51], 1)])
def test_subject_aggregation(probs, label):
    out = aggregate_subject_prediction(probs)
    assert out["label"] == label
    assert out["mean_prob"] == pytest.approx(sum(probs) / len(probs))


def test_subject_aggregation_empty():
    with pytest.raises(DataError):
        aggregate_subject_prediction([])


# -- GAN step -----------------------------------------------------------------

def batch(pairs):
    return _as_batch([p.mri for p in pairs]), _as_batch([p.pet for p in pairs])


def strip(rep):
    return {k: v for k, v in rep.items() if k != "indices"}


def test_train_step_deterministic_and_valid(cfg):
    mri, pet = batch(phantom_pairs(2))
    reps = []
    for _ in range(2):
        t = GanTrainer(cfg)
        reps.append([strip(t.train_step(mri, pet, 0)) for _ in range(2)])
    assert reps[0] == reps[1]
    for rep in reps[0]:
        assert all(math.isfinite(v) and v >= 0 for v in rep.values())
        assert 1 <= rep["perplexity"] <= cfg.model.codebook_size


def test_nonfinite_loss_raises(cfg):
    mri, pet = batch(phantom_pairs(2))
    pet[0, 0, 0, 0] = float("nan")
    with pytest.raises(DivergenceError):
        GanTrainer(cfg).train_step(mri, pet, 0)


def test_divergence_guard(cfg):
    t = GanTrainer(cfg)
    t._divergence_guard(1.0)
    t._divergence_guard(11.0)
    t._divergence_guard(11.0)
    t._divergence_guard(1.0)
    t._divergence_guard(11.0)
    t._divergence_guard(11.0)
    with pytest.raises(DivergenceError):
        t._divergence_guard(11.0)


def test_eval_generator_is_noise_free(cfg):
    t = GanTrainer(cfg)
    mri, pet = batch(phantom_pairs(2))
    t.train_step(mri, pet, 0)
    t.G.eval()
    with torch.no_grad():
        assert torch.equal(t.G(mri)[0], t.G(mri)[0])


# -- train_gan ----------------------------------------------------------------

@pytest.fixture(scope="module")
def gan_runs(tmp_path_factory):
    from mcrvqgan.config import tiny_config

    cfg = tiny_config(train__epochs=3, train__checkpoint_every=1)
    pairs = phantom_pairs(4)
    full = tmp_path_factory.mktemp("full")
    _, rec_full = train_gan(cfg, pairs, full)
    part = tmp_path_factory.mktemp("part")
    train_gan(tiny_config(train__epochs=3, train__checkpoint_every=1), pairs, part)
    resumed = tmp_path_factory.mktemp("resumed")
    (resumed / "train_log.jsonl").write_text(
        "".join(l + "\n" for l in (full / "train_log.jsonl").read_text().splitlines()[:1]))
    _, rec_res = train_gan(cfg, pairs, resumed, resume=full / "ckpt_epoch0001.ckpt")
    return cfg, full, part, resumed, rec_full, rec_res


def test_train_gan_logs_and_checkpoints(gan_runs):
    cfg, full, *_ = gan_runs
    log = read_jsonl(full / "train_log.jsonl")
    assert [r["epoch"] for r in log] == [0, 1, 2]
    assert [r["lr"] for r in log] == [cosine_lr(e, 3, cfg.train.lr) for e in range(3)]
    assert [r["noise_sigma_sq"] for r in log] == [noise_sigma_sq(e, 3, 0.1) for e in range(3)]
    for r in log:
        assert 1 <= r["perplexity"] <= cfg.model.codebook_size
    for name in ("ckpt_epoch0001.ckpt", "ckpt_epoch0002.ckpt", "ckpt_epoch0003.ckpt", "last.ckpt"):
        assert (full / name).exists()


def test_same_seed_byte_identical(gan_runs):
    _, full, part, *_ = gan_runs
    assert (full / "train_log.jsonl").read_bytes() == (part / "train_log.jsonl").read_bytes()
    assert (full / "last.ckpt").read_bytes() == (part / "last.ckpt").read_bytes()


def test_resume_matches_uninterrupted(gan_runs):
    _, full, _, resumed, rec_full, rec_res = gan_runs
    assert rec_res == rec_full[1:]
    assert (full / "train_log.jsonl").read_bytes() == (resumed / "train_log.jsonl").read_bytes()
    assert (full / "last.ckpt").read_bytes() == (resumed / "last.ckpt").read_bytes()


def test_checkpoint_loads_bitwise(gan_runs, tmp_path):
    cfg, full, *_ = gan_runs
    G, _ = load_generator(full / "last.ckpt", cfg)
    state, h = load_checkpoint(full / "last.ckpt")
    assert h == gan_hash(cfg)
    for k, v in G.state_dict().items():
        assert torch.equal(v, state["generator"][k]), k
    t = GanTrainer.from_checkpoint(full / "last.ckpt", cfg)
    t.save(tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == (full / "last.ckpt").read_bytes()


def test_train_gan_needs_pairs(cfg):
    with pytest.raises(DataError):
        train_gan(cfg, [])


# -- classifier ---------------------------------------------------------------

def test_classifier_label_mapping(corpus_rows):
    rows = [r for r in corpus_rows if r.diagnosis in ("SMC", "LMCI", "CN", "AD")]
    images, labels = classifier_training_data(rows, 32)
    expect = []
    for r in rows:
        n = 51 if r.diagnosis in ("CN", "SMC") else 101
        expect += [0 if r.diagnosis in ("CN", "SMC") else 1] * n
    assert labels == expect and len(images) == len(expect)


def test_classifier_empty_class(cfg):
    imgs = [make_phantom_pair(i, 32).pet for i in range(4)]
    with pytest.raises(DataError):
        train_classifier(cfg, imgs, [1, 1, 1, 1])
    with pytest.raises(DataError):
        train_classifier(cfg, [], [])


def test_classifier_deterministic(cfg, tmp_path):
    cfg.classifier.epochs = 2
    imgs = [make_phantom_pair(i, 32, severity=i % 2).pet for i in range(8)]
    labels = [i % 2 for i in range(8)]
    t1, r1 = train_classifier(cfg, imgs, labels, tmp_path)
    t2, r2 = train_classifier(cfg, imgs, labels)
    assert r1 == r2
    assert t1.predict(imgs) == t2.predict(imgs)
    assert [json.loads(l) for l in (tmp_path / "classifier_log.jsonl").read_text().splitlines()] == r1
    model, _ = load_classifier(tmp_path / "classifier.ckpt")
    for k, v in model.state_dict().items():
        assert torch.equal(v, t1.model.state_dict()[k])


def test_classifier_eval_repeatable_without_augmentation(cfg):
    cfg.classifier.augment = False
    imgs = [make_phantom_pair(i, 32).pet for i in range(4)]
    t = ClassifierTrainer(cfg)
    t.run_epoch(imgs, [0, 1, 0, 1], 0)
    assert t.predict(imgs) == t.predict(imgs)


def test_augment_preserves_shape_and_range(cfg):
    t = ClassifierTrainer(cfg)
    x = _as_batch([make_phantom_pair(i, 32).pet for i in range(3)])
    y = t.augment(x)
    assert y.shape == x.shape and float(y.min()) >= -1 - 1e-6 and float(y.max()) <= 1 + 1e-6
