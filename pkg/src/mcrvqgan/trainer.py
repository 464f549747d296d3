"""GAN and classifier training: schedules, stabilizers, alternating updates,
checkpointing and slice -> subject aggregation."""

import hashlib
import json
import logging
import math
from pathlib import Path

import numpy as np
import torch
import torchvision.transforms.functional as TF

from .blocks import attach_generator, perplexity
from .checkpoint import load_checkpoint, save_checkpoint
from .config import classifier_hash, config_from_dict, derive_seed, gan_hash
from .data import binary_label, load_pairs, load_volume, normalized_slices, select_classifier_slices, select_training_slices
from .errors import DataError, DivergenceError, RangeError
from .losses import (adv_loss_g, build_extractor, disc_loss, focal_loss, generator_total,
                     perceptual_loss, r1_penalty, rec_loss, vq_loss)
from .networks import Classifier, Discriminator, Generator

log = logging.getLogger(__name__)

LOSS_KEYS = ("adv", "rec", "perc", "vq", "gen_total", "disc", "r1")


# ---------------------------------------------------------------------------
# Schedules and stabilizers

def cosine_lr(epoch, epochs=500, lr_init=2e-4):
    """lr_init * (1 + cos(pi * epoch / epochs)) / 2, floored at 0."""
    if not 0 <= epoch <= epochs:
        raise RangeError(f"epoch {epoch} outside [0, {epochs}]")
    return max(0.0, lr_init * (1.0 + math.cos(math.pi * epoch / epochs)) / 2.0)


def exp_lr(epoch, lr_init=2e-4, gamma=0.98):
    if epoch < 0:
        raise RangeError(f"epoch {epoch} < 0")
    return lr_init * gamma ** epoch


def noise_sigma_sq(epoch, total=500, initial=0.1):
    """Variance of the instance noise added to generated images."""
    if not 0 <= epoch <= total:
        raise RangeError(f"epoch {epoch} outside [0, {total}]")
    return initial * (1.0 - epoch / total)


def smooth_real_labels(shape, generator, low=0.9, high=1.0, dtype=torch.float32):
    """One-sided label smoothing: i.i.d. U[low, high] targets for real patches."""
    return low + (high - low) * torch.rand(shape, generator=generator, dtype=dtype)


def aggregate_subject_prediction(slice_probs):
    """Majority vote over slices (prob > 0.5); ties fall back to mean > 0.5."""
    probs = [float(p) for p in slice_probs]
    if not probs:
        raise DataError("no slice probabilities to aggregate")
    pos = sum(p > 0.5 for p in probs)
    mean = sum(probs) / len(probs)
    if 2 * pos > len(probs):
        label = 1
    elif 2 * pos < len(probs):
        label = 0
    else:
        label = int(mean > 0.5)
    return {"label": label, "mean_prob": mean}


def _seeded(seed, build):
    """Run ``build`` with the global torch RNG seeded, leaving it untouched afterwards."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return build()


def _as_batch(arrays):
    return torch.from_numpy(np.stack(arrays).astype(np.float32)).unsqueeze(1)


def _order_hash(keys):
    h = hashlib.sha256()
    for k in keys:
        h.update(repr(k).encode())
    return h.hexdigest()[:16]


def append_jsonl(path, record):
    with open(path, "a") as fh:
        fh.write(json.dumps(record) + "\n")


def read_jsonl(path):
    path = Path(path)
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


# ---------------------------------------------------------------------------
# Data assembly

def gan_training_pairs(rows, image_size=256):
    """The 14 selected slices of every row, as normalized SlicePairs."""
    pairs = []
    for row in rows:
        if not row.pet_path:
            raise DataError(f"{row.subject_id}: training requires a PET volume")
        depth = load_volume(row.mri_path, row.subject_id, row.diagnosis, "MRI").depth
        pairs += load_pairs(row, select_training_slices(depth), image_size)
    return pairs


def classifier_training_data(rows, image_size=256):
    """Real PET slices (CN group subsampled) with binary labels."""
    images, labels = [], []
    for row in rows:
        pet = load_volume(row.pet_path, row.subject_id, row.diagnosis, "PET")
        idx = select_classifier_slices(pet, row.diagnosis)
        images += normalized_slices(pet, idx, image_size)
        labels += [binary_label(row.diagnosis)] * len(idx)
    return images, labels


# ---------------------------------------------------------------------------
# GAN training

class GanTrainer:
    """Owns generator, discriminator, optimizers and every RNG stream."""

    def __init__(self, cfg):
        self.cfg = cfg
        seed = cfg.run.seed
        size = cfg.data.image_size
        self.G = _seeded(derive_seed(seed, "generator"), lambda: Generator(cfg.model, size))
        self.D = _seeded(derive_seed(seed, "discriminator"), lambda: Discriminator(cfg.discriminator))
        self.extractor = build_extractor(cfg.perceptual)
        t = cfg.train
        opt = dict(lr=t.lr, betas=(t.beta1, t.beta2), weight_decay=t.weight_decay)
        self.opt_g = torch.optim.AdamW(self.G.parameters(), **opt)
        self.opt_d = torch.optim.AdamW(self.D.parameters(), **opt)
        self.stabilizer_rng = torch.Generator().manual_seed(derive_seed(seed, "stabilizers"))
        self.dropout_rng = torch.Generator().manual_seed(derive_seed(seed, "dropout"))
        attach_generator(self.G, self.dropout_rng)
        self.epoch = 0
        self.step_count = 0
        self.rec_reference = None
        self.rec_strikes = 0

    def set_lr(self, lr):
        for opt in (self.opt_g, self.opt_d):
            for group in opt.param_groups:
                group["lr"] = lr

    def train_step(self, mri, pet, epoch):
        """One discriminator update, one generator update, one codebook EMA update."""
        cfg, w = self.cfg, self.cfg.loss
        sigma = math.sqrt(noise_sigma_sq(epoch, cfg.train.epochs, cfg.train.noise_sigma_sq))
        self.G.train()
        self.D.train()
        if not self.G.codebook.initialized:
            with torch.no_grad():
                z0 = self.G.encode(mri)
            self.G.codebook.init_from_data(z0.permute(0, 2, 3, 1).reshape(-1, z0.shape[1]),
                                           self.stabilizer_rng)
        fake, stats = self.G(mri)

        # discriminator
        self.D.requires_grad_(True)
        noisy = fake.detach() + sigma * torch.randn(fake.shape, generator=self.stabilizer_rng)
        logits_real = self.D(mri, pet)
        logits_fake = self.D(mri, noisy)
        targets = smooth_real_labels(logits_real.shape, self.stabilizer_rng,
                                     cfg.train.label_smooth_low, cfg.train.label_smooth_high)
        l_disc = disc_loss(logits_real, logits_fake, targets)
        l_r1 = r1_penalty(self.D, mri, pet, w.r1_gamma)
        self.opt_d.zero_grad(set_to_none=True)
        (l_disc + l_r1).backward()
        self.opt_d.step()

        # generator
        self.D.requires_grad_(False)
        noisy = fake + sigma * torch.randn(fake.shape, generator=self.stabilizer_rng)
        parts = {
            "adv": adv_loss_g(self.D(mri, noisy)),
            "rec": rec_loss(pet, fake),
            "perc": perceptual_loss(pet, fake, self.extractor),
            "vq": vq_loss(stats["encoder_out"], stats["z_q"], w.commitment_beta),
        }
        total = generator_total(parts, w)
        self.opt_g.zero_grad(set_to_none=True)
        total.backward()
        self.opt_g.step()
        self.D.requires_grad_(True)

        z = stats["encoder_out"].detach()
        self.G.codebook.update(z.permute(0, 2, 3, 1).reshape(-1, z.shape[1]),
                               stats["indices"].reshape(-1))
        self.step_count += 1

        report = {k: float(v.detach()) for k, v in parts.items()}
        report.update(gen_total=float(total.detach()), disc=float(l_disc.detach()),
                      r1=float(l_r1.detach()),
                      perplexity=perplexity(stats["indices"], self.G.codebook.num_codes))
        bad = [k for k, v in report.items() if not math.isfinite(v)]
        if bad:
            raise DivergenceError(f"non-finite loss components {bad} at step {self.step_count}")
        report["indices"] = stats["indices"].detach()
        return report

    def run_epoch(self, pairs, epoch):
        """Train one epoch over ``pairs`` in a (seed, epoch)-determined order."""
        cfg = self.cfg
        lr = cosine_lr(epoch, cfg.train.epochs, cfg.train.lr)
        self.set_lr(lr)
        order = np.random.default_rng(derive_seed(cfg.run.seed, f"epoch{epoch}")).permutation(len(pairs))
        bs = cfg.train.batch_size
        sums = dict.fromkeys(LOSS_KEYS, 0.0)
        counts = torch.zeros(self.G.codebook.num_codes, dtype=torch.long)
        n_steps = 0
        for start in range(0, len(order), bs):
            batch = [pairs[i] for i in order[start:start + bs]]
            mri = _as_batch([p.mri for p in batch])
            pet = _as_batch([p.pet for p in batch])
            rep = self.train_step(mri, pet, epoch)
            for k in LOSS_KEYS:
                sums[k] += rep[k]
            counts += torch.bincount(rep["indices"].reshape(-1), minlength=counts.numel())
            n_steps += 1
        record = {"epoch": epoch, "lr": lr,
                  "noise_sigma_sq": noise_sigma_sq(epoch, cfg.train.epochs, cfg.train.noise_sigma_sq)}
        record.update({k: sums[k] / n_steps for k in LOSS_KEYS})
        record["perplexity"] = perplexity(
            torch.repeat_interleave(torch.arange(counts.numel()), counts), counts.numel())
        record["steps"] = n_steps
        record["batch_hash"] = _order_hash(
            (pairs[i].subject_id, pairs[i].slice_index) for i in order)
        self.epoch = epoch + 1
        self._divergence_guard(record["rec"])
        return record

    def _divergence_guard(self, rec_mean):
        t = self.cfg.train
        if self.rec_reference is None:
            self.rec_reference = rec_mean
            return
        if rec_mean > t.divergence_factor * self.rec_reference:
            self.rec_strikes += 1
        else:
            self.rec_strikes = 0
        if self.rec_strikes >= t.divergence_patience:
            raise DivergenceError(
                f"rec loss {rec_mean:.4g} > {t.divergence_factor}x first-epoch mean "
                f"{self.rec_reference:.4g} for {self.rec_strikes} epochs")

    # -- state ---------------------------------------------------------------

    def state_dict(self):
        return {
            "kind": "gan",
            "epoch": self.epoch,
            "step": self.step_count,
            "config": self.cfg.to_dict(),
            "generator": self.G.state_dict(),
            "discriminator": self.D.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "rng": {"stabilizers": self.stabilizer_rng.get_state(),
                    "dropout": self.dropout_rng.get_state()},
            "guard": {"rec_reference": self.rec_reference, "rec_strikes": self.rec_strikes},
        }

    def load_state_dict(self, state):
        self.G.load_state_dict(state["generator"])
        self.D.load_state_dict(state["discriminator"])
        self.opt_g.load_state_dict(state["opt_g"])
        self.opt_d.load_state_dict(state["opt_d"])
        self.stabilizer_rng.set_state(state["rng"]["stabilizers"])
        self.dropout_rng.set_state(state["rng"]["dropout"])
        self.epoch = state["epoch"]
        self.step_count = state["step"]
        self.rec_reference = state["guard"]["rec_reference"]
        self.rec_strikes = state["guard"]["rec_strikes"]

    def save(self, path):
        return save_checkpoint(path, self.state_dict(), gan_hash(self.cfg))

    @classmethod
    def from_checkpoint(cls, path, cfg=None):
        """Restore a trainer; ``cfg`` (if given) must hash-match the checkpoint."""
        state, _ = load_checkpoint(path, gan_hash(cfg) if cfg is not None else None)
        if state.get("kind") != "gan":
            raise DataError(f"{path}: not a GAN checkpoint")
        trainer = cls(cfg if cfg is not None else config_from_dict(state["config"]))
        trainer.load_state_dict(state)
        return trainer


def load_generator(path, expected_cfg=None):
    """Generator in eval mode from a GAN checkpoint, plus its config."""
    state, _ = load_checkpoint(path, gan_hash(expected_cfg) if expected_cfg is not None else None)
    if state.get("kind") != "gan":
        raise DataError(f"{path}: not a GAN checkpoint")
    cfg = config_from_dict(state["config"])
    G = Generator(cfg.model, cfg.data.image_size)
    G.load_state_dict(state["generator"])
    return G.eval(), cfg


def train_gan(cfg, pairs, out_dir=None, resume=None):
    """Train for ``cfg.train.epochs`` epochs; returns ``(trainer, log records)``.

    With ``out_dir`` set, appends ``train_log.jsonl`` and writes
    ``ckpt_epochNNNN.ckpt`` every ``checkpoint_every`` epochs plus ``last.ckpt``.
    """
    if not pairs:
        raise DataError("no training pairs")
    trainer = GanTrainer.from_checkpoint(resume, cfg) if resume else GanTrainer(cfg)
    out = Path(out_dir) if out_dir is not None else None
    log_path = out / "train_log.jsonl" if out is not None else None
    if log_path is not None:
        # a resumed run replaces anything logged past its starting epoch
        kept = [r for r in read_jsonl(log_path) if r["epoch"] < trainer.epoch]
        log_path.write_text("".join(json.dumps(r) + "\n" for r in kept))
    records = []
    for epoch in range(trainer.epoch, cfg.train.epochs):
        try:
            rec = trainer.run_epoch(pairs, epoch)
        except DivergenceError as exc:
            if out is not None:
                exc.dump_path = trainer.save(out / "divergence_dump.ckpt")
            raise
        records.append(rec)
        log.info("epoch %d lr %.3g rec %.4f perc %.4f disc %.4f perplexity %.2f",
                 epoch, rec["lr"], rec["rec"], rec["perc"], rec["disc"], rec["perplexity"])
        if log_path is not None:
            append_jsonl(log_path, rec)
            done = epoch + 1
            if done % cfg.train.checkpoint_every == 0 or done == cfg.train.epochs:
                trainer.save(out / f"ckpt_epoch{done:04d}.ckpt")
                trainer.save(out / "last.ckpt")
    return trainer, records


# ---------------------------------------------------------------------------
# Classifier training

class ClassifierTrainer:
    def __init__(self, cfg):
        self.cfg = cfg
        c = cfg.classifier
        seed = cfg.run.seed
        self.model = _seeded(derive_seed(seed, "classifier"),
                             lambda: Classifier(c, cfg.data.image_size))
        self.opt = torch.optim.Adam(self.model.parameters(), lr=c.lr)
        self.aug_rng = torch.Generator().manual_seed(derive_seed(seed, "augment"))
        self.dropout_rng = torch.Generator().manual_seed(derive_seed(seed, "classifier_dropout"))
        attach_generator(self.model, self.dropout_rng)
        self.epoch = 0

    def augment(self, batch):
        """Per-sample random rotation, horizontal flip and affine jitter."""
        c = self.cfg.classifier
        size = batch.shape[-1]
        out = []
        for img in batch:
            r = torch.rand(5, generator=self.aug_rng, dtype=torch.float64).tolist()
            angle = (2 * r[0] - 1) * c.rotation_deg
            tx = round((2 * r[1] - 1) * c.translate * size)
            ty = round((2 * r[2] - 1) * c.translate * size)
            scale = c.scale_min + (c.scale_max - c.scale_min) * r[3]
            img = TF.affine(img, angle=angle, translate=[tx, ty], scale=scale, shear=[0.0],
                            interpolation=TF.InterpolationMode.BILINEAR, fill=-1.0)
            if r[4] < c.flip_p:
                img = torch.flip(img, dims=[-1])
            out.append(img)
        return torch.stack(out)

    def run_epoch(self, images, labels, epoch):
        c = self.cfg.classifier
        lr = exp_lr(epoch, c.lr, c.lr_decay)
        for group in self.opt.param_groups:
            group["lr"] = lr
        order = np.random.default_rng(
            derive_seed(self.cfg.run.seed, f"cls_epoch{epoch}")).permutation(len(images))
        self.model.train()
        total, correct, loss_sum, steps = 0, 0, 0.0, 0
        w = self.cfg.loss
        for start in range(0, len(order), c.batch_size):
            idx = order[start:start + c.batch_size]
            x = _as_batch([images[i] for i in idx])
            y = torch.tensor([labels[i] for i in idx], dtype=torch.float32)
            if c.augment:
                x = self.augment(x)
            p = self.model(x)
            loss = focal_loss(p, y, w.focal_alpha, w.focal_gamma)
            self.opt.zero_grad(set_to_none=True)
            loss.backward()
            self.opt.step()
            loss_sum += float(loss.detach())
            correct += int(((p.detach() > 0.5).float() == y).sum())
            total += len(idx)
            steps += 1
        if not math.isfinite(loss_sum):
            raise DivergenceError(f"non-finite classifier loss at epoch {epoch}")
        self.epoch = epoch + 1
        return {"epoch": epoch, "lr": lr, "focal": loss_sum / steps,
                "train_batch_accuracy": correct / total}

    @torch.no_grad()
    def predict(self, images, batch_size=64):
        return predict_probs(self.model, images, batch_size)

    def state_dict(self):
        return {"kind": "classifier", "epoch": self.epoch, "config": self.cfg.to_dict(),
                "model": self.model.state_dict(), "opt": self.opt.state_dict(),
                "rng": {"augment": self.aug_rng.get_state(),
                        "dropout": self.dropout_rng.get_state()}}

    def save(self, path):
        return save_checkpoint(path, self.state_dict(), classifier_hash(self.cfg))


@torch.no_grad()
def predict_probs(model, images, batch_size=64):
    model.eval()
    out = []
    for start in range(0, len(images), batch_size):
        out.append(model(_as_batch(images[start:start + batch_size])))
    return torch.cat(out).tolist() if out else []


def load_classifier(path):
    state, _ = load_checkpoint(path)
    if state.get("kind") != "classifier":
        raise DataError(f"{path}: not a classifier checkpoint")
    cfg = config_from_dict(state["config"])
    model = Classifier(cfg.classifier, cfg.data.image_size)
    model.load_state_dict(state["model"])
    return model.eval(), cfg


def train_classifier(cfg, images, labels, out_dir=None):
    """Focal-loss training on real PET slices; returns ``(trainer, log records)``."""
    if not images:
        raise DataError("no classifier training images")
    if len(set(labels)) < 2:
        raise DataError(f"classifier training needs both classes, got only {sorted(set(labels))}")
    trainer = ClassifierTrainer(cfg)
    out = Path(out_dir) if out_dir is not None else None
    log_path = out / "classifier_log.jsonl" if out is not None else None
    if log_path is not None:
        log_path.write_text("")
    records = []
    for epoch in range(cfg.classifier.epochs):
        rec = trainer.run_epoch(images, labels, epoch)
        records.append(rec)
        if log_path is not None:
            append_jsonl(log_path, rec)
    if out is not None:
        trainer.save(out / "classifier.ckpt")
    return trainer, records
