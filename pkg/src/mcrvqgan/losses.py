"""Training objectives for the generator, discriminator and classifier.

Adversarial terms take patch *logits* and use the log-sigmoid form, so no
explicit clamping is needed there; probability-valued inputs (focal loss)
are clamped to ``[EPS, 1 - EPS]``.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import LossWeights
from .errors import BackendError, CapabilityError, ConfigError, ShapeError

EPS = 1e-7

VGG16_LAYOUT = (64, 64, "M", 128, 128, "M", 256, 256, 256, "M",
                512, 512, 512, "M", 512, 512, 512, "M")
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


class FeatureExtractor(nn.Module):
    """Frozen VGG-style network returning activations after selected convs.

    ``layers`` counts ReLU'd conv outputs from 1, so the default (2, 4, 7, 10)
    picks relu1_2, relu2_2, relu3_3 and relu4_3. Single-channel images in
    [-1, 1] are mapped to [0, 1], replicated to three channels and
    standardized with ImageNet statistics before the first conv.

    Backends:
      ``pretrained_vgg16`` -- torchvision ImageNet weights (downloaded on demand)
      ``fixed_random``     -- seeded Kaiming-normal weights, ``width`` scales
                              every conv's channel count and ``gain``
                              scales every conv's weights
    """

    def __init__(self, backend="fixed_random", layers=(2, 4, 7, 10), width=1.0,
                 seed=0, layout=VGG16_LAYOUT, gain=1.0):
        super().__init__()
        self.backend = backend
        self.layers = tuple(sorted(layers))
        n_conv = sum(1 for v in layout if v != "M")
        if not self.layers or self.layers[0] < 1 or self.layers[-1] > n_conv:
            raise ConfigError(f"perceptual.layers {layers} outside 1..{n_conv}")
        if backend == "pretrained_vgg16":
            if tuple(layout) != VGG16_LAYOUT or width != 1.0 or gain != 1.0:
                raise ConfigError("pretrained_vgg16 requires the stock VGG16 layout")
            convs = self._pretrained_convs()
        elif backend == "fixed_random":
            convs = self._random_convs(layout, width, seed, gain)
        else:
            raise ConfigError(f"unknown perceptual backend {backend!r}")
        body, k = [], 0
        for v in layout:
            if k == self.layers[-1]:
                break
            if v == "M":
                body.append(nn.MaxPool2d(2))
            else:
                body += [convs[k], nn.ReLU()]
                k += 1
        self.body = nn.Sequential(*body)
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    @staticmethod
    def _random_convs(layout, width, seed, gain=1.0):
        gen = torch.Generator().manual_seed(seed)
        convs, cin = [], 3
        for v in layout:
            if v == "M":
                continue
            cout = max(1, round(v * width))
            conv = nn.Conv2d(cin, cout, 3, padding=1)
            std = gain * (2.0 / (cin * 9)) ** 0.5
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * std)
                conv.bias.zero_()
            convs.append(conv)
            cin = cout
        return convs

    @staticmethod
    def _pretrained_convs():
        try:
            from torchvision.models import VGG16_Weights, vgg16

            net = vgg16(weights=VGG16_Weights.IMAGENET1K_V1)
        except Exception as exc:  # download / cache failures surface uniformly
            raise BackendError(f"pretrained VGG16 weights unavailable: {exc}") from exc
        return [m for m in net.features if isinstance(m, nn.Conv2d)]

    def train(self, mode=True):
        # always frozen: keep eval semantics regardless of the parent module
        return super().train(False)

    def forward(self, x):
        x = (x + 1) / 2
        x = (x.expand(-1, 3, -1, -1) - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        feats, k = [], 0
        for layer in self.body:
            x = layer(x)
            if isinstance(layer, nn.ReLU):
                k += 1
                if k in self.layers:
                    feats.append(x)
        return feats


def build_extractor(perceptual_cfg):
    return FeatureExtractor(perceptual_cfg.backend, perceptual_cfg.layers,
                            perceptual_cfg.width, perceptual_cfg.seed,
                            gain=perceptual_cfg.gain)


def adv_loss_g(patch_logits_fake):
    """Non-saturating generator loss: mean over patches of -log sigmoid(logit)."""
    return F.softplus(-patch_logits_fake).mean()


def rec_loss(y, y_hat):
    _same_shape(y, y_hat)
    return (y - y_hat).abs().mean()


def perceptual_loss(y, y_hat, extractor):
    """Sum over feature layers of the spatial mean of squared channel distances."""
    _same_shape(y, y_hat)
    total = y.new_zeros(())
    for fy, fh in zip(extractor(y), extractor(y_hat)):
        total = total + (fy - fh).pow(2).sum(dim=1).mean()
    return total


def vq_loss(encoder_out, z_q, commitment_beta=0.25):
    """Commitment term only; the codebook side is learned by EMA."""
    _same_shape(encoder_out, z_q)
    return commitment_beta * (z_q.detach() - encoder_out).pow(2).mean()


def generator_total(components, weights=None):
    w = weights if weights is not None else LossWeights()
    return (w.lambda_adv * components["adv"] + w.lambda_rec * components["rec"]
            + w.lambda_perc * components["perc"] + w.lambda_vq * components["vq"])


def disc_loss(logits_real, logits_fake, real_label_targets=1.0):
    """BCE with (optionally smoothed) real targets and hard fake targets."""
    if not torch.is_tensor(real_label_targets):
        real_label_targets = torch.full_like(logits_real, float(real_label_targets))
    real = F.binary_cross_entropy_with_logits(logits_real, real_label_targets.to(logits_real))
    fake = F.binary_cross_entropy_with_logits(logits_fake, torch.zeros_like(logits_fake))
    return real + fake


def r1_penalty(discriminator, mri, pet_real, gamma=10.0):
    """gamma/2 * batch mean of |grad_y sum D(x, y)|^2 at the real PET ``y``.

    The returned value keeps its graph so it can be back-propagated into the
    discriminator's parameters.
    """
    pet = pet_real.detach().requires_grad_(True)
    out = discriminator(mri, pet)
    if not torch.is_tensor(out) or not out.requires_grad:
        raise CapabilityError("discriminator output is not differentiable w.r.t. its input")
    (grad,) = torch.autograd.grad(out.sum(), pet, create_graph=True)
    sq = grad.pow(2).reshape(grad.shape[0], -1).sum(dim=1)
    return 0.5 * gamma * sq.mean()


def focal_loss(p, label, alpha=0.25, gamma=2.0):
    """Batch mean of -alpha (1 - p_t)^gamma log p_t with p_t the true-class probability."""
    p = torch.as_tensor(p)
    label = torch.as_tensor(label, dtype=p.dtype)
    p = p.clamp(EPS, 1 - EPS)
    p_t = torch.where(label > 0.5, p, 1 - p)
    return (-alpha * (1 - p_t).pow(gamma) * p_t.log()).mean()
