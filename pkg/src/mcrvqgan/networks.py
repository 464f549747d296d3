"""Generator (encoder -> VQ -> decoder), conditional PatchGAN discriminator
and the downstream CN vs MCI/AD classifier."""

import copy

import torch
import torch.nn as nn

from .blocks import CBAM, Codebook, MultiScaleConv, ResBlock, SeededDropout, conv3x3
from .config import ClassifierConfig, DiscriminatorConfig, GeneratorConfig, apply_variant
from .errors import ShapeError


def build_ablation_variant(name, base=None):
    """GeneratorConfig for one ablation row: vqgan, vqgan_mc, vqgan_mc_rb or full."""
    cfg = copy.deepcopy(base) if base is not None else GeneratorConfig()
    return apply_variant(cfg, name)


def count_parameters(module):
    if isinstance(module, nn.Module):
        module = module.parameters()
    return sum(p.numel() for p in module)


def _branch(cfg, out_channels):
    return max(1, out_channels // cfg.ms_branch_div)


def _attention(cfg, channels):
    return CBAM(channels, cfg.cbam_reduction) if cfg.use_cbam else nn.Identity()


class Encoder(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        ch = cfg.channels
        self.stem = nn.Sequential(
            nn.Conv2d(1, ch[0], 7, padding=3), nn.InstanceNorm2d(ch[0]), nn.ReLU()
        )
        stages = []
        for cin, cout in zip(ch[:-1], ch[1:]):
            if cfg.use_multiscale:
                down = MultiScaleConv(cin, cout, 2, _branch(cfg, cout))
            else:
                down = conv3x3(cin, cout, stride=2)
            stages.append(nn.Sequential(
                down, nn.InstanceNorm2d(cout), nn.ReLU(), _attention(cfg, cout)
            ))
        self.stages = nn.Sequential(*stages)
        n_res = cfg.n_res_blocks if cfg.use_resblocks else cfg.n_res_blocks_min
        mode = "multiscale" if cfg.use_multiscale else "standard3x3"
        self.res = nn.Sequential(*[
            ResBlock(ch[-1], mode, cfg.dropout, cfg.use_cbam, cfg.cbam_reduction,
                     _branch(cfg, ch[-1]))
            for _ in range(n_res)
        ])

    def forward(self, x):
        return self.res(self.stages(self.stem(x)))


class Decoder(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        ch = cfg.channels
        n_res = cfg.n_res_blocks if cfg.use_resblocks else cfg.n_res_blocks_min
        self.res = nn.Sequential(*[
            ResBlock(ch[-1], "standard3x3", cfg.dropout, cfg.use_cbam, cfg.cbam_reduction)
            for _ in range(n_res)
        ])
        stages = []
        rev = ch[::-1]
        for cin, cout in zip(rev[:-1], rev[1:]):
            stages.append(nn.Sequential(
                nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1),
                conv3x3(cout, cout),
                nn.InstanceNorm2d(cout),
                nn.ReLU(),
                _attention(cfg, cout),
            ))
        self.stages = nn.Sequential(*stages)
        self.head = nn.Conv2d(ch[0], 1, 7, padding=3)

    def forward(self, x):
        return torch.tanh(self.head(self.stages(self.res(x))))


class Generator(nn.Module):
    """MRI slice (N, 1, S, S) in [-1, 1] -> synthetic PET slice, same shape."""

    def __init__(self, cfg=None, image_size=256):
        super().__init__()
        self.cfg = cfg if cfg is not None else GeneratorConfig()
        self.image_size = image_size
        self.encoder = Encoder(self.cfg)
        self.pre_quant = nn.Conv2d(self.cfg.channels[-1], self.cfg.codebook_dim, 1)
        self.codebook = Codebook(self.cfg.codebook_size, self.cfg.codebook_dim,
                                 self.cfg.ema_decay, self.cfg.ema_epsilon)
        self.post_quant = nn.Conv2d(self.cfg.codebook_dim, self.cfg.channels[-1], 1)
        self.decoder = Decoder(self.cfg)

    def encode(self, mri):
        s = self.image_size
        if mri.dim() != 4 or tuple(mri.shape[1:]) != (1, s, s):
            raise ShapeError(f"expected (N, 1, {s}, {s}) input, got {tuple(mri.shape)}")
        return self.pre_quant(self.encoder(mri))

    def forward(self, mri, indices=None):
        """Returns ``(pet_hat, stats)``; ``stats`` holds encoder_out, z_q, indices.

        ``indices`` freezes the codebook assignment (used by gradient checks).
        """
        z = self.encode(mri)
        z_st, z_q, idx = self.codebook(z, indices)
        pet_hat = self.decoder(self.post_quant(z_st))
        return pet_hat, {"encoder_out": z, "z_q": z_q, "indices": idx}


class Discriminator(nn.Module):
    """Conditional PatchGAN over the (MRI, PET) channel concatenation.

    Returns pre-sigmoid patch logits; 256x256 inputs give a 31x31 map.
    """

    def __init__(self, cfg=None):
        super().__init__()
        self.cfg = cfg if cfg is not None else DiscriminatorConfig()
        layers = []
        cin = self.cfg.in_channels
        for cout in self.cfg.channels:
            layers += [
                nn.Conv2d(cin, cout, 4, stride=2, padding=1),
                nn.InstanceNorm2d(cout),
                nn.LeakyReLU(self.cfg.negative_slope),
            ]
            cin = cout
        self.body = nn.Sequential(*layers)
        self.head = nn.Conv2d(cin, 1, 4, stride=1, padding=1)

    def forward(self, mri, pet):
        if mri.shape != pet.shape:
            raise ShapeError(f"mri {tuple(mri.shape)} and pet {tuple(pet.shape)} differ")
        return self.head(self.body(torch.cat([mri, pet], dim=1)))


def patch_map_size(size, n_down=3):
    for _ in range(n_down):
        size = (size + 2 - 4) // 2 + 1
    return size + 2 - 4 + 1


class Classifier(nn.Module):
    """Five conv blocks, global average pooling, two hidden FC layers.

    ``forward`` returns probabilities; ``logits`` the pre-sigmoid score.
    """

    def __init__(self, cfg=None, image_size=256):
        super().__init__()
        self.cfg = cfg if cfg is not None else ClassifierConfig()
        self.image_size = image_size
        blocks = []
        cin = 1
        for i, cout in enumerate(self.cfg.channels):
            layers = [
                nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(),
                nn.Conv2d(cout, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(),
            ]
            if i < len(self.cfg.channels) - 1:
                layers.append(nn.MaxPool2d(2))
            blocks.append(nn.Sequential(*layers))
            cin = cout
        self.features = nn.Sequential(*blocks)
        head = []
        for width in self.cfg.hidden:
            head += [nn.Linear(cin, width), nn.ReLU(), SeededDropout(self.cfg.dropout)]
            cin = width
        head.append(nn.Linear(cin, 1))
        self.head = nn.Sequential(*head)

    def logits(self, pet):
        s = self.image_size
        if pet.dim() != 4 or tuple(pet.shape[1:]) != (1, s, s):
            raise ShapeError(f"expected (N, 1, {s}, {s}) input, got {tuple(pet.shape)}")
        feats = self.features(pet).mean(dim=(2, 3))
        return self.head(feats).squeeze(1)

    def forward(self, pet):
        return torch.sigmoid(self.logits(pet))
