import pytest
import torch

from _fd import fd_grad, rel_err
from mcrvqgan.config import DiscriminatorConfig, GeneratorConfig, tiny_config
from mcrvqgan.errors import ShapeError
from mcrvqgan.networks import (Classifier, Discriminator, Generator, build_ablation_variant,
                               count_parameters, patch_map_size)

TARGET_PARAMS = 75.0e6


@pytest.fixture(scope="module")
def variant_counts():
    disc = count_parameters(Discriminator(DiscriminatorConfig()))
    return {v: count_parameters(Generator(build_ablation_variant(v))) + disc
            for v in ("vqgan", "vqgan_mc", "vqgan_mc_rb", "full")}


def test_full_parameter_count_near_target(variant_counts):
    assert abs(variant_counts["full"] - TARGET_PARAMS) / TARGET_PARAMS <= 0.10


def test_variant_parameter_counts_increase(variant_counts):
    order = [variant_counts[v] for v in ("vqgan", "vqgan_mc", "vqgan_mc_rb", "full")]
    assert order == sorted(order) and len(set(order)) == 4


def test_ablation_flags():
    flags = {v: (c.use_multiscale, c.use_resblocks, c.use_cbam)
             for v in ("vqgan", "vqgan_mc", "vqgan_mc_rb", "full")
             for c in [build_ablation_variant(v)]}
    assert flags == {"vqgan": (False, False, False), "vqgan_mc": (True, False, False),
                     "vqgan_mc_rb": (True, True, False), "full": (True, True, True)}
    base = GeneratorConfig(codebook_size=16)
    assert build_ablation_variant("vqgan", base).codebook_size == 16
    assert base.use_cbam


@pytest.mark.parametrize("variant", ["vqgan", "vqgan_mc", "vqgan_mc_rb", "full"])
def test_generator_shapes_and_range(variant):
    cfg = tiny_config(model__variant=variant)
    G = Generator(cfg.model, 32).eval()
    x = torch.rand(2, 1, 32, 32) * 2 - 1
    y, stats = G(x)
    assert y.shape == x.shape
    assert float(y.detach().abs().max()) <= 1.0
    assert stats["indices"].shape == (2, 4, 4)
    assert stats["z_q"].shape == stats["encoder_out"].shape == (2, 8, 4, 4)


def test_generator_rejects_wrong_shape():
    G = Generator(tiny_config().model, 32)
    with pytest.raises(ShapeError):
        G(torch.zeros(1, 1, 16, 16))
    with pytest.raises(ShapeError):
        G(torch.zeros(1, 2, 32, 32))


def test_generator_eval_deterministic():
    G = Generator(tiny_config().model, 32).eval()
    x = torch.rand(1, 1, 32, 32)
    assert torch.equal(G(x)[0], G(x)[0])


def test_discriminator_patch_map():
    assert patch_map_size(256) == 31
    D = Discriminator()
    out = D(torch.zeros(1, 1, 256, 256), torch.zeros(1, 1, 256, 256))
    assert out.shape == (1, 1, 31, 31)
    Dt = Discriminator(tiny_config().discriminator)
    assert Dt(torch.zeros(2, 1, 32, 32), torch.zeros(2, 1, 32, 32)).shape == (2, 1, patch_map_size(32),
                                                                              patch_map_size(32))
    with pytest.raises(ShapeError):
        Dt(torch.zeros(1, 1, 32, 32), torch.zeros(1, 1, 16, 16))


def test_discriminator_is_conditional():
    torch.manual_seed(0)
    D = Discriminator(tiny_config().discriminator)
    pet = torch.rand(1, 1, 32, 32)
    assert not torch.equal(D(torch.zeros(1, 1, 32, 32), pet), D(torch.ones(1, 1, 32, 32), pet))


def test_classifier_shapes():
    cfg = tiny_config()
    C = Classifier(cfg.classifier, 32).eval()
    p = C(torch.rand(3, 1, 32, 32))
    assert p.shape == (3,)
    assert bool(((p > 0) & (p < 1)).all())
    assert torch.allclose(torch.sigmoid(C.logits(torch.zeros(1, 1, 32, 32))), C(torch.zeros(1, 1, 32, 32)))
    with pytest.raises(ShapeError):
        C(torch.zeros(1, 1, 16, 16))


def test_generator_end_to_end_gradient_frozen_vq(f64):
    """Straight-through gradients through the whole generator versus finite
    differences of the same network with the quantizer replaced by its frozen offset.

    The frozen assignment gives every latent position a distinct code: repeated
    codes produce exact ties in the attention max-pools, where the network has
    kinks and one-sided differences disagree.
    """
    torch.manual_seed(0)
    cfg = tiny_config()
    G = Generator(cfg.model, 32).double().eval()
    x0 = torch.rand(1, 1, 32, 32) * 2 - 1
    idx = torch.randperm(16, generator=torch.Generator().manual_seed(2)).view(1, 4, 4)
    with torch.no_grad():
        _, stats = G(x0, idx)
    offset = (stats["z_q"] - stats["encoder_out"]).detach()
    weights = torch.randn(1, 1, 32, 32)

    x = x0.clone().requires_grad_(True)
    ((G(x, idx)[0] * weights).sum()).backward()

    def frozen(t):
        z = G.encode(t) + offset
        return (G.decoder(G.post_quant(z)) * weights).sum()

    # finite differences over a random subset of pixels keeps the check fast
    sel = torch.randperm(32 * 32, generator=torch.Generator().manual_seed(1))[:48]
    g_fd = torch.zeros(32 * 32)
    flat = x0.clone().view(-1)
    h = 1e-6
    with torch.no_grad():
        for i in sel.tolist():
            old = flat[i].item()
            flat[i] = old + h
            up = float(frozen(flat.view(1, 1, 32, 32)))
            flat[i] = old - h
            down = float(frozen(flat.view(1, 1, 32, 32)))
            flat[i] = old
            g_fd[i] = (up - down) / (2 * h)
    assert rel_err(x.grad.view(-1)[sel], g_fd[sel]) < 1e-3


def test_discriminator_gradient_fd(f64):
    torch.manual_seed(1)
    D = Discriminator(DiscriminatorConfig(channels=(4, 4, 4))).double()
    mri = torch.randn(1, 1, 16, 16)
    pet0 = torch.randn(1, 1, 16, 16)
    f = lambda p: D(mri, p).pow(2).sum()  # noqa: E731
    p = pet0.clone().requires_grad_(True)
    f(p).backward()
    assert rel_err(p.grad, fd_grad(f, pet0)) < 1e-4
