"""Reusable building blocks: multi-scale convolution, CBAM, residual blocks
and the EMA vector-quantization codebook."""

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

MULTISCALE_KERNELS = (3, 5, 7)
MIN_MULTISCALE_SIZE = 4


class MultiScaleConv(nn.Module):
    """Parallel 3x3 / 5x5 / 7x7 branches fused by a 1x1 convolution.

    Every branch maps ``in_channels -> branch_channels`` with "same" padding,
    so at stride ``s`` the output grid is ``ceil(H / s) x ceil(W / s)``.
    ``branch_channels`` defaults to ``out_channels``.
    """

    def __init__(self, in_channels, out_channels, stride=1, branch_channels=None):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        bc = out_channels if branch_channels is None else int(branch_channels)
        if bc < 1:
            raise ConfigError(f"branch_channels must be >= 1, got {bc}")
        self.branch_channels = bc
        self.branches = nn.ModuleList(
            nn.Conv2d(in_channels, bc, k, stride=stride, padding=k // 2)
            for k in MULTISCALE_KERNELS
        )
        self.fuse = nn.Conv2d(len(MULTISCALE_KERNELS) * bc, out_channels, 1)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"expected (N, {self.in_channels}, H, W) input, got {tuple(x.shape)}"
            )
        if min(x.shape[-2:]) < MIN_MULTISCALE_SIZE:
            raise ShapeError(
                f"spatial size {tuple(x.shape[-2:])} below minimum {MIN_MULTISCALE_SIZE}"
            )
        return self.fuse(torch.cat([b(x) for b in self.branches], dim=1))


class SeededDropout(nn.Module):
    """Inverted dropout drawing its mask from ``self.generator``.

    The trainer assigns one shared ``torch.Generator`` so runs reproduce
    without touching the global RNG; ``None`` falls back to the global RNG.
    """

    def __init__(self, p=0.5):
        super().__init__()
        self.p = p
        self.generator = None

    def forward(self, x):
        if not self.training or self.p == 0:
            return x
        keep = 1.0 - self.p
        mask = torch.empty(x.shape, dtype=x.dtype, device=x.device)
        mask.bernoulli_(keep, generator=self.generator)
        return x * mask / keep

    def extra_repr(self):
        return f"p={self.p}"


def attach_generator(module, generator):
    for m in module.modules():
        if isinstance(m, SeededDropout):
            m.generator = generator


def conv3x3(in_channels, out_channels, stride=1):
    return nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1)


class ChannelAttention(nn.Module):
    def __init__(self, channels, reduction=16):
        super().__init__()
        hidden = channels // reduction
        self.mlp = nn.Sequential(
            nn.Conv2d(channels, hidden, 1),
            nn.ReLU(),
            nn.Conv2d(hidden, channels, 1),
        )

    def forward(self, x):
        avg = self.mlp(F.adaptive_avg_pool2d(x, 1))
        mx = self.mlp(F.adaptive_max_pool2d(x, 1))
        return torch.sigmoid(avg + mx)


class SpatialAttention(nn.Module):
    def __init__(self, kernel_size=7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)

    def forward(self, x):
        avg = x.mean(dim=1, keepdim=True)
        mx = x.amax(dim=1, keepdim=True)
        return torch.sigmoid(self.conv(torch.cat([avg, mx], dim=1)))


class CBAM(nn.Module):
    """Channel attention followed by spatial attention, both multiplicative."""

    def __init__(self, channels, reduction=16, kernel_size=7):
        super().__init__()
        if reduction < 1 or channels % reduction != 0:
            raise ConfigError(
                f"CBAM channels ({channels}) must be divisible by reduction ({reduction})"
            )
        self.channels = channels
        self.channel_att = ChannelAttention(channels, reduction)
        self.spatial_att = SpatialAttention(kernel_size)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"expected (N, {self.channels}, H, W), got {tuple(x.shape)}")
        x = x * self.channel_att(x)
        return x * self.spatial_att(x)


class ResBlock(nn.Module):
    """x + F(x) with F = conv -> IN -> ReLU -> dropout -> conv -> IN [-> CBAM].

    ``mode`` selects multi-scale or plain 3x3 convolutions.
    """

    def __init__(self, channels, mode="multiscale", dropout=0.5, use_cbam=True,
                 cbam_reduction=16, branch_channels=None):
        super().__init__()
        if mode == "multiscale":
            make = lambda: MultiScaleConv(channels, channels, 1, branch_channels)  # noqa: E731
        elif mode == "standard3x3":
            make = lambda: conv3x3(channels, channels)  # noqa: E731
        else:
            raise ConfigError(f"unknown ResBlock mode {mode!r}")
        self.channels = channels
        self.mode = mode
        layers = [
            make(),
            nn.InstanceNorm2d(channels),
            nn.ReLU(),
            SeededDropout(dropout),
            make(),
            nn.InstanceNorm2d(channels),
        ]
        if use_cbam:
            layers.append(CBAM(channels, cbam_reduction))
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"expected (N, {self.channels}, H, W), got {tuple(x.shape)}")
        return x + self.body(x)


# ---------------------------------------------------------------------------
# Vector quantization


@torch.no_grad()
def vq_lookup(z, embeddings):
    """Nearest codebook row for each row of ``z`` (N x D).

    Distances are computed from explicit differences (no ``|a|^2 + |b|^2 - 2ab``
    expansion) so exact ties resolve to the lowest index.
    """
    if z.dim() != 2 or z.shape[1] != embeddings.shape[1]:
        raise ShapeError(
            f"expected (N, {embeddings.shape[1]}) vectors, got {tuple(z.shape)}"
        )
    emb = embeddings.to(z.dtype)
    dist = torch.cdist(z.unsqueeze(0), emb.unsqueeze(0),
                       compute_mode="donot_use_mm_for_euclid_dist").squeeze(0)
    indices = torch.argmin(dist, dim=1)
    return emb[indices], indices


class _StraightThrough(torch.autograd.Function):
    @staticmethod
    def forward(ctx, z, z_q):
        return z_q.detach().clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def straight_through(z, z_q):
    """Forward value is exactly ``z_q``; the gradient w.r.t. ``z`` is the identity.

    (``z + (z_q - z).detach()`` is avoided: its rounding breaks bit-exact
    codebook membership.)
    """
    if z.shape != z_q.shape:
        raise ShapeError(f"shape mismatch {tuple(z.shape)} vs {tuple(z_q.shape)}")
    return _StraightThrough.apply(z, z_q)


def perplexity(indices, num_codes):
    """exp(entropy) of the empirical code-usage distribution."""
    counts = torch.bincount(indices.reshape(-1), minlength=num_codes).double()
    probs = counts / counts.sum().clamp_min(1.0)
    nz = probs[probs > 0]
    return float(torch.exp(-(nz * nz.log()).sum()))


class Codebook(nn.Module):
    """K x D embedding table trained by exponential moving averages.

    ``ema_cluster_size`` holds the raw (unsmoothed) EMA counts, so its total
    evolves as ``decay * total + (1 - decay) * N``; Laplace smoothing is only
    applied when dividing.
    """

    def __init__(self, num_codes=1024, dim=512, decay=0.99, epsilon=1e-5):
        super().__init__()
        self.num_codes = num_codes
        self.dim = dim
        self.decay = decay
        self.epsilon = epsilon
        embeddings = torch.randn(num_codes, dim)
        self.register_buffer("embeddings", embeddings)
        self.register_buffer("ema_cluster_size", torch.ones(num_codes))
        self.register_buffer("ema_embed_sum", embeddings.clone())
        self.register_buffer("initialized", torch.zeros((), dtype=torch.uint8))

    def lookup(self, z):
        return vq_lookup(z, self.embeddings)

    @torch.no_grad()
    def init_from_data(self, z, generator=None):
        """Seed every entry with an encoder vector drawn from ``z`` (N x D).

        Random-normal entries sit far from freshly initialized encoder outputs,
        so without this a single code tends to win every lookup.
        """
        if z.dim() != 2 or z.shape[1] != self.dim:
            raise ShapeError(f"expected (N, {self.dim}), got {tuple(z.shape)}")
        n = z.shape[0]
        if n >= self.num_codes:
            rows = torch.randperm(n, generator=generator)[:self.num_codes]
        else:
            rows = torch.randint(n, (self.num_codes,), generator=generator)
        picked = z.detach()[rows].to(self.embeddings.dtype)
        self.embeddings.copy_(picked)
        self.ema_cluster_size.fill_(1.0)
        self.ema_embed_sum.copy_(picked)
        self.initialized.fill_(1)

    @torch.no_grad()
    def update(self, z, indices):
        """One EMA step from flattened encoder vectors and their assignments."""
        if z.dim() != 2 or z.shape[1] != self.dim:
            raise ShapeError(f"expected (N, {self.dim}), got {tuple(z.shape)}")
        if indices.shape != (z.shape[0],):
            raise ShapeError(f"expected {z.shape[0]} indices, got {tuple(indices.shape)}")
        dtype = self.ema_cluster_size.dtype
        z = z.detach().to(dtype)
        onehot = F.one_hot(indices, self.num_codes).to(dtype)
        counts = onehot.sum(0)
        sums = onehot.t() @ z
        d = self.decay
        self.ema_cluster_size.mul_(d).add_((1 - d) * counts)
        self.ema_embed_sum.mul_(d).add_((1 - d) * sums)
        n = self.ema_cluster_size.sum()
        smoothed = (self.ema_cluster_size + self.epsilon) / (n + self.num_codes * self.epsilon) * n
        self.embeddings.copy_(self.ema_embed_sum / smoothed.unsqueeze(1))

    def forward(self, z, indices=None):
        """Quantize a (B, D, H, W) map.

        Returns ``(z_st, z_q, indices)`` where ``z_st`` carries straight-through
        gradients. Passing ``indices`` freezes the assignment.
        """
        if z.dim() != 4 or z.shape[1] != self.dim:
            raise ShapeError(f"expected (B, {self.dim}, H, W), got {tuple(z.shape)}")
        b, d, h, w = z.shape
        flat = z.permute(0, 2, 3, 1).reshape(-1, d)
        if indices is None:
            zq_flat, idx = self.lookup(flat.detach())
        else:
            idx = indices.reshape(-1)
            zq_flat = self.embeddings.to(z.dtype)[idx]
        # contiguous: a channels-last view here yields wrong decoder gradients on CPU
        z_q = zq_flat.reshape(b, h, w, d).permute(0, 3, 1, 2).contiguous()
        return straight_through(z, z_q), z_q, idx.reshape(b, h, w)
