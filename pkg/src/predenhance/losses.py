"""Adversarial and content losses.

All functions take and return ``torch`` tensors so they can sit inside a
training graph; plain sequences are accepted for convenience.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn

EPS = 1e-7

# VGG-19 convolution counts per block (between max-pooling layers).
VGG19_BLOCKS = (2, 2, 4, 4, 4)
VGG19_WIDTHS = (64, 128, 256, 512, 512)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class NumericalFailure(ArithmeticError):
    """Raised when a gradient or loss is not finite."""


@dataclass
class AdversarialKind:
    variant: str = "wgan_gp"
    gp_weight: float = 10.0

    def __post_init__(self):
        if self.variant not in ("minimax", "wgan_gp"):
            raise ValueError(f"unknown adversarial variant {self.variant!r}")
        if self.gp_weight < 0:
            raise ValueError("gp_weight must be >= 0")


@dataclass
class ExtractorSpec:
    kind: str = "fixed_random_conv"
    layer: tuple = (3, 3)
    seed: int = 0
    width_scale: float = 0.25

    def __post_init__(self):
        self.layer = tuple(int(v) for v in self.layer)
        if self.kind not in ("pretrained_vgg19", "fixed_random_conv", "identity"):
            raise ValueError(f"unknown extractor kind {self.kind!r}")
        if self.kind != "identity":
            i, j = self.layer
            if not 1 <= i <= len(VGG19_BLOCKS) or not 1 <= j <= VGG19_BLOCKS[i - 1]:
                raise ValueError(f"VGG-19 has no conv layer ({i},{j})")


@dataclass
class LossConfig:
    adversarial: AdversarialKind = field(default_factory=AdversarialKind)
    content_weight: float = 100.0
    extractor: ExtractorSpec = field(default_factory=ExtractorSpec)

    def __post_init__(self):
        if isinstance(self.adversarial, dict):
            self.adversarial = AdversarialKind(**self.adversarial)
        if isinstance(self.extractor, dict):
            self.extractor = ExtractorSpec(**self.extractor)
        if self.content_weight < 0:
            raise ValueError("content_weight must be >= 0")

    def to_dict(self):
        d = asdict(self)
        d["extractor"]["layer"] = list(d["extractor"]["layer"])
        return d


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def _nonempty(*xs):
    for x in xs:
        if x.numel() == 0:
            raise ValueError("empty batch")


def minimax_d_loss(d_real, d_fake, eps=EPS):
    """Negated discriminator objective of the original GAN game."""
    d_real, d_fake = _as_tensor(d_real), _as_tensor(d_fake)
    _nonempty(d_real, d_fake)
    d_real = d_real.clamp(eps, 1 - eps)
    d_fake = d_fake.clamp(eps, 1 - eps)
    return -(torch.log(d_real).mean() + torch.log1p(-d_fake).mean())


def minimax_g_loss(d_fake, eps=EPS):
    """Non-saturating generator loss ``-mean log D(G(z))``."""
    d_fake = _as_tensor(d_fake)
    _nonempty(d_fake)
    return -torch.log(d_fake.clamp(eps, 1 - eps)).mean()


def wgan_gp_d_loss(critic_real, critic_fake, gp, gp_weight=10.0):
    critic_real, critic_fake = _as_tensor(critic_real), _as_tensor(critic_fake)
    _nonempty(critic_real, critic_fake)
    return critic_fake.mean() - critic_real.mean() + gp_weight * gp


def wgan_g_loss(critic_fake):
    critic_fake = _as_tensor(critic_fake)
    _nonempty(critic_fake)
    return -critic_fake.mean()


def critic_input_gradient(critic, x, create_graph=True):
    """Gradient of ``sum(critic(x))`` with respect to ``x`` (zeros if unused)."""
    if not x.requires_grad:
        x = x.detach().requires_grad_(True)
    scores = critic(x)
    if not isinstance(scores, torch.Tensor):
        scores = torch.as_tensor(scores, dtype=x.dtype)
    if not scores.requires_grad:
        return torch.zeros_like(x)
    (grad,) = torch.autograd.grad(
        scores.sum(), x, create_graph=create_graph, retain_graph=True, allow_unused=True
    )
    if grad is None:
        return torch.zeros_like(x)
    return grad


def interpolate(real, fake, seed=None, generator=None):
    """Per-sample random points on the segments between real and fake samples."""
    if real.shape != fake.shape:
        raise ValueError(f"real/fake shapes differ: {tuple(real.shape)} vs {tuple(fake.shape)}")
    if generator is None:
        generator = torch.Generator(device=real.device)
        generator.manual_seed(0 if seed is None else int(seed))
    shape = (real.shape[0],) + (1,) * (real.dim() - 1)
    eps = torch.rand(shape, generator=generator, dtype=real.dtype, device=real.device)
    return eps * real.detach() + (1 - eps) * fake.detach()


def gradient_penalty(critic, real, fake, seed=None, generator=None):
    """Mean of ``(||grad critic(x_hat)||_2 - 1)^2`` over interpolated samples."""
    real, fake = _as_tensor(real), _as_tensor(fake)
    x_hat = interpolate(real, fake, seed=seed, generator=generator).requires_grad_(True)
    grad = critic_input_gradient(critic, x_hat, create_graph=True)
    if not torch.isfinite(grad).all():
        raise NumericalFailure("critic gradient is not finite at the interpolated samples")
    norms = grad.reshape(grad.shape[0], -1).norm(2, dim=1)
    return ((norms - 1.0) ** 2).mean()


def combined_g_loss(adv_loss, content, weight):
    if weight < 0:
        raise ValueError("content weight must be >= 0")
    return adv_loss + weight * content


# ---------------------------------------------------------------------------
# feature extractors

class FeatureExtractor(nn.Module):
    """Frozen feature map ``phi_{i,j}``: output of the j-th conv (after ReLU) before the i-th pooling.

    ``fixed_random_conv`` builds the VGG-19 topology truncated at (i, j) with
    seeded He-initialised weights and channel widths scaled by
    ``width_scale``. ``identity`` returns the input unchanged.
    """

    def __init__(self, spec=None, in_channels=3):
        super().__init__()
        self.spec = spec if spec is not None else ExtractorSpec()
        self.in_channels = in_channels
        kind = self.spec.kind
        if kind == "identity":
            self.body = nn.Identity()
        elif kind == "fixed_random_conv":
            self.body = self._random_vgg()
        else:
            self.body = self._pretrained_vgg()
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def _layers(self, widths):
        i_stop, j_stop = self.spec.layer
        layers = []
        ch = 3
        for b, n_conv in enumerate(VGG19_BLOCKS, start=1):
            for j in range(1, n_conv + 1):
                layers.append(nn.Conv2d(ch, widths[b - 1], 3, padding=1))
                layers.append(nn.ReLU(inplace=False))
                ch = widths[b - 1]
                if b == i_stop and j == j_stop:
                    return layers
            layers.append(nn.MaxPool2d(2, 2))
        return layers

    def _random_vgg(self):
        widths = [max(4, int(round(w * self.spec.width_scale))) for w in VGG19_WIDTHS]
        body = nn.Sequential(*self._layers(widths))
        gen = torch.Generator().manual_seed(int(self.spec.seed))
        with torch.no_grad():
            for m in body:
                if isinstance(m, nn.Conv2d):
                    fan_in = m.in_channels * 9
                    m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                    m.bias.zero_()
        return body

    def _pretrained_vgg(self):
        try:
            from torchvision.models import VGG19_Weights, vgg19
            model = vgg19(weights=VGG19_Weights.IMAGENET1K_V1)
        except Exception as exc:  # weights are fetched over the network
            raise RuntimeError(
                "pretrained VGG-19 weights unavailable; use kind='fixed_random_conv'"
            ) from exc
        body = nn.Sequential(*self._layers(VGG19_WIDTHS))
        src = [m for m in model.features if isinstance(m, nn.Conv2d)]
        dst = [m for m in body if isinstance(m, nn.Conv2d)]
        with torch.no_grad():
            for s, d in zip(src, dst):
                d.weight.copy_(s.weight)
                d.bias.copy_(s.bias)
        return body

    def forward(self, x):
        """``x``: ``(B, C, H, W)`` in [0, 1]."""
        if self.spec.kind == "identity":
            return x
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        mean = torch.tensor(IMAGENET_MEAN, dtype=x.dtype, device=x.device).view(1, 3, 1, 1)
        std = torch.tensor(IMAGENET_STD, dtype=x.dtype, device=x.device).view(1, 3, 1, 1)
        body = self.body.to(dtype=x.dtype, device=x.device)
        return body((x - mean) / std)

    def feature_size(self, height, width):
        if self.spec.kind == "identity":
            return height, width
        pools = self.spec.layer[0] - 1
        return height // 2**pools, width // 2**pools


def content_loss(extractor, sharp, generated):
    """Per-channel normalised squared feature distance, averaged over channels and batch.

    Inputs are ``(B, C, H, W)`` tensors or single ``(C, H, W)`` tensors.
    """
    sharp, generated = _as_tensor(sharp), _as_tensor(generated)
    if sharp.shape != generated.shape:
        raise ValueError(f"frame shapes differ: {tuple(sharp.shape)} vs {tuple(generated.shape)}")
    if sharp.dim() == 3:
        sharp, generated = sharp.unsqueeze(0), generated.unsqueeze(0)
    fa = extractor(sharp)
    fb = extractor(generated)
    # sum over (x, y) / (W*H) per map, then mean over channels and batch
    return ((fa - fb) ** 2).mean(dim=(2, 3)).mean()
