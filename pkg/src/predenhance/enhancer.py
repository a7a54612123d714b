"""Frame enhancement generators: ResNet deblurring (two upsampler variants) and 4x SR.

Frames are ``(N, H, W, C)`` arrays in [0, 1]; every frame is translated
independently.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import losses as L
from .checkpoint import CsvLog, linear_decay, load_checkpoint, save_checkpoint
from .datakit import luma

log = logging.getLogger(__name__)

UPSAMPLERS = ("transposed_conv", "nn_upsample_then_conv")
LOG_FIELDS = ("epoch", "phase", "adv_weight", "d_loss", "g_loss", "content", "lr", "wall_seconds")


def _default_loss(task):
    layer = (3, 3) if task == "deblur" else (5, 4)
    return L.LossConfig(
        adversarial=L.AdversarialKind("wgan_gp", 10.0),
        content_weight=100.0,
        extractor=L.ExtractorSpec(kind="fixed_random_conv", layer=layer, seed=0),
    )


@dataclass
class EnhancerConfig:
    task: str = "deblur"
    upsampler: str = "nn_upsample_then_conv"
    residual_blocks: int = 3
    ngf: int = 16
    ndf: int = 16
    critic_layers: int = 3
    sr_scale: int = 4
    channels: int = 3
    seed: int = 0
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 8
    decay_start: float = 0.5
    warmup_epochs: int = 0
    loss: L.LossConfig | None = None

    def __post_init__(self):
        if self.task not in ("deblur", "super_resolve"):
            raise ValueError(f"unknown enhancer task {self.task!r}")
        if self.upsampler not in UPSAMPLERS:
            raise ValueError(f"unknown upsampler {self.upsampler!r}")
        if self.sr_scale != 4:
            raise ValueError("only 4x super-resolution is supported")
        if self.residual_blocks < 1:
            raise ValueError("residual_blocks must be >= 1")
        if self.loss is None:
            self.loss = _default_loss(self.task)
        elif isinstance(self.loss, dict):
            self.loss = L.LossConfig(**self.loss)

    @property
    def scale(self):
        return self.sr_scale if self.task == "super_resolve" else 1

    def to_dict(self):
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        return d


# ---------------------------------------------------------------------------
# building blocks

class ResnetBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), nn.InstanceNorm2d(ch), nn.ReLU(True),
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), nn.InstanceNorm2d(ch),
        )

    def forward(self, x):
        return x + self.body(x)


def upsample_layer(kind, cin, cout):
    """One 2x upsampling conv: stride-2 k3 transposed conv, or NN x2 then k3 s1 conv."""
    if kind == "transposed_conv":
        return nn.ConvTranspose2d(cin, cout, 3, stride=2, padding=1, output_padding=1)
    return nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(cin, cout, 3, padding=1))


class UpsampleTail(nn.Sequential):
    """The upsampling half of the deblurring generator (2 x [up, norm, ReLU])."""

    def __init__(self, kind, ngf, n_up=2):
        layers = []
        ch = ngf * 2**n_up
        for _ in range(n_up):
            layers += [upsample_layer(kind, ch, ch // 2), nn.InstanceNorm2d(ch // 2), nn.ReLU(True)]
            ch //= 2
        super().__init__(*layers)
        self.kind = kind
        self.in_channels = ngf * 2**n_up


class DeblurGenerator(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        c, ngf = cfg.channels, cfg.ngf
        self.head = nn.Sequential(
            nn.ReflectionPad2d(3), nn.Conv2d(c, ngf, 7), nn.InstanceNorm2d(ngf), nn.ReLU(True),
            nn.Conv2d(ngf, ngf * 2, 3, stride=2, padding=1), nn.InstanceNorm2d(ngf * 2), nn.ReLU(True),
            nn.Conv2d(ngf * 2, ngf * 4, 3, stride=2, padding=1), nn.InstanceNorm2d(ngf * 4), nn.ReLU(True),
        )
        self.trunk = nn.Sequential(*[ResnetBlock(ngf * 4) for _ in range(cfg.residual_blocks)])
        self.tail = UpsampleTail(cfg.upsampler, ngf)
        self.out = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(ngf, c, 7), nn.Tanh())
        # identity at initialisation through the global residual
        nn.init.zeros_(self.out[1].weight)
        nn.init.zeros_(self.out[1].bias)

    def forward(self, x):
        y = self.out(self.tail(self.trunk(self.head(x))))
        return (x + y).clamp(0.0, 1.0)


class SRGenerator(nn.Module):
    """SRResNet-style 4x super-resolution generator."""

    def __init__(self, cfg):
        super().__init__()
        c, nf = cfg.channels, cfg.ngf
        self.head = nn.Sequential(nn.Conv2d(c, nf, 9, padding=4), nn.PReLU())
        self.trunk = nn.Sequential(*[_SRBlock(nf) for _ in range(cfg.residual_blocks)])
        self.merge = nn.Sequential(nn.Conv2d(nf, nf, 3, padding=1), nn.BatchNorm2d(nf))
        ups = []
        for _ in range(int(math.log2(cfg.sr_scale))):
            ups += [nn.Conv2d(nf, nf * 4, 3, padding=1), nn.PixelShuffle(2), nn.PReLU()]
        self.up = nn.Sequential(*ups)
        self.out = nn.Conv2d(nf, c, 9, padding=4)

    def forward(self, x):
        h = self.head(x)
        h = h + self.merge(self.trunk(h))
        return (torch.tanh(self.out(self.up(h))) + 1.0) / 2.0


class _SRBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(ch, ch, 3, padding=1), nn.BatchNorm2d(ch), nn.PReLU(),
            nn.Conv2d(ch, ch, 3, padding=1), nn.BatchNorm2d(ch),
        )

    def forward(self, x):
        return x + self.body(x)


class PatchCritic(nn.Module):
    """Unnormalised patch critic; the score of a frame is the mean patch score."""

    def __init__(self, cfg):
        super().__init__()
        ch, ndf = cfg.channels, cfg.ndf
        layers = []
        for i in range(cfg.critic_layers):
            out = ndf * 2**min(i, 3)
            layers += [nn.Conv2d(ch, out, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            ch = out
        layers.append(nn.Conv2d(ch, 1, 3, padding=1))
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x).mean(dim=(1, 2, 3))


@dataclass
class EnhancerState:
    config: EnhancerConfig
    generator: nn.Module
    critic: PatchCritic
    opt_g: torch.optim.Optimizer | None = None
    opt_d: torch.optim.Optimizer | None = None
    epoch: int = 0
    step: int = 0

    def save(self, path):
        return save_checkpoint(
            path, "enhancer", self.config.to_dict(), epoch=self.epoch, step=self.step,
            generator=self.generator.state_dict(), critic=self.critic.state_dict(),
            opt_g=self.opt_g.state_dict() if self.opt_g is not None else None,
            opt_d=self.opt_d.state_dict() if self.opt_d is not None else None,
        )

    def layer_listing(self):
        return [f"{name}: {m.__class__.__name__}" for name, m in self.generator.named_modules() if name]


def _build(cfg, gen_cls):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        g = gen_cls(cfg)
        d = PatchCritic(cfg)
    state = EnhancerState(cfg, g, d)
    state.opt_g = torch.optim.Adam(g.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    state.opt_d = torch.optim.Adam(d.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    return state


def build_deblur_generator(cfg):
    if cfg.task != "deblur":
        raise ValueError("build_deblur_generator needs task='deblur'")
    return _build(cfg, DeblurGenerator)


def build_sr_generator(cfg):
    if cfg.task != "super_resolve":
        raise ValueError("build_sr_generator needs task='super_resolve'")
    return _build(cfg, SRGenerator)


def build_enhancer(cfg):
    return build_deblur_generator(cfg) if cfg.task == "deblur" else build_sr_generator(cfg)


def load_enhancer(path):
    blob = load_checkpoint(path, kind="enhancer")
    state = build_enhancer(EnhancerConfig(**blob["config"]))
    state.generator.load_state_dict(blob["generator"])
    state.critic.load_state_dict(blob["critic"])
    if blob.get("opt_g") is not None:
        state.opt_g.load_state_dict(blob["opt_g"])
        state.opt_d.load_state_dict(blob["opt_d"])
    state.epoch, state.step = blob["epoch"], blob["step"]
    return state


def frames_to_tensor(frames):
    x = torch.as_tensor(np.asarray(frames), dtype=torch.float32)
    if x.dim() == 3:
        x = x.unsqueeze(0)
    return x.permute(0, 3, 1, 2).contiguous()


def tensor_to_frames(x):
    return x.detach().permute(0, 2, 3, 1).cpu().numpy()


def _check_input(cfg, frames):
    if frames.ndim != 4 or frames.shape[3] != cfg.channels:
        raise ValueError(f"expected (N, H, W, {cfg.channels}) frames, got {frames.shape}")
    if cfg.task == "deblur" and (frames.shape[1] % 4 or frames.shape[2] % 4):
        raise ValueError(f"deblur input size must be divisible by 4, got {frames.shape[1:3]}")


def enhance(state, frames, batch_size=32):
    """Enhance frames one by one (batched for speed; no cross-frame coupling)."""
    arr = np.asarray(frames, dtype=np.float32)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    _check_input(state.config, arr)
    g = state.generator
    g.eval()
    outs = []
    with torch.no_grad():
        for i in range(0, len(arr), batch_size):
            outs.append(tensor_to_frames(g(frames_to_tensor(arr[i:i + batch_size]))))
    out = np.clip(np.concatenate(outs), 0.0, 1.0) if outs else np.zeros((0,) + arr.shape[1:], np.float32)
    return out[0] if single else out


def _lr_factor(cfg, epoch, total_epochs):
    if cfg.task == "super_resolve":
        return 1.0
    return linear_decay(epoch, total_epochs, start=int(cfg.decay_start * total_epochs))


def train_enhancer(state, degraded, sharp, epochs, out_dir=None, extractor=None, progress=None):
    """Optimise adversarial + weighted content loss on (degraded, sharp) pairs.

    For super-resolution the first ``config.warmup_epochs`` epochs use the
    content loss alone (logged with ``adv_weight = 0``). Deblurring keeps the
    learning rate constant until ``decay_start`` of the run, then decays it
    linearly to zero.
    """
    cfg = state.config
    degraded = np.asarray(degraded, dtype=np.float32)
    sharp = np.asarray(sharp, dtype=np.float32)
    if len(degraded) != len(sharp) or len(degraded) == 0:
        raise ValueError("need a non-empty, equal number of degraded and sharp frames")
    _check_input(cfg, degraded)
    s = cfg.scale
    if sharp.shape[1:] != (degraded.shape[1] * s, degraded.shape[2] * s, degraded.shape[3]):
        raise ValueError(f"pair shapes not aligned: {degraded.shape[1:]} -> {sharp.shape[1:]} (scale {s})")

    out_dir = Path(out_dir) if out_dir is not None else None
    logger = CsvLog(out_dir / "train_log.csv" if out_dir else None, LOG_FIELDS)
    warmup = cfg.warmup_epochs if cfg.task == "super_resolve" else 0
    total = warmup + epochs
    if total == 0:
        return state, logger.rows

    lcfg = cfg.loss
    extractor = extractor or L.FeatureExtractor(lcfg.extractor, cfg.channels)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(int(cfg.seed))
    xd, xs = frames_to_tensor(degraded), frames_to_tensor(sharp)
    n = len(xd)
    bs = min(cfg.batch_size, n)
    G, D = state.generator, state.critic
    start = time.perf_counter()

    for ep in range(total):
        phase = "warmup" if ep < warmup else "adversarial"
        adv_w = 0.0 if phase == "warmup" else 1.0
        lr = cfg.lr * _lr_factor(cfg, ep - warmup if ep >= warmup else 0, epochs)
        for opt in (state.opt_g, state.opt_d):
            for grp in opt.param_groups:
                grp["lr"] = lr
        G.train()
        D.train()
        perm = rng.permutation(n)
        acc = {"d": [], "g": [], "c": []}
        for b0 in range(0, n, bs):
            idx = torch.as_tensor(perm[b0:b0 + bs])
            x, y = xd[idx], xs[idx]
            d_loss = torch.zeros(())
            if adv_w > 0:
                with torch.no_grad():
                    fake = G(x)
                d_real, d_fake = D(y), D(fake)
                if lcfg.adversarial.variant == "wgan_gp":
                    gp = L.gradient_penalty(D, y, fake, generator=gen)
                    d_loss = L.wgan_gp_d_loss(d_real, d_fake, gp, lcfg.adversarial.gp_weight)
                else:
                    d_loss = L.minimax_d_loss(torch.sigmoid(d_real), torch.sigmoid(d_fake))
                state.opt_d.zero_grad(set_to_none=True)
                d_loss.backward()
                state.opt_d.step()
            fake = G(x)
            content = L.content_loss(extractor, y, fake)
            if adv_w > 0:
                d_fake = D(fake)
                adv = L.wgan_g_loss(d_fake) if lcfg.adversarial.variant == "wgan_gp" \
                    else L.minimax_g_loss(torch.sigmoid(d_fake))
                g_loss = L.combined_g_loss(adv_w * adv, content, lcfg.content_weight)
            else:
                g_loss = lcfg.content_weight * content
            state.opt_g.zero_grad(set_to_none=True)
            g_loss.backward()
            state.opt_g.step()
            vals = float(d_loss.detach()), float(g_loss.detach()), float(content.detach())
            if not all(math.isfinite(v) for v in vals):
                if out_dir is not None:
                    state.save(out_dir / "diverged.pt")
                raise L.NumericalFailure(f"non-finite enhancer loss at epoch {ep}: {vals}")
            acc["d"].append(vals[0])
            acc["g"].append(vals[1])
            acc["c"].append(vals[2])
            state.step += 1
        state.epoch += 1
        row = dict(epoch=state.epoch, phase=phase, adv_weight=adv_w, d_loss=float(np.mean(acc["d"])),
                   g_loss=float(np.mean(acc["g"])), content=float(np.mean(acc["c"])), lr=float(lr),
                   wall_seconds=time.perf_counter() - start)
        logger.write(**row)
        log.info("enhancer %s", row)
        if progress is not None:
            progress(row)
    if out_dir is not None:
        state.save(out_dir / "enhancer.pt")
    return state, logger.rows


# ---------------------------------------------------------------------------
# checkerboard diagnostics

def checkerboard_score(frame, period=2):
    """Share of AC spectral energy held by components periodic with ``period`` on both axes.

    The frame (luma for colour input) is cropped to a multiple of ``period``;
    the returned value is the energy at spatial frequencies ``k / period``
    (k = 0..period-1, excluding DC) relative to all non-DC energy.
    """
    if period < 2:
        raise ValueError("period must be >= 2")
    img = np.asarray(frame, dtype=np.float64)
    if img.ndim == 3:
        img = luma(img)
    if img.shape[0] < 2 * period or img.shape[1] < 2 * period:
        raise ValueError(f"frame {img.shape} smaller than two periods of {period}")
    h = img.shape[0] // period * period
    w = img.shape[1] // period * period
    img = img[:h, :w]
    power = np.abs(np.fft.fft2(img)) ** 2
    dc = power[0, 0]
    total = power.sum() - dc
    if total <= 1e-20 * max(dc, 1.0):
        return 0.0
    periodic = power[::h // period, ::w // period].sum() - dc
    return float(min(max(periodic / total, 0.0), 1.0))


def constant_init(module, value=0.05):
    """Set every conv weight to ``value`` and every bias to zero (analysis helper)."""
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                m.weight.fill_(value)
                if m.bias is not None:
                    m.bias.zero_()
    return module


def tail_response(kind, size=16, ngf=4, value=0.05, n_up=2):
    """Run a constant-weight upsampling tail on a constant input; returns ``(H, W)`` map."""
    tail = constant_init(UpsampleTail(kind, ngf, n_up), value)
    x = torch.ones(1, tail.in_channels, size, size, dtype=torch.float64)
    with torch.no_grad():
        y = tail.to(torch.float64)(x)
    return y[0, 0].numpy()


def interior(arr, margin):
    return arr[margin:arr.shape[0] - margin, margin:arr.shape[1] - margin]
