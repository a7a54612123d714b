"""Progressively grown encoder-decoder video prediction GAN.

Sequences are handled as ``(B, C, T, H, W)`` tensors inside the networks and
as ``(B, T, H, W, C)`` numpy arrays at the public boundary. Both networks use
3-D (spatio-temporal) convolutions with pixelwise feature normalisation in the
generator. The generator maps ``n_in`` frames to ``n_out`` frames at the same
resolution; the discriminator scores the concatenated (input, output) sequence.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import losses as L
from .checkpoint import CsvLog, linear_decay, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "stage", "alpha", "d_loss", "g_loss", "lr", "wall_seconds")


@dataclass
class ProgressiveSchedule:
    ladder: tuple = (4, 8, 16, 32)
    epochs_per_stage: int | tuple = 4
    fade_fraction: float = 0.5
    alpha: float = 1.0

    def __post_init__(self):
        self.ladder = tuple(int(r) for r in self.ladder)
        if not self.ladder or any(b != 2 * a for a, b in zip(self.ladder, self.ladder[1:])):
            raise ValueError(f"resolution ladder must strictly double, got {self.ladder}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if not 0.0 <= self.fade_fraction <= 1.0:
            raise ValueError("fade_fraction must be in [0, 1]")
        if isinstance(self.epochs_per_stage, (list, tuple)):
            self.epochs_per_stage = tuple(int(e) for e in self.epochs_per_stage)
            if len(self.epochs_per_stage) != len(self.ladder):
                raise ValueError("epochs_per_stage list must have one entry per ladder rung")
        if min(self.stage_epochs) < 0:
            raise ValueError("epochs_per_stage must be >= 0")

    @property
    def stage_epochs(self):
        e = self.epochs_per_stage
        return tuple(e) if isinstance(e, tuple) else (int(e),) * len(self.ladder)


@dataclass
class PredictorConfig:
    n_in: int = 5
    n_out: int = 5
    channels: int = 3
    base_channels: int = 32
    min_channels: int = 16
    final_resolution: int = 32
    start_resolution: int = 4
    pixel_norm: bool = True
    skip_connections: bool = True
    last_frame_residual: bool = True
    seed: int = 0
    # optimiser / objective
    lr: float = 1e-3
    beta1: float = 0.0
    beta2: float = 0.99
    batch_size: int = 16
    n_critic: int = 1
    drift: float = 1e-3
    loss: L.LossConfig = field(default_factory=lambda: L.LossConfig(
        adversarial=L.AdversarialKind("wgan_gp", 10.0),
        content_weight=100.0,
        extractor=L.ExtractorSpec(kind="identity"),
    ))

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = L.LossConfig(**self.loss)
        if self.final_resolution not in self.ladder:
            raise ValueError(f"final resolution {self.final_resolution} not reachable from "
                             f"{self.start_resolution} by doubling")
        if self.n_in < 1 or self.n_out < 1:
            raise ValueError("frame counts must be >= 1")

    @property
    def ladder(self):
        out = [self.start_resolution]
        while out[-1] < self.final_resolution:
            out.append(out[-1] * 2)
        return tuple(out)

    def width(self, res):
        c = self.base_channels * 8 // max(res, 8)
        return int(min(self.base_channels, max(self.min_channels, c)))

    def to_dict(self):
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        return d


class PixelNorm(nn.Module):
    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(dim=1, keepdim=True) + 1e-8)


def _conv_act(cin, cout, norm):
    layers = [nn.Conv3d(cin, cout, 3, padding=1), nn.LeakyReLU(0.2)]
    if norm:
        layers.append(PixelNorm())
    return layers


def downsample(x):
    """Halve the spatial size of ``(B, C, T, H, W)`` by 2x2 averaging."""
    return F.avg_pool3d(x, (1, 2, 2))


def upsample(x):
    """Double the spatial size of ``(B, C, T, H, W)`` by nearest-neighbour repetition."""
    return x.repeat_interleave(2, dim=3).repeat_interleave(2, dim=4)


class TemporalMix(nn.Module):
    """Map ``t_in`` time steps to ``t_out`` with a 2-D conv over stacked (channel, time)."""

    def __init__(self, ch, t_in, t_out, kernel):
        super().__init__()
        self.ch, self.t_out = ch, t_out
        self.conv = nn.Conv2d(ch * t_in, ch * t_out, kernel, padding=kernel // 2)

    def forward(self, x):
        b, c, t, h, w = x.shape
        y = self.conv(x.reshape(b, c * t, h, w))
        return y.reshape(b, self.ch, self.t_out, h, w)


class Generator(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        ladder = cfg.ladder
        norm = cfg.pixel_norm
        img = cfg.channels
        w4 = cfg.width(ladder[0])
        self.from_rgb = nn.ModuleList([nn.Conv3d(img, cfg.width(r), 1) for r in ladder])
        self.to_rgb = nn.ModuleList([nn.Conv3d(cfg.width(r), img, 1) for r in ladder])
        self.encoders = nn.ModuleList([nn.Identity()])
        self.decoders = nn.ModuleList([nn.Identity()])
        for s in range(1, len(ladder)):
            hi, lo = cfg.width(ladder[s]), cfg.width(ladder[s - 1])
            self.encoders.append(nn.Sequential(*_conv_act(hi, hi, norm), *_conv_act(hi, lo, norm)))
            self.decoders.append(nn.Sequential(*_conv_act(lo, hi, norm), *_conv_act(hi, hi, norm)))
        self.bottom_in = nn.Sequential(*_conv_act(w4, w4, norm))
        self.bottom_mix = TemporalMix(w4, cfg.n_in, cfg.n_out, 3)
        self.bottom_norm = PixelNorm() if norm else nn.Identity()
        self.bottom_out = nn.Sequential(*_conv_act(w4, w4, norm))
        if cfg.skip_connections:
            self.skips = nn.ModuleList(
                [TemporalMix(cfg.width(r), cfg.n_in, cfg.n_out, 1) for r in ladder])
        if cfg.last_frame_residual:
            # start from the copy-last-frame prediction
            for m in self.to_rgb:
                nn.init.zeros_(m.weight)
                nn.init.zeros_(m.bias)

    def forward_stage(self, x, stage):
        """Full-resolution pathway of ``stage`` (no blending)."""
        h = F.leaky_relu(self.from_rgb[stage](x), 0.2)
        feats = []
        for s in range(stage, 0, -1):
            feats.append(h)
            h = downsample(self.encoders[s](h))
        feats.append(h)
        h = self.bottom_in(h)
        h = self.bottom_norm(F.leaky_relu(self.bottom_mix(h), 0.2))
        h = self.bottom_out(h)
        if self.cfg.skip_connections:
            h = h + self.skips[0](feats[-1])
        for s in range(1, stage + 1):
            h = self.decoders[s](upsample(h))
            if self.cfg.skip_connections:
                h = h + self.skips[s](feats[stage - s])
        out = self.to_rgb[stage](h)
        if self.cfg.last_frame_residual:
            last = x[:, :, -1:].clamp(1e-3, 1 - 1e-3)
            out = out + torch.log(last) - torch.log1p(-last)
        return torch.sigmoid(out)

    def forward(self, x, stage, alpha=1.0):
        new = self.forward_stage(x, stage)
        if stage == 0 or alpha >= 1.0:
            return new
        prev = upsample(self.forward_stage(downsample(x), stage - 1))
        return (1.0 - alpha) * prev + alpha * new


class Discriminator(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        ladder = cfg.ladder
        t = cfg.n_in + cfg.n_out
        self.from_rgb = nn.ModuleList([nn.Conv3d(cfg.channels, cfg.width(r), 1) for r in ladder])
        self.blocks = nn.ModuleList([nn.Identity()])
        for s in range(1, len(ladder)):
            hi, lo = cfg.width(ladder[s]), cfg.width(ladder[s - 1])
            self.blocks.append(nn.Sequential(nn.Conv3d(hi, lo, 3, padding=1), nn.LeakyReLU(0.2)))
        w4 = cfg.width(ladder[0])
        self.final = nn.Sequential(nn.Conv3d(w4, w4, 3, padding=1), nn.LeakyReLU(0.2))
        self.head = nn.Linear(w4 * t * ladder[0] * ladder[0], 1)

    def forward(self, x, stage, alpha=1.0):
        h = F.leaky_relu(self.from_rgb[stage](x), 0.2)
        if stage > 0:
            h = downsample(self.blocks[stage](h))
            if alpha < 1.0:
                skip = F.leaky_relu(self.from_rgb[stage - 1](downsample(x)), 0.2)
                h = alpha * h + (1.0 - alpha) * skip
            for s in range(stage - 1, 0, -1):
                h = downsample(self.blocks[s](h))
        h = self.final(h)
        return self.head(h.flatten(1)).squeeze(1)


@dataclass
class PredictorState:
    config: PredictorConfig
    generator: Generator
    discriminator: Discriminator
    stage: int = 0
    alpha: float = 1.0
    opt_g: torch.optim.Optimizer | None = None
    opt_d: torch.optim.Optimizer | None = None
    step: int = 0
    epoch: int = 0

    @property
    def resolution(self):
        return self.config.ladder[self.stage]

    def save(self, path):
        return save_checkpoint(
            path, "predictor", self.config.to_dict(),
            stage=self.stage, alpha=float(self.alpha), step=self.step, epoch=self.epoch,
            generator=self.generator.state_dict(),
            discriminator=self.discriminator.state_dict(),
            opt_g=self.opt_g.state_dict() if self.opt_g is not None else None,
            opt_d=self.opt_d.state_dict() if self.opt_d is not None else None,
        )


def _make_optimizers(state):
    cfg = state.config
    state.opt_g = torch.optim.Adam(state.generator.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    state.opt_d = torch.optim.Adam(state.discriminator.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))


def build_predictor(config, stage=0):
    """Create seeded generator/discriminator pair positioned at ``stage``."""
    if not 0 <= stage < len(config.ladder):
        raise ValueError(f"stage {stage} outside ladder {config.ladder}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        g = Generator(config)
        d = Discriminator(config)
    state = PredictorState(config=config, generator=g, discriminator=d, stage=stage, alpha=1.0)
    _make_optimizers(state)
    return state


def load_predictor(path):
    blob = load_checkpoint(path, kind="predictor")
    cfg = PredictorConfig(**blob["config"])
    state = build_predictor(cfg, blob["stage"])
    state.generator.load_state_dict(blob["generator"])
    state.discriminator.load_state_dict(blob["discriminator"])
    state.alpha = blob["alpha"]
    state.step = blob["step"]
    state.epoch = blob["epoch"]
    if blob.get("opt_g") is not None:
        state.opt_g.load_state_dict(blob["opt_g"])
        state.opt_d.load_state_dict(blob["opt_d"])
    return state


def to_tensor(seq):
    """``(B, T, H, W, C)`` or ``(T, H, W, C)`` array -> ``(B, C, T, H, W)`` float tensor."""
    x = torch.as_tensor(np.asarray(seq), dtype=torch.float32)
    if x.dim() == 4:
        x = x.unsqueeze(0)
    return x.permute(0, 4, 1, 2, 3).contiguous()


def to_numpy(x):
    return x.detach().permute(0, 2, 3, 4, 1).cpu().numpy()


def forward_blended(state, input_seq, alpha):
    """Blend the previous-stage output (upsampled) with the current stage's output."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if state.stage == 0 and alpha < 1.0:
        raise ValueError("stage 0 has no previous pathway to fade from")
    x = input_seq if isinstance(input_seq, torch.Tensor) else to_tensor(input_seq)
    with torch.no_grad():
        return state.generator(x, state.stage, alpha)


def predict(state, input_seq):
    """Predict ``n_out`` frames from ``n_in`` frames at the current stage resolution.

    Accepts a single ``(n_in, R, R, C)`` sequence or a batch; returns the
    same layout.
    """
    arr = np.asarray(input_seq)
    single = arr.ndim == 4
    cfg = state.config
    if single:
        arr = arr[None]
    if arr.ndim != 5 or arr.shape[1] != cfg.n_in or arr.shape[4] != cfg.channels:
        raise ValueError(f"expected (B, {cfg.n_in}, R, R, {cfg.channels}) input, got {arr.shape}")
    r = state.resolution
    if arr.shape[2] != r or arr.shape[3] != r:
        raise ValueError(f"input resolution {arr.shape[2]}x{arr.shape[3]} != stage resolution {r}")
    state.generator.eval()
    with torch.no_grad():
        out = to_numpy(state.generator(to_tensor(arr), state.stage, state.alpha))
    return out[0] if single else out


def downsample_batch(arr, res):
    """Average-pool ``(N, T, H, W, C)`` frames to ``res`` (power-of-two factor)."""
    n, t, h, w, c = arr.shape
    f = h // res
    if f == 1:
        return arr
    return arr.reshape(n, t, res, f, res, f, c).mean(axis=(3, 5))


def copy_last_baseline(inputs, n_out):
    """Repeat the last input frame ``n_out`` times."""
    return np.repeat(np.asarray(inputs)[:, -1:], n_out, axis=1)


def _flatten_time(x):
    b, c, t, h, w = x.shape
    return x.permute(0, 2, 1, 3, 4).reshape(b * t, c, h, w)


def train_predictor(state, train_inputs, train_targets, schedule=None, out_dir=None, seed=None,
                    extractor=None, progress=None):
    """Progressive WGAN-GP training; returns ``(state, log_rows)``.

    Each stage fades in over ``schedule.fade_fraction`` of its iterations and
    then stabilises; one checkpoint is written per completed stage. The
    learning rate decays linearly to zero over the whole run.
    """
    cfg = state.config
    schedule = schedule or ProgressiveSchedule(ladder=cfg.ladder)
    if tuple(schedule.ladder) != tuple(cfg.ladder):
        raise ValueError(f"schedule ladder {schedule.ladder} != config ladder {cfg.ladder}")
    train_inputs = np.asarray(train_inputs, dtype=np.float32)
    train_targets = np.asarray(train_targets, dtype=np.float32)
    n = len(train_inputs)
    if n == 0:
        raise ValueError("empty training split")
    if train_inputs.shape[2] < cfg.final_resolution:
        raise ValueError("training frames are smaller than the final resolution")
    if train_inputs.shape[2] != cfg.final_resolution:
        train_inputs = downsample_batch(train_inputs, cfg.final_resolution)
        train_targets = downsample_batch(train_targets, cfg.final_resolution)

    out_dir = Path(out_dir) if out_dir is not None else None
    logger = CsvLog(out_dir / "train_log.csv" if out_dir else None, LOG_FIELDS)
    stage_epochs = schedule.stage_epochs
    if sum(stage_epochs[state.stage:]) == 0:
        return state, logger.rows

    lcfg = cfg.loss
    extractor = extractor or L.FeatureExtractor(lcfg.extractor, cfg.channels)
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    gen = torch.Generator().manual_seed(int(cfg.seed if seed is None else seed))
    bs = min(cfg.batch_size, n)
    iters_per_epoch = math.ceil(n / bs)
    n_stages = len(cfg.ladder)
    total_iters = sum(stage_epochs[state.stage:]) * iters_per_epoch
    start = time.perf_counter()
    G, D = state.generator, state.discriminator

    for stage in range(state.stage, n_stages):
        state.stage = stage
        res = cfg.ladder[stage]
        xin = torch.as_tensor(downsample_batch(train_inputs, res)).permute(0, 4, 1, 2, 3).contiguous()
        xtg = torch.as_tensor(downsample_batch(train_targets, res)).permute(0, 4, 1, 2, 3).contiguous()
        stage_iters = stage_epochs[stage] * iters_per_epoch
        fade_iters = int(schedule.fade_fraction * stage_iters) if stage > 0 else 0
        it = 0
        for ep in range(stage_epochs[stage]):
            G.train()
            D.train()
            perm = rng.permutation(n)
            d_acc, g_acc = [], []
            for b0 in range(0, n, bs):
                idx = torch.as_tensor(perm[b0:b0 + bs])
                real_in, real_out = xin[idx], xtg[idx]
                alpha = min(1.0, it / fade_iters) if fade_iters > 0 else 1.0
                state.alpha = alpha
                lr = cfg.lr * linear_decay(state.step, total_iters)
                for opt in (state.opt_g, state.opt_d):
                    for grp in opt.param_groups:
                        grp["lr"] = lr

                for _ in range(cfg.n_critic):
                    with torch.no_grad():
                        fake_out = G(real_in, stage, alpha)
                    real_seq = torch.cat([real_in, real_out], dim=2)
                    fake_seq = torch.cat([real_in, fake_out], dim=2)
                    d_real = D(real_seq, stage, alpha)
                    d_fake = D(fake_seq, stage, alpha)
                    if lcfg.adversarial.variant == "wgan_gp":
                        gp = L.gradient_penalty(lambda z: D(z, stage, alpha), real_seq, fake_seq, generator=gen)
                        d_loss = L.wgan_gp_d_loss(d_real, d_fake, gp, lcfg.adversarial.gp_weight)
                        d_loss = d_loss + cfg.drift * (d_real ** 2).mean()
                    else:
                        d_loss = L.minimax_d_loss(torch.sigmoid(d_real), torch.sigmoid(d_fake))
                    state.opt_d.zero_grad(set_to_none=True)
                    d_loss.backward()
                    state.opt_d.step()

                fake_out = G(real_in, stage, alpha)
                d_fake = D(torch.cat([real_in, fake_out], dim=2), stage, alpha)
                if lcfg.adversarial.variant == "wgan_gp":
                    adv = L.wgan_g_loss(d_fake)
                else:
                    adv = L.minimax_g_loss(torch.sigmoid(d_fake))
                content = L.content_loss(extractor, _flatten_time(real_out), _flatten_time(fake_out))
                g_loss = L.combined_g_loss(adv, content, lcfg.content_weight)
                state.opt_g.zero_grad(set_to_none=True)
                g_loss.backward()
                state.opt_g.step()

                dl, gl = float(d_loss.detach()), float(g_loss.detach())
                if not (math.isfinite(dl) and math.isfinite(gl)):
                    if out_dir is not None:
                        state.save(out_dir / "diverged.pt")
                    raise L.NumericalFailure(
                        f"non-finite loss at stage {stage} epoch {ep} (d={dl}, g={gl})")
                d_acc.append(dl)
                g_acc.append(gl)
                it += 1
                state.step += 1
            state.epoch += 1
            row = dict(epoch=state.epoch, stage=stage, alpha=float(state.alpha),
                       d_loss=float(np.mean(d_acc)), g_loss=float(np.mean(g_acc)), lr=float(lr),
                       wall_seconds=time.perf_counter() - start)
            logger.write(**row)
            log.info("predictor %s", row)
            if progress is not None:
                progress(row)
        state.alpha = 1.0
        if out_dir is not None:
            state.save(out_dir / f"stage{stage}_{res}px.pt")
    return state, logger.rows
