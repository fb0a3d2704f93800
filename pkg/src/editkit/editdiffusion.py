"""Conditional denoising-diffusion editor.

Pixel-space (identity codec) by default: the denoiser sees the noisy target
latent concatenated channel-wise with the encoded input image, plus a token
condition injected through cross-attention. The condition tokens come from
the frozen edit encoder's last hidden state (or, for ablations, from the
text tower or a single-image baseline variant) through a trainable linear +
layer-norm projector. Training minimizes the noise-prediction error plus a
weighted perceptual term that anchors the one-step reconstruction to the
input image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint
from .contrastive import Triplet
from .encoders import (
    BASELINE_MODES,
    EncoderBundle,
    baseline_condition,
    bundle_from_meta,
    embed_pair,
    embed_text,
    encoder_meta,
)
from .errors import ConfigError, DegenerateInput, NonFiniteValues, ShapeMismatch
from .metrics import PerceptualNet
from .numcore import assert_finite

CONDITION_SOURCES = ("edit", "text") + BASELINE_MODES


# ---------------------------------------------------------------------------
# Noise schedule and forward process
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta DDPM tables; index t runs 1..T_max, alpha_bar(0) = 1."""

    betas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        bars = np.asarray(self.alpha_bars, dtype=np.float64)
        if betas.ndim != 1 or betas.shape != bars.shape or betas.size == 0:
            raise ConfigError("schedule tables must be equal-length 1-D arrays")
        if not ((betas > 0.0) & (betas < 1.0)).all():
            raise ConfigError("betas must lie strictly inside (0, 1)")
        if not (np.diff(bars) < 0.0).all() and bars.size > 1:
            raise ConfigError("alpha_bar must be strictly decreasing")
        recomputed = np.cumprod(1.0 - betas)
        if not np.allclose(recomputed, bars, rtol=0.0, atol=1e-12):
            raise ConfigError("alpha_bar table does not match cumprod(1 - beta)")

    @property
    def t_max(self) -> int:
        return int(self.betas.size)

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        if not 1 <= t <= self.t_max:
            raise ConfigError(f"timestep {t} outside schedule range 1..{self.t_max}")
        return float(self.alpha_bars[t - 1])


def make_schedule(t_max: int, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    if t_max < 1:
        raise ConfigError("t_max must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError("need 0 < beta_start <= beta_end < 1")
    betas = np.linspace(beta_start, beta_end, t_max, dtype=np.float64)
    return NoiseSchedule(betas=betas, alpha_bars=np.cumprod(1.0 - betas))


def mix(x0: torch.Tensor, eps: torch.Tensor, alpha_bar: float) -> torch.Tensor:
    """sqrt(a) * x0 + sqrt(1 - a) * eps."""
    if x0.shape != eps.shape:
        raise ShapeMismatch("noise shape must match the latent")
    return math.sqrt(alpha_bar) * x0 + math.sqrt(1.0 - alpha_bar) * eps


def add_noise(x0: torch.Tensor, eps: torch.Tensor, t: int, schedule: NoiseSchedule) -> torch.Tensor:
    return mix(x0, eps, schedule.alpha_bar(t))


def predict_x0_latent(
    x_t: torch.Tensor, eps_pred: torch.Tensor, t: int, schedule: NoiseSchedule
) -> torch.Tensor:
    a = schedule.alpha_bar(t)
    if a < 1e-12:
        raise DegenerateInput(f"alpha_bar underflow at t={t}; cannot invert")
    return (x_t - math.sqrt(1.0 - a) * eps_pred) / math.sqrt(a)


def predict_x0(x_t, eps_pred, t: int, schedule: NoiseSchedule, codec) -> torch.Tensor:
    """One-step reconstruction of the image behind a noisy latent."""
    return codec.decode(predict_x0_latent(x_t, eps_pred, t, schedule))


# ---------------------------------------------------------------------------
# Latent codecs
# ---------------------------------------------------------------------------


class IdentityCodec(nn.Module):
    mode = "identity"
    latent_channels = 3
    spatial_factor = 1

    def encode(self, img: torch.Tensor) -> torch.Tensor:
        return img

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        return latent


class TinyConvAE(nn.Module):
    """Small stride-2 conv autoencoder exercising the encode/decode interface."""

    mode = "tiny_conv_ae"
    latent_channels = 4
    spatial_factor = 2

    def __init__(self, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.enc = nn.Sequential(
            nn.Conv2d(3, 16, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(16, self.latent_channels, 4, stride=2, padding=1),
        )
        self.dec = nn.Sequential(
            nn.ConvTranspose2d(self.latent_channels, 16, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(16, 3, 3, padding=1),
        )

    def encode(self, img: torch.Tensor) -> torch.Tensor:
        single = img.dim() == 3
        z = self.enc(img.unsqueeze(0) if single else img)
        return z[0] if single else z

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        single = latent.dim() == 3
        x = self.dec(latent.unsqueeze(0) if single else latent)
        return x[0] if single else x


def make_codec(mode: str, seed: int = 0) -> nn.Module:
    if mode == "identity":
        return IdentityCodec()
    if mode == "tiny_conv_ae":
        return TinyConvAE(seed=seed)
    raise ConfigError(f"unknown codec mode {mode!r}")


def train_codec(
    codec: TinyConvAE, images: Sequence[torch.Tensor], steps: int = 400, lr: float = 2e-3,
    batch_size: int = 16, seed: int = 0,
) -> float:
    """Reconstruction pre-training; returns final PSNR (dB) over the corpus."""
    opt = torch.optim.Adam(codec.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    stack = torch.stack(list(images))
    for _ in range(steps):
        idx = torch.randint(0, len(stack), (min(batch_size, len(stack)),), generator=gen)
        batch = stack[idx]
        recon = codec.decode(codec.encode(batch))
        loss = F.mse_loss(recon, batch)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    with torch.no_grad():
        mse = float(F.mse_loss(codec.decode(codec.encode(stack)).clamp(0, 1), stack))
    return 10.0 * math.log10(1.0 / max(mse, 1e-12))


# ---------------------------------------------------------------------------
# Condition projector and denoiser
# ---------------------------------------------------------------------------


class ConditionProjector(nn.Module):
    """Per-token linear map + layer norm from encoder width to the denoiser's
    cross-attention width, with a learned null-condition row."""

    def __init__(self, d_in: int, d_cond: int):
        super().__init__()
        self.d_in = d_in
        self.linear = nn.Linear(d_in, d_cond)
        self.norm = nn.LayerNorm(d_cond)
        self.null_row = nn.Parameter(torch.zeros(d_in))

    def forward(self, hidden: torch.Tensor) -> torch.Tensor:
        if hidden.shape[-1] != self.d_in:
            raise ShapeMismatch(
                f"condition width {hidden.shape[-1]} != projector width {self.d_in}"
            )
        return self.norm(self.linear(hidden))

    def null_tokens(self, n_tokens: int, batch: int = 1) -> torch.Tensor:
        row = self.null_row.expand(batch, n_tokens, self.d_in)
        return self.forward(row)


def condition_project(hidden: torch.Tensor, projector: ConditionProjector) -> torch.Tensor:
    """Project an edit embedding's token matrix to condition tokens."""
    return projector(hidden)


def timestep_embedding(t_idx: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t_idx.to(torch.float32)[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def _norm_groups(channels: int) -> int:
    # keep >= 2 channels per group: single-channel groups make uniform
    # per-channel shifts (conv/temb biases) unidentifiable
    return max(1, min(8, channels // 4))


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, t_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_norm_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(t_dim, cout)
        self.norm2 = nn.GroupNorm(_norm_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    def __init__(self, channels: int, d_cond: int):
        super().__init__()
        self.norm = nn.GroupNorm(_norm_groups(channels), channels)
        self.q = nn.Linear(channels, channels)
        # no key bias: it cancels inside the softmax (zero gradient)
        self.k = nn.Linear(d_cond, channels, bias=False)
        self.v = nn.Linear(d_cond, channels)
        self.out = nn.Linear(channels, channels)

    def forward(self, x, cond):
        B, C, H, W = x.shape
        q = self.q(self.norm(x).flatten(2).transpose(1, 2))  # (B, HW, C)
        k, v = self.k(cond), self.v(cond)
        attn = F.softmax(q @ k.transpose(1, 2) / math.sqrt(q.shape[-1]), dim=-1)
        h = self.out(attn @ v).transpose(1, 2).reshape(B, C, H, W)
        return x + h


@dataclass
class DenoiserConfig:
    base_width: int = 32
    channel_mult: int = 2
    d_cond: int = 64
    t_dim: int = 64
    latent_channels: int = 3

    def __post_init__(self):
        if self.base_width < 8 or self.base_width % 8:
            raise ConfigError("base_width must be a positive multiple of 8")
        if self.channel_mult < 1:
            raise ConfigError("channel_mult must be >= 1")


class Denoiser(nn.Module):
    """Two-scale UNet; the input is the noisy latent concatenated with the
    encoded input image (doubling the channels), conditioned through
    cross-attention at the two coarser scales."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        c, t_dim = cfg.base_width, cfg.t_dim
        c2 = cfg.channel_mult * c
        cin = 2 * cfg.latent_channels
        self.t_mlp = nn.Sequential(nn.Linear(t_dim, t_dim), nn.SiLU(), nn.Linear(t_dim, t_dim))
        self.stem = nn.Conv2d(cin, c, 3, padding=1)
        self.down1 = ResBlock(c, c, t_dim)
        self.down2 = ResBlock(c, c2, t_dim)
        self.attn2 = CrossAttention(c2, cfg.d_cond)
        self.mid1 = ResBlock(c2, c2, t_dim)
        self.attn_mid = CrossAttention(c2, cfg.d_cond)
        self.mid2 = ResBlock(c2, c2, t_dim)
        self.up2 = ResBlock(2 * c2, c, t_dim)
        self.up1 = ResBlock(2 * c, c, t_dim)
        self.out_norm = nn.GroupNorm(_norm_groups(c), c)
        self.out = nn.Conv2d(c, cfg.latent_channels, 3, padding=1)

    def forward(self, x_t: torch.Tensor, cond_image: torch.Tensor, t_idx: torch.Tensor,
                cond_tokens: torch.Tensor) -> torch.Tensor:
        """x_t, cond_image: (B, C, H, W); t_idx: (B,) int; cond_tokens:
        (B, n, d_cond). Returns the predicted noise, shaped like x_t."""
        if x_t.shape != cond_image.shape:
            raise ShapeMismatch("conditioning image latent must match x_t")
        temb = self.t_mlp(timestep_embedding(t_idx, self.cfg.t_dim).to(x_t.dtype))
        h1 = self.down1(self.stem(torch.cat([x_t, cond_image], dim=1)), temb)
        h2 = self.down2(F.avg_pool2d(h1, 2), temb)
        h2 = self.attn2(h2, cond_tokens)
        m = self.mid1(F.avg_pool2d(h2, 2), temb)
        m = self.attn_mid(m, cond_tokens)
        m = self.mid2(m, temb)
        u2 = self.up2(torch.cat([F.interpolate(m, scale_factor=2.0), h2], dim=1), temb)
        u1 = self.up1(torch.cat([F.interpolate(u2, scale_factor=2.0), h1], dim=1), temb)
        return self.out(F.silu(self.out_norm(u1)))


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def noise_loss(eps: torch.Tensor, eps_pred: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all latent elements."""
    if eps.shape != eps_pred.shape:
        raise ShapeMismatch("prediction shape must match the noise")
    assert_finite(eps_pred, "noise prediction")
    return ((eps - eps_pred) ** 2).mean()


@dataclass
class TrainConfig:
    lambda1: float = 1.0
    lambda2: float = 0.05
    lr: float = 5e-5
    iterations: int = 16000
    cond_dropout_p: float = 0.05
    seed: int = 0
    batch_size: int = 8
    t_max: int = 50
    beta_start: float = 0.02
    beta_end: float = 0.32
    condition_source: str = "edit"
    codec: str = "identity"
    base_width: int = 32
    d_cond: int = 64

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("loss weights must be >= 0")
        if not 0.0 <= self.cond_dropout_p < 1.0:
            raise ConfigError("cond_dropout_p must be in [0, 1)")
        if self.condition_source not in CONDITION_SOURCES:
            raise ConfigError(f"unknown condition_source {self.condition_source!r}")


@dataclass
class Editor:
    """Everything the sampler needs: frozen encoders, trained denoiser and
    projector, schedule, codec, and which condition source was trained."""

    encoders: EncoderBundle
    denoiser: Denoiser
    projector: ConditionProjector
    schedule: NoiseSchedule
    codec: nn.Module
    cond_source: str
    trained: bool = False

    def condition_hidden(self, triplet_like) -> torch.Tensor:
        """Condition token matrix (pre-projection) for one exemplar/triplet."""
        input_img, edited_img, instruction = triplet_like
        if self.cond_source == "edit":
            return embed_pair(input_img, edited_img, self.encoders).hidden
        if self.cond_source == "text":
            hidden = embed_text(instruction, self.encoders).hidden
            # fixed token count across samples: zero-pad to max_tokens
            full = hidden.new_zeros(self.encoders.cfg.max_tokens, hidden.shape[1])
            full[: hidden.shape[0]] = hidden
            return full
        return baseline_condition(self.cond_source, input_img, edited_img, self.encoders)


def condition_width(cond_source: str, d_model: int) -> int:
    return 2 * d_model if cond_source == "channel_concat" else d_model


def total_loss(
    x0_latent: torch.Tensor,
    cond_image_latent: torch.Tensor,
    cond_tokens: torch.Tensor,
    input_images: torch.Tensor,
    t_idx: torch.Tensor,
    eps: torch.Tensor,
    editor_parts: Tuple[Denoiser, NoiseSchedule, nn.Module],
    perceptual: PerceptualNet,
    lambda1: float,
    lambda2: float,
) -> Tuple[torch.Tensor, Dict[str, float]]:
    """Weighted noise-prediction + perceptual reconstruction objective.

    The perceptual term compares the one-step reconstruction (decoded) with
    the input image, one timestep per sample. Returns (loss, logged parts).
    """
    denoiser, schedule, codec = editor_parts
    bars = torch.tensor(
        [schedule.alpha_bar(int(t)) for t in t_idx], dtype=x0_latent.dtype
    ).view(-1, *([1] * (x0_latent.dim() - 1)))
    x_t = bars.sqrt() * x0_latent + (1.0 - bars).sqrt() * eps
    eps_pred = denoiser(x_t, cond_image_latent, t_idx, cond_tokens)
    l_noise = noise_loss(eps, eps_pred)
    if lambda2 > 0:
        recon = codec.decode((x_t - (1.0 - bars).sqrt() * eps_pred) / bars.sqrt())
        l_perc = perceptual(recon, input_images)
    else:
        l_perc = torch.zeros(())
    total = lambda1 * l_noise + lambda2 * l_perc
    parts = {
        "noise_loss": float(l_noise.detach()),
        "lpips_loss": float(l_perc.detach()),
        "total": float(total.detach()),
    }
    return total, parts


@dataclass
class PreparedTriplet:
    x0_latent: torch.Tensor
    cond_image_latent: torch.Tensor
    cond_hidden: torch.Tensor
    input_image: torch.Tensor


def prepare_triplets(triplets: Sequence[Triplet], editor: Editor) -> List[PreparedTriplet]:
    """Precompute frozen-encoder quantities for a training set."""
    out = []
    with torch.no_grad():
        for t in triplets:
            out.append(
                PreparedTriplet(
                    x0_latent=editor.codec.encode(t.edited),
                    cond_image_latent=editor.codec.encode(t.input),
                    cond_hidden=editor.condition_hidden((t.input, t.edited, t.instruction)),
                    input_image=t.input,
                )
            )
    return out


def apply_condition_dropout(
    cond_tokens: torch.Tensor,
    cond_image_latent: torch.Tensor,
    projector: ConditionProjector,
    p: float,
    gen: torch.Generator,
) -> Tuple[torch.Tensor, torch.Tensor, int, int]:
    """IP2P-style dropout: independently null the token condition, zero the
    image condition, and with a further draw drop both. Returns the possibly
    modified tensors plus counters (tokens_dropped, image_dropped)."""
    B, n_tokens, _ = cond_tokens.shape
    dropped_tok = dropped_img = 0
    if p <= 0:
        return cond_tokens, cond_image_latent, 0, 0
    draws = torch.rand(B, 3, generator=gen)
    cond_tokens = cond_tokens.clone()
    cond_image_latent = cond_image_latent.clone()
    for i in range(B):
        drop_tok = bool(draws[i, 0] < p) or bool(draws[i, 2] < p)
        drop_img = bool(draws[i, 1] < p) or bool(draws[i, 2] < p)
        if drop_tok:
            cond_tokens[i] = projector.null_tokens(n_tokens)[0]
            dropped_tok += 1
        if drop_img:
            cond_image_latent[i] = 0.0
            dropped_img += 1
    return cond_tokens, cond_image_latent, dropped_tok, dropped_img


def finetune_step(
    batch: Sequence[PreparedTriplet],
    editor: Editor,
    perceptual: PerceptualNet,
    optimizer: torch.optim.Optimizer,
    cfg: TrainConfig,
    gen: torch.Generator,
) -> Dict[str, float]:
    """One training step over prepared triplets. The encoders never move;
    only the denoiser and projector receive gradients."""
    x0 = torch.stack([b.x0_latent for b in batch])
    c_img = torch.stack([b.cond_image_latent for b in batch])
    inputs = torch.stack([b.input_image for b in batch])
    hidden = torch.stack([b.cond_hidden for b in batch])
    cond_tokens = editor.projector(hidden)
    t_idx = torch.randint(1, editor.schedule.t_max + 1, (len(batch),), generator=gen)
    eps = torch.randn(x0.shape, generator=gen)
    cond_tokens, c_img, _, _ = apply_condition_dropout(
        cond_tokens, c_img, editor.projector, cfg.cond_dropout_p, gen
    )
    loss, parts = total_loss(
        x0, c_img, cond_tokens, inputs, t_idx, eps,
        (editor.denoiser, editor.schedule, editor.codec),
        perceptual, cfg.lambda1, cfg.lambda2,
    )
    if not torch.isfinite(loss):
        raise NonFiniteValues("non-finite diffusion loss; step aborted")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return parts


def build_editor(encoders: EncoderBundle, cfg: TrainConfig, seed: int | None = None) -> Editor:
    codec = make_codec(cfg.codec)
    torch.manual_seed(cfg.seed if seed is None else seed)
    d_in = condition_width(cfg.condition_source, encoders.cfg.d_model)
    dcfg = DenoiserConfig(
        base_width=cfg.base_width, d_cond=cfg.d_cond, latent_channels=codec.latent_channels
    )
    return Editor(
        encoders=encoders,
        denoiser=Denoiser(dcfg),
        projector=ConditionProjector(d_in, cfg.d_cond),
        schedule=make_schedule(cfg.t_max, cfg.beta_start, cfg.beta_end),
        codec=codec,
        cond_source=cfg.condition_source,
    )


def finetune(
    triplets: Sequence[Triplet],
    encoders: EncoderBundle,
    cfg: TrainConfig,
    perceptual: PerceptualNet | None = None,
    editor: Editor | None = None,
) -> Tuple[Editor, List[dict]]:
    """Train a fresh (or provided) editor on triplets; returns loss rows."""
    if perceptual is None:
        perceptual = PerceptualNet()
    if editor is None:
        editor = build_editor(encoders, cfg)
    if cfg.codec == "tiny_conv_ae":
        train_codec(editor.codec, [t.input for t in triplets] + [t.edited for t in triplets],
                    seed=cfg.seed)
    encoders.requires_grad_(False)
    prepared = prepare_triplets(triplets, editor)
    params = list(editor.denoiser.parameters()) + list(editor.projector.parameters())
    optimizer = torch.optim.Adam(params, lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    rows: List[dict] = []
    for step in range(1, cfg.iterations + 1):
        idx = torch.randint(0, len(prepared), (min(cfg.batch_size, len(prepared)),), generator=gen)
        parts = finetune_step([prepared[i] for i in idx], editor, perceptual, optimizer, cfg, gen)
        rows.append({"step": step, **parts})
    editor.trained = True
    return editor, rows


# ---------------------------------------------------------------------------
# Editor checkpointing
# ---------------------------------------------------------------------------


def save_editor(path, editor: Editor, extra_meta: dict | None = None) -> None:
    tensors: Dict[str, torch.Tensor] = {}
    for prefix, module in (
        ("encoders", editor.encoders),
        ("denoiser", editor.denoiser),
        ("projector", editor.projector),
    ):
        for name, t in module.state_dict().items():
            tensors[f"{prefix}.{name}"] = t
    if editor.codec.mode == "tiny_conv_ae":
        for name, t in editor.codec.state_dict().items():
            tensors[f"codec.{name}"] = t
    meta = {
        "kind": "editor",
        "encoders": encoder_meta(editor.encoders),
        "denoiser": {
            "base_width": editor.denoiser.cfg.base_width,
            "d_cond": editor.denoiser.cfg.d_cond,
            "t_dim": editor.denoiser.cfg.t_dim,
            "latent_channels": editor.denoiser.cfg.latent_channels,
        },
        "schedule": {
            "t_max": editor.schedule.t_max,
            "betas": [float(b) for b in editor.schedule.betas],
        },
        "codec": editor.codec.mode,
        "cond_source": editor.cond_source,
        "trained": editor.trained,
    }
    if extra_meta:
        meta.update(extra_meta)
    checkpoint.save_tensors(path, tensors, meta)


def load_editor(path) -> Editor:
    tensors, meta = checkpoint.load_tensors(path)
    if meta.get("kind") != "editor":
        raise ConfigError(f"{path} is not an editor checkpoint")
    encoders = bundle_from_meta(meta["encoders"])
    denoiser = Denoiser(DenoiserConfig(**meta["denoiser"]))
    projector = ConditionProjector(
        condition_width(meta["cond_source"], encoders.cfg.d_model), meta["denoiser"]["d_cond"]
    )
    codec = make_codec(meta["codec"])
    groups = {"encoders": {}, "denoiser": {}, "projector": {}, "codec": {}}
    for name, t in tensors.items():
        prefix, rest = name.split(".", 1)
        groups[prefix][rest] = t
    encoders.load_state_dict(groups["encoders"])
    denoiser.load_state_dict(groups["denoiser"])
    projector.load_state_dict(groups["projector"])
    if meta["codec"] == "tiny_conv_ae":
        codec.load_state_dict(groups["codec"])
    betas = np.asarray(meta["schedule"]["betas"], dtype=np.float64)
    schedule = NoiseSchedule(betas=betas, alpha_bars=np.cumprod(1.0 - betas))
    return Editor(
        encoders=encoders, denoiser=denoiser, projector=projector,
        schedule=schedule, codec=codec, cond_source=meta["cond_source"],
        trained=bool(meta.get("trained", False)),
    )
