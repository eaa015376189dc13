"""Semantic-to-mel conditional flow matching with two interchangeable backbones.

``udit_like`` is an isotropic stack of conv-transformer blocks at the full mel
frame rate. ``zipformer_like`` runs a symmetric schedule of stacks at reduced
temporal rates (default ``[1, 2, 4, 2, 1]``), each stack wrapped in a residual
bypass, so most attention is computed over a quarter or half of the frames.

Both backbones take ``(h, temb)`` and return a tensor of the same shape, so the
surrounding model (conditioning, flow objective, sampler) is shared.
"""

from __future__ import annotations

import logging
import math
import random
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint
from .audio import MEL_FRAME_RATE, N_MELS, MelSpectrogram
from .codec import SemanticTokens

log = logging.getLogger(__name__)

BACKBONES = ("udit_like", "zipformer_like")


@dataclass
class BackboneConfig:
    kind: str = "zipformer_like"
    width: int = 128
    n_heads: int = 4
    depth: int = 8  # udit_like only
    schedule: tuple[int, ...] = (1, 2, 4, 2, 1)  # zipformer_like: rate per stack
    layers_per_stack: int = 1
    conv_kernel: int = 5

    def __post_init__(self):
        self.schedule = tuple(int(r) for r in self.schedule)

    def validate(self) -> None:
        if self.kind not in BACKBONES:
            raise ValueError(f"unknown backbone {self.kind!r}; expected one of {BACKBONES}")
        if self.kind == "zipformer_like" and tuple(self.schedule) != tuple(reversed(self.schedule)):
            raise ValueError(f"downsample schedule must be symmetric, got {self.schedule}")
        if self.width % self.n_heads:
            raise ValueError("width must be divisible by n_heads")


def default_backbone(kind: str) -> BackboneConfig:
    cfg = BackboneConfig(kind=kind)
    cfg.validate()
    return cfg


@dataclass
class S2MConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    codebook_size: int = 256
    token_rate_hz: int = 25
    n_mels: int = N_MELS
    mel_frame_rate_hz: int = MEL_FRAME_RATE
    lr: float = 1e-3
    batch_size: int = 16
    crop_frames: int = 64
    warmup_steps: int = 50

    @property
    def upsample_factor(self) -> int:
        return self.mel_frame_rate_hz // self.token_rate_hz

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"]["schedule"] = list(self.backbone.schedule)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "S2MConfig":
        d = dict(d)
        d["backbone"] = BackboneConfig(**d["backbone"])
        return cls(**d)


@dataclass
class S2MCondition:
    semantic_tokens: SemanticTokens
    ref_mel: MelSpectrogram
    upsample_factor: int

    @property
    def n_frames(self) -> int:
        return len(self.semantic_tokens) * self.upsample_factor


@dataclass
class FlowState:
    x_t: np.ndarray
    t: float

    def __post_init__(self):
        if not 0.0 <= self.t <= 1.0:
            raise ValueError(f"t must lie in [0, 1], got {self.t}")


def cfm_interpolate(x0, x1, t):
    """Linear probability path: ``x_t = (1 - t) x0 + t x1`` with velocity ``x1 - x0``.

    Works on numpy arrays or torch tensors; ``t`` may be a scalar or broadcastable.
    """
    if tuple(x0.shape) != tuple(x1.shape):
        raise ValueError(f"shape mismatch: noise {tuple(x0.shape)} vs target {tuple(x1.shape)}")
    t_min = float(t.min()) if hasattr(t, "min") else float(t)
    t_max = float(t.max()) if hasattr(t, "max") else float(t)
    if t_min < 0.0 or t_max > 1.0:
        raise ValueError(f"t must lie in [0, 1], got range [{t_min}, {t_max}]")
    return (1 - t) * x0 + t * x1, x1 - x0


def cfm_loss(v_pred: torch.Tensor, v_target: torch.Tensor) -> torch.Tensor:
    return F.mse_loss(v_pred, v_target)


class _ConvFormerBlock(nn.Module):
    def __init__(self, width: int, n_heads: int, kernel: int):
        super().__init__()
        self.n_heads = n_heads
        self.t_proj = nn.Linear(width, width)
        self.ln1 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.ln2 = nn.LayerNorm(width)
        self.dwconv = nn.Conv1d(width, width, kernel, padding=kernel // 2, groups=width)
        self.ln3 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width))

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        b, t, w = x.shape
        h = self.n_heads
        x = x + self.t_proj(temb)[:, None]
        q, k, v = self.qkv(self.ln1(x)).split(w, dim=-1)
        q, k, v = (z.view(b, t, h, w // h).transpose(1, 2) for z in (q, k, v))
        a = F.scaled_dot_product_attention(q, k, v)
        x = x + self.proj(a.transpose(1, 2).reshape(b, t, w))
        x = x + self.dwconv(self.ln2(x).transpose(1, 2)).transpose(1, 2)
        return x + self.mlp(self.ln3(x))


class UDiTLike(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.blocks = nn.ModuleList(_ConvFormerBlock(cfg.width, cfg.n_heads, cfg.conv_kernel) for _ in range(cfg.depth))

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        for blk in self.blocks:
            x = blk(x, temb)
        return x


class ZipformerLike(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.rates = tuple(cfg.schedule)
        self.stacks = nn.ModuleList(
            nn.ModuleList(_ConvFormerBlock(cfg.width, cfg.n_heads, cfg.conv_kernel) for _ in range(cfg.layers_per_stack))
            for _ in self.rates
        )
        self.bypass = nn.Parameter(torch.ones(len(self.rates)))
        self.multiple = math.lcm(*self.rates)

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        T = x.shape[1]
        pad = (-T) % self.multiple
        if pad:
            x = torch.cat([x, x[:, -1:].expand(-1, pad, -1)], dim=1)
        for i, (rate, stack) in enumerate(zip(self.rates, self.stacks)):
            d = F.avg_pool1d(x.transpose(1, 2), rate).transpose(1, 2) if rate > 1 else x
            y = d
            for blk in stack:
                y = blk(y, temb)
            delta = y - d
            if rate > 1:
                delta = delta.repeat_interleave(rate, dim=1)
            x = x + self.bypass[i] * delta
        return x[:, :T]


def _timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half)
    ang = 1000.0 * t[:, None] * freqs[None]
    return torch.cat([ang.sin(), ang.cos()], dim=-1)


class S2MModel(nn.Module):
    def __init__(self, config: S2MConfig):
        super().__init__()
        config.backbone.validate()
        self.config = config
        w = config.backbone.width
        self.tok_emb = nn.Embedding(config.codebook_size, w)
        self.ref_proj = nn.Linear(config.n_mels, w)
        self.in_proj = nn.Linear(config.n_mels, w)
        self.t_mlp = nn.Sequential(nn.Linear(w, w), nn.SiLU(), nn.Linear(w, w))
        self.backbone = UDiTLike(config.backbone) if config.backbone.kind == "udit_like" else ZipformerLike(config.backbone)
        self.ln_out = nn.LayerNorm(w)
        self.out = nn.Linear(w, config.n_mels)
        self.register_buffer("mel_mean", torch.zeros(config.n_mels))
        self.register_buffer("mel_std", torch.ones(config.n_mels))
        self.loss_history: list[dict] = []

    def velocity(self, x_t: torch.Tensor, t: torch.Tensor, tokens: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
        """v_theta for normalised ``x_t`` [B, T, n_mels]; ``tokens`` [B, N]; ``ref`` [B, T_ref, n_mels]."""
        f = self.config.upsample_factor
        if tokens.shape[1] * f != x_t.shape[1]:
            raise ValueError(f"{tokens.shape[1]} tokens x {f} != {x_t.shape[1]} frames")
        cond = self.tok_emb(tokens).repeat_interleave(f, dim=1)
        ref_vec = self.ref_proj(((ref - self.mel_mean) / self.mel_std).mean(1))
        temb = self.t_mlp(_timestep_embedding(t, cond.shape[-1]))
        h = self.in_proj(x_t) + cond + ref_vec[:, None]
        h = self.backbone(h, temb)
        return self.out(self.ln_out(h))

    def normalize(self, mel: torch.Tensor) -> torch.Tensor:
        return (mel - self.mel_mean) / self.mel_std

    def denormalize(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.mel_std + self.mel_mean


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def backbone_parameters(backbone: BackboneConfig, **kw) -> int:
    return count_parameters(S2MModel(S2MConfig(backbone=backbone, **kw)))


def count_flops(backbone: BackboneConfig, T: int, n_mels: int = N_MELS) -> dict:
    """Analytic multiply-add count (x2) of one velocity evaluation over ``T`` frames."""
    if T < 1:
        raise ValueError("T must be >= 1")
    backbone.validate()
    w = backbone.width

    def block(n: int) -> tuple[float, float]:
        linear = 2 * n * (4 * w * w + 8 * w * w + w * w) + 2 * n * w * backbone.conv_kernel
        attention = 2 * 2 * n * n * w
        return linear, attention

    lin = att = 0.0
    stacks = []
    if backbone.kind == "udit_like":
        for _ in range(backbone.depth):
            a, b = block(T)
            lin += a
            att += b
            stacks.append(T)
    else:
        mult = math.lcm(*backbone.schedule)
        Tp = T + (-T) % mult
        for rate in backbone.schedule:
            n = Tp // rate
            for _ in range(backbone.layers_per_stack):
                a, b = block(n)
                lin += a
                att += b
            stacks.append(n)
    io = 2 * T * (2 * n_mels * w + w * w)
    return {"linear": lin, "attention": att, "io": float(io), "total": lin + att + io, "stack_lengths": stacks}


@dataclass
class S2MSample:
    cond: S2MCondition
    mel: MelSpectrogram


def _check_length_law(dataset: Sequence[S2MSample], factor: int) -> None:
    for i, s in enumerate(dataset):
        if s.cond.upsample_factor != factor:
            raise ValueError(f"sample {i}: upsample factor {s.cond.upsample_factor} != model factor {factor}")
        if s.mel.n_frames != len(s.cond.semantic_tokens) * factor:
            raise ValueError(
                f"sample {i}: {len(s.cond.semantic_tokens)} tokens x {factor} != {s.mel.n_frames} mel frames"
            )


def train_s2m(
    dataset: Sequence[S2MSample],
    config: S2MConfig,
    steps: int,
    seed: int = 0,
    on_step: Callable[[dict], None] | None = None,
) -> S2MModel:
    """Regress v_theta(x_t, t, cond) onto x1 - x0 with t ~ U[0, 1]."""
    f = config.upsample_factor
    _check_length_law(dataset, f)
    if not dataset:
        raise ValueError("empty S2M dataset")
    torch.manual_seed(seed)
    rng = random.Random(seed)
    gen = torch.Generator().manual_seed(seed)
    model = S2MModel(config)
    frames = np.concatenate([s.mel.frames for s in dataset])
    model.mel_mean.copy_(torch.from_numpy(frames.mean(0)))
    model.mel_std.copy_(torch.from_numpy(frames.std(0) + 1e-3))
    min_frames = min(s.mel.n_frames for s in dataset)
    crop = min(config.crop_frames, min_frames - min_frames % f)
    n_tok = crop // f
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr)
    model.train()
    for step in range(steps):
        lr = config.lr * min(1.0, (step + 1) / max(1, config.warmup_steps))
        for g in opt.param_groups:
            g["lr"] = lr
        toks, mels, refs = [], [], []
        for _ in range(config.batch_size):
            s = dataset[rng.randrange(len(dataset))]
            start = rng.randrange(len(s.cond.semantic_tokens) - n_tok + 1)
            toks.append(s.cond.semantic_tokens.ids[start : start + n_tok])
            mels.append(s.mel.frames[start * f : (start + n_tok) * f])
            refs.append(s.cond.ref_mel.frames)
        L = min(len(r) for r in refs)
        tok = torch.from_numpy(np.stack(toks))
        x1 = model.normalize(torch.from_numpy(np.stack(mels)))
        ref = torch.from_numpy(np.stack([r[:L] for r in refs]))
        x0 = torch.randn(x1.shape, generator=gen)
        t = torch.rand(x1.shape[0], generator=gen)
        x_t, v_target = cfm_interpolate(x0, x1, t[:, None, None])
        loss = cfm_loss(model.velocity(x_t, t, tok, ref), v_target)
        opt.zero_grad()
        loss.backward()
        nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
        rec = {"step": step, "loss": float(loss.detach())}
        model.loss_history.append(rec)
        if on_step:
            on_step(rec)
    model.eval()
    return model


class NonFiniteError(RuntimeError):
    pass


@torch.no_grad()
def sample_mel(cond: S2MCondition, model: S2MModel, n_steps: int = 16, seed: int = 0) -> MelSpectrogram:
    """Fixed-step Euler integration of dx/dt = v_theta from noise (t=0) to data (t=1)."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    cfg = model.config
    if cond.upsample_factor != cfg.upsample_factor:
        raise ValueError(f"condition upsample factor {cond.upsample_factor} != model {cfg.upsample_factor}")
    tokens = torch.from_numpy(cond.semantic_tokens.ids)[None]
    ref = torch.from_numpy(cond.ref_mel.frames)[None]
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn((1, cond.n_frames, cfg.n_mels), generator=gen)
    dt = 1.0 / n_steps
    for i in range(n_steps):
        t = torch.full((1,), i * dt)
        x = x + dt * model.velocity(x, t, tokens, ref)
        if not torch.isfinite(x).all():
            raise NonFiniteError(f"non-finite flow state at Euler step {i}")
    return MelSpectrogram(model.denormalize(x)[0].numpy(), cfg.mel_frame_rate_hz)


def save_s2m(path: str | Path, model: S2MModel, meta: dict | None = None) -> None:
    meta = dict(meta or {})
    meta["backbone"] = model.config.backbone.kind
    checkpoint.save(path, "s2m", model.config.to_dict(), model.state_dict(), meta)


def load_s2m(path: str | Path) -> S2MModel:
    header, state = checkpoint.load(path, kind="s2m")
    model = S2MModel(S2MConfig.from_dict(header["config"]))
    model.load_state_dict(state)
    model.eval()
    return model
