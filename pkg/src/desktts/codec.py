"""Vector-quantised semantic codec: mel frames (100 Hz) <-> discrete tokens at 50 or 25 Hz.

The encoder is a stack of non-overlapping strided convolutions (kernel == stride == 2)
so every token sees exactly ``downsample_factor`` mel frames and the length law

    len(tokens) == ceil(T_mel / downsample_factor)

holds for every input. The decoder mirrors it with transposed convolutions.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint
from .audio import MEL_FRAME_RATE, N_MELS, MelSpectrogram

log = logging.getLogger(__name__)


@dataclass
class SemanticTokens:
    ids: np.ndarray
    token_rate_hz: int
    truncated: bool = False

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def duration_s(self) -> float:
        return len(self.ids) / self.token_rate_hz


@dataclass
class CodecConfig:
    token_rate_hz: int = 25
    codebook_size: int = 256
    latent_dim: int = 64
    hidden: int = 128
    n_mels: int = N_MELS
    mel_frame_rate_hz: int = MEL_FRAME_RATE
    commitment: float = 0.25
    cycle_weight: float = 0.1
    lr: float = 1e-3
    batch_size: int = 16
    crop_frames: int = 64
    restart_every: int = 25
    warmup_frac: float = 0.3

    @property
    def downsample_factor(self) -> int:
        return self.mel_frame_rate_hz // self.token_rate_hz

    def validate(self) -> None:
        if self.mel_frame_rate_hz % self.token_rate_hz:
            raise ValueError(f"token rate {self.token_rate_hz} Hz does not divide {self.mel_frame_rate_hz} Hz")
        if self.downsample_factor not in (2, 4):
            raise ValueError(f"downsample factor must be 2 or 4, got {self.downsample_factor}")
        if self.codebook_size < 1:
            raise ValueError("codebook_size must be >= 1")
        if self.crop_frames % self.downsample_factor:
            raise ValueError("crop_frames must be a multiple of the downsample factor")


class CodecModel(nn.Module):
    def __init__(self, config: CodecConfig):
        super().__init__()
        config.validate()
        self.config = config
        n_stages = int(math.log2(config.downsample_factor))
        enc: list[nn.Module] = []
        ch = config.n_mels
        for _ in range(n_stages):
            enc += [nn.Conv1d(ch, config.hidden, kernel_size=2, stride=2), nn.GELU()]
            ch = config.hidden
        enc.append(nn.Conv1d(ch, config.latent_dim, kernel_size=1))
        self.encoder = nn.Sequential(*enc)
        dec: list[nn.Module] = [nn.Conv1d(config.latent_dim, config.hidden, kernel_size=1), nn.GELU()]
        for i in range(n_stages):
            last = i == n_stages - 1
            dec.append(nn.ConvTranspose1d(config.hidden, config.n_mels if last else config.hidden, 2, stride=2))
            if not last:
                dec.append(nn.GELU())
        self.decoder = nn.Sequential(*dec)
        self.codebook = nn.Parameter(torch.randn(config.codebook_size, config.latent_dim) * 0.1)
        # unit normalisation statistics, fitted on the training corpus
        self.register_buffer("mel_mean", torch.zeros(config.n_mels))
        self.register_buffer("mel_std", torch.ones(config.n_mels))
        self.register_buffer("active", torch.ones(config.codebook_size, dtype=torch.bool))
        self.loss_history: list[dict] = []

    # x: [B, T, n_mels] -> z: [B, T', D]
    def encode_latent(self, x: torch.Tensor) -> torch.Tensor:
        x = (x - self.mel_mean) / self.mel_std
        return self.encoder(x.transpose(1, 2)).transpose(1, 2)

    def decode_latent(self, z: torch.Tensor) -> torch.Tensor:
        y = self.decoder(z.transpose(1, 2)).transpose(1, 2)
        return y * self.mel_std + self.mel_mean

    def quantize(self, z: torch.Tensor) -> torch.Tensor:
        d = (z.pow(2).sum(-1, keepdim=True) - 2 * z @ self.codebook.t() + self.codebook.pow(2).sum(-1))
        d = d.masked_fill(~self.active, float("inf"))
        # argmin picks the first (lowest) index on exact ties
        return d.argmin(-1)

    def forward(self, x: torch.Tensor):
        z = self.encode_latent(x)
        ids = self.quantize(z)
        e = self.codebook[ids]
        zq = z + (e - z).detach()  # straight-through
        recon = self.decode_latent(zq)
        return recon, z, e, ids


def _pad_to_factor(frames: np.ndarray, factor: int) -> np.ndarray:
    rem = (-frames.shape[0]) % factor
    if rem:
        frames = np.concatenate([frames, np.repeat(frames[-1:], rem, axis=0)], axis=0)
    return frames


def _kmeans(x: torch.Tensor, k: int, gen: torch.Generator, iters: int = 10) -> torch.Tensor:
    n = x.shape[0]
    idx = torch.randperm(n, generator=gen)[: min(k, n)]
    c = x[idx].clone()
    if c.shape[0] < k:
        extra = x[torch.randint(n, (k - c.shape[0],), generator=gen)]
        c = torch.cat([c, extra + 1e-3 * torch.randn(extra.shape, generator=gen)])
    for _ in range(iters):
        assign = torch.cdist(x, c).argmin(1)
        for j in range(k):
            members = x[assign == j]
            if len(members):
                c[j] = members.mean(0)
    return c


def train_codec(
    corpus: Sequence[MelSpectrogram],
    config: CodecConfig | None = None,
    seed: int = 0,
    steps: int = 200,
    on_step: Callable[[dict], None] | None = None,
) -> CodecModel:
    """Train encoder/quantiser/decoder; loss = recon MSE + codebook + commitment (+ cycle)."""
    config = config or CodecConfig()
    if not corpus:
        raise ValueError("codec corpus is empty")
    n_mels = corpus[0].n_mels
    for i, m in enumerate(corpus):
        if m.n_mels != n_mels or m.frame_rate_hz != corpus[0].frame_rate_hz:
            raise ValueError(
                f"corpus item {i} has shape/rate ({m.n_mels}, {m.frame_rate_hz}) "
                f"but item 0 has ({n_mels}, {corpus[0].frame_rate_hz})"
            )
        m.check_finite()
    if n_mels != config.n_mels:
        raise ValueError(f"config.n_mels={config.n_mels} but corpus has {n_mels} mel bins")

    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = CodecModel(config)
    all_frames = np.concatenate([m.frames for m in corpus])
    model.mel_mean.copy_(torch.from_numpy(all_frames.mean(0)))
    model.mel_std.copy_(torch.from_numpy(all_frames.std(0) + 1e-3))

    f = config.downsample_factor
    padded = [_pad_to_factor(m.frames, f) for m in corpus]
    crop = config.crop_frames

    def batch() -> torch.Tensor:
        out = []
        for j in rng.integers(0, len(padded), config.batch_size):
            fr = padded[j]
            if fr.shape[0] <= crop:
                fr = np.concatenate([fr, np.repeat(fr[-1:], crop - fr.shape[0], axis=0)])
                out.append(fr)
            else:
                s = int(rng.integers(0, (fr.shape[0] - crop) // f + 1)) * f
                out.append(fr[s : s + crop])
        return torch.from_numpy(np.stack(out))

    def fit_codebook() -> None:
        with torch.no_grad():
            z0 = torch.cat([model.encode_latent(torch.from_numpy(p)[None])[0] for p in padded])
            model.codebook.copy_(_kmeans(z0, config.codebook_size, gen))

    # continuous autoencoder warm-up, then k-means codebook init, then VQ training
    warmup = int(steps * config.warmup_frac)
    if warmup == 0:
        fit_codebook()
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    usage = torch.zeros(config.codebook_size)
    model.loss_history = []
    for step in range(steps):
        if step == warmup and warmup > 0:
            fit_codebook()
            usage.zero_()
        x = batch()
        if step < warmup:
            z = model.encode_latent(x)
            rec = F.mse_loss(model.decode_latent(z), x)
            loss = rec
            commit = cycle = torch.zeros(())
            ids = None
        else:
            recon, z, e, ids = model(x)
            rec = F.mse_loss(recon, x)
            cb = F.mse_loss(e, z.detach())
            commit = F.mse_loss(z, e.detach())
            # encoder(decoder(code)) should land back on the code: keeps re-encoding stable
            cyc_z = model.encode_latent(model.decode_latent(model.codebook[None]))[0]
            cycle = F.mse_loss(cyc_z, model.codebook.detach())
            loss = rec + cb + config.commitment * commit + config.cycle_weight * cycle
        opt.zero_grad()
        loss.backward()
        opt.step()
        record = {
            "step": step,
            "loss": float(loss.detach()),
            "recon_mse": float(rec.detach()),
            "commit": float(commit.detach()),
            "cycle": float(cycle.detach()),
        }
        model.loss_history.append(record)
        if on_step:
            on_step(record)
        if ids is None:
            continue
        usage += torch.bincount(ids.reshape(-1), minlength=config.codebook_size).float()
        if config.restart_every and (step + 1 - warmup) % config.restart_every == 0:
            dead = (usage == 0).nonzero().reshape(-1)
            if len(dead):
                with torch.no_grad():
                    zs = z.detach().reshape(-1, config.latent_dim)
                    pick = torch.randint(zs.shape[0], (len(dead),), generator=gen)
                    model.codebook[dead] = zs[pick] + 1e-3 * torch.randn(len(dead), config.latent_dim, generator=gen)
            usage.zero_()
    prune_unstable_codes(model)
    log.info("codec trained: %d steps, final recon mse %.4f", steps, model.loss_history[-1]["recon_mse"] if steps else float("nan"))
    model.eval()
    return model


def prune_unstable_codes(model: CodecModel) -> int:
    """Deactivate codes that do not re-encode to themselves; returns how many were dropped.

    Decoding is per-token, so once every active code k satisfies
    ``quantize(encode_latent(decode_latent(e_k))) == k`` the round trip
    encode -> decode -> encode is the identity on token sequences.
    """
    dropped = 0
    with torch.no_grad():
        while True:
            idx = model.active.nonzero().reshape(-1)
            back = model.quantize(model.encode_latent(model.decode_latent(model.codebook[idx][None])))[0]
            unstable = idx[back != idx]
            if len(unstable) == 0 or len(unstable) == len(idx):
                return dropped
            model.active[unstable] = False
            dropped += len(unstable)


def encode(mel: MelSpectrogram, model: CodecModel) -> SemanticTokens:
    cfg = model.config
    if mel.n_mels != cfg.n_mels:
        raise ValueError(f"mel has {mel.n_mels} bins, codec expects {cfg.n_mels}")
    mel.check_finite()
    frames = _pad_to_factor(mel.frames, cfg.downsample_factor)
    with torch.no_grad():
        ids = model.quantize(model.encode_latent(torch.from_numpy(frames)[None]))[0]
    return SemanticTokens(ids.numpy(), cfg.token_rate_hz)


def decode(tokens: SemanticTokens, model: CodecModel) -> MelSpectrogram:
    cfg = model.config
    ids = np.asarray(tokens.ids)
    if len(ids) == 0:
        raise ValueError("cannot decode an empty token sequence")
    if ids.min() < 0 or ids.max() >= cfg.codebook_size:
        bad = int(ids[(ids < 0) | (ids >= cfg.codebook_size)][0])
        raise ValueError(f"token id {bad} outside codebook range [0, {cfg.codebook_size})")
    with torch.no_grad():
        z = model.codebook[torch.from_numpy(ids)][None]
        mel = model.decode_latent(z)[0].numpy()
    return MelSpectrogram(mel, cfg.mel_frame_rate_hz)


def reconstruction_mse(corpus: Sequence[MelSpectrogram], model: CodecModel) -> float:
    errs = []
    for m in corpus:
        rec = decode(encode(m, model), model).frames[: m.n_frames]
        errs.append(np.mean((rec - m.frames) ** 2))
    return float(np.mean(errs))


def codebook_stats(corpus: Sequence[MelSpectrogram], model: CodecModel) -> dict:
    counts = np.zeros(model.config.codebook_size, dtype=np.int64)
    n_frames = n_tokens = 0
    for m in corpus:
        ids = encode(m, model).ids
        counts += np.bincount(ids, minlength=len(counts))
        n_frames += m.n_frames
        n_tokens += len(ids)
    p = counts / max(counts.sum(), 1)
    nz = p[p > 0]
    return {
        "token_rate_hz": model.config.token_rate_hz,
        "codebook_size": model.config.codebook_size,
        "utilization": float((counts > 0).mean()),
        "perplexity": float(np.exp(-(nz * np.log(nz)).sum())) if len(nz) else 0.0,
        "mel_frames": int(n_frames),
        "tokens": int(n_tokens),
    }


def save_codec(path: str | Path, model: CodecModel, meta: dict | None = None) -> None:
    checkpoint.save(path, "codec", asdict(model.config), model.state_dict(), meta)


def load_codec(path: str | Path) -> CodecModel:
    header, state = checkpoint.load(path, kind="codec")
    model = CodecModel(CodecConfig(**header["config"]))
    model.load_state_dict(state)
    model.eval()
    return model
