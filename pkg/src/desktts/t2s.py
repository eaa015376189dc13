"""Autoregressive text-to-semantic model.

A decoder-only transformer reads ``[c, p, BT, ..., BA]`` and continues it with
semantic tokens until EOS. Text-side and semantic-side entries use separate
learned position tables, so the semantic stream always starts at position 0
right after BA regardless of how long the text prefix is.
"""

from __future__ import annotations

import logging
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint
from .audio import MelSpectrogram
from .codec import SemanticTokens
from .textproc import Strategy, T2SSequence, Vocabulary, default_vocabulary

log = logging.getLogger(__name__)

COND_DIM = 64
TEXT_ANCHOR = 64  # text position of the first text symbol; prefix entries sit below it


@dataclass(frozen=True)
class CondVector:
    values: np.ndarray
    source: str = "speaker_ref"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32).reshape(-1)
        if not np.all(np.isfinite(v)):
            raise ValueError("conditioning vector is not finite")
        object.__setattr__(self, "values", v)


def _cond_projection(in_dim: int, out_dim: int = COND_DIM) -> np.ndarray:
    rng = np.random.default_rng(1234 + in_dim)
    a = rng.normal(size=(max(in_dim, out_dim), max(in_dim, out_dim)))
    q, _ = np.linalg.qr(a)
    return q[:out_dim, :in_dim]


def extract_cond(ref: MelSpectrogram, source: str = "speaker_ref") -> CondVector:
    """Mean-pooled log-mel statistics of a reference clip, projected to 64 dims and unit-normed."""
    fr = ref.frames.astype(np.float64)
    stats = np.concatenate([fr.mean(0), fr.std(0)])
    stats = stats - stats.mean()
    v = _cond_projection(stats.shape[0]) @ stats
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("reference clip is constant; cannot extract conditioning")
    return CondVector(v / n, source)


@dataclass(frozen=True)
class DurationSpec:
    mode: str = "free"
    target_token_count: int | None = None

    def __post_init__(self):
        if self.mode not in ("free", "fixed_count"):
            raise ValueError(f"unknown duration mode {self.mode!r}")
        if self.mode == "fixed_count":
            if self.target_token_count is None or self.target_token_count < 1:
                raise ValueError("fixed_count needs target_token_count >= 1")
        elif self.target_token_count is not None:
            raise ValueError("target_token_count is only valid with mode='fixed_count'")

    @classmethod
    def fixed(cls, n: int) -> "DurationSpec":
        return cls("fixed_count", n)


FREE = DurationSpec()


@dataclass
class DecodeParams:
    temperature: float = 0.0
    top_k: int = 0  # 0 disables top-k filtering
    max_tokens: int = 600
    seed: int = 0

    def validate(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.top_k < 0:
            raise ValueError("top_k must be >= 0 (0 = disabled)")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")


@dataclass
class T2SConfig:
    strategy: str = Strategy.TOKEN_CONCAT.value
    codebook_size: int = 256
    token_rate_hz: int = 25
    n_layers: int = 4
    n_heads: int = 4
    width: int = 256
    context: int = 1024
    fusion: str = "add"  # add | concat_proj | none (ablation: no language conditioning)
    dur_bucket_size: int = 8
    n_dur_buckets: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 16
    warmup_steps: int = 50
    grad_clip: float = 1.0
    fixed_duration_prob: float = 0.5

    def validate(self) -> None:
        Strategy.parse(self.strategy)
        if self.fusion not in ("add", "concat_proj", "none"):
            raise ValueError(f"unknown fusion {self.fusion!r}")
        if self.width % self.n_heads:
            raise ValueError("width must be divisible by n_heads")

    @property
    def eos_id(self) -> int:
        return self.codebook_size

    @property
    def out_vocab(self) -> int:
        return self.codebook_size + 1


@dataclass
class T2SSample:
    seq: T2SSequence
    tokens: SemanticTokens
    cond: CondVector
    duration: DurationSpec = FREE
    meta: dict = field(default_factory=dict)


class _Block(nn.Module):
    def __init__(self, width: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.ln1 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width))

    def forward(self, x: torch.Tensor, cache: list | None = None) -> torch.Tensor:
        b, t, w = x.shape
        h = self.n_heads
        q, k, v = self.qkv(self.ln1(x)).split(w, dim=-1)
        q, k, v = (z.view(b, t, h, w // h).transpose(1, 2) for z in (q, k, v))
        if cache is not None:
            if cache:
                k = torch.cat([cache[0], k], dim=2)
                v = torch.cat([cache[1], v], dim=2)
            cache[:] = [k, v]
        # a single new query attends to the whole cache; otherwise causal
        causal = q.shape[2] > 1
        a = F.scaled_dot_product_attention(q, k, v, is_causal=causal)
        x = x + self.proj(a.transpose(1, 2).reshape(b, t, w))
        return x + self.mlp(self.ln2(x))


class T2SModel(nn.Module):
    def __init__(self, config: T2SConfig, vocab: Vocabulary | None = None):
        super().__init__()
        config.validate()
        self.config = config
        self.vocab = vocab or default_vocabulary()
        w = config.width
        self.strategy = Strategy.parse(config.strategy)
        self.sym_emb = nn.Embedding(self.vocab.vocab_size, w)
        self.lang_emb = nn.Embedding(self.vocab.num_languages, w)
        self.special_emb = nn.Embedding(self.vocab.num_specials, w)
        self.instr_emb = nn.Parameter(torch.zeros(w))
        self.sem_emb = nn.Embedding(config.out_vocab, w)
        self.dur_emb = nn.Embedding(config.n_dur_buckets, w)
        self.cond_proj = nn.Linear(COND_DIM, w)
        if config.fusion == "concat_proj":
            self.fuse = nn.Linear(2 * w, w)
        self.text_pos = nn.Embedding(config.context, w)
        self.sem_pos = nn.Embedding(config.context, w)
        self.blocks = nn.ModuleList(_Block(w, config.n_heads) for _ in range(config.n_layers))
        self.ln_f = nn.LayerNorm(w)
        self.head = nn.Linear(w, config.out_vocab)
        self.apply(self._init)
        self.loss_history: list[dict] = []

    @staticmethod
    def _init(m: nn.Module) -> None:
        if isinstance(m, (nn.Linear, nn.Embedding)):
            nn.init.normal_(m.weight, std=0.02)
            if isinstance(m, nn.Linear) and m.bias is not None:
                nn.init.zeros_(m.bias)

    def duration_bucket(self, p: DurationSpec) -> int:
        if p.mode == "free":
            return 0
        return 1 + min(p.target_token_count // self.config.dur_bucket_size, self.config.n_dur_buckets - 2)

    def _layout_index(self, seq: T2SSequence, p: DurationSpec) -> dict[str, torch.Tensor]:
        nsym = self.vocab.vocab_size
        kind, idx, lang = [], [], []
        for e in seq.layout:
            if e.role == "cond":
                kind.append(0)
                idx.append(0)
            elif e.role == "dur":
                kind.append(1)
                idx.append(self.duration_bucket(p))
            elif e.role == "special":
                kind.append(2)
                idx.append(e.id - nsym)
            elif e.role == "instruction":
                kind.append(3)
                idx.append(e.id)
            elif e.role == "text":
                kind.append(4)
                idx.append(e.id)
            else:
                raise ValueError(f"unexpected layout role {e.role!r}")
            lang.append(-1 if e.lang is None else e.lang)
        return {"kind": torch.tensor(kind), "idx": torch.tensor(idx), "lang": torch.tensor(lang)}

    def embed_sequence(self, seq: T2SSequence, c: CondVector, p: DurationSpec) -> torch.Tensor:
        """Embedding rows for the layout ``[c, p, BT, ..., BA]`` including positions."""
        if seq.strategy is not self.strategy:
            raise ValueError(f"sequence strategy {seq.strategy.value!r} does not match model strategy {self.strategy.value!r}")
        n = len(seq.layout)
        if n > self.config.context:
            raise ValueError(f"layout length {n} exceeds context {self.config.context}")
        ix = self._layout_index(seq, p)
        kind, idx, lang = ix["kind"], ix["idx"], ix["lang"]
        w = self.config.width
        dt = self.sym_emb.weight.dtype
        x = torch.zeros(n, w, dtype=dt)
        x = torch.where((kind == 0)[:, None], self.cond_proj(torch.from_numpy(c.values).to(dt))[None], x)
        x = torch.where((kind == 1)[:, None], self.dur_emb(idx.clamp(max=self.config.n_dur_buckets - 1)), x)
        x = torch.where((kind == 2)[:, None], self.special_emb(idx.clamp(0, self.vocab.num_specials - 1)), x)
        sym = self.sym_emb(idx.clamp(0, self.vocab.vocab_size - 1))
        x = torch.where((kind == 3)[:, None], sym + self.instr_emb, x)
        x = torch.where((kind == 4)[:, None], self._text_rows(sym, lang), x)
        # Positions are anchored at the first text symbol (index TEXT_ANCHOR) so the
        # text/semantic alignment does not move with prefix or instruction length.
        # BA opens the semantic stream and takes semantic position 0.
        first = int((kind == 4).nonzero()[0]) if bool((kind == 4).any()) else n - 1
        pidx = (torch.arange(n - 1) - first + TEXT_ANCHOR).clamp(0, self.config.context - 1)
        return x + torch.cat([self.text_pos(pidx), self.sem_pos.weight[:1]])

    def _text_rows(self, sym: torch.Tensor, lang: torch.Tensor) -> torch.Tensor:
        fusion = self.config.fusion
        has = (lang >= 0)[:, None]
        if fusion == "none" or not bool(has.any()):
            return sym
        l = self.lang_emb(lang.clamp(min=0))
        fused = sym + l if fusion == "add" else self.fuse(torch.cat([sym, l], dim=-1))
        return torch.where(has, fused, sym)

    def embed_semantic(self, ids: torch.Tensor, start: int) -> torch.Tensor:
        """Semantic token rows; ``start`` is the semantic position of the first id (BA is 0)."""
        pos = torch.arange(start, start + ids.shape[-1])
        if start + ids.shape[-1] > self.config.context:
            raise ValueError("semantic stream exceeds context")
        return self.sem_emb(ids) + self.sem_pos(pos)

    def run(self, x: torch.Tensor, caches: list | None = None) -> torch.Tensor:
        for i, blk in enumerate(self.blocks):
            x = blk(x, None if caches is None else caches[i])
        return self.head(self.ln_f(x))

    def forward_samples(self, samples: Sequence[T2SSample]) -> tuple[torch.Tensor, torch.Tensor]:
        """Teacher-forced logits and targets over semantic positions.

        Returns ``(logits [B, S, V], targets [B, S])`` where targets are -100 on
        every non-semantic or padded position.
        """
        seqs = []
        targets = []
        eos = self.config.eos_id
        for s in samples:
            ids = torch.from_numpy(s.tokens.ids)
            if len(ids) and int(ids.max()) >= self.config.codebook_size:
                raise ValueError(f"target token {int(ids.max())} >= codebook size {self.config.codebook_size}")
            prefix = self.embed_sequence(s.seq, s.cond, s.duration)
            sem = self.embed_semantic(ids, 1)
            seqs.append(torch.cat([prefix, sem]))
            tgt = torch.full((len(prefix) + len(ids),), -100, dtype=torch.long)
            tgt[len(prefix) - 1 :] = torch.cat([ids, torch.tensor([eos])])
            targets.append(tgt)
        L = max(len(x) for x in seqs)
        pad = self.special_emb.weight[self.vocab.special("PAD") - self.vocab.vocab_size]
        x = torch.stack([torch.cat([s, pad.expand(L - len(s), -1)]) for s in seqs])
        tg = torch.stack([F.pad(t, (0, L - len(t)), value=-100) for t in targets])
        return self.run(x), tg

    def loss(self, samples: Sequence[T2SSample]) -> torch.Tensor:
        logits, tg = self.forward_samples(samples)
        return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), tg.reshape(-1), ignore_index=-100)


def _lr_at(step: int, cfg: T2SConfig, total: int) -> float:
    if step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    frac = (step - cfg.warmup_steps) / max(1, total - cfg.warmup_steps)
    return cfg.lr * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * min(frac, 1.0))))


def train_t2s(
    dataset: Sequence[T2SSample],
    model: T2SModel,
    steps: int,
    seed: int = 0,
    on_step: Callable[[dict], None] | None = None,
) -> T2SModel:
    """Next-token cross-entropy over semantic positions only."""
    cfg = model.config
    for i, s in enumerate(dataset):
        if s.seq.strategy is not model.strategy:
            raise ValueError(f"sample {i} uses strategy {s.seq.strategy.value}, model expects {model.strategy.value}")
    torch.manual_seed(seed)
    rng = random.Random(seed)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    model.train()
    for step in range(steps):
        lr = _lr_at(step, cfg, steps)
        for g in opt.param_groups:
            g["lr"] = lr
        batch = [dataset[rng.randrange(len(dataset))] for _ in range(min(cfg.batch_size, max(1, len(dataset))))]
        # duration conditioning is dropped to "free" for part of each batch
        batch = [
            T2SSample(s.seq, s.tokens, s.cond, DurationSpec.fixed(len(s.tokens)) if rng.random() < cfg.fixed_duration_prob and len(s.tokens) else FREE)
            for s in batch
        ]
        loss = model.loss(batch)
        opt.zero_grad()
        loss.backward()
        if cfg.grad_clip:
            nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        rec = {"step": step, "loss": float(loss.detach()), "lr": lr}
        model.loss_history.append(rec)
        if on_step:
            on_step(rec)
    model.eval()
    return model


def _filter_logits(logits: torch.Tensor, params: DecodeParams) -> torch.Tensor:
    if params.top_k and params.top_k < logits.shape[-1]:
        kth = torch.topk(logits, params.top_k, dim=-1).values[..., -1:]
        logits = logits.masked_fill(logits < kth, float("-inf"))
    return logits


@torch.no_grad()
def _decode(
    model: T2SModel,
    seq: T2SSequence,
    c: CondVector,
    p: DurationSpec,
    params: DecodeParams,
    seeds: Sequence[int],
) -> list[SemanticTokens]:
    params.validate()
    cfg = model.config
    eos = cfg.eos_id
    n = len(seeds)
    prefix = model.embed_sequence(seq, c, p)
    limit = params.max_tokens
    if p.mode == "fixed_count":
        limit = p.target_token_count
    limit = min(limit, cfg.context - len(prefix))
    caches: list = [[] for _ in model.blocks]
    logits = model.run(prefix[None].expand(n, -1, -1).contiguous(), caches)[:, -1]
    gens = [torch.Generator().manual_seed(int(s)) for s in seeds]
    out = torch.zeros(n, limit, dtype=torch.long)
    done = torch.zeros(n, dtype=torch.bool)
    length = torch.full((n,), limit, dtype=torch.long)
    for t in range(limit):
        logits = logits.float()
        if p.mode == "fixed_count":
            logits[:, eos] = float("-inf")  # EOS only at the requested count
        if params.temperature == 0:
            nxt = logits.argmax(-1)  # first maximum wins, i.e. lowest id on ties
        else:
            probs = F.softmax(_filter_logits(logits / params.temperature, params), dim=-1)
            nxt = torch.stack([torch.multinomial(probs[i], 1, generator=gens[i])[0] for i in range(n)])
        newly = (nxt == eos) & ~done
        length[newly] = t
        done |= newly
        out[:, t] = torch.where(done, torch.zeros_like(nxt), nxt)
        if bool(done.all()):
            break
        logits = model.run(model.embed_semantic(nxt[:, None].clamp(max=eos), t + 1), caches)[:, -1]
    res = []
    for i in range(n):
        k = int(length[i])
        truncated = p.mode == "free" and not bool(done[i])
        res.append(SemanticTokens(out[i, :k].numpy().copy(), cfg.token_rate_hz, truncated=truncated))
    return res


def generate(seq: T2SSequence, c: CondVector, p: DurationSpec, model: T2SModel, params: DecodeParams) -> SemanticTokens:
    return _decode(model, seq, c, p, params, [params.seed])[0]


def generate_group(
    seq: T2SSequence,
    c: CondVector,
    p: DurationSpec,
    model: T2SModel,
    params: DecodeParams,
    group_size: int = 4,
) -> list[SemanticTokens]:
    """``group_size`` independent samples, candidate ``i`` seeded with ``params.seed + i``."""
    if group_size < 2:
        raise ValueError("group_size must be >= 2")
    if params.temperature == 0:
        raise ValueError("temperature 0 gives a degenerate group; use temperature > 0")
    return _decode(model, seq, c, p, params, [params.seed + i for i in range(group_size)])


def token_logprobs(
    model: T2SModel,
    seq: T2SSequence,
    c: CondVector,
    p: DurationSpec,
    candidates: Sequence[SemanticTokens],
) -> list[torch.Tensor]:
    """Per-token log-probabilities (with gradient) of each candidate under ``model``.

    EOS is scored for candidates that ended naturally in free mode; under a fixed
    count EOS is masked out of the distribution, as it is during decoding.
    """
    cfg = model.config
    eos = cfg.eos_id
    prefix = model.embed_sequence(seq, c, p)
    out = []
    rows = []
    tgts = []
    for cand in candidates:
        ids = torch.from_numpy(cand.ids)
        score_eos = p.mode == "free" and not cand.truncated
        tgt = torch.cat([ids, torch.tensor([eos])]) if score_eos else ids
        rows.append(torch.cat([prefix, model.embed_semantic(ids, 1)]))
        tgts.append(tgt)
    L = max(len(r) for r in rows)
    x = torch.stack([F.pad(r, (0, 0, 0, L - len(r))) for r in rows])
    logits = model.run(x)
    for i, tgt in enumerate(tgts):
        lg = logits[i, len(prefix) - 1 : len(prefix) - 1 + len(tgt)]
        if p.mode == "fixed_count":
            lg = lg.clone()
            lg[:, eos] = float("-inf")
        out.append(F.log_softmax(lg, -1).gather(1, tgt[:, None])[:, 0])
    return out


def save_t2s(path: str | Path, model: T2SModel, meta: dict | None = None) -> None:
    meta = dict(meta or {})
    meta["strategy"] = model.strategy.value
    checkpoint.save(path, "t2s", asdict(model.config), model.state_dict(), meta)


def load_t2s(path: str | Path, strategy: str | Strategy | None = None) -> T2SModel:
    header, state = checkpoint.load(path, kind="t2s")
    tag = header["meta"].get("strategy")
    if strategy is not None and Strategy.parse(strategy).value != tag:
        raise checkpoint.CheckpointError(
            f"{path}: checkpoint was trained for strategy {tag!r}, requested {Strategy.parse(strategy).value!r}"
        )
    model = T2SModel(T2SConfig(**header["config"]))
    model.load_state_dict(state)
    model.eval()
    return model
