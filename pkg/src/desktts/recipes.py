"""Reference toy recipes: build (or load cached) checkpoints for every stage and run synthesis.

Everything is driven by an :class:`~desktts.config.ExperimentConfig`; cached
checkpoints are keyed by a hash of the config fields that shaped them.
"""

from __future__ import annotations

import logging
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import checkpoint, codec as codec_mod, rlpost, s2m as s2m_mod, t2s as t2s_mod, vocoder, world
from .audio import MelSpectrogram, Waveform
from .config import ExperimentConfig, codec_config, comparison_hash, config_hash, s2m_config, t2s_config
from .evalkit import CodebookASROracle, reference_units
from .textproc import Strategy, TextToken, assemble

log = logging.getLogger(__name__)

REF_SEED_BASE = 1000


def _stage_hash(cfg: ExperimentConfig, *parts) -> str:
    d = cfg.to_dict()
    return config_hash({"seed": cfg.seed, "parts": [d[p] if isinstance(p, str) and p in d else p for p in parts]})


def _cached(path: Path | None, load: Callable, build: Callable, save: Callable):
    if path is not None and path.exists():
        try:
            return load(path)
        except checkpoint.CheckpointError as exc:
            log.warning("ignoring unreadable cache %s: %s", path, exc)
    obj = build()
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        save(tmp, obj)
        tmp.replace(path)
    return obj


def speaker_refs(n_speakers: int = 16) -> dict[int, world.Utterance]:
    """One fixed reference clip per synthetic speaker."""
    return {s: world.reference_clip(s, REF_SEED_BASE + s) for s in range(n_speakers)}


def codec_corpus(cfg: ExperimentConfig) -> list[world.Utterance]:
    return world.random_corpus(cfg.codec.n_utterances, cfg.codec.data_seed)


def build_codec(cfg: ExperimentConfig, rate: int, cache_dir: Path | None = None) -> codec_mod.CodecModel:
    path = cache_dir / f"codec_{rate}_{_stage_hash(cfg, 'codec', rate)}.ckpt" if cache_dir else None

    def build():
        corpus = [u.mel for u in codec_corpus(cfg)]
        return codec_mod.train_codec(corpus, codec_config(cfg, rate), seed=cfg.seed, steps=cfg.codec.steps)

    return _cached(path, codec_mod.load_codec, build, codec_mod.save_codec)


def build_oracle(cfg: ExperimentConfig, codec: codec_mod.CodecModel, label_noise: float = 0.0) -> CodebookASROracle:
    return CodebookASROracle.from_codec(codec, codec_corpus(cfg), label_noise=label_noise)


def t2s_corpus(cfg: ExperimentConfig) -> list[world.Utterance]:
    t = cfg.t2s
    n_long = int(round(t.long_fraction * t.n_utterances))
    utts = world.random_corpus(t.n_utterances - n_long, t.data_seed, min_len=t.min_len, max_len=t.max_len)
    if n_long:
        utts += world.random_corpus(n_long, t.data_seed + 1, min_len=t.max_len, max_len=2 * t.max_len)
    return utts


def t2s_samples(
    utts: list[world.Utterance],
    codec: codec_mod.CodecModel,
    strategy: str | Strategy,
    seed: int,
    refs: dict[int, world.Utterance] | None = None,
) -> list[t2s_mod.T2SSample]:
    refs = refs or speaker_refs()
    conds = {s: t2s_mod.extract_cond(r.mel) for s, r in refs.items()}
    rng = random.Random(seed)
    return [
        t2s_mod.T2SSample(assemble(u.tokens, strategy, template_id="random", rng=rng), codec_mod.encode(u.mel, codec), conds[u.speaker_id])
        for u in utts
    ]


def build_t2s(
    cfg: ExperimentConfig,
    strategy: str,
    rate: int,
    codec: codec_mod.CodecModel,
    *,
    fusion: str | None = None,
    cache_dir: Path | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> t2s_mod.T2SModel:
    tcfg = t2s_config(cfg, strategy, rate, fusion)
    chash = comparison_hash(cfg, rate)
    path = None
    if cache_dir:
        path = cache_dir / f"t2s_{Strategy.parse(strategy).value}_{tcfg.fusion}_{rate}_{_stage_hash(cfg, 'codec', 't2s', rate, strategy, tcfg.fusion)}.ckpt"

    def build():
        ds = t2s_samples(t2s_corpus(cfg), codec, strategy, cfg.seed)
        torch.manual_seed(cfg.seed)
        model = t2s_mod.T2SModel(tcfg)
        return t2s_mod.train_t2s(ds, model, cfg.t2s.steps, seed=cfg.seed, on_step=on_step)

    model = _cached(path, t2s_mod.load_t2s, build, lambda p, m: t2s_mod.save_t2s(p, m, {"comparison_hash": chash}))
    model.comparison_hash = chash
    return model


def s2m_samples(utts: list[world.Utterance], codec: codec_mod.CodecModel, refs: dict[int, world.Utterance] | None = None) -> list[s2m_mod.S2MSample]:
    refs = refs or speaker_refs()
    f = codec.config.downsample_factor
    out = []
    for u in utts:
        toks = codec_mod.encode(u.mel, codec)
        frames = u.mel.frames
        need = len(toks) * f
        if len(frames) < need:  # the codec pads with the last frame; mirror that on the target
            frames = np.concatenate([frames, np.repeat(frames[-1:], need - len(frames), 0)])
        out.append(s2m_mod.S2MSample(s2m_mod.S2MCondition(toks, refs[u.speaker_id].mel, f), MelSpectrogram(frames[:need], u.mel.frame_rate_hz)))
    return out


def build_s2m(
    cfg: ExperimentConfig,
    rate: int,
    codec: codec_mod.CodecModel,
    *,
    backbone: str | None = None,
    cache_dir: Path | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> s2m_mod.S2MModel:
    scfg = s2m_config(cfg, rate, backbone)
    path = None
    if cache_dir:
        path = cache_dir / f"s2m_{scfg.backbone.kind}_{rate}_{_stage_hash(cfg, 'codec', 's2m', rate, scfg.backbone.kind)}.ckpt"

    def build():
        utts = world.random_corpus(cfg.s2m.n_utterances, cfg.s2m.data_seed)
        return s2m_mod.train_s2m(s2m_samples(utts, codec), scfg, cfg.s2m.steps, seed=cfg.seed, on_step=on_step)

    return _cached(path, s2m_mod.load_s2m, build, s2m_mod.save_s2m)


def grpo_prompts(
    n: int,
    seed: int,
    strategy: str | Strategy,
    density: float = 0.75,
    min_len: int = 8,
    max_len: int = 40,
) -> list[rlpost.GRPOPrompt]:
    refs = speaker_refs()
    conds = {s: t2s_mod.extract_cond(r.mel) for s, r in refs.items()}
    rng = random.Random(seed)
    prompts = []
    for _ in range(n):
        lang = rng.randrange(2)
        toks = world.random_text(rng, rng.randint(min_len, max_len), density, lang)
        seq = assemble(toks, strategy, template_id=0)
        prompts.append(rlpost.GRPOPrompt(seq, conds[rng.randrange(len(refs))], t2s_mod.FREE, reference_units(toks), (lang,)))
    return prompts


def grpo_config(cfg: ExperimentConfig, **overrides) -> rlpost.GRPOConfig:
    g = cfg.grpo
    kw = dict(
        group_size=g.group_size,
        clip_epsilon=g.clip_epsilon,
        kl_coefficient=g.kl_coefficient,
        lr=g.lr,
        steps=g.steps,
        groups_per_step=g.groups_per_step,
        temperature=g.temperature,
        seed=cfg.seed,
    )
    kw.update(overrides)
    return rlpost.GRPOConfig(**kw)


def run_grpo_recipe(
    cfg: ExperimentConfig,
    model: t2s_mod.T2SModel,
    oracle: CodebookASROracle,
    *,
    report_path: Path | None = None,
    n_heldout: int = 50,
) -> tuple[t2s_mod.T2SModel, rlpost.GRPOReport, dict]:
    """Reference GRPO recipe: train on generated prompts, score greedy oracle-WER on held-out ones."""
    g = cfg.grpo
    strategy = model.strategy
    prompts = grpo_prompts(g.n_prompts, cfg.seed + 11, strategy, g.prompt_density)
    held = grpo_prompts(n_heldout, cfg.seed + 12, strategy, g.prompt_density)
    before = rlpost.mean_greedy_wer(model, held, oracle)
    model, rep = rlpost.run_grpo(model, prompts, oracle, grpo_config(cfg), report_path=report_path)
    after = rlpost.mean_greedy_wer(model, held, oracle)
    return model, rep, {"heldout_wer_before": before, "heldout_wer_after": after, "epochs": rep.epochs}


@dataclass
class SynthResult:
    wave: Waveform
    tokens: codec_mod.SemanticTokens
    mel: MelSpectrogram
    timings: dict = field(default_factory=dict)


def synthesize(
    tokens: list[TextToken],
    ref_mel: MelSpectrogram,
    t2s_model: t2s_mod.T2SModel,
    s2m_model: s2m_mod.S2MModel,
    *,
    duration: t2s_mod.DurationSpec = t2s_mod.FREE,
    params: t2s_mod.DecodeParams | None = None,
    template_id: int = 0,
    s2m_steps: int = 16,
    vocoder_iters: int = vocoder.DEFAULT_ITERS,
    seed: int = 0,
) -> SynthResult:
    """Text + reference clip -> waveform through T2S, S2M and the vocoder."""
    if t2s_model.config.token_rate_hz != s2m_model.config.token_rate_hz:
        raise ValueError("T2S and S2M checkpoints use different token rates")
    params = params or t2s_mod.DecodeParams(max_tokens=8 * len(tokens) * t2s_model.config.token_rate_hz // 25 + 8, seed=seed)
    timings = {}
    t0 = time.perf_counter()
    seq = assemble(tokens, t2s_model.strategy, template_id=template_id)
    toks = t2s_mod.generate(seq, t2s_mod.extract_cond(ref_mel), duration, t2s_model, params)
    timings["t2s_s"] = time.perf_counter() - t0
    if len(toks) == 0:
        raise RuntimeError("T2S produced no semantic tokens")
    t0 = time.perf_counter()
    cond = s2m_mod.S2MCondition(toks, ref_mel, s2m_model.config.upsample_factor)
    mel = s2m_mod.sample_mel(cond, s2m_model, s2m_steps, seed=seed)
    timings["s2m_s"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    wave = vocoder.mel_to_wave(mel, vocoder_iters)
    timings["vocoder_s"] = time.perf_counter() - t0
    timings["audio_s"] = len(wave.samples) / wave.sample_rate_hz
    return SynthResult(wave, toks, mel, timings)


def rtf_workload(seconds: float, seed: int = 0, length: int = 30) -> list[list[TextToken]]:
    """Random texts whose ground-truth audio adds up to at least ``seconds``."""
    rng = random.Random(seed)
    texts, total = [], 0.0
    unit_s = world.FRAMES_PER_UNIT / 100.0
    while total < seconds:
        toks = world.random_text(rng, length, 0.5, rng.randrange(2))
        texts.append(toks)
        total += len(toks) * unit_s
    return texts


def bench_rtf(
    cfg: ExperimentConfig,
    rates: list[int],
    backbones: list[str],
    *,
    seconds: float | None = None,
    warmup: int | None = None,
    strategy: str = "token_concat",
    t2s_models: dict[int, t2s_mod.T2SModel] | None = None,
    s2m_models: dict[tuple[int, str], s2m_mod.S2MModel] | None = None,
) -> list[dict]:
    """T2S and S2M real-time factors per (rate, backbone) on CPU.

    T2S decodes with a fixed token count equal to the ground-truth length, so
    trained and untrained weights produce the same amount of work; models that
    are not supplied are freshly initialised from the config.
    """
    from .evalkit import measure_rtf

    seconds = cfg.eval.rtf_seconds if seconds is None else seconds
    warmup = cfg.eval.rtf_warmup if warmup is None else warmup
    texts = rtf_workload(seconds, cfg.seed)
    refs = speaker_refs()
    cond = t2s_mod.extract_cond(refs[0].mel)
    rows = []
    for rate in rates:
        torch.manual_seed(cfg.seed)
        tm = (t2s_models or {}).get(rate) or t2s_mod.T2SModel(t2s_config(cfg, strategy, rate)).eval()
        tpu = world.FRAMES_PER_UNIT * rate // 100
        jobs = [(assemble(t, strategy), t2s_mod.DurationSpec.fixed(len(t) * tpu)) for t in texts]
        durs = [len(t) * world.FRAMES_PER_UNIT / 100.0 for t in texts]
        with torch.inference_mode():
            rtf_t2s = measure_rtf(lambda j: t2s_mod.generate(j[0], cond, j[1], tm, t2s_mod.DecodeParams()), jobs, durs, warmup)
        for bb in backbones:
            torch.manual_seed(cfg.seed)
            sm = (s2m_models or {}).get((rate, bb)) or s2m_mod.S2MModel(s2m_config(cfg, rate, bb)).eval()
            gen = np.random.default_rng(cfg.seed)
            conds = [
                s2m_mod.S2MCondition(codec_mod.SemanticTokens(gen.integers(0, cfg.codec.codebook_size, len(t) * tpu), rate), refs[0].mel, 100 // rate)
                for t in texts
            ]
            rtf_s2m = measure_rtf(lambda c: s2m_mod.sample_mel(c, sm, cfg.s2m.sample_steps), conds, durs, warmup)
            rows.append(
                {
                    "rate_hz": rate,
                    "backbone": bb,
                    "RTF_t2s": rtf_t2s,
                    "RTF_s2m": rtf_s2m,
                    "t2s_params": s2m_mod.count_parameters(tm),
                    "s2m_params": s2m_mod.count_parameters(sm),
                    "audio_s": float(sum(durs)),
                }
            )
    return rows


def rtf_table_markdown(rows: list[dict]) -> str:
    lines = ["| Token rate | S2M backbone | RTF T2S | RTF S2M | S2M params |", "|---|---|---|---|---|"]
    for r in rows:
        lines.append(f"| {r['rate_hz']} Hz | {r['backbone']} | {r['RTF_t2s']:.4f} | {r['RTF_s2m']:.4f} | {r['s2m_params']} |")
    return "\n".join(lines) + "\n"
