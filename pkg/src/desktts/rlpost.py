"""GRPO post-training of the T2S model against an intelligibility reward.

Reward is sentence-level ``-WER`` from a frozen ASR oracle. Advantages are
group-normalised and the policy follows the clipped-ratio objective with a KL
penalty to a frozen reference copy.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
import torch

from . import t2s as t2s_mod
from .codec import SemanticTokens
from .evalkit import wer
from .t2s import CondVector, DecodeParams, DurationSpec, T2SModel
from .textproc import T2SSequence

log = logging.getLogger(__name__)


class ASROracle(Protocol):
    def transcribe(self, x) -> list: ...


@dataclass
class RewardRecord:
    candidate_index: int
    transcript: list
    wer: float
    reward: float
    failed: bool = False

    def __post_init__(self):
        if self.reward > 0:
            raise ValueError("reward must be <= 0")


@dataclass
class GRPOPrompt:
    seq: T2SSequence
    cond: CondVector
    duration: DurationSpec
    reference: list  # target transcript (unit ids)
    langs: tuple[int, ...] = ()


def compute_advantages(rewards: Sequence[float]) -> list[float]:
    if len(rewards) < 2:
        raise ValueError("need at least two rewards per group")
    r = np.asarray(rewards, dtype=np.float64)
    if np.all(r == r[0]):
        return [0.0] * len(r)
    # shift and rescale to [-1, 0] first so tiny spreads neither underflow nor lose the mean
    s = r - r.max()
    s = s / -s.min()
    d = s - s.mean()
    return (d / d.std()).tolist()


@dataclass
class GRPOGroup:
    prompt: GRPOPrompt
    candidates: list[SemanticTokens]
    rewards: list[float]
    advantages: list[float] | None = None

    def __post_init__(self):
        if len(self.candidates) < 2 or len(self.candidates) != len(self.rewards):
            raise ValueError("a group needs G >= 2 candidates with one reward each")
        if self.advantages is None:
            self.advantages = compute_advantages(self.rewards)
        elif len(self.advantages) != len(self.rewards):
            raise ValueError("advantages and rewards differ in length")


@dataclass
class GRPOConfig:
    group_size: int = 4
    clip_epsilon: float = 0.2
    kl_coefficient: float = 0.02
    lr: float = 1e-4
    steps: int = 300
    groups_per_step: int = 1
    temperature: float = 1.0
    top_k: int = 0
    max_tokens: int = 400
    grad_clip: float = 1.0
    target_langs: tuple[int, ...] | None = (0, 1)
    seed: int = 0

    def validate(self) -> None:
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if not self.clip_epsilon > 0:
            raise ValueError("clip_epsilon must be > 0")
        if self.kl_coefficient < 0:
            raise ValueError("kl_coefficient must be >= 0")
        if self.steps < 0 or self.groups_per_step < 1:
            raise ValueError("steps must be >= 0 and groups_per_step >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0 for group sampling")


class NonFiniteObjective(RuntimeError):
    def __init__(self, group_index: int, value: float):
        super().__init__(f"non-finite GRPO objective ({value}) in group {group_index}; step aborted")
        self.group_index = group_index


def grpo_objective(
    logp: Sequence[torch.Tensor],
    old_logp: Sequence[torch.Tensor],
    ref_logp: Sequence[torch.Tensor],
    advantages: Sequence[float],
    clip_epsilon: float,
    kl_coefficient: float,
) -> tuple[torch.Tensor, dict]:
    """Clipped surrogate minus KL penalty, averaged over tokens then candidates.

    All inputs are per-token log-prob vectors, one per candidate. KL uses the
    non-negative ``exp(d) - d - 1`` estimator with ``d = ref - current``.
    """
    terms, kls = [], []
    clipped = total = 0
    for lp, old, ref, a in zip(logp, old_logp, ref_logp, advantages):
        if len(lp) == 0:
            continue
        ratio = torch.exp(lp - old.detach())
        surr = torch.minimum(ratio * a, torch.clamp(ratio, 1 - clip_epsilon, 1 + clip_epsilon) * a)
        d = ref.detach() - lp
        kl = torch.exp(d) - d - 1
        terms.append((surr - kl_coefficient * kl).mean())
        kls.append(kl.mean())
        clipped += int(((ratio < 1 - clip_epsilon) | (ratio > 1 + clip_epsilon)).sum())
        total += len(lp)
    if not terms:
        zero = sum(l.sum() for l in logp) * 0.0
        return zero, {"kl": 0.0, "clip_fraction": 0.0}
    obj = torch.stack(terms).mean()
    return obj, {"kl": float(torch.stack(kls).mean().detach()), "clip_fraction": clipped / max(total, 1)}


def grpo_step(
    model: T2SModel,
    groups: GRPOGroup | Sequence[GRPOGroup],
    config: GRPOConfig,
    reference: T2SModel,
    optimizer: torch.optim.Optimizer | None = None,
) -> dict:
    """One optimizer step on one or more groups. Raises :class:`NonFiniteObjective` before stepping."""
    if isinstance(groups, GRPOGroup):
        groups = [groups]
    optimizer = optimizer or torch.optim.Adam(model.parameters(), lr=config.lr)
    model.train()
    objs, kls, clips = [], [], []
    for gi, g in enumerate(groups):
        p = g.prompt
        lp = t2s_mod.token_logprobs(model, p.seq, p.cond, p.duration, g.candidates)
        with torch.no_grad():
            ref = t2s_mod.token_logprobs(reference, p.seq, p.cond, p.duration, g.candidates)
        old = [x.detach() for x in lp]  # on-policy: old policy is the current one
        obj, st = grpo_objective(lp, old, ref, g.advantages, config.clip_epsilon, config.kl_coefficient)
        if not torch.isfinite(obj):
            model.eval()
            raise NonFiniteObjective(gi, float(obj.detach()))
        objs.append(obj)
        kls.append(st["kl"])
        clips.append(st["clip_fraction"])
    total = torch.stack(objs).mean()
    optimizer.zero_grad()
    (-total).backward()
    if config.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
    optimizer.step()
    model.eval()
    return {
        "objective": float(total.detach()),
        "mean_reward": float(np.mean([np.mean(g.rewards) for g in groups])),
        "kl": float(np.mean(kls)),
        "clip_fraction": float(np.mean(clips)),
    }


def score_candidates(candidates: Sequence[SemanticTokens], reference: Sequence, oracle: ASROracle) -> list[RewardRecord]:
    """-WER per candidate; a candidate the oracle fails on gets the worst reward in its group."""
    recs: list[RewardRecord] = []
    for i, c in enumerate(candidates):
        try:
            hyp = list(oracle.transcribe(c))
            w = wer(reference, hyp)
            recs.append(RewardRecord(i, hyp, w, -w))
        except Exception as exc:  # adapter boundary: any oracle failure is contained here
            log.warning("ASR oracle failed on candidate %d: %s", i, exc)
            recs.append(RewardRecord(i, [], math.nan, 0.0, failed=True))
    ok = [r for r in recs if not r.failed]
    worst = min((r.reward for r in ok), default=-1.0)
    for r in recs:
        if r.failed:
            r.reward = worst
            r.wer = -worst
    return recs


def filter_prompts(prompts: Sequence[GRPOPrompt], target_langs: tuple[int, ...] | None) -> list[GRPOPrompt]:
    if target_langs is None:
        return list(prompts)
    return [p for p in prompts if set(p.langs) <= set(target_langs)]


def sample_group(model: T2SModel, prompt: GRPOPrompt, oracle: ASROracle, config: GRPOConfig, seed: int) -> tuple[GRPOGroup, list[RewardRecord]]:
    params = DecodeParams(temperature=config.temperature, top_k=config.top_k, max_tokens=config.max_tokens, seed=seed)
    cands = t2s_mod.generate_group(prompt.seq, prompt.cond, prompt.duration, model, params, config.group_size)
    recs = score_candidates(cands, prompt.reference, oracle)
    return GRPOGroup(prompt, cands, [r.reward for r in recs]), recs


def mean_greedy_wer(model: T2SModel, prompts: Sequence[GRPOPrompt], oracle: ASROracle, max_tokens: int = 400) -> float:
    ws = []
    for p in prompts:
        toks = t2s_mod.generate(p.seq, p.cond, p.duration, model, DecodeParams(max_tokens=max_tokens))
        ws.append(wer(p.reference, list(oracle.transcribe(toks))))
    return float(np.mean(ws))


@dataclass
class GRPOReport:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.steps)


def run_grpo(
    model: T2SModel,
    prompts: Sequence[GRPOPrompt],
    oracle: ASROracle,
    config: GRPOConfig,
    *,
    reference: T2SModel | None = None,
    report_path: str | Path | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> tuple[T2SModel, GRPOReport]:
    """Sample groups, score them with the oracle and update the policy for ``config.steps`` steps."""
    config.validate()
    prompts = filter_prompts(prompts, config.target_langs)
    report = GRPOReport()
    if config.steps == 0:
        return model, report
    if not prompts:
        raise ValueError("no prompts left after the language filter")
    reference = reference or copy.deepcopy(model)
    reference.eval()
    for p in reference.parameters():
        p.requires_grad_(False)
    torch.manual_seed(config.seed)
    rng = random.Random(config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    order: list[int] = []
    epoch, epoch_rewards = 0, []
    fh = open(report_path, "w", encoding="utf-8") if report_path else None
    try:
        for step in range(config.steps):
            groups, failures, picked = [], 0, []
            for k in range(config.groups_per_step):
                if not order:
                    if epoch_rewards:
                        report.epochs.append({"epoch": epoch, "mean_reward": float(np.mean(epoch_rewards)), "mean_wer": -float(np.mean(epoch_rewards))})
                        epoch += 1
                        epoch_rewards = []
                    order = list(range(len(prompts)))
                    rng.shuffle(order)
                pi = order.pop()
                seed = config.seed * 1_000_003 + (step * config.groups_per_step + k) * config.group_size
                g, recs = sample_group(model, prompts[pi], oracle, config, seed)
                failures += sum(r.failed for r in recs)
                groups.append(g)
                picked.append(pi)
                epoch_rewards.extend(g.rewards)
            rec = {"step": step, "epoch": epoch, "prompts": picked, "oracle_failures": failures}
            try:
                rec.update(grpo_step(model, groups, config, reference, optimizer))
            except NonFiniteObjective as exc:
                log.error("step %d: %s (prompt %d)", step, exc, picked[exc.group_index])
                rec.update({"aborted": True, "offending_prompt": picked[exc.group_index]})
            report.steps.append(rec)
            if fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if on_step:
                on_step(rec)
        if epoch_rewards:
            report.epochs.append({"epoch": epoch, "mean_reward": float(np.mean(epoch_rewards)), "mean_wer": -float(np.mean(epoch_rewards))})
    finally:
        if fh:
            fh.close()
    return model, report
