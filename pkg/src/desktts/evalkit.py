"""Metrics and evaluation harnesses.

WER is plain Levenshtein over token sequences. The desk-scale "ASR" is
:class:`CodebookASROracle`, which reads semantic tokens back into acoustic
units through a code -> unit assignment table fitted on labelled audio.
"""

from __future__ import annotations

import csv
import hashlib
import json
import random
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from . import codec as codec_mod
from . import world
from .audio import LOG_FLOOR, MelSpectrogram, Waveform, wave_to_mel
from .codec import CodecModel, SemanticTokens
from .textproc import TextToken

EMBED_DIM = 64


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    prev = list(range(len(hyp) + 1))
    for i in range(1, len(ref) + 1):
        cur = [i] + [0] * len(hyp)
        r = ref[i - 1]
        for j in range(1, len(hyp) + 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != hyp[j - 1]))
        prev = cur
    return prev[-1]


def wer(ref: Sequence, hyp: Sequence) -> float:
    """(S + D + I) / len(ref). Strings are split on whitespace."""
    if isinstance(ref, str):
        ref = ref.split()
    if isinstance(hyp, str):
        hyp = hyp.split()
    if len(ref) == 0:
        raise ValueError("reference must be non-empty")
    return edit_distance(list(ref), list(hyp)) / len(ref)


def align(ref: Sequence, hyp: Sequence) -> list[tuple[int | None, int | None]]:
    """Minimal-cost alignment as (ref_index, hyp_index) pairs; None marks ins/del."""
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j] + 1, d[i, j - 1] + 1, d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]))
    pairs = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            pairs.append((i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            pairs.append((i - 1, None))
            i -= 1
        else:
            pairs.append((None, j - 1))
            j -= 1
    return pairs[::-1]


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _to_embed_dim(v: np.ndarray) -> np.ndarray:
    v = np.interp(np.linspace(0, len(v) - 1, EMBED_DIM), np.arange(len(v)), v)
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("flat spectrum; speaker embedding undefined")
    return v / n


def speaker_embed(x: Waveform | MelSpectrogram, iters: int = 3) -> np.ndarray:
    """Mock speaker encoder, 64 dims, L2-normalised.

    Mel input: the mean log-mel offset left after explaining each frame by its
    nearest unit prototype. Like a trained verification model it knows the
    phone inventory, so content cancels and the speaker's colouring remains.
    Waveform input: level-normalised long-term average log-mel spectrum, since
    vocoding rescales and smears the spectrum. Only compare embeddings computed
    from the same kind of input.
    """
    if isinstance(x, Waveform):
        s = np.asarray(x.samples, dtype=np.float64)
        if len(s) == 0 or np.sqrt(np.mean(s**2)) < 1e-6:
            raise ValueError("input waveform is silent")
        ltas = np.asarray(wave_to_mel(x).frames, dtype=np.float64).mean(0)
        return _to_embed_dim(ltas - ltas.mean())
    fr = np.asarray(x.frames, dtype=np.float64)
    if fr.size == 0 or np.max(fr) <= LOG_FLOOR + 1e-3:
        raise ValueError("input mel is silent")
    protos = world.default_inventory(n_mels=fr.shape[1]).prototypes.astype(np.float64)
    off = np.zeros(fr.shape[1])
    for _ in range(iters):
        d = ((fr[:, None, :] - off - protos[None]) ** 2).sum(-1)
        off = (fr - protos[d.argmin(1)]).mean(0)
    return _to_embed_dim(off)


def emotion_embed(mel: MelSpectrogram) -> np.ndarray:
    """Mock emotion embedding from prosody statistics (energy and a spectral-centroid pitch proxy)."""
    fr = np.asarray(mel.frames, dtype=np.float64)
    energy = fr.mean(1)
    w = np.exp(fr - fr.max(1, keepdims=True))
    centroid = (w * np.arange(fr.shape[1])).sum(1) / w.sum(1)
    de = np.diff(energy) if len(energy) > 1 else np.zeros(1)
    return np.array([energy.mean() + 4.0, energy.std(), centroid.mean() / fr.shape[1] - 0.5, centroid.std() / fr.shape[1], np.abs(de).mean()])


class CodebookASROracle:
    """Frozen desk-scale "ASR": semantic tokens -> acoustic unit sequence.

    Each code maps to the unit it most often covered in labelled training audio;
    tokens are read in groups of ``tokens_per_unit`` and each group votes.
    ``label_noise`` replaces units at random, seeded from the input itself so
    the oracle stays deterministic per input.
    """

    def __init__(
        self,
        table: np.ndarray,
        tokens_per_unit: int,
        token_rate_hz: int,
        *,
        codec: CodecModel | None = None,
        label_noise: float = 0.0,
        n_units: int | None = None,
    ):
        self.table = np.asarray(table, dtype=np.int64)
        self.tokens_per_unit = tokens_per_unit
        self.token_rate_hz = token_rate_hz
        self.codec = codec
        self.label_noise = label_noise
        self.n_units = n_units or int(self.table.max()) + 1

    @classmethod
    def from_codec(cls, codec: CodecModel, utterances: Sequence[world.Utterance], label_noise: float = 0.0) -> "CodebookASROracle":
        f = codec.config.downsample_factor
        counts: dict[int, Counter] = {}
        for u in utterances:
            ids = codec_mod.encode(u.mel, codec).ids
            fu = u.frame_units
            for j, code in enumerate(ids):
                counts.setdefault(int(code), Counter())[int(fu[min(j * f, len(fu) - 1)])] += 1
        table = np.full(codec.config.codebook_size, -1, dtype=np.int64)
        for code, c in counts.items():
            # most common unit; ties go to the lowest unit id
            best = max(c.items(), key=lambda kv: (kv[1], -kv[0]))
            table[code] = best[0]
        return cls(
            table,
            world.FRAMES_PER_UNIT // f,
            codec.config.token_rate_hz,
            codec=codec,
            label_noise=label_noise,
            n_units=world.default_inventory().n_units,
        )

    def transcribe(self, x: SemanticTokens | Waveform | MelSpectrogram) -> list[int]:
        if isinstance(x, Waveform):
            x = wave_to_mel(x)
        if isinstance(x, MelSpectrogram):
            if self.codec is None:
                raise ValueError("oracle has no codec; can only transcribe semantic tokens")
            x = codec_mod.encode(x, self.codec)
        ids = np.asarray(x.ids)
        units = []
        k = self.tokens_per_unit
        for s in range(0, len(ids), k):
            votes = Counter(int(self.table[i]) if 0 <= i < len(self.table) else -1 for i in ids[s : s + k])
            units.append(max(votes.items(), key=lambda kv: (kv[1], -kv[0]))[0])
        if self.label_noise > 0 and units:
            h = int.from_bytes(hashlib.sha256(ids.tobytes()).digest()[:8], "little")
            rng = random.Random(h)
            units = [rng.randrange(self.n_units) if rng.random() < self.label_noise else u for u in units]
        return units


def reference_units(tokens: Sequence[TextToken]) -> list[int]:
    return world.units_for(list(tokens))


def homograph_errors(ref_units: Sequence[int], hyp_units: Sequence[int], inv: world.UnitInventory | None = None) -> tuple[int, int]:
    """(errors, total) over reference homograph positions after minimal-cost alignment."""
    inv = inv or world.default_inventory()
    errors = total = 0
    for ri, hi in align(ref_units, hyp_units):
        if ri is None or not inv.is_homograph_unit(ref_units[ri]):
            continue
        total += 1
        if hi is None or hyp_units[hi] != ref_units[ri]:
            errors += 1
    return errors, total


def measure_rtf_detailed(
    stage: Callable[[Any], Any],
    inputs: Sequence[Any],
    audio_durations: Sequence[float],
    warmup: int = 3,
) -> dict:
    if len(inputs) != len(audio_durations):
        raise ValueError("inputs and audio_durations differ in length")
    total_audio = float(sum(audio_durations))
    if total_audio <= 0:
        raise ValueError("total synthesized audio duration must be > 0")
    for i in range(warmup):
        stage(inputs[i % len(inputs)])
    wall = 0.0
    for x in inputs:
        t0 = time.perf_counter()
        stage(x)
        wall += time.perf_counter() - t0
    return {"rtf": wall / total_audio, "wall_s": wall, "audio_s": total_audio, "warmup": warmup, "n": len(inputs)}


def measure_rtf(stage: Callable[[Any], Any], inputs: Sequence[Any], audio_durations: Sequence[float], warmup: int = 3) -> float:
    """Wall-clock seconds per synthesized second, warm-up calls excluded."""
    return measure_rtf_detailed(stage, inputs, audio_durations, warmup)["rtf"]


@dataclass
class BenchItem:
    tokens: list[TextToken]
    speaker_id: int
    density: float
    ref_seed: int

    @property
    def ref_units(self) -> list[int]:
        return reference_units(self.tokens)


@dataclass
class HomographBench:
    items: list[BenchItem]
    name: str = "homograph"

    def densities(self) -> list[float]:
        return sorted({it.density for it in self.items})


BENCH_DENSITIES = (0.0, 0.25, 0.5, 0.75)


def make_homograph_bench(
    n_per_density: int,
    seed: int,
    densities: Sequence[float] = BENCH_DENSITIES,
    min_len: int = 12,
    max_len: int = 32,
    n_speakers: int = 16,
    name: str = "homograph",
) -> HomographBench:
    for d in densities:
        if d not in BENCH_DENSITIES:
            raise ValueError(f"density {d} not in {BENCH_DENSITIES}")
    rng = random.Random(seed)
    items = []
    for d in densities:
        for _ in range(n_per_density):
            length = rng.randint(min_len, max_len)
            toks = world.random_text(rng, length, d, rng.randrange(2))
            items.append(BenchItem(toks, rng.randrange(n_speakers), d, rng.randrange(1 << 30)))
    return HomographBench(items, name)


@dataclass
class EvalReport:
    rows: list[dict]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for r in self.rows:
            if r.get("WER_pct") is not None and r["WER_pct"] < 0:
                raise ValueError("WER_pct must be >= 0")
            for k in ("SS", "ES"):
                if r.get(k) is not None and not -1.0 <= r[k] <= 1.0:
                    raise ValueError(f"{k} must lie in [-1, 1]")

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows, "metadata": self.metadata}, sort_keys=True, indent=2)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")
        Path(path).with_suffix(".md").write_text(self.to_markdown(), encoding="utf-8")

    def to_markdown(self) -> str:
        cols = [("test_set", "Dataset"), ("model_tag", "Model"), ("SS", "SS↑"), ("WER_pct", "WER(%)↓")]
        extra = [
            ("homograph_err_pct", "Homograph err(%)↓"),
            ("ES", "ES↑ (mock)"),
            ("RTF_t2s", "RTF T2S↓"),
            ("RTF_s2m", "RTF S2M↓"),
        ]
        cols += [c for c in extra if any(r.get(c[0]) is not None for r in self.rows)]
        lines = ["| " + " | ".join(h for _, h in cols) + " |", "|" + "---|" * len(cols)]
        for r in self.rows:
            cells = []
            for k, _ in cols:
                v = r.get(k)
                cells.append("-" if v is None else f"{v:.3f}" if isinstance(v, float) else str(v))
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"


def _r(x: float | None, nd: int = 6) -> float | None:
    return None if x is None else round(float(x), nd)


def evaluate_t2s(
    model,
    items: Sequence[BenchItem],
    codec: CodecModel,
    oracle: CodebookASROracle,
    *,
    template_id: int = 0,
    s2m=None,
    s2m_steps: int = 8,
) -> dict:
    """Greedy-decode every item; return homograph error, oracle-WER and SS."""
    from . import s2m as s2m_mod
    from . import t2s as t2s_mod
    from .textproc import assemble

    herr = htot = 0
    wers = []
    sims = []
    for it in items:
        ref_clip = world.reference_clip(it.speaker_id, it.ref_seed)
        seq = assemble(it.tokens, model.strategy, template_id=template_id)
        cond = t2s_mod.extract_cond(ref_clip.mel)
        max_tokens = 4 * len(it.tokens) * oracle.tokens_per_unit
        toks = t2s_mod.generate(seq, cond, t2s_mod.FREE, model, t2s_mod.DecodeParams(max_tokens=max_tokens))
        hyp = oracle.transcribe(toks)
        ref = it.ref_units
        wers.append(wer(ref, hyp))
        e, n = homograph_errors(ref, hyp)
        herr += e
        htot += n
        if len(toks):
            if s2m is not None:
                cond_s2m = s2m_mod.S2MCondition(toks, ref_clip.mel, s2m.config.upsample_factor)
                mel = s2m_mod.sample_mel(cond_s2m, s2m, s2m_steps, seed=0)
            else:
                mel = codec_mod.decode(toks, codec)
            sims.append(cosine_similarity(speaker_embed(mel), speaker_embed(ref_clip.mel)))
    return {
        "homograph_err_pct": 100.0 * herr / htot if htot else 0.0,
        "homograph_count": htot,
        "WER_pct": 100.0 * float(np.mean(wers)) if wers else 0.0,
        "SS": float(np.mean(sims)) if sims else None,
        "n": len(items),
    }


def run_strategy_comparison(
    models: Mapping[str, Any],
    bench: HomographBench,
    codec: CodecModel,
    oracle: CodebookASROracle,
    *,
    s2m=None,
    seeds: Sequence[int] = (0,),
    metadata: dict | None = None,
) -> EvalReport:
    """One row per model per density level; refuses models trained under different configs."""
    hashes = {tag: getattr(m, "comparison_hash", None) for tag, m in models.items()}
    if len(set(hashes.values())) > 1:
        raise ValueError(f"models were not trained under identical conditions: {hashes}")
    rows = []
    for tag, m in models.items():
        for d in bench.densities():
            items = [it for it in bench.items if it.density == d]
            res = evaluate_t2s(m, items, codec, oracle, s2m=s2m)
            rows.append(
                {
                    "model_tag": tag,
                    "test_set": f"{bench.name}@{d:.2f}",
                    "density": d,
                    "SS": _r(res["SS"]),
                    "WER_pct": _r(res["WER_pct"]),
                    "homograph_err_pct": _r(res["homograph_err_pct"]),
                    "homograph_count": res["homograph_count"],
                    "ES": None,
                    "RTF_t2s": None,
                    "RTF_s2m": None,
                    "n": res["n"],
                }
            )
    meta = {"seeds": list(seeds), "config_hash": next(iter(hashes.values()), None), "bench": bench.name}
    meta.update(metadata or {})
    return EvalReport(rows, meta)


AB_DIMENSIONS = ("speech_quality", "speaker_similarity", "prosodic_naturalness")


def write_ab_list(
    path: str | Path,
    pairs: Sequence[tuple[str, str]],
    dimensions: Sequence[str] = AB_DIMENSIONS,
    seed: int = 0,
) -> list[tuple[str, str, str]]:
    """Paired-sample listening list; A/B order is shuffled per pair with ``seed``."""
    rng = random.Random(seed)
    rows = []
    for a, b in pairs:
        if rng.random() < 0.5:
            a, b = b, a
        rows.extend((a, b, dim) for dim in dimensions)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_a", "sample_b", "dimension"])
        w.writerows(rows)
    return rows
