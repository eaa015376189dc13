"""Synthetic two-language acoustic world used for desk-scale experiments.

Every symbol is realised as one *acoustic unit* lasting ``FRAMES_PER_UNIT`` mel
frames. Homograph symbols have one unit per language; every other symbol is
pronounced identically in both languages. Speakers apply a spectral tilt and a
gain to the unit prototypes, emotions modulate frame energy over time.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .audio import N_MELS, MelSpectrogram
from .textproc import TextToken, Vocabulary, default_vocabulary

FRAMES_PER_UNIT = 8
WORLD_SEED = 20251016
NOISE_STD = 0.1
EMOTIONS = ("neutral", "happy", "sad")


@dataclass(frozen=True, eq=False)
class UnitInventory:
    """Maps (symbol, language) pairs to acoustic unit ids."""

    units: tuple[tuple[int, int | None], ...]
    prototypes: np.ndarray  # [n_units, n_mels]
    vocab: Vocabulary

    @property
    def n_units(self) -> int:
        return len(self.units)

    def unit_of(self, symbol_id: int, lang_id: int) -> int:
        key = (symbol_id, lang_id if self.vocab.is_homograph(symbol_id) else None)
        return self._index[key]

    @property
    def _index(self) -> dict[tuple[int, int | None], int]:
        return _unit_index(self)

    def symbol_of(self, unit: int) -> int:
        return self.units[unit][0]

    def is_homograph_unit(self, unit: int) -> bool:
        return self.units[unit][1] is not None

    def label(self, unit: int) -> str:
        sym, lang = self.units[unit]
        ch = self.vocab.id_to_symbol[sym]
        return ch if lang is None else f"{ch}/{self.vocab.languages[lang]}"


@lru_cache(maxsize=4)
def _unit_index(inv: UnitInventory) -> dict[tuple[int, int | None], int]:
    return {u: i for i, u in enumerate(inv.units)}


def _prototype(rng: np.random.Generator, n_mels: int) -> np.ndarray:
    bins = np.arange(n_mels)
    env = np.full(n_mels, -6.0)
    for _ in range(rng.integers(2, 4)):
        centre = rng.uniform(0, n_mels - 1)
        width = rng.uniform(1.5, 4.0)
        env += rng.uniform(2.0, 4.5) * np.exp(-0.5 * ((bins - centre) / width) ** 2)
    return env


@lru_cache(maxsize=4)
def default_inventory(n_mels: int = N_MELS, seed: int = WORLD_SEED) -> UnitInventory:
    vocab = default_vocabulary()
    units: list[tuple[int, int | None]] = []
    for sym in range(vocab.vocab_size):
        if vocab.is_homograph(sym):
            units.extend((sym, lang) for lang in range(vocab.num_languages))
        else:
            units.append((sym, None))
    rng = np.random.default_rng(seed)
    space = vocab.symbols.get(" ")
    protos: list[np.ndarray] = []
    for sym, _ in units:
        if sym == space:
            protos.append(np.full(n_mels, -8.0))
            continue
        # rejection-sample so that every pair of units stays acoustically distinct
        while True:
            cand = _prototype(rng, n_mels)
            if all(np.sqrt(np.mean((cand - p) ** 2)) > 1.2 for p in protos):
                break
        protos.append(cand)
    return UnitInventory(tuple(units), np.stack(protos).astype(np.float32), vocab)


@dataclass(frozen=True)
class Speaker:
    speaker_id: int
    tilt: float
    gain: float

    def offset(self, n_mels: int = N_MELS) -> np.ndarray:
        return self.gain + self.tilt * np.linspace(-1.0, 1.0, n_mels)


def speaker(speaker_id: int) -> Speaker:
    rng = np.random.default_rng([WORLD_SEED, 7, speaker_id])
    return Speaker(speaker_id, float(rng.uniform(-1.0, 1.0)), float(rng.uniform(-0.4, 0.4)))


def _emotion_envelope(emotion: str, n_frames: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n_frames) / 100.0
    if emotion == "happy":
        return 0.6 * np.sin(2 * np.pi * 3.0 * t + rng.uniform(0, 2 * np.pi))
    if emotion == "sad":
        return -0.4 - 0.1 * np.sin(2 * np.pi * 0.7 * t)
    return np.zeros(n_frames)


@dataclass
class Utterance:
    tokens: list[TextToken]
    units: list[int]
    mel: MelSpectrogram
    speaker_id: int
    emotion: str = "neutral"
    meta: dict = field(default_factory=dict)

    @property
    def text(self) -> str:
        return "".join(default_vocabulary().id_to_symbol[t.symbol_id] for t in self.tokens)

    @property
    def frame_units(self) -> np.ndarray:
        return np.repeat(np.asarray(self.units, dtype=np.int64), FRAMES_PER_UNIT)


def units_for(tokens: list[TextToken], inv: UnitInventory | None = None) -> list[int]:
    inv = inv or default_inventory()
    return [inv.unit_of(t.symbol_id, t.lang_id) for t in tokens]


def render_units(
    units: list[int],
    speaker_id: int,
    *,
    emotion: str = "neutral",
    rng: np.random.Generator | None = None,
    noise_std: float = NOISE_STD,
    inv: UnitInventory | None = None,
) -> MelSpectrogram:
    inv = inv or default_inventory()
    rng = rng if rng is not None else np.random.default_rng(0)
    if not units:
        raise ValueError("cannot render an empty unit sequence")
    frames = np.repeat(inv.prototypes[np.asarray(units)], FRAMES_PER_UNIT, axis=0).astype(np.float64)
    frames += speaker(speaker_id).offset(inv.prototypes.shape[1])
    frames += _emotion_envelope(emotion, frames.shape[0], rng)[:, None]
    frames += rng.normal(0.0, noise_std, frames.shape)
    return MelSpectrogram(frames.astype(np.float32))


def synthesize(
    tokens: list[TextToken],
    speaker_id: int,
    *,
    emotion: str = "neutral",
    rng: np.random.Generator | None = None,
    inv: UnitInventory | None = None,
) -> Utterance:
    units = units_for(tokens, inv)
    mel = render_units(units, speaker_id, emotion=emotion, rng=rng, inv=inv)
    return Utterance(list(tokens), units, mel, speaker_id, emotion)


def random_text(
    rng: random.Random,
    length: int,
    density: float,
    lang: int | list[int],
    vocab: Vocabulary | None = None,
) -> list[TextToken]:
    """Random text with exactly ``round(density * length)`` homograph positions.

    ``lang`` is either one language for the whole utterance or a per-position list.
    """
    vocab = vocab or default_vocabulary()
    homs = sorted(vocab.homographs)
    space = vocab.symbols.get(" ")
    plain = [i for i in range(vocab.vocab_size) if i not in vocab.homographs and i != space]
    langs = [lang] * length if isinstance(lang, int) else list(lang)
    if len(langs) != length:
        raise ValueError("per-position language list has the wrong length")
    n_hom = int(round(density * length))
    hom_pos = set(rng.sample(range(length), n_hom))
    return [
        TextToken(rng.choice(homs) if i in hom_pos else rng.choice(plain), langs[i])
        for i in range(length)
    ]


def code_switched_langs(rng: random.Random, length: int, n_languages: int = 2, mean_run: float = 6.0) -> list[int]:
    langs: list[int] = []
    cur = rng.randrange(n_languages)
    while len(langs) < length:
        run = 1 + int(rng.expovariate(1.0 / mean_run))
        langs.extend([cur] * run)
        cur = (cur + 1 + rng.randrange(n_languages - 1)) % n_languages
    return langs[:length]


def random_corpus(
    n: int,
    seed: int,
    *,
    min_len: int = 8,
    max_len: int = 32,
    densities: tuple[float, ...] = (0.25, 0.5, 0.75),
    n_speakers: int = 16,
    code_switch_prob: float = 0.0,
    emotions: tuple[str, ...] = ("neutral",),
    inv: UnitInventory | None = None,
) -> list[Utterance]:
    """Monolingual (or optionally code-switched) utterances with random speakers."""
    py = random.Random(seed)
    npr = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        length = py.randint(min_len, max_len)
        density = py.choice(densities)
        if py.random() < code_switch_prob:
            langs: int | list[int] = code_switched_langs(py, length)
        else:
            langs = py.randrange(2)
        toks = random_text(py, length, density, langs)
        spk = py.randrange(n_speakers)
        emo = py.choice(emotions)
        utt = synthesize(toks, spk, emotion=emo, rng=npr, inv=inv)
        utt.meta["density"] = density
        out.append(utt)
    return out


def reference_clip(speaker_id: int, seed: int, length: int = 24, emotion: str = "neutral") -> Utterance:
    """A prompt utterance for ``speaker_id`` with unrelated random content."""
    py = random.Random(seed)
    toks = random_text(py, length, 0.25, py.randrange(2))
    return synthesize(toks, speaker_id, emotion=emotion, rng=np.random.default_rng(seed))
