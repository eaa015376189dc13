"""Text tokenization, language tagging and T2S input layouts.

Three layouts are supported, all of the form ``[c, p, BT, ..., BA, sem...]``:

* boundary-aware: every maximal same-language run wrapped in ``<L> ... </L>``
* token concat: each text entry keeps its language id (fused downstream)
* instruction: a rendered instruction prefix terminated by ``EOP``
"""

from __future__ import annotations

import enum
import json
import random
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import NamedTuple, Sequence

RANDOM = "random"


class Strategy(str, enum.Enum):
    BOUNDARY_AWARE = "boundary_aware"
    TOKEN_CONCAT = "token_concat"
    INSTRUCTION = "instruction"

    @classmethod
    def parse(cls, value: "str | Strategy") -> "Strategy":
        try:
            return cls(value)
        except ValueError:
            raise ValueError(
                f"unknown strategy {value!r}; expected one of {[s.value for s in cls]}"
            ) from None


class OOVError(ValueError):
    def __init__(self, symbol: str, offset: int):
        super().__init__(f"out-of-vocabulary symbol {symbol!r} at offset {offset}")
        self.symbol = symbol
        self.offset = offset


class TextToken(NamedTuple):
    symbol_id: int
    lang_id: int


class Entry(NamedTuple):
    """One layout position: ``role`` is cond, dur, special, text, instruction or semantic."""

    role: str
    id: int
    lang: int | None = None


@dataclass(frozen=True)
class Vocabulary:
    symbols: dict[str, int]
    languages: tuple[str, ...]
    homographs: frozenset[int]
    special_names: tuple[str, ...]
    version: int = 1

    @property
    def vocab_size(self) -> int:
        return len(self.symbols)

    @property
    def num_languages(self) -> int:
        return len(self.languages)

    @property
    def id_to_symbol(self) -> dict[int, str]:
        return {i: s for s, i in self.symbols.items()}

    # Special ids start after the symbol block so the two never collide.
    def special(self, name: str, lang: int | None = None) -> int:
        base = self.vocab_size
        if name in self.special_names:
            return base + self.special_names.index(name)
        n = len(self.special_names)
        if lang is None or not 0 <= lang < self.num_languages:
            raise ValueError(f"special {name!r} needs a valid language, got {lang!r}")
        if name == "LID_open":
            return base + n + 2 * lang
        if name == "LID_close":
            return base + n + 2 * lang + 1
        raise ValueError(f"unknown special token {name!r}")

    @property
    def num_specials(self) -> int:
        return len(self.special_names) + 2 * self.num_languages

    def special_name(self, special_id: int) -> str:
        k = special_id - self.vocab_size
        n = len(self.special_names)
        if 0 <= k < n:
            return self.special_names[k]
        k -= n
        if 0 <= k < 2 * self.num_languages:
            lang = self.languages[k // 2].upper()
            return f"<{lang}>" if k % 2 == 0 else f"</{lang}>"
        raise ValueError(f"{special_id} is not a special id")

    def is_homograph(self, symbol_id: int) -> bool:
        return symbol_id in self.homographs

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "languages": list(self.languages),
            "symbols": dict(self.symbols),
            "homographs": sorted(self.id_to_symbol[i] for i in self.homographs),
            "specials": list(self.special_names),
        }


def _load_json(name: str) -> dict:
    with resources.files("desktts.data").joinpath(name).open(encoding="utf-8") as fh:
        return json.load(fh)


def vocabulary_from_json(data: dict) -> Vocabulary:
    symbols = {str(k): int(v) for k, v in data["symbols"].items()}
    if sorted(symbols.values()) != list(range(len(symbols))):
        raise ValueError("symbol ids must be a dense range starting at 0")
    return Vocabulary(
        symbols=symbols,
        languages=tuple(data["languages"]),
        homographs=frozenset(symbols[s] for s in data["homographs"]),
        special_names=tuple(data["specials"]),
        version=int(data.get("version", 1)),
    )


@lru_cache(maxsize=None)
def default_vocabulary() -> Vocabulary:
    return vocabulary_from_json(_load_json("vocab.json"))


@lru_cache(maxsize=None)
def default_templates() -> dict[int, tuple[str, ...]]:
    data = _load_json("templates.json")
    return {int(k): tuple(v) for k, v in data["templates"].items()}


def tokenize(
    text: str,
    lang_spans: Sequence[tuple[int, int, int]],
    vocab: Vocabulary | None = None,
) -> list[TextToken]:
    """Character-level tokenization; each character takes the language of its span."""
    vocab = vocab or default_vocabulary()
    langs: list[int | None] = [None] * len(text)
    for start, end, lang in sorted(lang_spans):
        if not (0 <= start < end <= len(text)):
            raise ValueError(f"span ({start}, {end}) outside text of length {len(text)}")
        if not 0 <= lang < vocab.num_languages:
            raise ValueError(f"invalid lang_id {lang}")
        for i in range(start, end):
            if langs[i] is not None:
                raise ValueError(f"language spans overlap at offset {i}")
            langs[i] = lang
    tokens = []
    for offset, ch in enumerate(text):
        if langs[offset] is None:
            raise ValueError(f"offset {offset} not covered by any language span")
        if ch not in vocab.symbols:
            raise OOVError(ch, offset)
        tokens.append(TextToken(vocab.symbols[ch], langs[offset]))
    return tokens


def detokenize(tokens: Sequence[TextToken], vocab: Vocabulary | None = None) -> str:
    vocab = vocab or default_vocabulary()
    table = vocab.id_to_symbol
    return "".join(table[t.symbol_id] for t in tokens)


def language_runs(tokens: Sequence[TextToken]) -> list[tuple[int, list[TextToken]]]:
    runs: list[tuple[int, list[TextToken]]] = []
    for tok in tokens:
        if runs and runs[-1][0] == tok.lang_id:
            runs[-1][1].append(tok)
        else:
            runs.append((tok.lang_id, [tok]))
    return runs


@dataclass(frozen=True)
class T2SSequence:
    strategy: Strategy
    layout: tuple[Entry, ...]
    template_id: int | None = None

    def __len__(self) -> int:
        return len(self.layout)

    @property
    def ba_index(self) -> int:
        # assemblers always terminate the layout with BA
        return len(self.layout) - 1

    def text_entries(self) -> list[Entry]:
        return [e for e in self.layout if e.role == "text"]

    def render(self, vocab: Vocabulary | None = None) -> list[str]:
        """Human-readable layout, mostly for debugging and docs."""
        vocab = vocab or default_vocabulary()
        out = []
        for e in self.layout:
            if e.role == "cond":
                out.append("c")
            elif e.role == "dur":
                out.append("p")
            elif e.role == "special":
                out.append(vocab.special_name(e.id))
            elif e.role in ("text", "instruction"):
                sym = vocab.id_to_symbol[e.id]
                out.append(sym if e.lang is None else f"{sym}/{e.lang}")
            else:
                out.append(f"s{e.id}")
        return out


def _prefix(vocab: Vocabulary) -> list[Entry]:
    return [Entry("cond", 0), Entry("dur", 0), Entry("special", vocab.special("BT"))]


def assemble_boundary_aware(
    tokens: Sequence[TextToken], vocab: Vocabulary | None = None
) -> T2SSequence:
    vocab = vocab or default_vocabulary()
    layout = _prefix(vocab)
    for lang, run in language_runs(tokens):
        layout.append(Entry("special", vocab.special("LID_open", lang)))
        layout.extend(Entry("text", t.symbol_id) for t in run)
        layout.append(Entry("special", vocab.special("LID_close", lang)))
    layout.append(Entry("special", vocab.special("BA")))
    return T2SSequence(Strategy.BOUNDARY_AWARE, tuple(layout))


def assemble_token_concat(
    tokens: Sequence[TextToken], vocab: Vocabulary | None = None
) -> T2SSequence:
    vocab = vocab or default_vocabulary()
    layout = _prefix(vocab)
    for i, t in enumerate(tokens):
        lang = getattr(t, "lang_id", None)
        if lang is None or not 0 <= lang < vocab.num_languages:
            raise ValueError(f"token {i} has no valid lang_id: {t!r}")
        layout.append(Entry("text", t.symbol_id, lang))
    layout.append(Entry("special", vocab.special("BA")))
    return T2SSequence(Strategy.TOKEN_CONCAT, tuple(layout))


def dominant_language(tokens: Sequence[TextToken], default: int = 0) -> int:
    if not tokens:
        return default
    counts: dict[int, int] = {}
    for t in tokens:
        counts[t.lang_id] = counts.get(t.lang_id, 0) + 1
    # ties resolve to the lowest language id
    return min(counts, key=lambda k: (-counts[k], k))


def render_instruction(
    lang: int, template_id: int, vocab: Vocabulary | None = None
) -> list[int]:
    vocab = vocab or default_vocabulary()
    table = default_templates()
    if lang not in table:
        raise ValueError(f"no templates for language {lang}")
    if not 0 <= template_id < len(table[lang]):
        raise ValueError(
            f"unknown template_id {template_id} for language {lang} "
            f"({len(table[lang])} templates)"
        )
    return [vocab.symbols[ch] for ch in table[lang][template_id]]


def assemble_instruction(
    tokens: Sequence[TextToken],
    template_id: int | str = 0,
    *,
    lang: int | None = None,
    rng: random.Random | None = None,
    vocab: Vocabulary | None = None,
) -> T2SSequence:
    """Instruction prefix for ``lang`` (default: the dominant language of ``tokens``).

    ``template_id=RANDOM`` draws uniformly from that language's templates using ``rng``.
    """
    vocab = vocab or default_vocabulary()
    lang = dominant_language(tokens) if lang is None else lang
    if template_id == RANDOM:
        rng = rng or random.Random()
        template_id = rng.randrange(len(default_templates()[lang]))
    if not isinstance(template_id, int):
        raise ValueError(f"template_id must be an int or RANDOM, got {template_id!r}")
    layout = _prefix(vocab)
    layout.extend(Entry("instruction", i) for i in render_instruction(lang, template_id, vocab))
    layout.append(Entry("special", vocab.special("EOP")))
    layout.extend(Entry("text", t.symbol_id) for t in tokens)
    layout.append(Entry("special", vocab.special("BA")))
    return T2SSequence(Strategy.INSTRUCTION, tuple(layout), template_id=template_id)


def assemble(
    tokens: Sequence[TextToken],
    strategy: Strategy | str,
    *,
    template_id: int | str = 0,
    rng: random.Random | None = None,
    vocab: Vocabulary | None = None,
) -> T2SSequence:
    strategy = Strategy.parse(strategy)
    if strategy is Strategy.BOUNDARY_AWARE:
        return assemble_boundary_aware(tokens, vocab)
    if strategy is Strategy.TOKEN_CONCAT:
        return assemble_token_concat(tokens, vocab)
    return assemble_instruction(tokens, template_id, rng=rng, vocab=vocab)
