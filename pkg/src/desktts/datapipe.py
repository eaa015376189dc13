"""Data curation: annotate, separate, merge, filter, emit a JSONL manifest.

Annotation models (VAD, ASR, diarization, separation, quality) are adapters.
The mock adapters read everything from sidecar JSON files so the pipeline
logic can run without any model.

Sidecar format::

    {"source_id": "ep001", "audio": "ep001.wav",
     "segments": [{"start_s": 0.0, "end_s": 3.2, "transcript": "...",
                   "speaker_id": "spk1", "lang_spans": [[0, 12, 0]],
                   "event_proportions": {"speech": .9, "singing": 0, "accompaniment": .05, "noise": .05},
                   "flags": {"multi_speaker": false, "singing": false, "accompaniment": false},
                   "audio_q": 0.8, "text_q": 0.9}]}
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

log = logging.getLogger(__name__)

MAX_DURATION_S = 25.0
EVENTS = ("speech", "singing", "accompaniment", "noise")
FLAGS = ("multi_speaker", "singing", "accompaniment")
TERMINAL = tuple(".!?。！？")


@dataclass(frozen=True)
class RawSegment:
    source_id: str
    start_s: float
    end_s: float
    transcript: str
    speaker_id: str
    event_proportions: dict = field(default_factory=lambda: {"speech": 1.0, "singing": 0.0, "accompaniment": 0.0, "noise": 0.0})
    flags: dict = field(default_factory=lambda: {f: False for f in FLAGS})
    lang_spans: tuple = ()
    scores: dict = field(default_factory=dict)  # precomputed quality scores, mock mode only
    separated: bool = False

    def __post_init__(self):
        if not self.end_s > self.start_s:
            raise ValueError(f"segment {self.source_id}@{self.start_s}: end_s must exceed start_s")
        props = self.event_proportions
        for k in EVENTS:
            v = props.get(k, 0.0)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"event proportion {k}={v} outside [0, 1]")
        if sum(props.get(k, 0.0) for k in EVENTS) > 1 + 1e-6:
            raise ValueError("event proportions sum to more than 1")

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s


@dataclass
class MergedUtterance:
    segments: list[RawSegment]
    speaker_id: str
    duration_s: float
    text: str
    lang_spans: list = field(default_factory=list)

    def __post_init__(self):
        if self.duration_s > MAX_DURATION_S + 1e-9:
            raise ValueError(f"merged utterance of {self.duration_s:.3f} s exceeds {MAX_DURATION_S} s")
        for s in self.segments:
            if s.speaker_id != self.speaker_id or s.flags.get("multi_speaker"):
                raise ValueError("merged segments must share one speaker and be single-speaker")

    @property
    def source_id(self) -> str:
        return self.segments[0].source_id

    @property
    def start_s(self) -> float:
        return self.segments[0].start_s

    @property
    def end_s(self) -> float:
        return self.segments[-1].end_s


@dataclass
class ManifestRecord:
    audio_path: str
    source_id: str
    start_s: float
    end_s: float
    text: str
    lang_spans: list
    speaker_id: str
    separated: bool = False
    quality: dict = field(default_factory=lambda: {"audio_q": None, "text_q": None})
    kept: bool = True
    reject_reason: str | None = None

    def __post_init__(self):
        if not self.kept and not self.reject_reason:
            raise ValueError("a rejected record needs a reject_reason")

    KEY_ORDER = ("audio_path", "source_id", "start_s", "end_s", "text", "lang_spans", "speaker_id", "separated", "quality", "kept", "reject_reason")

    def to_json(self) -> str:
        d = {k: getattr(self, k) for k in self.KEY_ORDER}
        d["quality"] = {"audio_q": self.quality.get("audio_q"), "text_q": self.quality.get("text_q")}
        return json.dumps(d, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "ManifestRecord":
        d = json.loads(line)
        return cls(**{k: d[k] for k in cls.KEY_ORDER})


def route_separation(seg: RawSegment, threshold: float = 0.2) -> str:
    if seg.flags.get("accompaniment") or seg.event_proportions.get("accompaniment", 0.0) > threshold:
        return "separate"
    return "passthrough"


CoherenceFn = Callable[[RawSegment, RawSegment, float], bool]


def default_coherence(prev: RawSegment, nxt: RawSegment, gap_s: float) -> bool:
    """Refuse to join across a finished sentence followed by more than 1 s of silence."""
    return not (prev.transcript.rstrip().endswith(TERMINAL) and gap_s > 1.0)


def _join(segs: list[RawSegment]) -> tuple[str, list]:
    text, spans = "", []
    for s in segs:
        if text:
            if spans:
                spans[-1][1] += 1  # the joining space belongs to the preceding run
            text += " "
        off = len(text)
        for a, b, lang in s.lang_spans:
            spans.append([a + off, b + off, lang])
        text += s.transcript
    merged = []
    for sp in spans:
        if merged and merged[-1][2] == sp[2] and merged[-1][1] == sp[0]:
            merged[-1][1] = sp[1]
        else:
            merged.append(list(sp))
    return text, merged


def merge_segments(
    segments: Sequence[RawSegment],
    max_dur: float = MAX_DURATION_S,
    max_gap_s: float = 1.5,
    coherence: CoherenceFn = default_coherence,
) -> list[MergedUtterance]:
    """Greedy left-to-right merge under speaker, gap, coherence and duration constraints."""
    if max_dur > MAX_DURATION_S:
        raise ValueError(f"max_dur cannot exceed {MAX_DURATION_S} s")
    for a, b in zip(segments, segments[1:]):
        if a.source_id == b.source_id and b.start_s < a.start_s:
            raise ValueError(f"segments of {a.source_id} are not sorted by start time")
    groups: list[list[RawSegment]] = []
    for s in segments:
        if s.duration_s > max_dur:
            raise ValueError(f"segment {s.source_id}@{s.start_s} alone exceeds {max_dur} s")
        cur = groups[-1] if groups else None
        if cur:
            last = cur[-1]
            gap = s.start_s - last.end_s
            if (
                s.source_id == last.source_id
                and s.speaker_id == last.speaker_id
                and 0 <= gap <= max_gap_s
                and coherence(last, s, gap)
                and s.end_s - cur[0].start_s <= max_dur
            ):
                cur.append(s)
                continue
        groups.append([s])
    out = []
    for g in groups:
        text, spans = _join(g)
        out.append(MergedUtterance(g, g[0].speaker_id, g[-1].end_s - g[0].start_s, text, spans))
    return out


class QualityAdapter(Protocol):
    def __call__(self, record: ManifestRecord) -> float: ...


def filter_samples(
    records: Iterable[ManifestRecord],
    audio_q_adapter: QualityAdapter,
    text_q_adapter: QualityAdapter,
    tau_audio: float = 0.5,
    tau_text: float = 0.5,
) -> list[ManifestRecord]:
    """Score every record with both stages and mark kept / reject_reason."""
    out = []
    for r in records:
        if r.reject_reason and r.quality.get("audio_q") is None and r.quality.get("text_q") is None:
            out.append(r)  # rejected upstream, before scoring
            continue
        try:
            aq = float(audio_q_adapter(r))
            tq = float(text_q_adapter(r))
            if not (0.0 <= aq <= 1.0 and 0.0 <= tq <= 1.0):
                raise ValueError(f"score outside [0, 1]: audio {aq}, text {tq}")
        except Exception as exc:  # adapter boundary
            log.warning("quality adapter failed on %s: %s", r.audio_path, exc)
            out.append(replace(r, quality={"audio_q": None, "text_q": None}, kept=False, reject_reason="adapter_error"))
            continue
        reasons = [name for name, ok in (("audio_quality", aq >= tau_audio), ("text_quality", tq >= tau_text)) if not ok]
        out.append(replace(r, quality={"audio_q": aq, "text_q": tq}, kept=not reasons, reject_reason=",".join(reasons) or None))
    return out


# mock adapters ---------------------------------------------------------------


def load_sidecar(path: str | Path) -> list[RawSegment]:
    """Mock VAD + ASR + diarization + event tagging: everything comes from the sidecar."""
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    segs = []
    for s in d["segments"]:
        scores = {k: s[k] for k in ("audio_q", "text_q") if k in s}
        segs.append(
            RawSegment(
                source_id=d["source_id"],
                start_s=float(s["start_s"]),
                end_s=float(s["end_s"]),
                transcript=s.get("transcript", ""),
                speaker_id=str(s["speaker_id"]),
                event_proportions={k: float(s.get("event_proportions", {}).get(k, 0.0)) for k in EVENTS},
                flags={k: bool(s.get("flags", {}).get(k, False)) for k in FLAGS},
                lang_spans=tuple(tuple(x) for x in s.get("lang_spans", [])),
                scores=scores,
            )
        )
    return sorted(segs, key=lambda s: s.start_s)


def mock_separate(seg: RawSegment) -> RawSegment:
    """Pretend separation: accompaniment removed, its share handed back to speech."""
    p = dict(seg.event_proportions)
    p["speech"] = min(1.0, p.get("speech", 0.0) + p.get("accompaniment", 0.0))
    p["accompaniment"] = 0.0
    flags = dict(seg.flags, accompaniment=False)
    return replace(seg, event_proportions=p, flags=flags, separated=True)


class ScoreTable:
    """Mock quality adapter over precomputed scores keyed by audio_path."""

    def __init__(self, key: str, table: dict[str, float] | None = None):
        self.key = key
        self.table = dict(table or {})

    def __call__(self, record: ManifestRecord) -> float:
        if record.audio_path in self.table:
            return self.table[record.audio_path]
        v = record.quality.get(self.key)
        if v is None:
            raise KeyError(f"no {self.key} score for {record.audio_path}")
        return v


def audio_path_for(u: MergedUtterance | RawSegment, audio_root: str = "") -> str:
    base = f"{u.source_id}_{u.start_s:09.3f}_{u.end_s:09.3f}.wav"
    return str(Path(audio_root) / base) if audio_root else base


@dataclass
class PipelineConfig:
    separation_threshold: float = 0.2
    max_dur: float = MAX_DURATION_S
    max_gap_s: float = 1.5
    tau_audio: float = 0.5
    tau_text: float = 0.5
    audio_root: str = ""
    workers: int = 1


def _process_source(segs: list[RawSegment], cfg: PipelineConfig, coherence: CoherenceFn) -> tuple[list[ManifestRecord], dict, dict]:
    segs = [mock_separate(s) if route_separation(s, cfg.separation_threshold) == "separate" else s for s in segs]
    records: list[ManifestRecord] = []
    aq: dict[str, float] = {}
    tq: dict[str, float] = {}
    usable = []
    for s in segs:
        reason = "multi_speaker" if s.flags.get("multi_speaker") else "singing" if s.flags.get("singing") else None
        if reason:
            records.append(ManifestRecord(audio_path_for(s, cfg.audio_root), s.source_id, s.start_s, s.end_s, s.transcript, [list(x) for x in s.lang_spans], s.speaker_id, s.separated, kept=False, reject_reason=reason))
        else:
            usable.append(s)
    for u in merge_segments(usable, cfg.max_dur, cfg.max_gap_s, coherence):
        path = audio_path_for(u, cfg.audio_root)
        # a merged utterance is as good as its worst piece
        a = [s.scores["audio_q"] for s in u.segments if "audio_q" in s.scores]
        t = [s.scores["text_q"] for s in u.segments if "text_q" in s.scores]
        if len(a) == len(u.segments):
            aq[path] = min(a)
        if len(t) == len(u.segments):
            tq[path] = min(t)
        records.append(ManifestRecord(path, u.source_id, u.start_s, u.end_s, u.text, u.lang_spans, u.speaker_id, any(s.separated for s in u.segments)))
    records.sort(key=lambda r: r.start_s)
    return records, aq, tq


def run_pipeline(
    sources: Sequence[list[RawSegment]],
    cfg: PipelineConfig | None = None,
    *,
    coherence: CoherenceFn = default_coherence,
    audio_q_adapter: QualityAdapter | None = None,
    text_q_adapter: QualityAdapter | None = None,
) -> list[ManifestRecord]:
    """Process each source independently; output order is stable by source id."""
    cfg = cfg or PipelineConfig()
    with ThreadPoolExecutor(max_workers=max(1, cfg.workers)) as ex:
        results = list(ex.map(lambda s: _process_source(s, cfg, coherence), sources))
    records, aq, tq = [], {}, {}
    for segs, (recs, a, t) in sorted(zip(sources, results), key=lambda x: x[0][0].source_id if x[0] else ""):
        records.extend(recs)
        aq.update(a)
        tq.update(t)
    return filter_samples(records, audio_q_adapter or ScoreTable("audio_q", aq), text_q_adapter or ScoreTable("text_q", tq), cfg.tau_audio, cfg.tau_text)


def segments_from_manifest(records: Sequence[ManifestRecord]) -> list[list[RawSegment]]:
    """Turn manifest records back into per-source segment lists (one segment per record)."""
    by_src: dict[str, list[RawSegment]] = {}
    for r in records:
        flags = {f: False for f in FLAGS}
        if r.reject_reason in ("multi_speaker", "singing"):
            flags[r.reject_reason] = True
        scores = {k: v for k, v in r.quality.items() if v is not None}
        by_src.setdefault(r.source_id, []).append(
            RawSegment(r.source_id, r.start_s, r.end_s, r.text, r.speaker_id, flags=flags, lang_spans=tuple(tuple(x) for x in r.lang_spans), scores=scores, separated=r.separated)
        )
    return [sorted(v, key=lambda s: s.start_s) for _, v in sorted(by_src.items())]


def rerun_on_manifest(records: Sequence[ManifestRecord], cfg: PipelineConfig | None = None) -> list[ManifestRecord]:
    """Second pass over a finished manifest; for a pipeline output this is a no-op."""
    cfg = cfg or PipelineConfig()
    stored = {r.audio_path: r for r in records}
    # records rejected for quality reasons keep their scores; adapter errors stay errors
    def adapter(key):
        def score(rec: ManifestRecord) -> float:
            orig = stored.get(rec.audio_path)
            if orig is None or orig.reject_reason == "adapter_error":
                raise KeyError(f"no stored {key} for {rec.audio_path}")
            v = orig.quality.get(key)
            if v is None:
                raise KeyError(f"no stored {key} for {rec.audio_path}")
            return v
        return score
    return run_pipeline(segments_from_manifest(records), cfg, audio_q_adapter=adapter("audio_q"), text_q_adapter=adapter("text_q"))


def write_manifest(records: Iterable[ManifestRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_manifest(path: str | Path) -> list[ManifestRecord]:
    return [ManifestRecord.from_json(l) for l in Path(path).read_text(encoding="utf-8").splitlines() if l.strip()]


def ingest(sidecars: Sequence[str | Path], manifest_path: str | Path, cfg: PipelineConfig | None = None) -> list[ManifestRecord]:
    records = run_pipeline([load_sidecar(p) for p in sidecars], cfg)
    write_manifest(records, manifest_path)
    return records
