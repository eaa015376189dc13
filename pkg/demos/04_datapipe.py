"""Curate two sidecar-annotated sources into a JSONL manifest and re-run it to show idempotence.

Run: python3 demos/04_datapipe.py
"""

import json
import tempfile
from pathlib import Path

from desktts import datapipe

src = {
    "source_id": "ep001",
    "audio": "ep001.wav",
    "segments": [
        {"start_s": 0.0, "end_s": 10.0, "transcript": "ab ij", "speaker_id": "spk1", "lang_spans": [[0, 5, 0]], "audio_q": 0.8, "text_q": 0.9},
        {"start_s": 10.3, "end_s": 22.3, "transcript": "kl mn.", "speaker_id": "spk1", "lang_spans": [[0, 6, 1]], "audio_q": 0.9, "text_q": 0.9},
        {"start_s": 22.5, "end_s": 30.5, "transcript": "op", "speaker_id": "spk1", "audio_q": 0.7, "text_q": 0.2,
         "event_proportions": {"speech": 0.6, "accompaniment": 0.4}},
        {"start_s": 31.0, "end_s": 33.0, "transcript": "qr", "speaker_id": "spk2", "flags": {"multi_speaker": True}},
    ],
}
with tempfile.TemporaryDirectory() as d:
    side = Path(d) / "ep001.json"
    side.write_text(json.dumps(src))
    recs = datapipe.ingest([side], Path(d) / "manifest.jsonl")
    print((Path(d) / "manifest.jsonl").read_text())
    print("idempotent:", datapipe.rerun_on_manifest(recs) == recs)
