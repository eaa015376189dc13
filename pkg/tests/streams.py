"""Random segment streams shared by the datapipe tests and the acceptance suite."""

import random

from desktts.datapipe import FLAGS, RawSegment

WORDS = ["ij", "ab.", "kl", "mn?", "op", "qr", "st!", "uv", "wx", "cd"]


def random_stream(rng: random.Random, source_id: str, max_segments: int = 30) -> list[RawSegment]:
    t = rng.uniform(0, 2)
    segs = []
    speakers = [f"spk{i}" for i in range(rng.randint(1, 3))]
    for _ in range(rng.randint(0, max_segments)):
        t += rng.choice([0.0, rng.uniform(0, 0.6), rng.uniform(0, 3.0)])
        dur = max(0.01, rng.choice([rng.uniform(0.2, 4.0), rng.uniform(4.0, 20.0), 25.0 * rng.random()]))
        text = " ".join(rng.choice(WORDS) for _ in range(rng.randint(1, 4)))
        acc = rng.choice([0.0, 0.0, rng.uniform(0, 0.6)])
        flags = {f: rng.random() < 0.05 for f in FLAGS}
        n = len(text)
        cut = rng.randint(0, n)
        spans = tuple(x for x in ((0, cut, 0), (cut, n, 1)) if x[1] > x[0])
        segs.append(
            RawSegment(
                source_id,
                round(t, 3),
                round(t + dur, 3),
                text,
                rng.choice(speakers),
                {"speech": 1.0 - acc, "singing": 0.0, "accompaniment": acc, "noise": 0.0},
                flags,
                spans,
                {"audio_q": round(rng.random(), 3), "text_q": round(rng.random(), 3)},
            )
        )
        t = round(t + dur, 3)
    return segs


def random_sources(seed: int, n_sources: int = 3) -> list[list[RawSegment]]:
    rng = random.Random(seed)
    return [random_stream(rng, f"src{seed:05d}_{i}") for i in range(n_sources)]
