import io
import math
import random

import numpy as np
import pytest
import torch

from desktts import audio, checkpoint, vocoder, world
from desktts.audio import MelSpectrogram, Waveform


def test_mel_filterbank_shape_and_coverage():
    fb = audio.mel_filterbank()
    assert fb.shape == (audio.N_MELS, audio.N_FFT // 2 + 1)
    assert np.all(fb >= 0) and np.all(fb.sum(1) > 0)


def test_mel_frame_count_law():
    for seconds in (0.5, 1.0, 1.234):
        x = np.random.default_rng(0).normal(size=int(seconds * audio.SAMPLE_RATE))
        mel = audio.wave_to_mel(x)
        assert mel.n_frames == math.ceil(len(x) / audio.HOP)
        assert mel.n_frames == audio.n_frames_for_duration(seconds)


def test_stft_istft_round_trip():
    x = np.random.default_rng(1).normal(size=16000)
    y = audio.istft(audio.stft(x))
    assert len(y) == 100 * audio.HOP
    assert np.allclose(x, y[: len(x)], atol=1e-8)


def test_wav_round_trip(tmp_path):
    x = 0.5 * np.sin(np.linspace(0, 200, 8000))
    path = tmp_path / "a.wav"
    audio.write_wav(path, Waveform(x))
    y = audio.read_wav(path)
    assert y.sample_rate_hz == audio.SAMPLE_RATE
    assert np.max(np.abs(x - y.samples)) < 1e-4
    raw = path.read_bytes()
    assert raw[:4] == b"RIFF" and raw[8:12] == b"WAVE"


def test_mel_validation():
    with pytest.raises(ValueError):
        MelSpectrogram(np.zeros((0, 32)))
    m = MelSpectrogram(np.full((3, 32), np.nan))
    with pytest.raises(ValueError, match="non-finite"):
        m.check_finite()


def test_world_homographs_differ_only_by_language():
    inv = world.default_inventory()
    v = inv.vocab
    for s in v.homographs:
        assert inv.unit_of(s, 0) != inv.unit_of(s, 1)
    plain = v.symbols["a"]
    assert inv.unit_of(plain, 0) == inv.unit_of(plain, 1)
    assert inv.n_units == v.vocab_size + len(v.homographs)


def test_prototypes_are_separated():
    p = world.default_inventory().prototypes.astype(np.float64)
    d = np.sqrt(((p[:, None] - p[None]) ** 2).mean(-1))
    d[np.diag_indices_from(d)] = np.inf
    assert d.min() > 1.2


def test_random_text_density_exact():
    rng = random.Random(3)
    v = world.default_inventory().vocab
    for d in (0.0, 0.25, 0.5, 0.75):
        toks = world.random_text(rng, 40, d, 1)
        assert sum(v.is_homograph(t.symbol_id) for t in toks) == round(d * 40)
        assert all(t.lang_id == 1 for t in toks)


def test_corpus_is_deterministic():
    a = world.random_corpus(5, 11)
    b = world.random_corpus(5, 11)
    for u, w in zip(a, b):
        assert u.tokens == w.tokens and np.array_equal(u.mel.frames, w.mel.frames)
        assert u.mel.n_frames == world.FRAMES_PER_UNIT * len(u.units)


def test_code_switched_corpus_has_both_languages():
    utts = world.random_corpus(20, 4, min_len=30, max_len=40, code_switch_prob=1.0)
    assert any(len({t.lang_id for t in u.tokens}) == 2 for u in utts)


def test_checkpoint_round_trip(tmp_path):
    state = {"w": torch.randn(3, 4), "b": torch.arange(5), "m": torch.tensor([True, False])}
    p = tmp_path / "x.ckpt"
    checkpoint.save(p, "demo", {"a": 1}, state, {"note": "hi"})
    header, back = checkpoint.load(p, kind="demo")
    assert header["config"] == {"a": 1} and header["meta"]["note"] == "hi"
    for k in state:
        assert torch.equal(state[k], back[k])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load(p, kind="codec")
    (tmp_path / "bad").write_bytes(b"nope")
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load(tmp_path / "bad")
    checkpoint.save(tmp_path / "y.ckpt", "demo", {"a": 1}, state, {"note": "hi"})
    assert p.read_bytes() == (tmp_path / "y.ckpt").read_bytes()


# vocoder ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def utt_mel():
    return world.random_corpus(1, 5, min_len=10, max_len=10)[0].mel


def test_vocoder_length(utt_mel):
    w = vocoder.mel_to_wave(utt_mel, iters=4)
    assert abs(w.duration_s - utt_mel.n_frames / utt_mel.frame_rate_hz) <= audio.HOP / audio.SAMPLE_RATE
    assert np.all(np.isfinite(w.samples)) and np.max(np.abs(w.samples)) <= 1.0


def test_vocoder_silence():
    w = vocoder.mel_to_wave(MelSpectrogram(np.full((50, audio.N_MELS), audio.LOG_FLOOR)), iters=8)
    assert np.sqrt(np.mean(w.samples**2)) < 1e-3


def test_vocoder_convergence_monotone(utt_mel):
    w = vocoder.mel_to_wave(utt_mel, iters=24, track=True)
    sc = w.meta["spectral_convergence"]
    assert all(b <= a + 1e-12 for a, b in zip(sc, sc[1:]))
    assert sc[-1] < sc[0]


def test_vocoder_deterministic_and_errors(utt_mel):
    a = vocoder.mel_to_wave(utt_mel, iters=3).samples
    b = vocoder.mel_to_wave(utt_mel, iters=3).samples
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ValueError):
        vocoder.mel_to_wave(utt_mel, iters=0)
    bad = MelSpectrogram(np.full((4, audio.N_MELS), np.inf))
    with pytest.raises(ValueError):
        vocoder.mel_to_wave(bad)
