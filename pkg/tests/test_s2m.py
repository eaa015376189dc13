import numpy as np
import pytest
import torch

from desktts import s2m, world
from desktts.audio import MelSpectrogram
from desktts.codec import SemanticTokens
from desktts.s2m import BackboneConfig, S2MCondition, S2MConfig, S2MModel, S2MSample


def toy_cfg(kind="zipformer_like", rate=25, **kw):
    bb = BackboneConfig(kind=kind, width=32, n_heads=2, depth=3, schedule=(1, 2, 1))
    kw.setdefault("crop_frames", 32)
    return S2MConfig(backbone=bb, token_rate_hz=rate, batch_size=4, **kw)


def toy_model(kind="zipformer_like", rate=25):
    torch.manual_seed(0)
    return S2MModel(toy_cfg(kind, rate)).eval()


REF = world.reference_clip(0, 1).mel


def cond(n_tok, rate=25, seed=0):
    ids = np.random.default_rng(seed).integers(0, 256, n_tok)
    return S2MCondition(SemanticTokens(ids, rate), REF, 100 // rate)


def test_cfm_interpolate():
    rng = np.random.default_rng(0)
    x0, x1 = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    xt, v = s2m.cfm_interpolate(x0, x1, 0.0)
    assert np.array_equal(xt, x0)
    xt, v1 = s2m.cfm_interpolate(x0, x1, 1.0)
    assert np.allclose(xt, x1)
    _, v2 = s2m.cfm_interpolate(x0, x1, 0.3)
    assert np.array_equal(v1, v2) and np.array_equal(v, x1 - x0)
    with pytest.raises(ValueError, match="shape"):
        s2m.cfm_interpolate(x0, x1[:4], 0.5)
    with pytest.raises(ValueError):
        s2m.cfm_interpolate(x0, x1, 1.5)
    with pytest.raises(ValueError):
        s2m.FlowState(x0, -0.1)


def test_oracle_predictor_has_zero_loss():
    x0, x1 = torch.randn(2, 8, 4), torch.randn(2, 8, 4)
    _, v = s2m.cfm_interpolate(x0, x1, torch.rand(2, 1, 1))
    assert float(s2m.cfm_loss(x1 - x0, v)) == 0.0


def test_backbone_config_validation():
    with pytest.raises(ValueError, match="symmetric"):
        BackboneConfig(schedule=(1, 2, 4)).validate()
    with pytest.raises(ValueError):
        BackboneConfig(kind="wavenet").validate()


def test_default_param_counts():
    udit = s2m.backbone_parameters(s2m.default_backbone("udit_like"))
    zip_ = s2m.backbone_parameters(s2m.default_backbone("zipformer_like"))
    assert zip_ < udit


def test_flop_model():
    u, z = s2m.default_backbone("udit_like"), s2m.default_backbone("zipformer_like")
    for T in range(8, 513, 7):
        assert s2m.count_flops(z, T)["total"] < s2m.count_flops(u, T)["total"]
    assert s2m.count_flops(u, 200)["attention"] * 4 == s2m.count_flops(u, 400)["attention"]
    assert s2m.count_flops(z, 400)["stack_lengths"] == [400, 200, 100, 200, 400]
    with pytest.raises(ValueError):
        s2m.count_flops(u, 0)


@pytest.mark.parametrize("kind", ["udit_like", "zipformer_like"])
def test_shape_law_and_determinism(kind):
    m = toy_model(kind)
    for n in (1, 2, 3, 5, 17, 64):
        mel = s2m.sample_mel(cond(n), m, n_steps=2, seed=1)
        assert mel.frames.shape == (4 * n, 32)
    a = s2m.sample_mel(cond(9), m, 4, seed=3).frames
    b = s2m.sample_mel(cond(9), m, 4, seed=3).frames
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ValueError):
        s2m.sample_mel(cond(9), m, 0)
    with pytest.raises(ValueError):
        s2m.sample_mel(cond(9, rate=50), m, 2)


def test_zipformer_preserves_length():
    torch.manual_seed(0)
    bb = s2m.ZipformerLike(BackboneConfig(width=16, n_heads=2))
    temb = torch.randn(1, 16)
    for T in range(1, 41):
        assert bb(torch.randn(1, T, 16), temb).shape == (1, T, 16)


def test_backbones_are_interchangeable():
    x, t, tok = torch.randn(2, 12, 32), torch.rand(2), torch.randint(0, 256, (2, 3))
    ref = torch.randn(2, 20, 32)
    for kind in ("udit_like", "zipformer_like"):
        assert toy_model(kind).velocity(x, t, tok, ref).shape == x.shape


def test_nonfinite_reports_step():
    m = toy_model()
    with torch.no_grad():
        m.out.bias.fill_(float("inf"))
    with pytest.raises(s2m.NonFiniteError, match="step 0"):
        s2m.sample_mel(cond(4), m, 3)


def test_velocity_gradient_matches_finite_differences():
    m = toy_model().double()
    x, t = torch.randn(1, 8, 32, dtype=torch.float64), torch.tensor([0.3], dtype=torch.float64)
    tok = torch.randint(0, 256, (1, 2))
    ref = torch.randn(1, 10, 32, dtype=torch.float64)
    target = torch.randn(1, 8, 32, dtype=torch.float64)

    def loss():
        return ((m.velocity(x, t, tok, ref) - target) ** 2).mean()

    m.zero_grad()
    loss().backward()
    rng = np.random.default_rng(0)
    eps = 1e-6
    for p in (m.in_proj.weight, m.backbone.stacks[1][0].qkv.weight, m.out.weight, m.tok_emb.weight, m.backbone.bypass):
        flat = p.data.view(-1)
        for idx in rng.choice(flat.numel(), min(5, flat.numel()), replace=False):
            if p is m.tok_emb.weight:
                idx = int(tok[0, 0]) * p.shape[1] + idx % p.shape[1]
            orig = flat[idx].item()
            with torch.no_grad():
                flat[idx] = orig + eps
                up = loss().item()
                flat[idx] = orig - eps
                down = loss().item()
                flat[idx] = orig
            fd = (up - down) / (2 * eps)
            an = p.grad.view(-1)[idx].item()
            assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an), 1e-8), (fd, an)


def _toy_dataset(n, rate=25):
    utts = world.random_corpus(n, 9, min_len=8, max_len=12)
    f = 100 // rate
    out = []
    rng = np.random.default_rng(0)
    for u in utts:
        n_tok = u.mel.n_frames // f
        ids = np.asarray(u.units, dtype=np.int64).repeat(8 // f)[:n_tok]
        out.append(S2MSample(S2MCondition(SemanticTokens(ids, rate), REF, f), MelSpectrogram(u.mel.frames[: n_tok * f])))
    return out


def test_length_law_violation_names_sample():
    ds = _toy_dataset(3)
    bad = S2MSample(ds[1].cond, MelSpectrogram(ds[1].mel.frames[:-1]))
    with pytest.raises(ValueError, match="sample 1"):
        s2m.train_s2m([ds[0], bad], toy_cfg(), 1)


def test_training_reduces_loss_and_is_deterministic():
    ds = _toy_dataset(50)
    a = s2m.train_s2m(ds, toy_cfg(), 500, seed=2)
    h = [r["loss"] for r in a.loss_history]
    assert np.mean(h[-50:]) < np.mean(h[:50])
    b = s2m.train_s2m(ds, toy_cfg(), 20, seed=2)
    c = s2m.train_s2m(ds, toy_cfg(), 20, seed=2)
    assert [r["loss"] for r in b.loss_history] == [r["loss"] for r in c.loss_history]


def test_memorized_sample_converges_with_steps():
    ds = _toy_dataset(1)
    m = s2m.train_s2m(ds, toy_cfg(lr=3e-3, crop_frames=ds[0].mel.n_frames), 800, seed=0)
    target = ds[0].mel.frames
    errs = [float(np.mean((s2m.sample_mel(ds[0].cond, m, n, seed=0).frames - target) ** 2)) for n in (1, 4, 16)]
    assert errs[0] > errs[1] > errs[2]


def test_save_load(tmp_path):
    m = toy_model("udit_like")
    p = tmp_path / "s.ckpt"
    s2m.save_s2m(p, m)
    back = s2m.load_s2m(p)
    assert back.config == m.config
    a = s2m.sample_mel(cond(3), m, 2).frames
    assert np.array_equal(a, s2m.sample_mel(cond(3), back, 2).frames)
