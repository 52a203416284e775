import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from asd.data import SyntheticConfig, generate_synthetic, sequences_from_tracks, tracks_from_scenes
from asd.features import fit_attribute_encoders
from asd.model import (
    ActiveSpeakerNet,
    ModelConfig,
    StreamNet,
    attention_bias,
    attention_scores,
    collate,
    compute_lambda,
    delta_from_logits,
    delta_from_probs,
    fuse_hierarchical,
    fuse_naive,
    fuse_proposed,
    self_attention_diag,
)
from asd.nnkernels import softmax

from . import oracles

T_ = lambda a: torch.as_tensor(np.asarray(a, dtype=np.float64))  # noqa: E731


# attention -------------------------------------------------------------------------


def test_single_step_attention_is_one():
    np.testing.assert_array_equal(self_attention_diag(T_([[0.3, -2.0]])).numpy(), [1.0])


def test_identical_states_give_quarter_after_warmup():
    H = T_(np.tile([0.2, -0.1, 0.4], (8, 1)))
    a = self_attention_diag(H).numpy()
    np.testing.assert_allclose(a[:4], [1, 1 / 2, 1 / 3, 1 / 4])
    np.testing.assert_allclose(a[3:], 0.25)


def test_bias_band_structure():
    B = attention_bias(6).numpy()
    for i in range(6):
        for j in range(6):
            assert (B[i, j] == 0) == (i - 4 < j <= i)


@given(st.integers(1, 30), st.integers(1, 6), st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_attention_matches_loop_oracle(length, d, seed):
    rng = np.random.default_rng(seed)
    H = rng.normal(size=(length, d))
    valid = rng.random(length) > 0.3
    ref = oracles.attention_diag_loop(H, 4, valid)
    got = self_attention_diag(T_(H)[None], 4, torch.from_numpy(valid)[None])[0].numpy()
    np.testing.assert_allclose(got, ref, atol=1e-12)


@given(st.integers(0, 10_000), st.integers(0, 27))
@settings(max_examples=60, deadline=None)
def test_attention_causal_and_banded(seed, t):
    rng = np.random.default_rng(seed)
    H = rng.normal(size=(28, 8))
    base = self_attention_diag(T_(H)).numpy()
    future = H.copy()
    future[t + 1 :] = rng.normal(size=future[t + 1 :].shape) * 5
    np.testing.assert_allclose(self_attention_diag(T_(future)).numpy()[: t + 1], base[: t + 1], atol=1e-12, rtol=0)
    past = H.copy()
    past[: max(0, t - 3)] = rng.normal(size=past[: max(0, t - 3)].shape) * 5
    assert abs(self_attention_diag(T_(past)).numpy()[t] - base[t]) <= 1e-12


@given(st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_attention_rows_sum_to_one(seed):
    H = T_(np.random.default_rng(seed).normal(size=(28, 16)) * 3)
    S = attention_scores(H).numpy()
    np.testing.assert_allclose(S.sum(axis=1), 1.0, atol=1e-6)
    a = np.diag(S)
    assert np.all((a > 0) & (a <= 1))


def test_attention_gradient_flows_to_hidden_states():
    H = T_(np.random.default_rng(0).normal(size=(5, 3))).requires_grad_()
    self_attention_diag(H).sum().backward()
    assert torch.count_nonzero(H.grad) > 0


# confidence indicator ---------------------------------------------------------------


@pytest.mark.parametrize("probs, expected", [((0.5, 0.5), 0.0), ((1.0, 0.0), 1.0), ((0.2, 0.8), 0.6)])
def test_delta_examples(probs, expected):
    assert delta_from_probs(T_(probs)).item() == pytest.approx(expected, abs=1e-15)


def test_delta_exact_at_0_8():
    assert delta_from_probs(T_([0.8, 0.2])).item() == 2 * (0.8 - 0.5)


@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(0.05, 20))
@settings(max_examples=200)
def test_delta_bounded(l0, l1, temperature):
    d = delta_from_logits(T_([l0, l1]), temperature).item()
    assert 0.0 <= d <= 1.0


def test_delta_shrinks_with_temperature():
    logits = T_([2.0, -1.0])
    values = [delta_from_logits(logits, t).item() for t in (0.5, 1, 2, 10, 100, 1e6)]
    assert values == sorted(values, reverse=True)
    assert values[-1] < 1e-5


def test_delta_carries_no_gradient():
    logits = T_([1.0, 0.0]).requires_grad_()
    assert not delta_from_logits(logits, 1.0).requires_grad


# lambda and fusion --------------------------------------------------------------------


def test_lambda_examples():
    v = T_([0.5, 0.5, 1.0, 0.0, 0.25, 0.25])
    assert compute_lambda(v, T_([0.1] * 6), T_(0.2)).item() == pytest.approx(0.45, abs=1e-15)
    assert compute_lambda(v, T_([0.0] * 6), T_(-1.5)).item() == -1.5
    assert compute_lambda(v, T_([1, 0, 0, 0, 0, 0]), T_(0.0)).item() == 0.5


def test_lambda_rejects_wrong_indicator_count():
    with pytest.raises(ValueError):
        compute_lambda(T_([1.0] * 5), T_([0.1] * 6), T_(0.0))


@given(st.integers(0, 10_000))
@settings(max_examples=30)
def test_weighted_concat_identity(seed):
    rng = np.random.default_rng(seed)
    h_v, h_a = T_(rng.normal(size=(7, 5))), T_(rng.normal(size=(7, 5)))
    lv, la = T_(rng.normal(size=7)), T_(rng.normal(size=7))
    u = fuse_proposed(h_v, h_a, lv, la).numpy()
    np.testing.assert_array_equal(u[:, :5], (lv[:, None] * h_v).numpy())
    np.testing.assert_array_equal(u[:, 5:], (la[:, None] * h_a).numpy())


def test_fusion_degenerate_cases():
    h_v, h_a = T_([[1.0, 2.0]]), T_([[3.0, 4.0]])
    np.testing.assert_array_equal(fuse_proposed(h_v, h_a, T_([1.0]), T_([0.0])).numpy(), [[1, 2, 0, 0]])
    np.testing.assert_array_equal(fuse_proposed(h_v, h_a, T_([1.0]), T_([1.0])).numpy(), fuse_naive(h_v, h_a).numpy())


def test_hierarchical_gates_are_sigmoids():
    rng = np.random.default_rng(1)
    h_v, h_a = T_(rng.normal(size=(3, 2))), T_(rng.normal(size=(3, 2)))
    W, b = T_(rng.normal(size=(2, 4))), T_(rng.normal(size=2))
    u, gv, ga = fuse_hierarchical(h_v, h_a, W, b)
    z = oracles.dense_loop(np.concatenate([h_v.numpy(), h_a.numpy()], axis=1), W.numpy(), b.numpy())
    np.testing.assert_allclose(gv.numpy(), [oracles.sigmoid(x) for x in z[:, 0]], atol=1e-14)
    np.testing.assert_allclose(u[:, 2:].numpy(), ga.numpy()[:, None] * h_a.numpy(), atol=1e-14)


@pytest.mark.parametrize("fuse", [lambda a, b: fuse_naive(a, b), lambda a, b: fuse_proposed(a, b, T_([1.0]), T_([1.0]))])
def test_fusion_rejects_dimension_mismatch(fuse):
    with pytest.raises(ValueError, match="shape"):
        fuse(T_([[1.0, 2.0]]), T_([[1.0, 2.0, 3.0]]))


# networks ---------------------------------------------------------------------------


TINY = dict(resolution=8, video_channels=(2,), audio_channels=(2,), embedding_dim=4, aux_hidden=4, prefusion_dim=6, postfusion_dim=6)


@pytest.fixture(scope="module")
def samples():
    scenes = generate_synthetic(SyntheticConfig(num_scenes=8, frames_per_scene=8, seed=11))
    tracks = tracks_from_scenes(scenes, 8)
    seqs = sequences_from_tracks(tracks, 10, eval_mode=True)  # 8-frame tracks padded to 10
    rng = np.random.default_rng(0)
    eta = np.concatenate([t.face_count for t in tracks])
    mu = np.concatenate([t.face_area for t in tracks])
    enc = fit_attribute_encoders(eta, mu, rng.integers(0, 2, len(eta)))
    return seqs, enc


def test_output_shapes(samples):
    seqs, enc = samples
    batch = collate(seqs[:3], enc)
    for mode in ("proposed", "naive", "hierarchical"):
        out = ActiveSpeakerNet(ModelConfig(fusion_mode=mode, **TINY), seed=0).forward(batch)
        for p in (out.multimodal, out.video, out.audio):
            assert p.shape == (3, 10, 2)
            np.testing.assert_allclose(p.sum(-1).detach().numpy(), 1.0, atol=1e-12)


def test_embedding_time_invariant_on_constant_input():
    cfg = ModelConfig(resolution=32, video_channels=(8, 16, 32, 64))
    net = ActiveSpeakerNet(cfg, seed=0)
    x = torch.zeros((1, 4, 3, 32, 32), dtype=torch.float64)
    u = net.embed(x, cfg.encoder("video"))
    assert u.shape == (1, 4, 128)
    for t in range(1, 4):
        torch.testing.assert_close(u[0, t], u[0, 0], rtol=0, atol=0)
    xr = torch.rand((2, 5, 3, 32, 32), dtype=torch.float64)
    assert net.embed(xr, cfg.encoder("video")).shape == (2, 5, 128)


def test_embedding_rejects_wrong_geometry():
    cfg = ModelConfig(**TINY)
    net = ActiveSpeakerNet(cfg)
    with pytest.raises(ValueError, match="geometry"):
        net.embed(torch.zeros((1, 2, 3, 16, 16), dtype=torch.float64), cfg.encoder("video"))
    with pytest.raises(ValueError, match="geometry"):
        net.embed(torch.zeros((1, 2, 13, 40), dtype=torch.float64), cfg.encoder("audio"))


def test_aux_zero_weights_are_uniform():
    net = ActiveSpeakerNet(ModelConfig(**TINY))
    for k in ("video.aux.fc2.w",):
        net.store[k].data.zero_()
    p = softmax(net.aux_logits(torch.randn(3, 4, dtype=torch.float64), "video"))
    np.testing.assert_allclose(p.detach().numpy(), 0.5)


def test_proposed_with_unit_lambda_equals_naive(samples):
    seqs, enc = samples
    naive = ActiveSpeakerNet(ModelConfig(fusion_mode="naive", **TINY), seed=5)
    prop = ActiveSpeakerNet(ModelConfig(fusion_mode="proposed", **TINY), seed=5)
    for k in ("video", "audio"):
        prop.store[f"fusion.{k}.w"].data.zero_()
        prop.store[f"fusion.{k}.b"].data.fill_(1.0)
    for i in range(20):
        batch = collate([seqs[i % len(seqs)]], enc)
        a = naive.forward(batch).multimodal
        b = prop.forward(batch).multimodal
        assert torch.max(torch.abs(a - b)).item() <= 1e-12


def test_fusion_state_reconstructs(samples):
    seqs, enc = samples
    net = ActiveSpeakerNet(ModelConfig(fusion_mode="proposed", **TINY), seed=2)
    st_ = net.forward(collate(seqs[:2], enc), return_state=True).state
    recon = torch.cat([st_.lambda_video[..., None] * st_.h_video, st_.lambda_audio[..., None] * st_.h_audio], -1)
    torch.testing.assert_close(recon, st_.fused, rtol=0, atol=0)
    for x in (st_.delta_video, st_.delta_audio, st_.attn_video, st_.attn_audio, st_.enc_eta, st_.enc_mu):
        assert torch.all((x >= 0) & (x <= 1))


def _unrolled_forward(net: ActiveSpeakerNet, sample, enc_eta, enc_mu):
    """Single-sample forward built only from the loop oracles."""
    P = {k: v.detach().numpy() for k, v in net.store.params.items()}
    c = net.config

    def encode(x, modality, shift):
        out = []
        for frame in x:
            z = frame - shift
            for i in range(len(c.video_channels if modality == "video" else c.audio_channels)):
                z = oracles.maxpool2_loop(np.maximum(oracles.conv2d_loop(z, P[f"{modality}.conv{i}.w"], P[f"{modality}.conv{i}.b"]), 0))
            out.append(oracles.dense_loop(z.mean(axis=(1, 2)), P[f"{modality}.proj.w"], P[f"{modality}.proj.b"])[0])
        return np.array(out)

    def bigru(seq, prefix):
        f = oracles.gru_sequence(seq, P[f"{prefix}.fwd.W"], P[f"{prefix}.fwd.U"], P[f"{prefix}.fwd.b"])
        b = oracles.gru_sequence(seq, P[f"{prefix}.bwd.W"], P[f"{prefix}.bwd.U"], P[f"{prefix}.bwd.b"], reverse=True)
        return np.concatenate([f, b], axis=1)

    def aux(u, modality):
        hidden = np.maximum(oracles.dense_loop(u, P[f"{modality}.aux.fc1.w"], P[f"{modality}.aux.fc1.b"]), 0)
        return oracles.dense_loop(hidden, P[f"{modality}.aux.fc2.w"], P[f"{modality}.aux.fc2.b"])

    u_v = encode(sample.video.astype(np.float64), "video", 0.5)
    u_a = encode(sample.audio.astype(np.float64)[:, None], "audio", 0.0)
    h_v, h_a = bigru(u_v, "video.gru"), bigru(u_a, "audio.gru")
    d_v = np.array([2 * (max(oracles.softmax_row(r)) - 0.5) for r in aux(u_v, "video")])
    d_a = np.array([2 * (max(oracles.softmax_row(r)) - 0.5) for r in aux(u_a, "audio")])
    a_v = oracles.attention_diag_loop(h_v, 4, sample.mask)
    a_a = oracles.attention_diag_loop(h_a, 4, sample.mask)
    fused = []
    for t in range(len(h_v)):
        v = [enc_eta[t], enc_mu[t], d_v[t], d_a[t], a_v[t], a_a[t]]
        lam_v = sum(w * x for w, x in zip(P["fusion.video.w"], v)) + P["fusion.video.b"]
        lam_a = sum(w * x for w, x in zip(P["fusion.audio.w"], v)) + P["fusion.audio.b"]
        fused.append(np.concatenate([lam_v * h_v[t], lam_a * h_a[t]]))
    post = bigru(np.array(fused), "post.gru")
    return np.array([oracles.softmax_row(r) for r in oracles.dense_loop(post, P["head.w"], P["head.b"])])


def test_tiny_model_matches_unrolled_oracle(samples):
    seqs, enc = samples
    net = ActiveSpeakerNet(ModelConfig(fusion_mode="proposed", **TINY), seed=9)
    net.store["fusion.video.b"].data.fill_(0.8)
    net.store["fusion.audio.b"].data.fill_(1.1)
    sample = seqs[1]
    batch = collate([sample], enc)
    got = net.forward(batch).multimodal[0].detach().numpy()
    ref = _unrolled_forward(net, sample, batch.enc_eta[0].numpy(), batch.enc_mu[0].numpy())
    assert not sample.mask.all()  # exercises the padded-key path
    np.testing.assert_allclose(got, ref, atol=1e-10, rtol=0)


def test_forward_is_deterministic_per_seed(samples):
    seqs, enc = samples
    batch = collate(seqs[:2], enc)
    a = ActiveSpeakerNet(ModelConfig(**TINY), seed=3).forward(batch).multimodal
    b = ActiveSpeakerNet(ModelConfig(**TINY), seed=3).forward(batch).multimodal
    torch.testing.assert_close(a, b, rtol=0, atol=0)


def test_stream_net_output(samples):
    seqs, enc = samples
    p = StreamNet(ModelConfig(**TINY), "audio").forward(collate(seqs[:2], enc))
    assert p.shape == (2, 10, 2)


@pytest.mark.parametrize(
    "kwargs",
    [dict(fusion_mode="late"), dict(prefusion_dim=7), dict(temperature_video=0.0), dict(attention_window=0)],
)
def test_invalid_model_config(kwargs):
    with pytest.raises(ValueError):
        ModelConfig(**kwargs)


def test_config_round_trip_and_architecture_hash():
    cfg = ModelConfig(**TINY)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    calibrated = ModelConfig(**TINY, temperature_video=2.0)
    assert calibrated.architecture_hash() == cfg.architecture_hash()
    assert ModelConfig(**{**TINY, "embedding_dim": 6}).architecture_hash() != cfg.architecture_hash()
    with pytest.raises(ValueError, match="unknown"):
        ModelConfig.from_dict({"bogus": 1})


def test_init_of_fusion_weights():
    net = ActiveSpeakerNet(ModelConfig(**TINY), seed=0)
    w = net.store["fusion.video.w"].detach().numpy()
    assert w.shape == (6,) and np.all(np.abs(w) <= math.sqrt(6 / 7))
    assert net.store["fusion.video.b"].item() == 0.0
