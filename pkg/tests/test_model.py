import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lstd.model import (
    LOGVAR_MIN,
    LSTDModel,
    ModelConfig,
    count_parameters,
    load_checkpoint,
    reparameterize,
    save_checkpoint,
)

DT = torch.float64


def small_config(**kw):
    base = dict(lookback=5, horizon=8, n_s=2, n_d=2, obs_dim=3, conv_channels=6, encoder_hidden=8,
                transition_hidden=8, decoder_widths=(8,), predictor_widths=(8,), prior_hidden=8, prior_depth=2)
    base.update(kw)
    return ModelConfig(**base)


def make(seed=0, jitter=0.0, **kw):
    torch.manual_seed(seed)
    model = LSTDModel(small_config(**kw)).to(DT)
    if jitter:
        with torch.no_grad():
            for p in model.parameters():
                p.add_(jitter * torch.randn_like(p))
    return model


def zero_params(model):
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    return model


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(lookback=8, horizon=8), dict(lookback=0), dict(n_s=0),
                                    dict(decoder_widths=(0,)), dict(mode="space")])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            small_config(**kw)

    def test_pred_len_and_dict(self):
        cfg = small_config()
        assert cfg.pred_len == 3
        assert ModelConfig(**cfg.to_dict()) == cfg


class TestReparameterize:
    def test_clamped_limit(self):
        mean = torch.tensor([0.3, -1.0], dtype=DT)
        out = reparameterize(mean, torch.full((2,), -1e9, dtype=DT), torch.ones(2, dtype=DT))
        torch.testing.assert_close(out, mean + math.exp(0.5 * LOGVAR_MIN))

    def test_unit(self):
        out = reparameterize(torch.zeros(2), torch.zeros(2), torch.tensor([1.0, -1.0]))
        assert out.tolist() == [1.0, -1.0]

    def test_variance(self):
        gen = torch.Generator().manual_seed(0)
        eta = torch.randn(100_000, generator=gen, dtype=DT)
        out = reparameterize(torch.zeros(1, dtype=DT), torch.full((1,), math.log(4), dtype=DT), eta[:, None])
        assert out.var().item() == pytest.approx(4.0, abs=0.1)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            reparameterize(torch.zeros(2), torch.zeros(3), torch.zeros(2))


class TestEncode:
    def test_zero_initialized_heads(self):
        model = make()
        x = torch.randn(4, 5, 3, dtype=DT)
        eta_s, eta_d = model.sample_eta(4)
        post = model.encode(x, eta_s, eta_d)
        assert post.mean_s.abs().max() == 0 and post.logvar_d.abs().max() == 0
        torch.testing.assert_close(post.samples_s, eta_s)
        torch.testing.assert_close(post.samples_d, eta_d)

    def test_deterministic(self):
        model = make(jitter=0.1)
        x = torch.randn(2, 5, 3, dtype=DT)
        a, b = model.encode(x), model.encode(x)
        assert torch.equal(a.mean_s, b.mean_s) and torch.equal(a.logvar_d, b.logvar_d)

    def test_unbatched_input(self):
        model = make(jitter=0.1)
        x = torch.randn(5, 3, dtype=DT)
        torch.testing.assert_close(model.encode(x).mean_s, model.encode(x[None]).mean_s)

    def test_wrong_shape(self):
        with pytest.raises(ValueError, match="expected window"):
            make().encode(torch.zeros(1, 4, 3, dtype=DT))

    @pytest.mark.parametrize("mode", ["time", "feature"])
    def test_jvp_matches_finite_differences(self, mode):
        model = make(3, jitter=0.2, mode=mode)
        x = torch.randn(1, 5, 3, dtype=DT)
        v = torch.zeros_like(x)
        v[0, 2, 1] = 1.0
        h = 1e-3

        def f(inp):
            post = model.encode(inp)
            return torch.cat([post.mean_s, post.logvar_s, post.mean_d, post.logvar_d], -1)

        _, jvp = torch.autograd.functional.jvp(f, x, v)
        fd = (f(x + h * v) - f(x - h * v)) / (2 * h)
        assert ((jvp - fd).norm() / jvp.norm()).item() < 1e-3


class TestHeads:
    def test_transitions_zero_weights(self):
        model = zero_params(make())
        z = torch.randn(2, 5, 2, dtype=DT)
        assert model.transition_long(z).abs().max() == 0
        assert model.transition_short(z).abs().max() == 0

    def test_transition_shapes(self):
        model = make(jitter=0.1)
        assert model.transition_long(torch.randn(3, 5, 2, dtype=DT)).shape == (3, 3, 2)
        assert model.transition_short(torch.randn(5, 2, dtype=DT)).shape == (3, 2)
        with pytest.raises(ValueError):
            model.transition_long(torch.randn(4, 2, dtype=DT))

    @pytest.mark.parametrize("name", ["transition_long", "transition_short"])
    def test_transition_gradient(self, name):
        model = make(1, jitter=0.3)
        fn = getattr(model, name)
        z = torch.randn(5, 2, dtype=DT, requires_grad=True)
        (g,) = torch.autograd.grad(fn(z).sum(), z)
        fd = torch.zeros_like(z)
        h = 1e-5
        with torch.no_grad():
            for idx in np.ndindex(5, 2):
                e = torch.zeros_like(z)
                e[idx] = h
                fd[idx] = (fn(z + e).sum() - fn(z - e).sum()) / (2 * h)
        assert ((g - fd).norm() / fd.norm()).item() < 1e-3

    @pytest.mark.parametrize("name", ["decode_history", "predict_future"])
    def test_decoders(self, name):
        model = make(2, jitter=0.3)
        fn = getattr(model, name)
        zs, zd = torch.randn(4, 5, 2, dtype=DT), torch.randn(4, 5, 2, dtype=DT)
        perm = torch.tensor([2, 0, 3, 1])
        torch.testing.assert_close(fn(zs, zd)[perm], fn(zs[perm], zd[perm]))
        zs.requires_grad_(True)
        (g,) = torch.autograd.grad(fn(zs, zd).sum(), zs)
        fd = torch.zeros_like(zs)
        h = 1e-5
        with torch.no_grad():
            for idx in np.ndindex(*zs.shape):
                e = torch.zeros_like(zs)
                e[idx] = h
                fd[idx] = (fn(zs + e, zd).sum() - fn(zs - e, zd).sum()) / (2 * h)
        assert ((g - fd).norm() / fd.norm()).item() < 1e-3
        with pytest.raises(ValueError):
            fn(zs, zd[:, :4])
        zero_params(model)
        assert fn(zs, zd).abs().max() == 0


class TestForward:
    def test_zero_model(self):
        model = zero_params(make())
        _, out = model(torch.randn(2, 5, 3, dtype=DT), *model.sample_eta(2))
        assert out.x_recon.abs().max() == 0 and out.x_pred.abs().max() == 0

    def test_fixed_eta_deterministic(self):
        model = make(jitter=0.2)
        x = torch.randn(2, 5, 3, dtype=DT)
        eta = model.sample_eta(2, generator=torch.Generator().manual_seed(0))
        _, a = model(x, *eta)
        _, b = model(x, *eta)
        assert torch.equal(a.x_pred, b.x_pred) and torch.equal(a.z_d_full, b.z_d_full)

    @given(L=st.integers(1, 6), extra=st.integers(1, 5), n_s=st.integers(1, 3), n_d=st.integers(1, 3),
           D=st.integers(1, 4), B=st.integers(1, 3), mode=st.sampled_from(["time", "feature"]))
    @settings(max_examples=30, deadline=None)
    def test_shape_closure(self, L, extra, n_s, n_d, D, B, mode):
        cfg = ModelConfig(lookback=L, horizon=L + extra, n_s=n_s, n_d=n_d, obs_dim=D, conv_channels=4,
                          encoder_hidden=4, transition_hidden=4, prior_hidden=4, prior_depth=1,
                          decoder_widths=(4,), predictor_widths=(4,), mode=mode)
        model = LSTDModel(cfg)
        post, out = model(torch.randn(B, L, D), *model.sample_eta(B))
        assert post.samples_s.shape == (B, L, n_s) and post.samples_d.shape == (B, L, n_d)
        assert out.z_s_future.shape == (B, extra, n_s) and out.z_d_future.shape == (B, extra, n_d)
        assert out.x_recon.shape == (B, L, D) and out.x_pred.shape == (B, extra, D)
        assert out.z_s_full.shape == (B, L + extra, n_s)

    def test_sample_eta_shapes(self):
        model = make()
        eta_s, eta_d = model.sample_eta(3, k=4)
        assert eta_s.shape == (4, 3, 5, 2) and eta_d.dtype == DT


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = make(jitter=0.2, mode="feature")
        save_checkpoint(model, tmp_path / "m.pt", extra={"rounds": 3})
        back, extra = load_checkpoint(tmp_path / "m.pt")
        assert extra == {"rounds": 3} and back.config == model.config
        x = torch.randn(2, 5, 3, dtype=DT)
        torch.testing.assert_close(back.encode(x).mean_s, model.encode(x).mean_s)
        blob = torch.load(tmp_path / "m.pt", weights_only=False)
        assert blob["version"] == 1
        assert any(k.startswith("priors.prior_d.") for k in blob["state"])
        assert all(k.split(".")[0] in ("network", "priors") for k in blob["state"])

    def test_bad_version(self, tmp_path):
        torch.save({"version": 99}, tmp_path / "bad.pt")
        with pytest.raises(ValueError, match="version"):
            load_checkpoint(tmp_path / "bad.pt")

    def test_count(self):
        model = make()
        assert count_parameters(model) == sum(p.numel() for p in model.parameters())
