import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import trapezoid
from scipy.optimize import brentq
from scipy.stats import norm

from lstd.priors import (
    LinearResidualBank,
    MLPResidualBank,
    SingularJacobianError,
    block_kl,
    dependency_partials,
    jacobian_logdet,
    transition_log_prob,
)

DT = torch.float64


def mlp_bank(n, seed, **kw):
    torch.manual_seed(seed)
    return MLPResidualBank(n, hidden=kw.pop("hidden", 16), depth=kw.pop("depth", 2), **kw).to(DT)


def fd_jacobian(f, x, h=1e-6):
    """Central-difference Jacobian of a numpy function ``f: R^m -> R^k``."""
    cols = []
    for e in np.eye(len(x)):
        cols.append((f(x + h * e) - f(x - h * e)) / (2 * h))
    return np.stack(cols, axis=1)


def residual_np(bank, z_t, z_prev):
    with torch.no_grad():
        out = bank.residuals(torch.as_tensor(z_t, dtype=DT), torch.as_tensor(z_prev, dtype=DT))
    return out.numpy()


class TestResiduals:
    def test_identity(self):
        bank = LinearResidualBank(3).to(DT)
        z = torch.randn(5, 3, dtype=DT)
        torch.testing.assert_close(bank.residuals(z, torch.randn(5, 3, dtype=DT)), z)

    def test_ar1_fixed_point(self):
        bank = LinearResidualBank(2, lag=1.0).to(DT)
        z = torch.randn(4, 2, dtype=DT)
        assert bank.residuals(z, z).abs().max() == 0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="latent dims"):
            LinearResidualBank(2).residuals(torch.zeros(3), torch.zeros(2))

    @given(seed=st.integers(0, 10_000), n=st.integers(1, 4))
    @settings(max_examples=25, deadline=None)
    def test_triangular(self, seed, n):
        bank = mlp_bank(n, seed)
        rng = np.random.default_rng(seed)
        z_t, z_prev = rng.standard_normal(n), rng.standard_normal(n)
        J = fd_jacobian(lambda a: residual_np(bank, a, z_prev), z_t)
        off = J[~np.eye(n, dtype=bool)]
        assert np.abs(off).max(initial=0.0) < 1e-8
        assert np.all(np.diag(J) > 0)


class TestLogdet:
    def test_identity_zero(self):
        bank = LinearResidualBank(3).to(DT)
        assert jacobian_logdet(bank, torch.randn(3, dtype=DT), torch.randn(3, dtype=DT)).item() == 0.0

    def test_constant_diagonal(self):
        bank = LinearResidualBank(3, scale=2.0, lag=1.0).to(DT)
        val = jacobian_logdet(bank, torch.randn(3, dtype=DT), torch.randn(3, dtype=DT))
        assert val.item() == pytest.approx(3 * math.log(2), abs=1e-12)

    def test_singular_raises(self):
        bank = LinearResidualBank(2, scale=0.0).to(DT)
        with pytest.raises(SingularJacobianError):
            jacobian_logdet(bank, torch.randn(2, dtype=DT), torch.randn(2, dtype=DT))

    @given(seed=st.integers(0, 10_000), n=st.integers(1, 4))
    @settings(max_examples=25, deadline=None)
    def test_matches_dense_determinant(self, seed, n):
        bank = mlp_bank(n, seed)
        rng = np.random.default_rng(seed + 1)
        z_prev, z_t = rng.standard_normal(n), rng.standard_normal(n)

        def block_map(v):
            return np.concatenate([v[:n], residual_np(bank, v[n:], v[:n])])

        dense = np.linalg.slogdet(fd_jacobian(block_map, np.concatenate([z_prev, z_t])))[1]
        fast = jacobian_logdet(bank, torch.tensor(z_t), torch.tensor(z_prev)).item()
        assert fast == pytest.approx(dense, abs=1e-6)


class TestTransitionLogProb:
    def test_identity_factorizes(self):
        bank = LinearResidualBank(1).to(DT)
        z = torch.randn(2, 1, dtype=DT)
        expected = norm.logpdf(z.numpy()).sum()
        assert transition_log_prob(bank, z).item() == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("a,s", [(0.5, 1.0), (-0.9, 1.0), (0.3, 2.5)])
    def test_ar1_closed_form(self, a, s):
        bank = LinearResidualBank(1, scale=s, lag=a).to(DT)
        z = np.random.default_rng(0).standard_normal((6, 1))
        expected = norm.logpdf(z[0, 0]) + sum(
            norm.logpdf(z[t, 0], loc=a / s * z[t - 1, 0], scale=1 / s) for t in range(1, 6)
        )
        got = transition_log_prob(bank, torch.tensor(z)).item()
        assert got == pytest.approx(expected, abs=1e-6)

    def test_batch_axes(self):
        bank = mlp_bank(2, 0)
        z = torch.randn(3, 5, 4, 2, dtype=DT)
        out = transition_log_prob(bank, z)
        assert out.shape == (3, 5)
        torch.testing.assert_close(out[1, 2], transition_log_prob(bank, z[1, 2]))

    def test_needs_two_steps(self):
        with pytest.raises(ValueError):
            transition_log_prob(LinearResidualBank(1), torch.zeros(1, 1))

    @pytest.mark.parametrize("make", [
        lambda: LinearResidualBank(1, scale=1.7).to(DT),
        lambda: LinearResidualBank(1, scale=0.8, lag=0.6).to(DT),
        lambda: mlp_bank(1, 3),
    ])
    def test_normalizes(self, make):
        bank = make()
        grid = np.linspace(-12, 12, 801)
        a, b = np.meshgrid(grid, grid, indexing="ij")
        seq = torch.tensor(np.stack([a, b], axis=-1)[..., None])
        with torch.no_grad():
            dens = torch.exp(transition_log_prob(bank, seq, create_graph=False)).numpy()
        total = trapezoid(trapezoid(dens, grid, axis=1), grid)
        assert total == pytest.approx(1.0, abs=0.02)


class TestKL:
    def test_matched_is_zero(self):
        bank = LinearResidualBank(2).to(DT)
        samples = torch.randn(10_000, 4, 2, dtype=DT)
        zero = torch.zeros(4, 2, dtype=DT)
        assert abs(block_kl(bank, samples, zero, zero).item()) < 1e-10

    def test_shifted_mean(self):
        mu, L, n, k = 0.7, 3, 2, 10_000
        bank = LinearResidualBank(n).to(DT)
        gen = torch.Generator().manual_seed(0)
        mean = torch.full((L, n), mu, dtype=DT)
        samples = mean + torch.randn(k, L, n, generator=gen, dtype=DT)
        est = block_kl(bank, samples, mean, torch.zeros(L, n, dtype=DT)).item()
        sigma = mu / math.sqrt(L * n * k)
        assert abs(est - mu**2 / 2) < 3 * sigma

    def test_sum_reduction(self):
        bank = LinearResidualBank(2).to(DT)
        mean = torch.full((3, 2), 0.5, dtype=DT)
        samples = mean + torch.randn(50, 3, 2, dtype=DT)
        lv = torch.zeros(3, 2, dtype=DT)
        torch.testing.assert_close(block_kl(bank, samples, mean, lv, reduction="sum"),
                                   6 * block_kl(bank, samples, mean, lv))
        with pytest.raises(ValueError):
            block_kl(bank, samples, mean, lv, reduction="max")

    def test_variance_scales_with_k(self):
        bank = LinearResidualBank(1).to(DT)
        mean = torch.full((2, 1), 1.0, dtype=DT)
        lv = torch.zeros(2, 1, dtype=DT)
        gen = torch.Generator().manual_seed(1)

        def spread(k, reps=800):
            vals = [block_kl(bank, mean + torch.randn(k, 2, 1, generator=gen, dtype=DT), mean, lv).item()
                    for _ in range(reps)]
            return np.var(vals)

        ratio = spread(1) / spread(16)
        assert 11 < ratio < 22

    def test_future_scored_by_prior(self):
        bank = LinearResidualBank(1).to(DT)
        zero = torch.zeros(2, 1, dtype=DT)
        samples = torch.randn(2, 1, dtype=DT)
        future = torch.randn(3, 1, dtype=DT)
        got = block_kl(bank, samples, zero, zero, future=future, reduction="sum").item()
        # log q cancels the first two prior terms; the future adds -log N
        assert got == pytest.approx(-norm.logpdf(future.numpy()).sum(), abs=1e-10)


def implied_chain_eps(bank, z, t, j, delta):
    """Perturb ``z[t, j]`` and propagate through ``r(z_k, z_{k-1}) = eps_k``
    with the noise fixed for ``k = t+1 .. T-2``; the last step stays fixed."""
    z = z.copy()
    T, n = z.shape
    eps = [residual_np(bank, z[k], z[k - 1]) for k in range(T)]
    z[t, j] += delta
    for k in range(t + 1, T - 1):
        for i in range(n):
            def f(a):
                zk = z[k].copy()
                zk[i] = a
                return residual_np(bank, zk, z[k - 1])[i] - eps[k][i]
            z[k, i] = brentq(f, -50, 50, xtol=1e-14)
    return residual_np(bank, z[T - 1], z[T - 2])


class TestDependencyPartials:
    def test_current_step_only_is_zero(self):
        bank = LinearResidualBank(2, scale=1.5).to(DT)
        parts = dependency_partials(bank, torch.randn(5, 2, dtype=DT))
        assert parts.abs().max() == 0

    def test_ar1_geometric(self):
        c = 0.6
        bank = LinearResidualBank(1, lag=c, dtype=DT)
        parts = dependency_partials(bank, torch.randn(6, 1, dtype=DT))[:, 0, 0]
        expected = [-(c ** (6 - t)) for t in range(1, 6)]
        np.testing.assert_allclose(parts.detach().numpy(), expected, rtol=1e-12)

    @pytest.mark.parametrize("seed", [0, 1])
    def test_matches_root_finding_oracle(self, seed):
        bank = mlp_bank(2, seed, out_scale=1.0)
        z = np.random.default_rng(seed).standard_normal((5, 2))
        parts = dependency_partials(bank, torch.tensor(z)).detach().numpy()
        h = 1e-5
        for t in range(4):
            for j in range(2):
                fd = (implied_chain_eps(bank, z, t, j, h) - implied_chain_eps(bank, z, t, j, -h)) / (2 * h)
                np.testing.assert_allclose(parts[t, :, j], fd, rtol=1e-3, atol=1e-8)

    def test_batched(self):
        bank = mlp_bank(2, 4)
        z = torch.randn(3, 6, 2, dtype=DT)
        parts = dependency_partials(bank, z)
        assert parts.shape == (3, 5, 2, 2)
        torch.testing.assert_close(parts[2], dependency_partials(bank, z[2]))
