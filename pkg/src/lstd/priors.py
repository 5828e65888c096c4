"""Flow-style temporal priors over latent sequences.

A residual bank maps ``(z_t, z_{t-1})`` to noise estimates ``eps_t`` where
component ``i`` only sees its own current coordinate ``z_{t,i}``.  The map
``(z_{t-1}, z_t) -> (z_{t-1}, eps_t)`` is therefore block lower triangular
and its log-determinant is the sum of the diagonal partials
``log |d eps_{t,i} / d z_{t,i}|``.
"""

from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F

LOG_2PI = math.log(2 * math.pi)
DIAG_FLOOR = 1e-12


class SingularJacobianError(FloatingPointError):
    pass


def std_normal_logpdf(x):
    return -0.5 * (x**2 + LOG_2PI)


class ResidualBank(nn.Module):
    """Base class: subclasses implement ``forward(z_t, z_prev) -> eps``.

    Inputs have shape ``(..., n)``; output ``eps[..., i]`` must depend on
    ``z_t`` only through ``z_t[..., i]``.
    """

    n: int

    def residuals(self, z_t, z_prev):
        if z_t.shape[-1] != self.n or z_prev.shape[-1] != self.n:
            raise ValueError(
                f"bank expects {self.n} latent dims, got {z_t.shape[-1]} and {z_prev.shape[-1]}"
            )
        return self(z_t, z_prev)


class LinearResidualBank(ResidualBank):
    """``eps_i = scale_i * z_{t,i} - (lag @ z_prev)_i``.

    Covers the closed-form cases: identity (scale 1, lag 0), AR(1) inverses
    and pure scalings.
    """

    def __init__(self, n, scale=1.0, lag=0.0, dtype=None):
        super().__init__()
        self.n = n
        dtype = dtype or torch.get_default_dtype()
        scale = torch.as_tensor(scale, dtype=dtype)
        lag = torch.as_tensor(lag, dtype=dtype)
        if lag.dim() < 2:
            lag = lag * torch.eye(n, dtype=dtype)
        self.scale = nn.Parameter(scale.expand(n).clone())
        self.lag = nn.Parameter(lag.clone())

    def forward(self, z_t, z_prev):
        return self.scale * z_t - z_prev @ self.lag.T


class MLPResidualBank(ResidualBank):
    """Per-dimension networks ``eps_i = z_{t,i} + mlp_i([z_{t,i}, z_prev])``.

    All ``n`` networks are evaluated at once with stacked weights.  The skip
    connection keeps every diagonal partial at 1 at initialization; the last
    layer starts at ``out_scale`` times its fan-in initialization.
    """

    def __init__(self, n, hidden=128, depth=3, slope=0.2, out_scale=0.1):
        super().__init__()
        self.n = n
        self.slope = slope
        sizes = [n + 1] + [hidden] * depth + [1]
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / math.sqrt(a)
            w = torch.empty(n, a, b).uniform_(-bound, bound)
            bias = torch.empty(n, b).uniform_(-bound, bound)
            if k == len(sizes) - 2:
                w = w * out_scale
                bias = bias * out_scale
            self.weights.append(nn.Parameter(w))
            self.biases.append(nn.Parameter(bias))

    def forward(self, z_t, z_prev):
        # (..., n, 1 + n): own coordinate first, then the whole previous block
        prev = z_prev.unsqueeze(-2).expand(*z_prev.shape[:-1], self.n, self.n)
        h = torch.cat([z_t.unsqueeze(-1), prev], dim=-1)
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = torch.einsum("...ia,iab->...ib", h, w) + b
            if k < last:
                h = F.leaky_relu(h, self.slope)
        return z_t + h.squeeze(-1)


def _grad_ready(z):
    if z.requires_grad:
        return z
    return z.detach().requires_grad_(True)


def diagonal_partials(bank, z_t, z_prev, create_graph=True):
    """Returns ``(eps, d eps_i / d z_{t,i})``; valid because the current-step
    Jacobian is diagonal by construction."""
    with torch.enable_grad():
        z_t = _grad_ready(z_t)
        eps = bank.residuals(z_t, z_prev)
        (diag,) = torch.autograd.grad(eps.sum(), z_t, create_graph=create_graph)
    return eps, diag


def _checked_logabs(diag):
    small = diag.abs() < DIAG_FLOOR
    if bool(small.any()):
        idx = tuple(torch.nonzero(small)[0].tolist())
        raise SingularJacobianError(
            f"diagonal partial below {DIAG_FLOOR:g} at index {idx}: residual map is not invertible there"
        )
    return diag.abs().log()


def jacobian_logdet(bank, z_t, z_prev, create_graph=True):
    """``sum_i log |d r_i / d z_{t,i}|`` over the last axis."""
    _, diag = diagonal_partials(bank, z_t, z_prev, create_graph=create_graph)
    return _checked_logabs(diag).sum(-1)


def transition_terms(bank, z_seq, create_graph=True):
    """Per-element log-density contributions, shape ``(..., T, n)``.

    Row 0 is the standard-normal initial step; row ``t`` holds
    ``log N(eps_{t,i}) + log |d r_i / d z_{t,i}|``.
    """
    if z_seq.shape[-2] < 2:
        raise ValueError("transition_log_prob needs T >= 2")
    eps, diag = diagonal_partials(bank, z_seq[..., 1:, :], z_seq[..., :-1, :], create_graph)
    steps = std_normal_logpdf(eps) + _checked_logabs(diag)
    first = std_normal_logpdf(z_seq[..., :1, :])
    return torch.cat([first, steps], dim=-2)


def transition_log_prob(bank, z_seq, create_graph=True):
    """``log p(z_1) + sum_t [sum_i log N(eps_{t,i}) + logdet_t]`` for ``(..., T, n)``."""
    return transition_terms(bank, z_seq, create_graph).sum((-1, -2))


def gaussian_log_density(z, mean, logvar):
    return -0.5 * (LOG_2PI + logvar + (z - mean) ** 2 * torch.exp(-logvar))


def block_kl(bank, samples, mean, logvar, future=None, reduction="mean"):
    """Monte Carlo ``E_q[log q - log p]`` for one latent block.

    ``samples``: ``(k, ..., L, n)`` or ``(..., L, n)`` reparameterized draws.
    When ``future`` latents ``(..., H-L, n)`` are given, the prior scores the
    concatenated sequence; ``log q`` only covers the sampled steps.
    ``reduction="mean"`` divides by the number of prior-scored elements;
    ``"sum"`` returns the sequence total.  Either way it is averaged over
    draws and batch.
    """
    log_q = gaussian_log_density(samples, mean, logvar).sum((-1, -2))
    seq = samples if future is None else torch.cat([samples, future], dim=-2)
    log_p = transition_log_prob(bank, seq)
    kl = log_q - log_p
    if reduction == "mean":
        kl = kl / (seq.shape[-2] * seq.shape[-1])
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return kl.mean()


def kl_terms(posterior, bank_s, bank_d, future_s=None, future_d=None, reduction="mean"):
    """Returns ``(L_K^s, L_K^d)`` from a ``LatentPosterior``."""
    kl_s = block_kl(bank_s, posterior.samples_s, posterior.mean_s, posterior.logvar_s, future_s, reduction)
    kl_d = block_kl(bank_d, posterior.samples_d, posterior.mean_d, posterior.logvar_d, future_d, reduction)
    return kl_s, kl_d


def lag_jacobians(bank, z_seq, create_graph=True):
    """Partials of each step's residual w.r.t. the previous step.

    Returns ``(diag, jac)`` with ``diag[..., t-1, i] = d eps_{t,i}/d z_{t,i}``
    and ``jac[..., t-1, i, j] = d eps_{t,i}/d z_{t-1,j}`` for ``t = 2..T``.
    """
    with torch.enable_grad():
        z_t = _grad_ready(z_seq[..., 1:, :])
        z_prev = _grad_ready(z_seq[..., :-1, :])
        eps = bank.residuals(z_t, z_prev)
        (diag,) = torch.autograd.grad(eps.sum(), z_t, create_graph=True)
        rows = []
        for i in range(bank.n):
            (g,) = torch.autograd.grad(
                eps[..., i].sum(), z_prev, create_graph=create_graph, retain_graph=True
            )
            rows.append(g)
    if not create_graph:
        diag = diag.detach()
    return diag, torch.stack(rows, dim=-2)


def dependency_partials(bank, z_seq, create_graph=True):
    """``d eps_{T,i} / d z_{t,j}`` for ``t = 1..T-1`` through the unrolled chain.

    Earlier steps reach ``eps_T`` through the recursion implied by the bank:
    with the intermediate noise held fixed, ``z_k`` responds to ``z_{k-1}``
    as ``-diag(d r/d z_k)^{-1} d r/d z_{k-1}`` (implicit function theorem);
    ``z_T`` is held fixed.  Returns ``(..., T-1, n, n)`` indexed
    ``[t, i, j]`` (0-based ``t``).
    """
    T = z_seq.shape[-2]
    if T < 2:
        raise ValueError("need at least two steps")
    diag, jac = lag_jacobians(bank, z_seq, create_graph)
    # reverse-mode accumulation: v holds d eps_T / d z_k as rows i
    v = jac[..., -1, :, :]
    out = [v]
    for k in range(T - 2, 0, -1):
        # step k (0-based) responds to step k-1 via residual at k: jac[..., k-1]
        local = -jac[..., k - 1, :, :] / diag[..., k - 1, :].unsqueeze(-1)
        v = v @ local
        out.append(v)
    out.reverse()
    return torch.stack(out, dim=-3)
