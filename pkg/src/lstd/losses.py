"""Training objective: reconstruction, prediction, block KLs and the two
disentanglement constraints, combined with weights ``alpha, beta, gamma``."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .priors import dependency_partials, kl_terms

TERMS = ("L_R", "L_P", "L_K_s", "L_K_d", "L_m", "L_s")


@dataclass
class LossWeights:
    alpha: float = 0.1
    beta: float = 0.01
    gamma: float = 0.01

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def ablate(self, term: str) -> "LossWeights":
        """Zero one term: ``Ls`` (LSTD-L1), ``Lm`` (LSTD-L2) or ``KL`` (LSTD-KL)."""
        key = {"Ls": "gamma", "Lm": "alpha", "KL": "beta"}.get(term)
        if key is None:
            raise ValueError(f"unknown ablation term {term!r}; expected Ls, Lm or KL")
        return LossWeights(**{**self.__dict__, key: 0.0})


@dataclass
class LossBreakdown:
    L_R: torch.Tensor
    L_P: torch.Tensor
    L_K_s: torch.Tensor
    L_K_d: torch.Tensor
    L_m: torch.Tensor
    L_s: torch.Tensor
    total: torch.Tensor

    def as_dict(self):
        return {k: float(torch.as_tensor(getattr(self, k)).detach()) for k in TERMS + ("total",)}


def _mse(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a - b) ** 2).mean()


def reconstruction_loss(x_recon, x_true):
    return _mse(x_recon, x_true)


def prediction_loss(x_pred, x_future):
    return _mse(x_pred, x_future)


def association_matrix(z_block):
    """Row-wise softmax of ``z z^T / sqrt(n)`` over the time axis."""
    n = z_block.shape[-1]
    logits = z_block @ z_block.transpose(-1, -2) / math.sqrt(n)
    return torch.softmax(logits, dim=-1)


def split_halves(z_full):
    H = z_full.shape[-2]
    if H < 2:
        raise ValueError("smooth constraint needs H >= 2")
    # odd H: the middle step belongs to the first half, which is then
    # truncated by one so both halves have H // 2 steps
    m = H // 2
    return z_full[..., :m, :], z_full[..., H - m :, :]


def smooth_constraint(z_s_full):
    """Frobenius distance between the association matrices of the two halves
    (averaged over any batch axes)."""
    head, tail = split_halves(z_s_full)
    diff = association_matrix(head) - association_matrix(tail)
    return torch.linalg.matrix_norm(diff, ord="fro").mean()


def interrupted_dependency_constraint(bank_d, z_d_full, create_graph=True):
    """Sum of ``|d eps_{H,i} / d z_{tau-1,j}|`` over ``i, j`` and
    ``tau = 2..H-1`` (averaged over batch axes)."""
    H = z_d_full.shape[-2]
    if H < 3:
        raise ValueError("interrupted dependency constraint needs H >= 3")
    parts = dependency_partials(bank_d, z_d_full, create_graph=create_graph)[..., :-1, :, :]
    bad = ~torch.isfinite(parts)
    if bool(bad.any()):
        t, i, j = torch.nonzero(bad)[0].tolist()[-3:]
        raise FloatingPointError(f"non-finite dependency partial at (i={i}, j={j}, tau={t + 2})")
    return parts.abs().sum((-1, -2, -3)).mean()


def total_loss(parts, w: LossWeights) -> LossBreakdown:
    """``parts`` maps term names to scalars (tensors or floats)."""
    vals = {}
    for k in TERMS:
        v = parts[k]
        v = v if torch.is_tensor(v) else torch.tensor(float(v), dtype=torch.float64)
        if not bool(torch.isfinite(v).all()):
            raise FloatingPointError(f"loss term {k} is not finite")
        vals[k] = v
    total = (
        vals["L_R"]
        + vals["L_P"]
        + w.beta * (vals["L_K_s"] + vals["L_K_d"])
        + w.alpha * vals["L_m"]
        + w.gamma * vals["L_s"]
    )
    return LossBreakdown(**vals, total=total)


def lstd_loss(model, x_window, weights: LossWeights, eta=None, prior_over_horizon=False, kl_reduction="mean"):
    """Full objective for windows ``(B, H, D)``.

    Terms whose weight is zero are still reported but computed without
    building second-order graphs.
    """
    c = model.config
    x_hist, x_future = x_window[:, : c.lookback], x_window[:, c.lookback :]
    eta_s, eta_d = eta if eta is not None else model.sample_eta(x_window.shape[0])
    post, out = model(x_hist, eta_s, eta_d)
    fs = out.z_s_future if prior_over_horizon else None
    fd = out.z_d_future if prior_over_horizon else None
    kl_s, kl_d = kl_terms(post, model.prior_s, model.prior_d, fs, fd, reduction=kl_reduction)
    z_d = out.z_d_full if prior_over_horizon else post.samples_d
    if weights.gamma > 0:
        l_s = interrupted_dependency_constraint(model.prior_d, z_d)
    else:
        l_s = interrupted_dependency_constraint(model.prior_d, z_d.detach(), create_graph=False).detach()
    parts = {
        "L_R": reconstruction_loss(out.x_recon, x_hist),
        "L_P": prediction_loss(out.x_pred, x_future),
        "L_K_s": kl_s,
        "L_K_d": kl_d,
        "L_m": smooth_constraint(out.z_s_full),
        "L_s": l_s,
    }
    return total_loss(parts, weights), post, out
