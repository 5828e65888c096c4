"""Disentanglement scoring against known latents and the intervention trace."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import pdist
from sklearn.kernel_ridge import KernelRidge

from .priors import dependency_partials


def _whiten(train, test, tol=1e-10):
    mu = train.mean(0)
    cov = np.atleast_2d(np.cov(train - mu, rowvar=False))
    vals, vecs = np.linalg.eigh(cov)
    keep = vals > tol * max(vals.max(), 1e-300)
    if not keep.any():
        return None, None
    w = vecs[:, keep] / np.sqrt(vals[keep])
    return (train - mu) @ w, (test - mu) @ w


def block_r2(z_est, z_true, ridge=1e-3, train_frac=0.7, seed=0, max_samples=3000):
    """Held-out R^2 of an RBF kernel ridge regression from ``z_est`` to each
    column of ``z_true``.

    Inputs are whitened on the training split, so the score is invariant to
    invertible linear maps of ``z_est``; the bandwidth is the median pairwise
    distance of the whitened training inputs.
    """
    z_est = np.asarray(z_est, dtype=np.float64)
    z_true = np.asarray(z_true, dtype=np.float64)
    if z_est.ndim == 1:
        z_est = z_est[:, None]
    if z_true.ndim == 1:
        z_true = z_true[:, None]
    T, k = z_est.shape
    if T <= 10 * (k + 1):
        raise ValueError(f"need more than {10 * (k + 1)} samples for {k} regressors, got {T}")
    rng = np.random.default_rng(seed)
    idx = rng.permutation(T)[: min(T, max_samples)]
    n_train = int(round(train_frac * len(idx)))
    tr, te = idx[:n_train], idx[n_train:]
    x_tr, x_te = _whiten(z_est[tr], z_est[te])
    m = z_true.shape[1]
    if x_tr is None:
        warnings.warn("z_est has zero variance; reporting R^2 = 0", RuntimeWarning, stacklevel=2)
        return np.zeros(m)
    med = np.median(pdist(x_tr))
    gamma = 1.0 / (2.0 * med**2) if med > 0 else 1.0
    y_mu, y_sd = z_true[tr].mean(0), z_true[tr].std(0)
    y_sd = np.where(y_sd > 0, y_sd, 1.0)
    reg = KernelRidge(alpha=ridge, kernel="rbf", gamma=gamma)
    reg.fit(x_tr, (z_true[tr] - y_mu) / y_sd)
    pred = reg.predict(x_te) * y_sd + y_mu
    y_te = z_true[te]
    sse = ((y_te - pred) ** 2).sum(0)
    sst = ((y_te - y_te.mean(0)) ** 2).sum(0)
    return np.where(sst > 0, 1.0 - sse / np.where(sst > 0, sst, 1.0), 0.0)


def mcc(z_est, z_true):
    """Mean absolute Pearson correlation under the best one-to-one matching."""
    z_est = np.asarray(z_est, dtype=np.float64)
    z_true = np.asarray(z_true, dtype=np.float64)
    if z_est.shape[1] != z_true.shape[1]:
        raise ValueError("mcc needs equal dimension counts")
    k = z_est.shape[1]
    a = z_est - z_est.mean(0)
    b = z_true - z_true.mean(0)
    sa, sb = np.linalg.norm(a, axis=0), np.linalg.norm(b, axis=0)
    denom = np.outer(sa, sb)
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.where(denom > 0, np.abs(a.T @ b) / np.where(denom > 0, denom, 1.0), 0.0)
    rows, cols = linear_sum_assignment(-corr)
    return float(corr[rows, cols].sum() / k)


@dataclass
class IdentifiabilityReport:
    r2_within_long: float
    r2_within_short: float
    r2_cross_ls: float
    r2_cross_sl: float
    mcc_long: float
    mcc_short: float
    n_samples: int

    @property
    def cross(self):
        """Worst cross-block leakage."""
        return max(self.r2_cross_ls, self.r2_cross_sl)

    def to_dict(self):
        d = asdict(self)
        d["cross"] = self.cross
        return d


def identifiability_scores(zs_hat, zd_hat, z_s, z_d, **kw) -> IdentifiabilityReport:
    """``r2_cross_ls``: estimated long block -> true short block;
    ``r2_cross_sl``: estimated short block -> true long block."""
    return IdentifiabilityReport(
        r2_within_long=float(np.mean(block_r2(zs_hat, z_s, **kw))),
        r2_within_short=float(np.mean(block_r2(zd_hat, z_d, **kw))),
        r2_cross_ls=float(np.mean(block_r2(zs_hat, z_d, **kw))),
        r2_cross_sl=float(np.mean(block_r2(zd_hat, z_s, **kw))),
        mcc_long=mcc(zs_hat, z_s),
        mcc_short=mcc(zd_hat, z_d),
        n_samples=len(zs_hat),
    )


def standardize(x, stats=None):
    x = np.asarray(x, dtype=np.float64)
    mean, std = stats if stats is not None else (x.mean(0), x.std(0))
    return (x - mean) / np.where(std > 0, std, 1.0)


def estimate_latents(model, x, batch=2048):
    """Posterior means at the last lookback step of every window ending at
    ``t = L-1 .. T-1``; returns ``(zs_hat, zd_hat)`` aligned to those steps."""
    L = model.config.lookback
    dtype = next(model.parameters()).dtype
    xt = torch.as_tensor(np.asarray(x), dtype=dtype)
    windows = xt.unfold(0, L, 1).transpose(1, 2)
    zs, zd = [], []
    with torch.no_grad():
        for i in range(0, len(windows), batch):
            post = model.encode(windows[i : i + batch])
            zs.append(post.mean_s[:, -1])
            zd.append(post.mean_d[:, -1])
    return torch.cat(zs).double().numpy(), torch.cat(zd).double().numpy()


def identifiability_report(model, dataset, stats=None, **kw) -> IdentifiabilityReport:
    x = standardize(dataset.x, stats)
    zs_hat, zd_hat = estimate_latents(model, x)
    L = model.config.lookback
    return identifiability_scores(zs_hat, zd_hat, dataset.z_s[L - 1 :], dataset.z_d[L - 1 :], **kw)


def gradient_trace(bank, z_d_seq):
    """L1 magnitude of ``d eps_{H,.} / d z_{t,.}`` for ``t = 1..H-1``."""
    parts = dependency_partials(bank, z_d_seq, create_graph=False)
    return parts.detach().abs().sum((-1, -2))


def intervention_gradient_trace(model, window, prior=None):
    """Trace for one ``(H, D)`` window, using posterior means for the
    lookback and the short-term transition for the rest of the horizon.

    Returns a length ``H-1`` array aligned to window steps ``0..H-2``.
    """
    L = model.config.lookback
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.asarray(window), dtype=dtype)
    if x.dim() == 2:
        x = x.unsqueeze(0)
    with torch.no_grad():
        _, out = model(x[:, :L])
    bank = prior if prior is not None else model.prior_d
    return gradient_trace(bank, out.z_d_full)[0].double().numpy()


def trace_intervention_windows(model, dataset, stats=None, max_windows=200, min_pre=2):
    """Pre/post trace medians for windows with exactly one intervention in
    the lookback at position >= ``min_pre``.

    Returns a list of ``(start, t_star, pre_median, post_median)``.
    """
    L, H = model.config.lookback, model.config.horizon
    x = standardize(dataset.x, stats)
    mask = dataset.mask
    rows = []
    for start in range(0, len(x) - H + 1):
        hits = np.flatnonzero(mask[start : start + H])
        if len(hits) != 1 or not (min_pre <= hits[0] < L):
            continue
        t_star = int(hits[0])
        tr = intervention_gradient_trace(model, x[start : start + H])
        rows.append((start, t_star, float(np.median(tr[:t_star])), float(np.median(tr[t_star:]))))
        if len(rows) >= max_windows:
            break
    return rows
