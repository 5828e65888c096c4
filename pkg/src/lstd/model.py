"""Long/short-term disentangling forecaster.

Two encoders map a lookback window to diagonal-Gaussian posteriors over the
long-term block ``z_s`` and the short-term block ``z_d``.  Separate
transition heads push each block to the forecast horizon, a historical
decoder reconstructs the lookback window and a predictor decodes the
horizon.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
from torch import nn
from torch.nn import functional as F

from .priors import MLPResidualBank

LOGVAR_MIN = -20.0
LOGVAR_MAX = 10.0


@dataclass
class ModelConfig:
    lookback: int
    horizon: int
    n_s: int
    n_d: int
    obs_dim: int
    conv_channels: int = 640
    kernel_size: int = 3
    encoder_hidden: int = 512
    transition_hidden: int = 512
    decoder_widths: tuple = (512,)
    predictor_widths: tuple = (512,)
    prior_hidden: int = 128
    prior_depth: int = 3
    slope: float = 0.2
    mode: str = "feature"

    def __post_init__(self):
        self.decoder_widths = tuple(self.decoder_widths)
        self.predictor_widths = tuple(self.predictor_widths)
        self.validate()

    @property
    def pred_len(self):
        return self.horizon - self.lookback

    def validate(self):
        if not 1 <= self.lookback < self.horizon:
            raise ValueError(f"need 1 <= lookback < horizon, got {self.lookback}, {self.horizon}")
        for name in ("n_s", "n_d", "obs_dim", "conv_channels", "kernel_size",
                     "encoder_hidden", "transition_hidden", "prior_hidden", "prior_depth"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if any(w < 1 for w in self.decoder_widths + self.predictor_widths):
            raise ValueError("all widths must be >= 1")
        if self.mode not in ("time", "feature"):
            raise ValueError(f"mode must be 'time' or 'feature', got {self.mode!r}")
        return self

    def to_dict(self):
        d = asdict(self)
        d["decoder_widths"] = list(self.decoder_widths)
        d["predictor_widths"] = list(self.predictor_widths)
        return d


@dataclass
class LatentPosterior:
    mean_s: torch.Tensor
    logvar_s: torch.Tensor
    mean_d: torch.Tensor
    logvar_d: torch.Tensor
    samples_s: torch.Tensor
    samples_d: torch.Tensor
    eta_s: torch.Tensor | None = None
    eta_d: torch.Tensor | None = None


@dataclass
class ForecastBundle:
    z_s_future: torch.Tensor
    z_d_future: torch.Tensor
    x_recon: torch.Tensor
    x_pred: torch.Tensor
    z_s_full: torch.Tensor = field(repr=False, default=None)
    z_d_full: torch.Tensor = field(repr=False, default=None)


def reparameterize(mean, logvar, eta):
    # eta may carry extra leading sample axes
    if mean.shape != logvar.shape or eta.shape[eta.dim() - mean.dim():] != mean.shape:
        raise ValueError(f"shape mismatch: {tuple(mean.shape)}, {tuple(logvar.shape)}, {tuple(eta.shape)}")
    return mean + torch.exp(0.5 * logvar.clamp(LOGVAR_MIN, LOGVAR_MAX)) * eta


def _mlp(sizes, slope):
    layers = []
    for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(nn.Linear(a, b))
        if k < len(sizes) - 2:
            layers.append(nn.LeakyReLU(slope))
    return nn.Sequential(*layers)


class _Encoder(nn.Module):
    """Shared tail: a per-step head mapping obs features to (mean, logvar)."""

    def __init__(self, obs_dim, n_latent):
        super().__init__()
        self.n_latent = n_latent
        self.head = nn.Linear(obs_dim, 2 * n_latent)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def split(self, feats):
        out = self.head(feats)
        mean, logvar = out[..., : self.n_latent], out[..., self.n_latent :]
        return mean, logvar.clamp(LOGVAR_MIN, LOGVAR_MAX)


class LongEncoder(_Encoder):
    """Conv1d over the mixing axis followed by a leaky dense layer.

    Input ``(B, A, S)``: ``A`` channels are convolved along ``S``.
    """

    def __init__(self, channels_in, obs_dim, n_latent, conv_channels, kernel_size, slope):
        super().__init__(obs_dim, n_latent)
        self.conv = nn.Conv1d(channels_in, conv_channels, kernel_size, padding="same")
        self.dense = nn.Linear(conv_channels, channels_in)
        self.slope = slope

    def features(self, h):
        h = self.conv(h)
        return F.leaky_relu(self.dense(h.transpose(1, 2)).transpose(1, 2), self.slope)


class ShortEncoder(_Encoder):
    """Two leaky dense layers along the mixing axis."""

    def __init__(self, channels_in, obs_dim, n_latent, hidden, slope):
        super().__init__(obs_dim, n_latent)
        self.net = nn.Sequential(
            nn.Linear(channels_in, hidden),
            nn.LeakyReLU(slope),
            nn.Linear(hidden, channels_in),
            nn.LeakyReLU(slope),
        )

    def features(self, h):
        return self.net(h.transpose(1, 2)).transpose(1, 2)


class LSTDModel(nn.Module):
    """Encoders, transitions and decoders.  Priors live in ``prior_s`` and
    ``prior_d`` so they checkpoint alongside the network."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        c = config.validate()
        self.config = c
        L, D = c.lookback, c.obs_dim
        # "time" mode mixes along the time axis: time steps are the channels
        # and the conv slides over variables; "feature" swaps the two.
        mix_axis = L if c.mode == "time" else D
        self.long_encoder = LongEncoder(mix_axis, D, c.n_s, c.conv_channels, c.kernel_size, c.slope)
        self.short_encoder = ShortEncoder(mix_axis, D, c.n_d, c.encoder_hidden, c.slope)
        self.transition_s = _mlp([L, c.transition_hidden, c.pred_len], c.slope)
        self.transition_d = _mlp([L, c.pred_len], c.slope)
        self.decoder = _mlp([c.n_s + c.n_d, *c.decoder_widths, D], c.slope)
        self.predictor = _mlp([c.n_s + c.n_d, *c.predictor_widths, D], c.slope)
        self.prior_s = MLPResidualBank(c.n_s, c.prior_hidden, c.prior_depth, c.slope)
        self.prior_d = MLPResidualBank(c.n_d, c.prior_hidden, c.prior_depth, c.slope)

    # layout helpers: (B, L, D) <-> encoder layout
    def _to_mix(self, x):
        return x if self.config.mode == "time" else x.transpose(1, 2)

    def _from_mix(self, h):
        return h if self.config.mode == "time" else h.transpose(1, 2)

    def _check_window(self, x):
        c = self.config
        if x.dim() != 3 or x.shape[1:] != (c.lookback, c.obs_dim):
            raise ValueError(
                f"expected window (B, {c.lookback}, {c.obs_dim}), got {tuple(x.shape)}"
            )

    def encode(self, x, eta_s=None, eta_d=None) -> LatentPosterior:
        """``x``: ``(B, L, D)``.  Missing ``eta`` means posterior means are
        used as samples."""
        if x.dim() == 2:
            x = x.unsqueeze(0)
        self._check_window(x)
        h = self._to_mix(x)
        feats_s = self._from_mix(self.long_encoder.features(h))
        feats_d = self._from_mix(self.short_encoder.features(h))
        mean_s, logvar_s = self.long_encoder.split(feats_s)
        mean_d, logvar_d = self.short_encoder.split(feats_d)
        if eta_s is None:
            eta_s = torch.zeros_like(mean_s)
        if eta_d is None:
            eta_d = torch.zeros_like(mean_d)
        return LatentPosterior(
            mean_s=mean_s,
            logvar_s=logvar_s,
            mean_d=mean_d,
            logvar_d=logvar_d,
            samples_s=reparameterize(mean_s, logvar_s, eta_s),
            samples_d=reparameterize(mean_d, logvar_d, eta_d),
            eta_s=eta_s,
            eta_d=eta_d,
        )

    @staticmethod
    def _along_time(net, z):
        return net(z.transpose(-1, -2)).transpose(-1, -2)

    def transition_long(self, z_s):
        if z_s.shape[-2:] != (self.config.lookback, self.config.n_s):
            raise ValueError(f"expected (..., {self.config.lookback}, {self.config.n_s}), got {tuple(z_s.shape)}")
        return self._along_time(self.transition_s, z_s)

    def transition_short(self, z_d):
        if z_d.shape[-2:] != (self.config.lookback, self.config.n_d):
            raise ValueError(f"expected (..., {self.config.lookback}, {self.config.n_d}), got {tuple(z_d.shape)}")
        return self._along_time(self.transition_d, z_d)

    def _decode(self, net, z_s, z_d):
        if z_s.shape[:-1] != z_d.shape[:-1]:
            raise ValueError(f"latent blocks disagree: {tuple(z_s.shape)} vs {tuple(z_d.shape)}")
        return net(torch.cat([z_s, z_d], dim=-1))

    def decode_history(self, z_s, z_d):
        return self._decode(self.decoder, z_s, z_d)

    def predict_future(self, z_s_future, z_d_future):
        return self._decode(self.predictor, z_s_future, z_d_future)

    def forward(self, x, eta_s=None, eta_d=None):
        post = self.encode(x, eta_s, eta_d)
        zs_f = self.transition_long(post.samples_s)
        zd_f = self.transition_short(post.samples_d)
        bundle = ForecastBundle(
            z_s_future=zs_f,
            z_d_future=zd_f,
            x_recon=self.decode_history(post.samples_s, post.samples_d),
            x_pred=self.predict_future(zs_f, zd_f),
            z_s_full=torch.cat([post.samples_s, zs_f], dim=-2),
            z_d_full=torch.cat([post.samples_d, zd_f], dim=-2),
        )
        return post, bundle

    def sample_eta(self, batch, generator=None, k=None):
        c = self.config
        lead = (batch,) if k is None else (k, batch)
        p = next(self.parameters())
        eta_s = torch.randn(*lead, c.lookback, c.n_s, generator=generator, dtype=p.dtype)
        eta_d = torch.randn(*lead, c.lookback, c.n_d, generator=generator, dtype=p.dtype)
        return eta_s, eta_d


CHECKPOINT_VERSION = 1


def save_checkpoint(model: LSTDModel, path, extra=None):
    """Single torch file: version, config, and parameters namespaced as
    ``network.*`` and ``priors.*``."""
    state = {}
    for name, t in model.state_dict().items():
        ns = "priors" if name.startswith(("prior_s.", "prior_d.")) else "network"
        state[f"{ns}.{name}"] = t
    torch.save(
        {"version": CHECKPOINT_VERSION, "config": model.config.to_dict(), "state": state, "extra": extra or {}},
        path,
    )


def load_checkpoint(path):
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('version')!r}")
    model = LSTDModel(ModelConfig(**blob["config"]))
    dtype = next(iter(blob["state"].values())).dtype
    model.to(dtype)
    model.load_state_dict({k.split(".", 1)[1]: v for k, v in blob["state"].items()})
    return model, blob.get("extra", {})


def count_parameters(model):
    return sum(math.prod(p.shape) for p in model.parameters())
