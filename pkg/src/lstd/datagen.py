"""Synthetic long/short-term latent processes with unknown interventions.

Latents are split into a long-term block ``z_s`` whose transition is never
broken and a short-term block ``z_d`` which is regenerated from noise alone
whenever the intervention indicator fires.  Observations are produced by an
invertible leaky mixing of the concatenated latents.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MIN_INTERVENTION_GAP = 3


class GenerationError(RuntimeError):
    pass


def _full_mask(k):
    return np.ones((k, k), dtype=bool)


@dataclass
class GenerativeConfig:
    n_s: int = 2
    n_d: int = 2
    obs_dim: int | None = None
    theta: float = 0.05
    lag: int = 1
    T: int = 20000
    seed: int = 0
    noise_scale_s: float = 0.3
    noise_scale_d: float = 0.85
    adjacency_s: np.ndarray | None = None
    adjacency_d: np.ndarray | None = None
    # contraction gain of the transition networks at the origin
    persistence_s: float = 0.95
    persistence_d: float = 0.5
    mixing_layers: int = 2
    mixing_slope: float = 0.2
    # interventions draw z_d = intervention_scale * eps_d
    intervention_scale: float = 1.15

    def __post_init__(self):
        if self.obs_dim is None:
            self.obs_dim = self.n
        if self.adjacency_s is None:
            self.adjacency_s = _full_mask(self.n_s)
        if self.adjacency_d is None:
            self.adjacency_d = _full_mask(self.n_d)
        self.adjacency_s = np.asarray(self.adjacency_s, dtype=bool)
        self.adjacency_d = np.asarray(self.adjacency_d, dtype=bool)

    @property
    def n(self) -> int:
        return self.n_s + self.n_d

    def validate(self):
        if self.n_s < 1 or self.n_d < 1:
            raise ValueError("n_s and n_d must both be >= 1")
        if self.obs_dim < self.n:
            raise ValueError(
                f"obs_dim={self.obs_dim} < n={self.n}: mixing would not be invertible"
            )
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError(f"theta must lie in [0, 1], got {self.theta}")
        if self.lag < 1:
            raise ValueError("lag must be >= 1")
        if self.T < 0:
            raise ValueError("T must be non-negative")
        if self.noise_scale_s < 0 or self.noise_scale_d < 0:
            raise ValueError("noise scales must be non-negative")
        if self.adjacency_s.shape != (self.n_s, self.n_s):
            raise ValueError(f"adjacency_s must be {self.n_s}x{self.n_s}")
        if self.adjacency_d.shape != (self.n_d, self.n_d):
            raise ValueError(f"adjacency_d must be {self.n_d}x{self.n_d}")
        if not 0.0 < self.mixing_slope < 1.0:
            raise ValueError("mixing_slope must lie in (0, 1)")
        return self

    # flat key=value serialization
    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, np.ndarray):
                v = ";".join("".join("1" if b else "0" for b in row) for row in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "GenerativeConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kw = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, raw = line.partition("=")
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            if key.startswith("adjacency"):
                kw[key] = np.array([[c == "1" for c in row] for row in raw.split(";")])
            elif "float" in types[key]:
                kw[key] = float(raw)
            elif raw == "None":
                kw[key] = None
            else:
                kw[key] = int(raw)
        return cls(**kw)

    def __eq__(self, other):
        if not isinstance(other, GenerativeConfig):
            return NotImplemented
        return self.to_text() == other.to_text()


def _leaky(x, slope):
    return np.where(x >= 0, x, slope * x)


def _leaky_inv(y, slope):
    return np.where(y >= 0, y, y / slope)


def _orthogonal(rng, rows, cols):
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q if rows >= cols else q.T


@dataclass
class MixingFunction:
    """Invertible map R^n -> R^obs_dim.

    ``layers`` are square orthogonal matrices, each followed by a leaky
    rectifier; ``embed`` (obs_dim x n, orthonormal columns) lifts the result
    when obs_dim > n.
    """

    layers: list
    slope: float
    embed: np.ndarray | None = None

    @property
    def n_layers(self):
        return len(self.layers)

    def apply(self, z):
        h = np.asarray(z, dtype=np.float64)
        for w in self.layers:
            h = _leaky(h @ w.T, self.slope)
        if self.embed is not None:
            h = h @ self.embed.T
        return h

    def invert(self, x):
        h = np.asarray(x, dtype=np.float64)
        if self.embed is not None:
            h = h @ self.embed
        for w in reversed(self.layers):
            h = _leaky_inv(h, self.slope) @ w
        return h

    def to_bytes(self) -> bytes:
        parts = [np.float64(self.slope).tobytes()]
        parts += [w.tobytes() for w in self.layers]
        if self.embed is not None:
            parts.append(self.embed.tobytes())
        return b"".join(parts)


def make_mixing(config: GenerativeConfig, seed: int) -> MixingFunction:
    if config.obs_dim < config.n:
        raise ValueError(
            f"obs_dim={config.obs_dim} < n={config.n}: mixing would not be invertible"
        )
    rng = np.random.default_rng([seed, 1])
    n = config.n
    layers = [_orthogonal(rng, n, n) for _ in range(config.mixing_layers)]
    embed = _orthogonal(rng, config.obs_dim, n) if config.obs_dim > n else None
    return MixingFunction(layers=layers, slope=config.mixing_slope, embed=embed)


def sample_interventions(theta: float, T: int, seed: int) -> np.ndarray:
    """Bernoulli(theta) intervention flags, thinned to a minimum gap of 3.

    Index 0 never fires.  A draw closer than the minimum gap to the last kept
    intervention is dropped.
    """
    if not 0.0 <= theta <= 1.0:
        raise ValueError(f"theta must lie in [0, 1], got {theta}")
    if T < 1:
        raise ValueError("T must be >= 1")
    rng = np.random.default_rng([seed, 2])
    draws = rng.random(T) < theta
    mask = np.zeros(T, dtype=bool)
    last = -MIN_INTERVENTION_GAP
    for t in np.flatnonzero(draws):
        if t == 0 or t - last < MIN_INTERVENTION_GAP:
            continue
        mask[t] = True
        last = t
    return mask


class _TransitionNet:
    """Fixed random two-layer tanh network ``c * tanh(W (mask * z) / c)``.

    ``W`` is the identity plus masked random couplings, rescaled to spectral
    norm ``gain``.  The map is then ``gain``-Lipschitz (a contraction for
    gain < 1) and its Jacobian at the origin is diagonally dominant, so each
    coordinate keeps lag-1 autocorrelation close to ``gain``.
    """

    def __init__(self, rng, adjacency, gain, coupling=0.3, saturation=1.5):
        k = adjacency.shape[0]
        w = (np.eye(k) + coupling * rng.standard_normal((k, k)) / np.sqrt(k)) * adjacency
        norm = np.linalg.norm(w, 2)
        self.w = w * (gain / norm) if norm > 0 else w
        self.c = saturation

    def __call__(self, z_prev):
        return self.c * np.tanh(self.w @ z_prev / self.c)


@dataclass(eq=False)
class SyntheticDataset:
    x: np.ndarray
    z_s: np.ndarray
    z_d: np.ndarray
    mask: np.ndarray
    config: GenerativeConfig
    noise_s: np.ndarray | None = field(default=None, repr=False)
    noise_d: np.ndarray | None = field(default=None, repr=False)

    def __eq__(self, other):
        if not isinstance(other, SyntheticDataset):
            return NotImplemented
        return (
            self.config == other.config
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.z_s, other.z_s)
            and np.array_equal(self.z_d, other.z_d)
            and np.array_equal(self.mask, other.mask)
        )

    @property
    def z(self):
        return np.concatenate([self.z_s, self.z_d], axis=1)

    def __len__(self):
        return len(self.x)


def _rollout(config, nets, noise_s, noise_d, mask, z0_s, z0_d):
    net_s, net_d = nets
    lag = config.lag
    total = len(noise_s)
    z_s = np.zeros((total, config.n_s))
    z_d = np.zeros((total, config.n_d))
    for t in range(total):
        prev_s = z_s[t - lag] if t >= lag else z0_s
        prev_d = z_d[t - lag] if t >= lag else z0_d
        z_s[t] = net_s(prev_s) + noise_s[t]
        if mask[t]:
            z_d[t] = config.intervention_scale * noise_d[t]
        else:
            z_d[t] = net_d(prev_d) + noise_d[t]
        if not (np.all(np.isfinite(z_s[t])) and np.all(np.isfinite(z_d[t]))):
            raise GenerationError(f"non-finite latent state at step {t}")
    return z_s, z_d


def generate_series(config: GenerativeConfig) -> SyntheticDataset:
    config.validate()
    rng = np.random.default_rng([config.seed, 0])
    nets = (
        _TransitionNet(rng, config.adjacency_s, config.persistence_s),
        _TransitionNet(rng, config.adjacency_d, config.persistence_d),
    )
    burn = 10 * config.lag
    total = burn + config.T
    noise_rng = np.random.default_rng([config.seed, 3])
    noise_s = config.noise_scale_s * noise_rng.standard_normal((total, config.n_s))
    noise_d = config.noise_scale_d * noise_rng.standard_normal((total, config.n_d))
    mask = np.zeros(total, dtype=bool)
    if config.T > 0:
        mask[burn:] = sample_interventions(config.theta, config.T, config.seed)
    z0_s = np.zeros(config.n_s)
    z0_d = np.zeros(config.n_d)
    z_s, z_d = _rollout(config, nets, noise_s, noise_d, mask, z0_s, z0_d)
    g = make_mixing(config, config.seed)
    z_s, z_d = z_s[burn:], z_d[burn:]
    x = g.apply(np.concatenate([z_s, z_d], axis=1)) if config.T else np.zeros((0, config.obs_dim))
    return SyntheticDataset(
        x=x,
        z_s=z_s,
        z_d=z_d,
        mask=mask[burn:],
        config=config,
        noise_s=noise_s[burn:],
        noise_d=noise_d[burn:],
    )


def _fmt(v):
    return repr(float(v))


def export_dataset(ds: SyntheticDataset, path) -> Path:
    """Write ``x.csv``, ``ground_truth.csv`` and ``config.txt`` under *path*.

    Floats are written with ``repr`` so a re-import is bit-exact.
    """
    if len(ds) == 0:
        raise ValueError("refusing to export an empty dataset (T = 0)")
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        D = ds.x.shape[1]
        with open(out / "x.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t"] + [f"x{j}" for j in range(D)])
            for t, row in enumerate(ds.x):
                w.writerow([t] + [_fmt(v) for v in row])
        with open(out / "ground_truth.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(
                ["t"]
                + [f"zs{j}" for j in range(ds.z_s.shape[1])]
                + [f"zd{j}" for j in range(ds.z_d.shape[1])]
                + ["mask"]
            )
            for t in range(len(ds)):
                w.writerow(
                    [t]
                    + [_fmt(v) for v in ds.z_s[t]]
                    + [_fmt(v) for v in ds.z_d[t]]
                    + [int(ds.mask[t])]
                )
        (out / "config.txt").write_text(ds.config.to_text())
    except OSError as exc:
        raise OSError(f"failed to export dataset to {out}: {exc.strerror or exc}") from exc
    return out


def import_dataset(path) -> SyntheticDataset:
    src = Path(path)
    config = GenerativeConfig.from_text((src / "config.txt").read_text())
    x = np.loadtxt(src / "x.csv", delimiter=",", skiprows=1, ndmin=2)[:, 1:]
    gt = np.loadtxt(src / "ground_truth.csv", delimiter=",", skiprows=1, ndmin=2)
    z_s = gt[:, 1 : 1 + config.n_s]
    z_d = gt[:, 1 + config.n_s : 1 + config.n]
    mask = gt[:, -1].astype(bool)
    return SyntheticDataset(x=x, z_s=z_s, z_d=z_d, mask=mask, config=config)


def file_digest(path) -> str:
    h = hashlib.sha256()
    for name in sorted(os.listdir(path)):
        h.update(name.encode())
        h.update((Path(path) / name).read_bytes())
    return h.hexdigest()
