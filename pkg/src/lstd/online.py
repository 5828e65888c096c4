"""Predict / reveal / update / slide loop with streaming metrics."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .losses import LossWeights, lstd_loss
from .model import LSTDModel, ModelConfig


class RunningStandardizer:
    """Welford mean/variance over rows seen so far."""

    def __init__(self, dim, floor=1e-6):
        self.count = 0
        self.mean = np.zeros(dim)
        self._m2 = np.zeros(dim)
        self.floor = floor

    def update(self, rows):
        for row in np.atleast_2d(rows):
            self.count += 1
            delta = row - self.mean
            self.mean = self.mean + delta / self.count
            self._m2 = self._m2 + delta * (row - self.mean)

    @property
    def std(self):
        if self.count < 2:
            return np.ones_like(self.mean)
        return np.maximum(np.sqrt(self._m2 / self.count), self.floor)

    def transform(self, x):
        return (x - self.mean) / self.std


class IdentityScaler:
    def update(self, rows):
        pass

    def transform(self, x):
        return x


def persistence_baseline(x_window, pred_len):
    x_window = np.asarray(x_window)
    if len(x_window) == 0:
        raise ValueError("empty window")
    return np.repeat(x_window[-1:], pred_len, axis=0)


class Persistence:
    name = "persistence"

    def __init__(self, lookback, horizon):
        self.lookback, self.horizon = lookback, horizon

    def predict(self, x_hist):
        return persistence_baseline(x_hist, self.horizon - self.lookback)

    def update(self, x_window):
        return None

    def describe(self):
        return {"name": self.name}


class _TorchForecaster:
    """Common plumbing: Adam, fixed number of steps per reveal."""

    def __init__(self, module, lr, update_steps, seed):
        self.module = module
        self.lr = lr
        self.update_steps = update_steps
        self.seed = seed
        self.opt = torch.optim.Adam(module.parameters(), lr=lr)
        self.generator = torch.Generator().manual_seed(seed)
        self.dtype = next(module.parameters()).dtype

    def _tensor(self, x):
        return torch.as_tensor(np.asarray(x), dtype=self.dtype).unsqueeze(0)

    def update(self, x_window):
        last = None
        for _ in range(self.update_steps):
            loss, info = self.loss(self._tensor(x_window))
            self.opt.zero_grad()
            loss.backward()
            self.opt.step()
            last = info
        return last


class LSTDForecaster(_TorchForecaster):
    name = "lstd"

    def __init__(self, model: LSTDModel, weights: LossWeights, lr=1e-3, update_steps=1, seed=0,
                 prior_over_horizon=False):
        super().__init__(model, lr, update_steps, seed)
        self.model = model
        self.weights = weights
        self.prior_over_horizon = prior_over_horizon

    @classmethod
    def build(cls, config: ModelConfig, weights, lr=1e-3, update_steps=1, seed=0, dtype=torch.float32, **kw):
        torch.manual_seed(seed)
        model = LSTDModel(config).to(dtype)
        return cls(model, weights, lr, update_steps, seed, **kw)

    def predict(self, x_hist):
        with torch.no_grad():
            _, out = self.model(self._tensor(x_hist))
        return out.x_pred[0].numpy().astype(np.float64)

    def loss(self, x):
        eta = self.model.sample_eta(x.shape[0], generator=self.generator)
        lb, _, _ = lstd_loss(self.model, x, self.weights, eta=eta, prior_over_horizon=self.prior_over_horizon)
        return lb.total, lb.as_dict()

    def describe(self):
        return {
            "name": self.name,
            "model": self.model.config.to_dict(),
            "weights": dict(vars(self.weights)),
            "lr": self.lr,
            "update_steps": self.update_steps,
            "seed": self.seed,
            "prior_over_horizon": self.prior_over_horizon,
        }


class OnlineMLP(_TorchForecaster):
    """Flattened lookback -> flattened horizon, trained online on MSE."""

    name = "online_mlp"

    def __init__(self, lookback, horizon, obs_dim, hidden=512, lr=1e-3, update_steps=1, seed=0):
        torch.manual_seed(seed)
        self.lookback, self.horizon, self.obs_dim, self.hidden = lookback, horizon, obs_dim, hidden
        net = nn.Sequential(
            nn.Flatten(),
            nn.Linear(lookback * obs_dim, hidden),
            nn.LeakyReLU(0.2),
            nn.Linear(hidden, (horizon - lookback) * obs_dim),
        )
        super().__init__(net, lr, update_steps, seed)

    def _forward(self, x_hist):
        return self.module(x_hist).view(-1, self.horizon - self.lookback, self.obs_dim)

    def predict(self, x_hist):
        with torch.no_grad():
            return self._forward(self._tensor(x_hist))[0].numpy().astype(np.float64)

    def loss(self, x):
        pred = self._forward(x[:, : self.lookback])
        loss = ((pred - x[:, self.lookback :]) ** 2).mean()
        return loss, {"total": float(loss.detach())}

    def describe(self):
        return {"name": self.name, "hidden": self.hidden, "lr": self.lr,
                "update_steps": self.update_steps, "seed": self.seed}


@dataclass
class OnlineProtocolState:
    lookback: int
    horizon: int
    cursor: int = 0
    seen: int = 0
    sq_sum: float = 0.0
    abs_sum: float = 0.0
    count: int = 0
    rounds: int = 0
    round_mse: list = field(default_factory=list)
    round_mae: list = field(default_factory=list)
    losses: list = field(default_factory=list)


@dataclass
class MetricsReport:
    mse: float | None
    mae: float | None
    rounds: int
    round_mse: list
    round_mae: list
    config: dict

    def to_dict(self, traces=True):
        d = {"mse": self.mse, "mae": self.mae, "rounds": self.rounds, "config": self.config}
        if traces:
            d["round_mse"] = self.round_mse
            d["round_mae"] = self.round_mae
        return d


class StreamExhausted(Exception):
    pass


def feasible_rounds(T, horizon):
    return max(T - horizon + 1, 0)


def protocol_round(state, stream, forecaster, scaler):
    """One predict/reveal/update/slide step; returns ``(prediction, record)``."""
    c, L, H = state.cursor, state.lookback, state.horizon
    if c + H > len(stream):
        raise StreamExhausted(c)
    t0 = time.perf_counter()
    # statistics may only include data up to the end of the lookback window
    scaler.update(stream[state.seen : c + L])
    state.seen = c + L
    window = scaler.transform(stream[c : c + H])
    pred = forecaster.predict(window[:L])
    err = pred - window[L:]
    mse = float(np.mean(err**2))
    mae = float(np.mean(np.abs(err)))
    state.sq_sum += float(np.sum(err**2))
    state.abs_sum += float(np.sum(np.abs(err)))
    state.count += err.size
    # reveal: the horizon truth becomes training signal
    info = forecaster.update(window)
    state.round_mse.append(mse)
    state.round_mae.append(mae)
    state.losses.append(info)
    state.cursor += 1
    state.rounds += 1
    record = {
        "round": state.rounds - 1,
        "mse": mse,
        "mae": mae,
        "loss_breakdown": info,
        "wall_ms": (time.perf_counter() - t0) * 1000.0,
    }
    return pred, record


def run(stream, forecaster, rounds=None, normalize=True, trace_path=None, config_echo=None,
        progress=None) -> MetricsReport:
    stream = np.asarray(stream, dtype=np.float64)
    lookback, horizon = forecaster_horizon(forecaster)
    max_rounds = feasible_rounds(len(stream), horizon)
    if rounds is None:
        rounds = max_rounds
    if rounds > max_rounds:
        raise ValueError(f"requested {rounds} rounds but the stream only supports {max_rounds}")
    state = OnlineProtocolState(lookback, horizon)
    scaler = RunningStandardizer(stream.shape[1]) if normalize else IdentityScaler()
    fh = open(trace_path, "w") if trace_path else None
    try:
        for r in range(rounds):
            _, record = protocol_round(state, stream, forecaster, scaler)
            if fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
            if progress and (r + 1) % progress == 0:
                print(f"[{forecaster.name}] round {r + 1}/{rounds} cum_mse={state.sq_sum / state.count:.4f}",
                      flush=True)
    finally:
        if fh:
            fh.close()
    echo = {"forecaster": forecaster.describe(), "rounds": rounds, "normalize": normalize,
            "lookback": lookback, "horizon": horizon}
    if config_echo:
        echo.update(config_echo)
    return MetricsReport(
        mse=state.sq_sum / state.count if state.count else None,
        mae=state.abs_sum / state.count if state.count else None,
        rounds=state.rounds,
        round_mse=state.round_mse,
        round_mae=state.round_mae,
        config=echo,
    )


def forecaster_horizon(f):
    if isinstance(f, LSTDForecaster):
        return f.model.config.lookback, f.model.config.horizon
    return f.lookback, f.horizon
