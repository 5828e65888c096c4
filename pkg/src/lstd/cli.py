"""Command-line entry point.

Every command writes its artifacts under ``--out`` and prints one JSON
document (sorted keys) to stdout.  Failures print a single ``error:`` line
to stderr and exit 1; usage errors exit 2.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .datagen import GenerativeConfig, export_dataset, generate_series, import_dataset
from .evaluation import (
    identifiability_report,
    intervention_gradient_trace,
    standardize,
    trace_intervention_windows,
)
from .io import load_csv
from .losses import LossWeights
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .online import LSTDForecaster, OnlineMLP, Persistence, feasible_rounds, run


@dataclass
class RunConfig:
    command: str
    data: str | None = None
    synthetic: dict | None = None
    model: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)
    seed: int = 0
    rounds: int | None = None
    normalize: bool = True
    out: str = "."
    extra: dict = field(default_factory=dict)


def _dump(obj, path=None):
    text = json.dumps(obj, sort_keys=True, indent=2, default=_jsonable)
    if path is not None:
        Path(path).write_text(text + "\n")
    return text


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _add_synthetic(p):
    g = p.add_argument_group("synthetic data")
    g.add_argument("--n-s", type=int, default=2)
    g.add_argument("--n-d", type=int, default=2)
    g.add_argument("--obs-dim", type=int, default=None)
    g.add_argument("--theta", type=float, default=0.05)
    g.add_argument("--T", type=int, default=20000)
    g.add_argument("--data-seed", type=int, default=0, help="seed of the generative process")


def _gen_config(args):
    cfg = GenerativeConfig(n_s=args.n_s, n_d=args.n_d, obs_dim=args.obs_dim, theta=args.theta,
                           T=args.T, seed=args.data_seed)
    cfg.validate()
    return cfg


def _add_model(p):
    g = p.add_argument_group("model and training")
    g.add_argument("--lookback", type=int, default=60)
    g.add_argument("--horizon", type=int, default=84, help="lookback + prediction length")
    g.add_argument("--latent-s", type=int, default=None, help="long-term latent dims (default: n-s)")
    g.add_argument("--latent-d", type=int, default=None, help="short-term latent dims (default: n-d)")
    g.add_argument("--mode", choices=("time", "feature"), default="feature")
    defaults = LossWeights()
    g.add_argument("--alpha", type=float, default=defaults.alpha)
    g.add_argument("--beta", type=float, default=defaults.beta)
    g.add_argument("--gamma", type=float, default=defaults.gamma)
    g.add_argument("--lr", type=float, default=1e-3)
    g.add_argument("--update-steps", type=int, default=1)
    g.add_argument("--rounds", type=int, default=None, help="default: every feasible round")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--prior-over-horizon", action="store_true",
                   help="also score the predicted future latents under the priors")
    g.add_argument("--no-normalize", action="store_true")
    g.add_argument("--baselines", action="store_true", help="also run the online MLP baseline")


def _add_data(p, synthetic=True):
    p.add_argument("--data", help="CSV file, or a directory written by `generate`")
    p.add_argument("--columns", nargs="+", help="value columns to keep from a CSV")
    if synthetic:
        p.add_argument("--synthetic", action="store_true", help="generate the stream in memory")
        _add_synthetic(p)


def build_parser():
    parser = argparse.ArgumentParser(prog="lstd", description="Long/short-term disentangled online forecasting")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    _add_synthetic(p)
    p.add_argument("--out", required=True)

    for name, help_ in (("train-online", "run the online protocol"),
                        ("ablate", "rerun train-online with one loss term zeroed")):
        p = sub.add_parser(name, help=help_)
        _add_data(p)
        _add_model(p)
        p.add_argument("--out", required=True)
        p.add_argument("--plot", action="store_true")
        if name == "ablate":
            p.add_argument("--term", required=True, choices=("Ls", "Lm", "KL", "all"))

    p = sub.add_parser("evaluate", help="identifiability scores of a checkpoint on synthetic data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="directory written by `generate`")
    p.add_argument("--out", required=True)

    p = sub.add_parser("trace", help="gradient trace around known interventions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="directory written by `generate`")
    p.add_argument("--out", required=True)
    p.add_argument("--max-windows", type=int, default=200)
    p.add_argument("--plot", action="store_true")
    return parser


def _load_stream(args):
    if args.synthetic:
        cfg = _gen_config(args)
        return generate_series(cfg).x, {"synthetic": _config_dict(cfg)}
    path = Path(args.data)
    if path.is_dir():
        path = path / "x.csv"
    table = load_csv(path, columns=args.columns)
    return table.values, {"data": str(path), "columns": table.columns}


def _config_dict(cfg: GenerativeConfig):
    return dict(line.split("=", 1) for line in cfg.to_text().splitlines() if line)


def _weights(args):
    return LossWeights(alpha=args.alpha, beta=args.beta, gamma=args.gamma)


def _train(args, stream, source, weights, out: Path, tag=""):
    D = stream.shape[1]
    mcfg = ModelConfig(lookback=args.lookback, horizon=args.horizon,
                       n_s=args.latent_s or args.n_s, n_d=args.latent_d or args.n_d,
                       obs_dim=D, mode=args.mode)
    rounds = args.rounds if args.rounds is not None else feasible_rounds(len(stream), args.horizon)
    rc = RunConfig(
        command=args.command, data=source.get("data"), synthetic=source.get("synthetic"),
        model=mcfg.to_dict(), weights=asdict(weights),
        optimizer={"name": "adam", "lr": args.lr, "update_steps": args.update_steps},
        seed=args.seed, rounds=rounds, normalize=not args.no_normalize, out=str(out),
        extra={"prior_over_horizon": args.prior_over_horizon, "columns": source.get("columns")},
    )
    forecaster = LSTDForecaster.build(mcfg, weights, lr=args.lr, update_steps=args.update_steps, seed=args.seed,
                                      prior_over_horizon=args.prior_over_horizon)
    normalize = not args.no_normalize
    report = run(stream, forecaster, rounds=rounds, normalize=normalize,
                 trace_path=out / f"trace{tag}.jsonl")
    baselines = {}
    persist = run(stream, Persistence(args.lookback, args.horizon), rounds=rounds, normalize=normalize)
    baselines["persistence"] = {"mse": persist.mse, "mae": persist.mae}
    if args.baselines:
        mlp = OnlineMLP(args.lookback, args.horizon, D, lr=args.lr, update_steps=args.update_steps, seed=args.seed)
        r = run(stream, mlp, rounds=rounds, normalize=normalize)
        baselines["online_mlp"] = {"mse": r.mse, "mae": r.mae}
    save_checkpoint(forecaster.model, out / f"checkpoint{tag}.pt", extra={"run_config": asdict(rc)})
    doc = {"config": asdict(rc), "metrics": report.to_dict(traces=False), "baselines": baselines}
    _dump(doc, out / f"report{tag}.json")
    return doc, report, persist


def cmd_generate(args):
    out = Path(args.out)
    ds = generate_series(_gen_config(args))
    export_dataset(ds, out)
    return {"command": "generate", "out": str(out), "T": len(ds), "interventions": int(ds.mask.sum()),
            "config": _config_dict(ds.config)}


def cmd_train(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stream, source = _load_stream(args)
    doc, report, persist = _train(args, stream, source, _weights(args), out)
    if args.plot:
        from .plotting import plot_round_mse

        plot_round_mse(report.round_mse, out / "round_mse.png", baseline=persist.round_mse)
    return doc


def cmd_ablate(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stream, source = _load_stream(args)
    base = _weights(args)
    terms = ("Ls", "Lm", "KL") if args.term == "all" else (args.term,)
    if args.term == "all":
        variants = {"LSTD": base} | {f"LSTD-{t}": base.ablate(t) for t in terms}
    else:
        variants = {f"LSTD-{args.term}": base.ablate(args.term)}
    summary = {}
    docs = {}
    for name, w in variants.items():
        tag = "" if len(variants) == 1 else f"_{name}"
        doc, _, _ = _train(args, stream, source, w, out, tag=tag)
        docs[name] = doc
        summary[name] = {"mse": doc["metrics"]["mse"], "mae": doc["metrics"]["mae"], "weights": asdict(w)}
    if args.plot:
        from .plotting import plot_ablation

        plot_ablation({k: v["mse"] for k, v in summary.items()}, out / "ablation.png")
    if len(variants) == 1:
        return next(iter(docs.values()))
    result = {"base_weights": asdict(base), "variants": summary}
    _dump(result, out / "ablation.json")
    return result


def _eval_inputs(args):
    model, extra = load_checkpoint(args.checkpoint)
    ds = import_dataset(args.data)
    rc = extra.get("run_config", {})
    # score in the same units the model was trained on
    stats = None
    if rc.get("normalize", True):
        x = ds.x[: (rc.get("rounds") or len(ds.x)) + model.config.lookback - 1]
        stats = (x.mean(0), x.std(0))
    return model, ds, stats


def cmd_evaluate(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, ds, stats = _eval_inputs(args)
    rep = identifiability_report(model, ds, stats)
    doc = {"command": "evaluate", "checkpoint": args.checkpoint, "data": args.data, "report": rep.to_dict()}
    _dump(doc, out / "identifiability.json")
    return doc


def cmd_trace(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, ds, stats = _eval_inputs(args)
    rows = trace_intervention_windows(model, ds, stats, max_windows=args.max_windows)
    if not rows:
        raise ValueError("no window contains exactly one intervention inside the lookback")
    with open(out / "windows.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["start", "t_star", "pre_median", "post_median"])
        w.writerows([(s, t, repr(a), repr(b)) for s, t, a, b in rows])
    start, t_star = rows[0][0], rows[0][1]
    x = standardize(ds.x, stats)
    trace = intervention_gradient_trace(model, x[start : start + model.config.horizon])
    with open(out / "trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "grad_l1"])
        w.writerows([(start + t, repr(float(v))) for t, v in enumerate(trace)])
    pre = float(np.median([r[2] for r in rows]))
    post = float(np.median([r[3] for r in rows]))
    if args.plot:
        from .plotting import plot_gradient_trace

        plot_gradient_trace(trace, out / "trace.png", t_star=t_star)
    doc = {"command": "trace", "windows": len(rows), "pre_median": pre, "post_median": post,
           "example_window": {"start": start, "t_star": t_star}}
    _dump(doc, out / "trace_summary.json")
    return doc


COMMANDS = {"generate": cmd_generate, "train-online": cmd_train, "ablate": cmd_ablate,
            "evaluate": cmd_evaluate, "trace": cmd_trace}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if hasattr(args, "synthetic") and bool(args.data) == args.synthetic:
            parser.error("give exactly one data source: --data or --synthetic")
    except SystemExit as exc:
        return int(exc.code or 0)
    torch.set_num_threads(max(torch.get_num_threads(), 1))
    try:
        doc = COMMANDS[args.command](args)
    except Exception as exc:  # report any failure as one parsable line
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    print(_dump(doc))
    return 0


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
