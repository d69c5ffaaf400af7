"""Command-line entry point.

    vlinear train CONFIG
    vlinear predict CHECKPOINT INPUT.csv [--steps K] [--samples M] [--quantiles 0.1,0.9]
    vlinear eval CHECKPOINT CONFIG [--oracle-forecast]
    vlinear gradcheck [CONFIG] [--sabotage TENSOR]
    vlinear bench [--sizes 32,64,...]
    vlinear ablate CONFIG
    vlinear verify [--table3 CONFIG]

Exit codes: 0 ok, 1 a check failed, 2 bad input.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from . import bench, data, proptests
from .flowmatch import LOSS_KINDS, LossSpec, draw_flow_noise, init_wfm_params
from .linalg import Rng, ShapeError
from .metrics import MetricReport, mae, mse
from .model import ModelConfig, forecast, forecast_ensemble, init_params
from .train import (
    CheckpointError,
    TrainConfig,
    finite_diff_check,
    load_checkpoint,
    loss_and_grads,
    save_checkpoint,
    train_loop,
)
from .transforms import fit_ortho_basis

log = logging.getLogger("vlinear")

EXIT_OK, EXIT_CHECK, EXIT_INPUT = 0, 1, 2


class ConfigError(ValueError):
    pass


# -- run config ---------------------------------------------------------------------

def _floats(text):
    return tuple(float(v) for v in text.replace(",", " ").split())


def _flag(text):
    low = text.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(text)


CONFIG_KEYS = {
    "data.path": (str, ""),
    "data.synth": (str, ""),
    "data.n_var": (int, 4),
    "data.length": (int, 2000),
    "data.standardize": (_flag, True),
    "window.t": (int, 48),
    "window.h": (int, 24),
    "window.stride": (int, 1),
    "split.train": (float, 0.7),
    "split.val": (float, 0.1),
    "split.test": (float, 0.2),
    "model.d_model": (int, 64),
    "model.d_ext": (int, 2),
    "model.layers": (int, 2),
    "model.mixer": (str, "vectrans"),
    "model.rank_k": (int, 4),
    "model.heads": (int, 4),
    "train.lr": (float, 1e-3),
    "train.batch": (int, 32),
    "train.epochs": (int, 50),
    "train.patience": (int, 10),
    "train.seed": (int, 0),
    "loss.kind": (str, "wfm"),
    "loss.alpha": (float, -0.5),
    "loss.beta": (float, -0.5),
    "infer.steps": (int, 10),
    "infer.samples": (int, 1),
    "infer.quantiles": (_floats, (0.1, 0.5, 0.9)),
    "out.dir": (str, "out"),
}


def parse_config(text: str, origin: str = "<config>") -> dict:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    cfg = {k: default for k, (_, default) in CONFIG_KEYS.items()}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{origin}:{lineno}: unknown config key {key!r}")
        conv = CONFIG_KEYS[key][0]
        try:
            cfg[key] = conv(value)
        except ValueError:
            raise ConfigError(f"{origin}:{lineno}: bad value {value!r} for {key}") from None
    if bool(cfg["data.path"]) == bool(cfg["data.synth"]):
        raise ConfigError(f"{origin}: set exactly one of data.path and data.synth")
    return cfg


def read_config(path) -> dict:
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        cfg = parse_config(fh.read(), origin=path)
    if cfg["data.path"] and not os.path.isabs(cfg["data.path"]):
        cfg["data.path"] = os.path.join(os.path.dirname(os.path.abspath(path)), cfg["data.path"])
    return cfg


def model_config(cfg: dict, n_var: int) -> ModelConfig:
    return ModelConfig(n_var=n_var, lookback=cfg["window.t"], horizon=cfg["window.h"],
                       d_model=cfg["model.d_model"], d_ext=cfg["model.d_ext"], layers=cfg["model.layers"],
                       mixer=cfg["model.mixer"], rank_k=cfg["model.rank_k"], heads=cfg["model.heads"],
                       seed=cfg["train.seed"])


def train_config(cfg: dict, loss: LossSpec | None = None) -> TrainConfig:
    loss = loss or LossSpec(cfg["loss.kind"], cfg["loss.alpha"], cfg["loss.beta"])
    return TrainConfig(lr=cfg["train.lr"], batch=cfg["train.batch"], epochs=cfg["train.epochs"],
                       patience=cfg["train.patience"], seed=cfg["train.seed"], loss=loss,
                       k_steps=cfg["infer.steps"])


@dataclass
class Prepared:
    series: data.RawSeries
    stats: data.GlobalStats
    train: tuple
    val: tuple
    test: tuple


def load_series(cfg: dict) -> data.RawSeries:
    if cfg["data.path"]:
        return data.load_csv(cfg["data.path"])
    return data.synth_generate(cfg["data.synth"], cfg["data.n_var"], cfg["data.length"],
                               Rng(cfg["train.seed"]).split("synth"))


def prepare(cfg: dict) -> Prepared:
    """Load, split chronologically, standardize on train statistics (unless
    ``data.standardize`` is off), window."""
    series = load_series(cfg)
    spec = data.SplitSpec(cfg["split.train"], cfg["split.val"], cfg["split.test"])
    t, h, stride = cfg["window.t"], cfg["window.h"], cfg["window.stride"]
    parts = data.split_chronological(series, spec, t, h)
    if cfg["data.standardize"]:
        stats = data.GlobalStats.fit(parts[0])
    else:  # identity statistics keep the checkpoint layout unchanged
        stats = data.GlobalStats(np.zeros(series.n_var), np.ones(series.n_var))
    windows = [data.window_arrays(data.standardize(p, stats), t, h, stride) for p in parts]
    return Prepared(series, stats, *windows)


def fit_model(cfg: dict, prep: Prepared, loss: LossSpec | None = None):
    basis = fit_ortho_basis(*prep.train)
    mcfg = model_config(cfg, prep.series.n_var)
    result = train_loop(prep.train, prep.val, basis, mcfg, train_config(cfg, loss))
    return result, basis, mcfg


def split_report(cfg, prep: Prepared, params, basis, mcfg, oracle: bool = False) -> MetricReport:
    xs, ys = prep.test
    samples, quantiles = cfg["infer.samples"], cfg["infer.quantiles"]
    if oracle:
        point, ensemble = ys, (np.broadcast_to(ys, (max(samples, 1),) + ys.shape) if samples > 1 else None)
    elif samples > 1:
        ensemble, point = forecast_ensemble(xs, params, basis, mcfg, cfg["infer.steps"], samples,
                                            Rng(cfg["train.seed"]).split("eval.ensemble"))
    else:
        point, ensemble = forecast(xs, params, basis, mcfg, cfg["infer.steps"]), None
    return MetricReport.compute(point, ys, ensemble, quantiles if ensemble is not None else ())


# -- commands -----------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = read_config(args.config)
    prep = prepare(cfg)
    start = time.perf_counter()
    result, basis, mcfg = fit_model(cfg, prep)
    out = cfg["out.dir"]
    os.makedirs(out, exist_ok=True)
    meta = {"best_epoch": result.best_epoch}
    save_checkpoint(os.path.join(out, "model.vlin"), result.params, basis, mcfg, meta,
                    prep.stats.mean, prep.stats.std)
    with open(os.path.join(out, "history.txt"), "w", encoding="utf-8") as fh:
        fh.write("epoch train_loss val_mse\n")
        for rec in result.history:
            fh.write(f"{rec.epoch} {rec.train_loss:.17g} {rec.val_mse:.17g}\n")
    report = split_report(cfg, prep, result.params, basis, mcfg)
    with open(os.path.join(out, "metrics.txt"), "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
    print(f"trained {len(result.history)} epochs (best {result.best_epoch}) in "
          f"{time.perf_counter() - start:.1f}s; artifacts in {out}")
    print(report.to_text(), end="")
    return EXIT_OK


def _input_windows(series: data.RawSeries, t: int, stride: int):
    if series.length < t:
        raise data.DataError(f"input has {series.length} rows, lookback needs {t}")
    view = np.lib.stride_tricks.sliding_window_view(series.values, t, axis=1)[:, ::stride, :]
    return view.transpose(1, 0, 2).copy()


def _write_forecast_csv(path, names, forecasts, starts):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(["window", "step"] + list(names)) + "\n")
        for w, start in enumerate(starts):
            for i, row in enumerate(forecasts[w].T, start=1):
                fh.write(",".join([str(start), str(i)] + ["%.10g" % v for v in row]) + "\n")


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.model_config
    series = data.load_csv(args.input)
    if series.n_var != cfg.n_var:
        raise ShapeError(f"input has {series.n_var} variates, checkpoint expects {cfg.n_var}")
    if ckpt.stats_mean is not None:
        series = data.standardize(series, data.GlobalStats(ckpt.stats_mean, ckpt.stats_std))
    xs = _input_windows(series, cfg.lookback, args.stride)
    starts = list(range(0, series.length - cfg.lookback + 1, args.stride))
    ensemble = None
    if args.samples is not None:
        ensemble, point = forecast_ensemble(xs, ckpt.params, ckpt.basis, cfg, args.steps, args.samples,
                                            Rng(args.seed).split("predict"), args.noise_std)
    else:
        point = forecast(xs, ckpt.params, ckpt.basis, cfg, args.steps)

    def unscale(a):
        if ckpt.stats_mean is None:
            return a
        return a * ckpt.stats_std[:, None] + ckpt.stats_mean[:, None]

    out = args.out or os.path.splitext(args.input)[0] + ".forecast.csv"
    _write_forecast_csv(out, series.names, unscale(point), starts)
    written = [out]
    if ensemble is not None:
        stem = os.path.splitext(out)[0]
        for q in args.quantiles:
            qpath = f"{stem}.q{q:g}.csv"
            _write_forecast_csv(qpath, series.names, unscale(np.quantile(ensemble, q, axis=0)), starts)
            written.append(qpath)
    print("wrote " + ", ".join(written))
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = read_config(args.config)
    if args.samples is not None:
        cfg["infer.samples"] = args.samples
    prep = prepare(cfg)
    if prep.series.n_var != ckpt.model_config.n_var:
        raise ShapeError(f"data has {prep.series.n_var} variates, checkpoint expects {ckpt.model_config.n_var}")
    report = split_report(cfg, prep, ckpt.params, ckpt.basis, ckpt.model_config, oracle=args.oracle_forecast)
    out = args.out or os.path.join(cfg["out.dir"], "metrics.txt")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
    print(report.to_text(), end="")
    return EXIT_OK


GRADCHECK_MIXERS = (("vectrans", {}), ("rank_k", {"rank_k": 4}), ("mhsa", {"heads": 2}), ("normlin", {}))


def run_gradcheck(sabotage: str | None = None, seed: int = 0, threshold: float = 1e-4):
    """Finite-difference certification on N=3, T=8, H=4, D=16, d=2, L=1.

    Returns a list of (mixer, loss kind, report)."""
    rows = []
    for mixer, extra in GRADCHECK_MIXERS:
        for kind in LOSS_KINDS:
            rng = Rng(seed).split(f"gradcheck.{mixer}.{kind}")
            cfg = ModelConfig(n_var=3, lookback=8, horizon=4, d_model=16, d_ext=2, layers=1,
                              mixer=mixer, **extra)
            params = init_params(cfg, rng.split("init"))
            params.update(init_wfm_params(cfg.horizon, rng.split("head")))
            jitter = rng.split("jitter")  # move off the symmetric init point
            params = {k: v + 0.3 * jitter.normal(v.shape) for k, v in params.items()}
            xs = rng.split("x").normal((2, 3, 8))
            ys = rng.split("y").normal((2, 3, 4))
            basis = fit_ortho_basis(xs, ys)
            spec = LossSpec(kind)
            analytic = None
            if sabotage:
                _, analytic = loss_and_grads(xs, ys, params, basis, cfg, spec,
                                             draw_flow_noise(rng.split("draws"), 2, 3, 4))
                if sabotage in analytic:
                    analytic[sabotage] = np.zeros_like(analytic[sabotage])
            report = finite_diff_check(params, (xs, ys), basis, cfg, spec, rng=rng.split("draws"),
                                       threshold=threshold, analytic=analytic)
            rows.append((mixer, kind, report))
    if sabotage and not any(sabotage in r.per_tensor for _, _, r in rows):
        raise ConfigError(f"--sabotage: no combination has a tensor named {sabotage!r}")
    return rows


def cmd_gradcheck(args) -> int:
    seed = read_config(args.config)["train.seed"] if args.config else 0
    start = time.perf_counter()
    with threadpool_limits(limits=1):
        rows = run_gradcheck(args.sabotage, seed)
    failed = []
    for mixer, kind, report in rows:
        name, err = report.worst
        verdict = "ok" if report.passed else "FAIL"
        masked, refined = sum(report.masked.values()), sum(report.refined.values())
        print(f"{mixer:<9} {kind:<13} worst {err:.3e} in {name} "
              f"(masked {masked}, refined {refined}) {verdict}")
        if not report.passed:
            failed.append(f"{mixer}/{kind}: {name}")
    print(f"gradcheck finished in {time.perf_counter() - start:.2f}s")
    if failed:
        print("gradient check failed: " + "; ".join(failed), file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_bench(args) -> int:
    rows = bench.bench_rows(args.sizes, args.d, args.heads, args.rank, args.repeats, timing=not args.no_timing)
    print(bench.format_report(rows), end="")
    return EXIT_OK


ABLATIONS = (
    ("wfm", LossSpec("wfm", -0.5, -0.5)),
    ("wfm.no_alpha", LossSpec("wfm", 0.0, -0.5)),
    ("wfm.no_beta", LossSpec("wfm", -0.5, 0.0)),
    ("wfm.no_weights", LossSpec("wfm", 0.0, 0.0)),
    ("vel_weighted", LossSpec("vel_weighted", -0.5, -0.5)),
    ("vel_mse", LossSpec("vel_mse")),
)


def cmd_ablate(args) -> int:
    cfg = read_config(args.config)
    prep = prepare(cfg)
    lines = [f"{'variant':<16} {'alpha':>6} {'beta':>6} {'test_mse':>12} {'test_mae':>12} {'epochs':>6}"]
    for name, spec in ABLATIONS:
        result, basis, mcfg = fit_model(cfg, prep, spec)
        pred = forecast(prep.test[0], result.params, basis, mcfg, cfg["infer.steps"])
        alpha, beta = ("-", "-") if spec.kind == "vel_mse" else (f"{spec.alpha:g}", f"{spec.beta:g}")
        lines.append(f"{name:<16} {alpha:>6} {beta:>6} {mse(pred, prep.test[1]):>12.6g} "
                     f"{mae(pred, prep.test[1]):>12.6g} {len(result.history):>6}")
        print(lines[-1], flush=True)
    os.makedirs(cfg["out.dir"], exist_ok=True)
    with open(os.path.join(cfg["out.dir"], "ablation.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_verify(args) -> int:
    table3 = None
    if args.table3:
        cfg = read_config(args.table3)
        prep = prepare(cfg)
        result, basis, mcfg = fit_model(cfg, prep)
        table3 = (*prep.test, result.params, basis, mcfg)
    report = proptests.run_all(Rng(args.seed), table3)
    print(report.to_text(), end="")
    return EXIT_OK if report.passed else EXIT_CHECK


# -- argument parsing --------------------------------------------------------------------

def _int_list(text):
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _quantile_list(text):
    try:
        qs = _floats(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated quantiles, got {text!r}") from None
    if not qs or any(not 0.0 < q < 1.0 for q in qs):
        raise argparse.ArgumentTypeError("quantiles must lie in (0, 1)")
    return qs


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vlinear", description="vLinear forecaster")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    cmds = parser.add_subparsers(dest="command", required=True)

    p = cmds.add_parser("train", help="train from a config file")
    p.add_argument("config")
    p.set_defaults(func=cmd_train)

    p = cmds.add_parser("predict", help="forecast every lookback window of a CSV")
    p.add_argument("checkpoint")
    p.add_argument("input")
    p.add_argument("--steps", type=int, default=10, help="Euler steps K")
    p.add_argument("--samples", type=int, default=None, help="Gaussian-start ensemble size")
    p.add_argument("--quantiles", type=_quantile_list, default=(0.1, 0.5, 0.9))
    p.add_argument("--noise-std", type=float, default=None, help="override the learned start std")
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_predict)

    p = cmds.add_parser("eval", help="metrics on the test split")
    p.add_argument("checkpoint")
    p.add_argument("config")
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--oracle-forecast", action="store_true", help="score the targets against themselves")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = cmds.add_parser("gradcheck", help="finite-difference gradient certification")
    p.add_argument("config", nargs="?")
    p.add_argument("--sabotage", default=None, metavar="TENSOR", help="zero one analytic gradient")
    p.set_defaults(func=cmd_gradcheck)

    p = cmds.add_parser("bench", help="FLOP counts and mixer timings")
    p.add_argument("--sizes", type=_int_list, default=(32, 64, 128, 256, 512, 1024))
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--rank", type=int, default=4)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--no-timing", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = cmds.add_parser("ablate", help="compare loss variants")
    p.add_argument("config")
    p.set_defaults(func=cmd_ablate)

    p = cmds.add_parser("verify", help="run the property checks")
    p.add_argument("--table3", metavar="CONFIG", default=None, help="also train a toy model and compare starts")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)
    return parser


INPUT_ERRORS = (ConfigError, data.DataError, CheckpointError, ShapeError, FileNotFoundError, ValueError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with threadpool_limits(limits=1):
            return args.func(args)
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
