"""Command-line front end: gen-data, mine, eval, combine, backtest, diagnose.

Every option may come from a flat ``key = value`` config file (``--config``)
or from the matching ``--key`` flag; flags win.  The resolved configuration
is echoed into the output directory as ``config.txt``.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .engine import (Panel, evaluate, generate_synthetic, noise_for_ic, read_panel_csv,
                     write_labels_csv, write_panel_csv)
from .formula import RPNError, to_rpn
from .metrics import (REPORT_COLUMNS, backtest, emit_wealth_curve, format_value,
                      write_summary)
from .pool import (combine_mega_alpha, correlation_matrix, read_pool_file,
                   variance_diagnostics)
from .trainer import Miner, TrainConfig

logger = logging.getLogger("flowalpha")


class ConfigError(ValueError):
    pass


def _opt(kind: Callable):
    def parse(text: str):
        if text.strip().lower() in ("", "none", "null"):
            return None
        return kind(text)
    return parse


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (parser, default, help)
_DATA = {
    "panel": (_opt(str), None, "panel CSV (date,asset,open,high,low,close,vwap,volume)"),
    "labels": (_opt(str), None, "optional label CSV (date,asset,label)"),
    "data_seed": (int, 0, "seed for the synthetic panel when no CSV is given"),
    "n_days": (int, 750, "synthetic panel days"),
    "n_assets": (int, 100, "synthetic panel assets"),
    "planted": (_opt(str), None, "RPN of an alpha planted into synthetic labels"),
    "planted_ic": (_opt(float), None, "target IC of the planted alpha"),
    "horizon": (int, 20, "label horizon in days"),
}
_PARSERS = {"int": int, "float": float, "int | None": _opt(int), "float | None": _opt(float)}
_TRAIN = {f.name: (_PARSERS[str(f.type)], f.default, f"training: {f.name}")
          for f in fields(TrainConfig)}
_COMBINE = {
    "lookback": (int, 252, "combiner trailing window in days"),
    "top_k": (int, 10, "alphas kept at each re-selection"),
    "rebalance": (int, 20, "days between re-selections"),
}
_MARKET = {
    "mode": (str, "long_only", "long_only or long_short"),
    "hold": (int, 20, "holding period in days"),
    "cost_bps": (float, 0.0, "transaction cost per side in basis points"),
}
_COMMON = {"out": (str, "run", "output directory")}

COMMANDS: dict[str, dict] = {
    "gen-data": {**_COMMON, **{k: _DATA[k] for k in
                               ("data_seed", "n_days", "n_assets", "planted", "planted_ic", "horizon")}},
    "mine": {**_COMMON, **_DATA, **_TRAIN, "resume": (_opt(str), None, "checkpoint directory to resume")},
    "eval": {**_COMMON, **_DATA, **_COMBINE, **_MARKET, "pool": (str, None, "pool file")},
    "combine": {**_COMMON, **_DATA, **_COMBINE, "pool": (str, None, "pool file")},
    "backtest": {**_COMMON, **_DATA, **_COMBINE, **_MARKET, "pool": (_opt(str), None, "pool file"),
                 "alpha": (_opt(str), None, "single RPN alpha instead of the pool's Mega-Alpha")},
    "diagnose": {**_COMMON, **_DATA, "pool": (str, None, "pool file"),
                 "sigma2": (float, 1.0, "residual variance"),
                 "T": (_opt(int), None, "sample length (default: observations used)")},
}


def read_config_file(path: str | Path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    out: dict[str, str] = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def resolve(command: str, file_values: dict[str, str], flag_values: dict[str, str]) -> dict:
    options = COMMANDS[command]
    unknown = (set(file_values) | set(flag_values)) - set(options)
    if unknown:
        raise ConfigError(f"unknown config keys for {command}: {sorted(unknown)}")
    cfg = {}
    for key, (parse, default, _) in options.items():
        raw = flag_values.get(key, file_values.get(key))
        if raw is None:
            cfg[key] = default
            continue
        try:
            cfg[key] = parse(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc
    return cfg


def echo_config(cfg: dict, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.txt", "w") as fh:
        for k in sorted(cfg):
            v = cfg[k]
            fh.write(f"{k} = {'none' if v is None else v}\n")


def train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig.from_dict(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_panel(cfg: dict) -> Panel:
    if cfg.get("panel"):
        return read_panel_csv(cfg["panel"], cfg.get("labels"), cfg["horizon"])
    noise = noise_for_ic(cfg["planted_ic"]) if cfg.get("planted_ic") else 0.0
    return generate_synthetic(cfg["data_seed"], cfg["n_days"], cfg["n_assets"], cfg.get("planted"),
                              noise, cfg["horizon"])


def _require(cfg: dict, key: str) -> None:
    if cfg.get(key) is None:
        raise ConfigError(f"missing required option --{key.replace('_', '-')}")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen_data(cfg: dict) -> int:
    if cfg["n_days"] <= 0 or cfg["n_assets"] <= 0:
        raise ConfigError("n_days and n_assets must be positive")
    out = Path(cfg["out"])
    panel = load_panel({**cfg, "panel": None})
    echo_config(cfg, out)
    write_panel_csv(panel, out / "panel.csv")
    write_labels_csv(panel, out / "labels.csv")
    print(f"wrote {panel.n_days * panel.n_assets} rows to {out / 'panel.csv'}")
    return 0


def cmd_mine(cfg: dict) -> int:
    tc = train_config(cfg)
    out = Path(cfg["out"])
    panel = load_panel(cfg)
    echo_config(cfg, out)
    if cfg.get("resume"):
        miner = Miner.resume(cfg["resume"], panel, out_dir=out, config=tc)
    else:
        for stale in ("train_log.csv",):
            (out / stale).unlink(missing_ok=True)
        miner = Miner(tc, panel, out_dir=out)
    pool = miner.run()
    print(f"episodes={miner.episode} pool={len(pool)} best_r_ic={pool.best_ic():.6f}")
    return 0


def _report_rows(trees, panel: Panel, cfg: dict):
    rows = []
    signals = [evaluate(t, panel) for t in trees]
    for t, s in zip(trees, signals):
        rep = backtest(s, panel, cfg["mode"], cfg["hold"], cfg["cost_bps"])
        rows.append((to_rpn(t), rep))
    mega = combine_mega_alpha([s.values for s in signals], panel.labels, cfg["lookback"],
                              cfg["top_k"], cfg["rebalance"], panel.horizon + 1,
                              names=[to_rpn(t) for t in trees])
    rows.append(("MegaAlpha", backtest(mega.signal, panel, cfg["mode"], cfg["hold"],
                                       cfg["cost_bps"])))
    return rows, mega


def cmd_eval(cfg: dict) -> int:
    _require(cfg, "pool")
    trees = read_pool_file(cfg["pool"])
    panel = load_panel(cfg)
    out = Path(cfg["out"])
    echo_config(cfg, out)
    rows, _ = _report_rows(trees, panel, cfg)
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["alpha", *REPORT_COLUMNS])
        for name, rep in rows:
            w.writerow([name] + [format_value(v) for v in rep.summary().values()])
    width = max(len(n) for n, _ in rows)
    print(f"{'alpha':<{width}}  " + "  ".join(f"{c:>9}" for c in REPORT_COLUMNS))
    for name, rep in rows:
        vals = ["NA" if v is None else f"{v:.4f}" for v in rep.summary().values()]
        print(f"{name:<{width}}  " + "  ".join(f"{v:>9}" for v in vals))
    return 0


def cmd_combine(cfg: dict) -> int:
    _require(cfg, "pool")
    trees = read_pool_file(cfg["pool"])
    panel = load_panel(cfg)
    out = Path(cfg["out"])
    echo_config(cfg, out)
    names = [to_rpn(t) for t in trees]
    mega = combine_mega_alpha([evaluate(t, panel).values for t in trees], panel.labels,
                              cfg["lookback"], cfg["top_k"], cfg["rebalance"],
                              panel.horizon + 1, names=names)
    mega.write_weights(out / "weights.csv", panel.dates)
    with open(out / "mega_alpha.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "asset", "value"])
        for d in range(panel.n_days):
            if mega.signal.usable_days[d]:
                ds = str(np.datetime64(panel.dates[d], "D"))
                for a, v in zip(panel.assets, mega.signal.values[d]):
                    w.writerow([ds, a, repr(float(v))])
    print(f"{len(mega.rebalance_days)} rebalances, weights in {out / 'weights.csv'}")
    return 0


def cmd_backtest(cfg: dict) -> int:
    panel = load_panel(cfg)
    out = Path(cfg["out"])
    if cfg.get("alpha"):
        signal = evaluate(cfg["alpha"], panel)
    else:
        _require(cfg, "pool")
        trees = read_pool_file(cfg["pool"])
        signal = combine_mega_alpha([evaluate(t, panel).values for t in trees], panel.labels,
                                    cfg["lookback"], cfg["top_k"], cfg["rebalance"],
                                    panel.horizon + 1).signal
    echo_config(cfg, out)
    rep = backtest(signal, panel, cfg["mode"], cfg["hold"], cfg["cost_bps"])
    emit_wealth_curve(rep, out / "wealth.csv")
    write_summary(rep, out / "metrics.txt")
    for k, v in rep.summary().items():
        print(f"{k} = {format_value(v)}")
    return 0


def cmd_diagnose(cfg: dict) -> int:
    _require(cfg, "pool")
    trees = read_pool_file(cfg["pool"])
    if len(trees) < 2:
        raise ValueError("diagnostics need at least two alphas")
    panel = load_panel(cfg)
    out = Path(cfg["out"])
    echo_config(cfg, out)
    values = [evaluate(t, panel).values for t in trees]
    sigma = correlation_matrix(values)
    n_obs = int(np.isfinite(np.stack(values)).all(axis=0).sum())
    T = cfg["T"] if cfg["T"] is not None else n_obs
    rep = variance_diagnostics(sigma, cfg["sigma2"], T)
    with open(out / "diagnostics.txt", "w") as fh:
        for k, v in rep.summary().items():
            fh.write(f"{k} = {v!r}\n")
        for i, ev in enumerate(rep.eigenvalues):
            fh.write(f"eigenvalue_{i} = {float(ev)!r}\n")
        for t, vif in zip(trees, rep.vif):
            fh.write(f"vif[{to_rpn(t)}] = {float(vif)!r}\n")
    for k, v in rep.summary().items():
        print(f"{k} = {v:.6g}")
    return 0


HANDLERS = {"gen-data": cmd_gen_data, "mine": cmd_mine, "eval": cmd_eval,
            "combine": cmd_combine, "backtest": cmd_backtest, "diagnose": cmd_diagnose}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowalpha", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, options in COMMANDS.items():
        sp = sub.add_parser(name, help=HANDLERS[name].__doc__)
        sp.add_argument("--config", help="flat key = value config file")
        for key, (_, default, text) in options.items():
            sp.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None,
                            help=f"{text} (default: {default})")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    flags = {k: v for k, v in vars(args).items()
             if k in COMMANDS[args.command] and v is not None}
    try:
        file_values = read_config_file(args.config) if args.config else {}
        cfg = resolve(args.command, file_values, flags)
        return HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RPNError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
