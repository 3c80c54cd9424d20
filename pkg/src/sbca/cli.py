"""Command-line entry point: ``sbca {synth,ingest,train,backtest,ablate,cost-sweep}``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .agent import VARIANTS, SBCAAllocator, TrainConfig
from .config import DEFAULT_TICKERS, ExperimentConfig, load_config
from .dataio import (
    PanelDataset,
    build_panel,
    load_index,
    load_news,
    load_prices,
    read_panel,
    split_time_series,
    synth_generate,
    synthetic_news,
    write_news_csv,
    write_panel,
    write_price_csv,
)
from .env import CostModel, write_trajectory_csv
from .errors import (
    ConstructionError,
    InsolvencyError,
    NumericError,
    ParameterError,
    RangeError,
    SchemaError,
    SizeError,
    TrainingError,
    UndefinedMetricError,
    ValidationError,
)
from .evaluation import (
    RunReport,
    ablation_grid,
    agent_report,
    cost_sweep,
    report_payload,
    run_buy_and_hold,
    run_equal_weight,
    run_index,
    write_ablation_csv,
    write_json,
    write_pv_curves,
    write_sweep_csv,
)

logger = logging.getLogger("sbca")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_USAGE = 0, 2, 3, 64
INPUT_ERRORS = (SchemaError, ValidationError, SizeError, RangeError, ParameterError, ConstructionError, OSError)
NUMERIC_ERRORS = (NumericError, TrainingError, InsolvencyError, UndefinedMetricError)
BENCHMARKS = ("equal_weight", "buy_and_hold", "index")
SIGNAL_TOL = 1e-3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# run manifest


class Manifest:
    """``manifest.json`` in the output directory: every artifact with its digest."""

    def __init__(self, out_dir: Path, cfg: ExperimentConfig):
        self.path = out_dir / "manifest.json"
        self.out_dir = out_dir
        self.data = json.loads(self.path.read_text()) if self.path.exists() else {"artifacts": {}, "commands": []}
        self.data.update(config_hash=cfg.digest(), seed=cfg.seed, code_version=__version__)

    def record(self, command: str, *paths: Path) -> None:
        for p in paths:
            digest = hashlib.sha256(p.read_bytes()).hexdigest()
            self.data["artifacts"][p.relative_to(self.out_dir).as_posix()] = digest
        self.data["commands"].append({"command": command, "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z")})
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# helpers


def _config(args) -> ExperimentConfig:
    overrides = {}
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    if args.seed is not None:
        overrides["seed"] = args.seed
    overrides["out_dir"] = args.out
    return load_config(args.config, **overrides)


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _panel_path(args, out: Path) -> Path:
    return Path(args.panel) if getattr(args, "panel", None) else out / "panel.json"


def _group_panel(panel: PanelDataset, cfg: ExperimentConfig, group: str) -> PanelDataset:
    if group not in cfg.groups:
        raise ParameterError(f"unknown group {group!r}; known: {sorted(cfg.groups)}")
    return panel.subset(cfg.groups[group])


def _synthetic_panel(cfg: ExperimentConfig) -> PanelDataset:
    raw = synth_generate(cfg.seed, len(DEFAULT_TICKERS), cfg.synth_days, drift=cfg.synth_drift, vol=cfg.synth_vol,
                         window=cfg.window, tickers=DEFAULT_TICKERS)
    return split_time_series(raw, cfg.boundaries)


def _report_entry(group: str, strategy: str, split: str, report: RunReport) -> dict:
    entry = report_payload([(group, strategy, report)])[0]
    entry["split"] = split
    return entry


def _write_signals(out: Path, panel: PanelDataset, days: np.ndarray, weights: np.ndarray) -> list[Path]:
    """Per-asset weight series with a buy/sell/hold marker from the change in weight."""
    paths = []
    previous = np.vstack([np.full((1, panel.n_assets), 1.0 / panel.n_assets), weights[:-1]])
    delta = weights - previous
    for j, ticker in enumerate(panel.tickers):
        path = out / f"signals_{ticker}.csv"
        with path.open("w") as fh:
            fh.write("date,close,weight,delta_weight,signal\n")
            for k, d in enumerate(days):
                dw = float(delta[k, j])
                signal = "buy" if dw > SIGNAL_TOL else "sell" if dw < -SIGNAL_TOL else "hold"
                fh.write(f"{panel.dates[d]},{panel.closes[d, j]!r},{float(weights[k, j])!r},{dw!r},{signal}\n")
        paths.append(path)
    return paths


def _allocator(cfg: ExperimentConfig, variant: str) -> SBCAAllocator:
    return SBCAAllocator(variant=variant, **{k: getattr(cfg, k) for k in TrainConfig.field_names()})


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    panel = _synthetic_panel(cfg)
    prices, news = out / "prices.csv", out / "news.csv"
    write_price_csv(panel, prices)
    write_news_csv(synthetic_news(panel), news)
    Manifest(out, cfg).record("synth", prices, news)
    print(f"wrote {prices} and {news} ({panel.n_days} days, {panel.n_assets} assets)")
    return EXIT_OK


def cmd_ingest(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    if cfg.synthetic:
        panel, dropped, coverage = _synthetic_panel(cfg), 0, None
    else:
        if not cfg.prices:
            raise UsageError("ingest needs a price file (--set prices=PATH) or --synthetic")
        prices = load_prices(cfg.prices)
        news = load_news(cfg.news) if cfg.news else []
        panel, aligned = build_panel(prices, news)
        panel = split_time_series(panel, cfg.boundaries)
        dropped, coverage = aligned.n_dropped, aligned.coverage
    needed = sorted({t for members in cfg.groups.values() for t in members} - set(panel.tickers))
    if needed:
        raise ValidationError(f"config groups reference tickers missing from the price data: {needed}")
    path = out / "panel.json"
    write_panel(panel, path)
    Manifest(out, cfg).record("ingest", path)
    counts = {tag: int((panel.split == tag).sum()) for tag in ("train", "val", "test")}
    cov = "n/a (synthetic)" if coverage is None else f"{100 * coverage:.1f}%"
    print(f"panel: {panel.n_days} days, {panel.n_assets} assets, splits {counts}, news coverage {cov}, "
          f"dropped news {dropped}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    panel = _group_panel(read_panel(_panel_path(args, out)), cfg, args.group)
    est = _allocator(cfg, args.variant)
    try:
        est.fit(panel)
    except TrainingError as exc:
        diag = out / "diagnostics.json"
        write_json({"error": str(exc), **exc.diagnostics}, diag)
        print(f"training aborted: {exc}; diagnostics in {diag}", file=sys.stderr)
        return EXIT_NUMERIC
    ckpt, log = out / "checkpoint.json", out / "trainlog.csv"
    est.save(ckpt)
    est.train_log_.write_csv(log)
    Manifest(out, cfg).record("train", ckpt, log)
    print(f"{args.variant}/{args.group}: best epoch {est.train_log_.best_epoch}, "
          f"val PV {est.train_log_.epochs[est.train_log_.best_epoch].val_pv:.6f}")
    return EXIT_OK


def cmd_backtest(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    panel = read_panel(_panel_path(args, out))
    commission = cfg.commission if args.commission is None else args.commission
    cost = CostModel(commission)
    if args.checkpoint:
        ckpt = Path(args.checkpoint)
        if not ckpt.exists():
            raise FileNotFoundError(f"checkpoint not found: {ckpt}")
        est = SBCAAllocator.load(ckpt)
        panel = panel.subset(est.tickers_)
        evaluation = est.evaluate(panel, args.split, commission=commission)
        report, strategy = agent_report(evaluation, cfg.rf_annual), est.variant
        days, records = evaluation.days, evaluation.rollout.records
    else:
        if args.group:
            panel = _group_panel(panel, cfg, args.group)
        if args.benchmark == "equal_weight":
            report, strategy = run_equal_weight(panel, args.split, cost, cfg.window, cfg.rf_annual), "EqualWeight"
        elif args.benchmark == "buy_and_hold":
            report, strategy = run_buy_and_hold(panel, args.split, cost, cfg.window, cfg.rf_annual), "BuyAndHold"
        else:
            if not cfg.index:
                raise UsageError("the index benchmark needs --set index=PATH")
            dates, closes = load_index(cfg.index)
            report, strategy = run_index(dates, closes, panel, args.split, cfg.window, cfg.rf_annual), "Index"
        days = panel.split_days(args.split)
        days = days[days >= max(cfg.window, 1)]
        records = None
    files = [out / "report.json"]
    write_json(_report_entry(args.group or "", strategy, args.split, report), files[0])
    if records is not None:
        files.append(out / "trajectory.csv")
        write_trajectory_csv(records, files[-1], dates=panel.dates[days])
    if strategy != "Index":
        files += _write_signals(out, panel, days, report.weights)
    Manifest(out, cfg).record("backtest", *files)
    metrics = ", ".join(f"{k}={'n/a' if v is None else f'{v:.4f}'}" for k, v in report.metrics().items())
    print(f"{strategy} on {args.split}: {metrics}")
    return EXIT_OK


def _groups(cfg: ExperimentConfig, panel: PanelDataset, selected) -> dict[str, PanelDataset]:
    names = selected or list(cfg.groups)
    return {g: _group_panel(panel, cfg, g) for g in names}


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    groups = _groups(cfg, read_panel(_panel_path(args, out)), args.group)
    cells = ablation_grid(groups, cfg.train_config(), cfg.variants, split=args.split)
    rows, curves = [], {}
    for cell in cells:
        rows.append((cell.group, cell.variant, cell.report))
        if not cell.failed:
            curves[f"{cell.group}/{cell.variant}"] = cell.report.net_values
    for name, panel in groups.items():
        for strategy, run in (("EqualWeight", run_equal_weight), ("BuyAndHold", run_buy_and_hold)):
            report = run(panel, args.split, CostModel(cfg.commission), cfg.window, cfg.rf_annual)
            rows.append((name, strategy, report))
            curves[f"{name}/{strategy}"] = report.net_values
    ablation, report_path, pv = out / "ablation.csv", out / "report.json", out / "pv_curves.csv"
    write_ablation_csv(cells, ablation)
    write_json(report_payload(rows), report_path)
    any_panel = next(iter(groups.values()))
    days = any_panel.split_days(args.split)
    days = days[days >= max(cfg.window, 1)]
    dates = np.concatenate([[any_panel.dates[days[0] - 1]], any_panel.dates[days]])
    write_pv_curves(curves, pv, dates=dates)
    Manifest(out, cfg).record("ablate", ablation, report_path, pv)
    n_ok = sum(not c.failed for c in cells)
    print(f"ablation: {n_ok}/{len(cells)} cells succeeded")
    return EXIT_OK if n_ok else EXIT_NUMERIC


def cmd_cost_sweep(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    panel = read_panel(_panel_path(args, out))
    cells = []
    if args.checkpoint:
        allocators = {}
        for item in args.checkpoint:
            name, sep, path = item.partition("=")
            est = SBCAAllocator.load(path if sep else name)
            allocators[name if sep else est.variant] = est
        tickers = {est.tickers_ for est in allocators.values()}
        if len(tickers) != 1:
            raise ValidationError("checkpoints in one sweep must share a ticker set")
        sub = panel.subset(tickers.pop())
        cells += cost_sweep(sub, args.split, allocators, cfg.commissions, group=",".join(sub.tickers),
                            window=cfg.window, annual_rf=cfg.rf_annual)
    else:
        for group, sub in _groups(cfg, panel, args.group).items():
            grid = ablation_grid({group: sub}, cfg.train_config(), cfg.variants, split=args.split)
            allocators = {c.variant: c.allocator for c in grid if not c.failed}
            cells += cost_sweep(sub, args.split, allocators, cfg.commissions, group=group,
                                window=cfg.window, annual_rf=cfg.rf_annual)
    path = out / "cost_sweep.csv"
    write_sweep_csv(cells, path)
    Manifest(out, cfg).record("cost-sweep", path)
    print(f"cost sweep: {len(cells)} cells written to {path}")
    return EXIT_OK if cells else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON config file")
    common.add_argument("--out", default="runs", help="output directory (default: runs)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override any config key; VALUE is parsed as JSON when possible")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="sbca", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="write seeded synthetic prices.csv and news.csv")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", parents=[common], help="validate inputs and write panel.json")
    p.add_argument("--prices")
    p.add_argument("--news")
    p.add_argument("--synthetic", action="store_true", help="generate a seeded synthetic panel instead")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", parents=[common], help="train one variant on one asset group")
    p.add_argument("--panel")
    p.add_argument("--variant", choices=VARIANTS, default="SBCA")
    p.add_argument("--group", default="2assets")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("backtest", parents=[common], help="evaluate a checkpoint or a benchmark")
    p.add_argument("--panel")
    what = p.add_mutually_exclusive_group(required=True)
    what.add_argument("--checkpoint")
    what.add_argument("--benchmark", choices=BENCHMARKS)
    p.add_argument("--group", help="asset group for benchmarks (default: every ticker in the panel)")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--commission", type=float)
    p.set_defaults(func=cmd_backtest)

    p = sub.add_parser("ablate", parents=[common], help="train every variant on every group")
    p.add_argument("--panel")
    p.add_argument("--group", action="append", help="restrict to these groups (repeatable)")
    p.add_argument("--split", choices=("val", "test"), default="test")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("cost-sweep", parents=[common], help="Sharpe per strategy and commission level")
    p.add_argument("--panel")
    p.add_argument("--group", action="append", help="restrict to these groups (repeatable)")
    p.add_argument("--checkpoint", action="append", metavar="[NAME=]PATH",
                   help="re-evaluate trained checkpoints instead of training the config variants")
    p.add_argument("--split", choices=("val", "test"), default="test")
    p.set_defaults(func=cmd_cost_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "ingest":
        if args.synthetic:
            args.set = (args.set or []) + ["synthetic=true"]
        for key in ("prices", "news"):
            if getattr(args, key):
                args.set = (args.set or []) + [f"{key}={json.dumps(getattr(args, key))}"]
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"sbca: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except INPUT_ERRORS as exc:
        print(f"sbca: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NUMERIC_ERRORS as exc:
        print(f"sbca: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
