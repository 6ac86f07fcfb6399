"""Command-line driver: ``fedstock synth|train|evaluate|compare``.

Layout under the output directory (``--out``, default: the config's
``output_dir``)::

    data/manifest.json, data/farm_<id>.jsonl     synth
    models/<regime>/manifest.json, *.ckpt, rounds.jsonl   train
    reports/report.csv, reports/summary.json      evaluate

Exit codes: 0 success, 1 unexpected error, 2 invalid config or usage,
3 missing dataset, 4 training divergence, 5 config hash mismatch,
6 reports with incompatible horizons.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from . import __version__
from . import data as ds
from . import experiment as ex
from . import federated as fd
from . import nn
from .errors import ConfigError, TrainingDivergence

log = logging.getLogger("fedstock")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_NO_DATASET = 3
EXIT_DIVERGED = 4
EXIT_HASH_MISMATCH = 5
EXIT_HORIZONS = 6

SERIES_COLUMNS = ("report", "regime", "farm_id", "n_animals", "rmse_kg", "mae_kg")
COMPARE_COLUMNS = ("report", "regime", "stratum", "horizon", "n", "rmse_kg", "mae_kg", "mape_pct", "r2",
                   "delta_rmse_kg", "delta_mae_kg", "config_hash", "seed", "tool_version")
PERSONAL_OR_LOCAL = ("local", "pfl", "pfl-sqrt", "pfl-finetune")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _resolve(args) -> tuple[ex.ExperimentConfig, Path]:
    cfg = ex.load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = Path(args.out) if args.out else Path(cfg.output_dir)
    return cfg, out


def _load_dataset(out: Path, cfg: ex.ExperimentConfig) -> tuple[ds.SyntheticDataset, dict]:
    data_dir = out / "data"
    if not (data_dir / "manifest.json").is_file():
        raise CliError(f"no dataset at {data_dir}; run 'fedstock synth' first", EXIT_NO_DATASET)
    dataset, manifest = ds.read_dataset(data_dir)
    if manifest.get("data_hash") != cfg.data_hash:
        raise CliError(f"dataset {data_dir} was generated with data hash {manifest.get('data_hash')}, "
                       f"config gives {cfg.data_hash}", EXIT_HASH_MISMATCH)
    return dataset, manifest


# -- synth --------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg, out = _resolve(args)
    dataset = ex.build_dataset(cfg)
    manifest = ds.write_dataset(dataset, out / "data", {**cfg.stamp(), "config": cfg.to_dict()})
    log.info("wrote %d farms, %d animals to %s", len(manifest["farms"]), manifest["total_animals"], out / "data")
    print(f"synth: {manifest['total_animals']} animals in {len(manifest['farms'])} farms -> {out / 'data'}")
    return EXIT_OK


# -- train --------------------------------------------------------------------

def _save_result(result: fd.TrainResult, farms: Sequence[ds.FarmSpec], model_dir: Path) -> dict:
    model_dir.mkdir(parents=True, exist_ok=True)
    for old in model_dir.glob("*.ckpt"):
        old.unlink()
    files: dict = {}
    if result.global_params is not None and not result.per_client:
        nn.save_checkpoint(result.global_params, model_dir / "global.ckpt")
        files["global"] = "global.ckpt"
    elif result.body is not None:
        nn.save_checkpoint(result.body, model_dir / "body.ckpt")
        files["body"] = "body.ckpt"
        files["heads"] = {}
        for k, f in enumerate(farms):
            name = f"head_{k:03d}.ckpt"
            nn.save_checkpoint(result.heads[f.farm_id], model_dir / name)
            files["heads"][f.farm_id] = name
    else:
        files["clients"] = {}
        for k, f in enumerate(farms):
            name = f"client_{k:03d}.ckpt"
            nn.save_checkpoint(result.per_client[f.farm_id], model_dir / name)
            files["clients"][f.farm_id] = name
    return files


def cmd_train(args) -> int:
    cfg, out = _resolve(args)
    if args.regime not in ex.REGIMES:
        raise ConfigError(f"unknown regime {args.regime!r}; choose from {sorted(ex.REGIMES)}", path="--regime")
    dataset, _ = _load_dataset(out, cfg)
    threads = args.threads or os.cpu_count() or 1
    try:
        result = ex.train_regime(args.regime, dataset, cfg, threads)
    except TrainingDivergence as exc:
        raise CliError(f"training diverged at client {exc.client_id}: {exc}", EXIT_DIVERGED) from None
    model_dir = out / "models" / args.regime
    files = _save_result(result, dataset.farms, model_dir)
    stamp = cfg.stamp()
    with open(model_dir / "rounds.jsonl", "w") as fh:
        for row in result.rounds:
            fh.write(json.dumps({**stamp, "regime": args.regime, **row}, sort_keys=True, default=float) + "\n")
    _dump_json(model_dir / "manifest.json", {**stamp, "regime": args.regime, "files": files,
                                              "model": cfg.model.to_dict()})
    if result.server is not None and result.server.head_tensors_seen():
        log.error("server saw HEAD tensors: %s", result.server.head_tensors_seen())
    print(f"train: {args.regime} -> {model_dir}")
    return EXIT_OK


# -- evaluate -----------------------------------------------------------------

def _params_for(model_dir: Path, files: dict):
    if "global" in files:
        params = nn.load_checkpoint(model_dir / files["global"])
        return lambda farm_id: params
    if "body" in files:
        body = nn.load_checkpoint(model_dir / files["body"])
        heads = {fid: nn.load_checkpoint(model_dir / name) for fid, name in files["heads"].items()}
        return lambda farm_id: body.merged(heads[farm_id])
    clients = {fid: nn.load_checkpoint(model_dir / name) for fid, name in files["clients"].items()}
    return lambda farm_id: clients[farm_id]


def cmd_evaluate(args) -> int:
    cfg, out = _resolve(args)
    dataset, _ = _load_dataset(out, cfg)
    models = out / "models"
    regimes = args.regime or sorted(p.name for p in models.glob("*") if (p / "manifest.json").is_file())
    if not regimes:
        raise CliError(f"no trained models under {models}; run 'fedstock train' first", EXIT_NO_DATASET)
    evals = []
    for regime in regimes:
        model_dir = models / regime
        if not (model_dir / "manifest.json").is_file():
            raise CliError(f"no trained model for regime {regime!r} under {models}", EXIT_NO_DATASET)
        meta = json.loads((model_dir / "manifest.json").read_text())
        if meta.get("config_hash") != cfg.config_hash or meta.get("data_hash") != cfg.data_hash:
            raise CliError(f"{model_dir} was trained with config hash {meta.get('config_hash')}, "
                           f"config gives {cfg.config_hash}", EXIT_HASH_MISMATCH)
        evals.append(ex.evaluate(regime, _params_for(model_dir, meta["files"]), dataset, cfg.model))
    stamp = cfg.stamp()
    report_dir = out / "reports"
    report_dir.mkdir(parents=True, exist_ok=True)
    rows = ex.report_rows(evals, dataset.farms, stamp)
    (report_dir / "report.csv").write_text(ex.rows_to_csv(rows, ex.REPORT_COLUMNS))
    summ = ex.summary(evals, dataset.farms, stamp)
    summ["horizon"] = cfg.model.horizon
    summ["farm_sizes"] = {f.farm_id: f.n_animals for f in dataset.farms}
    summ["rows"] = rows
    _dump_json(report_dir / "summary.json", summ)
    for ev in sorted(evals, key=lambda e: e.regime):
        s = ev.overall()
        print(f"evaluate: {ev.regime:13s} RMSE {s.rmse_kg:8.3f} kg  MAE {s.mae_kg:8.3f} kg")
    return EXIT_OK


# -- compare ------------------------------------------------------------------

def _read_summary(path: str) -> dict:
    p = Path(path)
    if p.is_dir():
        p = p / "summary.json" if (p / "summary.json").is_file() else p / "reports" / "summary.json"
    if not p.is_file():
        raise CliError(f"no summary.json at {path}", EXIT_NO_DATASET)
    return json.loads(p.read_text())


def cmd_compare(args) -> int:
    if len(args.reports) < 2:
        raise ConfigError("compare needs at least two reports", path="reports")
    labels = [str(r) for r in args.reports]
    summaries = [_read_summary(r) for r in args.reports]
    horizons = {s.get("horizon") for s in summaries}
    if len(horizons) != 1:
        raise CliError(f"reports disagree on the forecast horizon: {sorted(map(str, horizons))}", EXIT_HORIZONS)
    order = {label: i for i, (_, _, label) in enumerate(ds.TABLE3_BUCKETS, start=1)}
    order[ex.ALL_STRATUM] = 0
    base = {(r["regime"], r["stratum"], str(r["horizon"])): r for r in summaries[0]["rows"]}
    rows = []
    for label, summ in zip(labels, summaries):
        for r in summ["rows"]:
            ref = base.get((r["regime"], r["stratum"], str(r["horizon"])))
            rows.append({**r, "report": label,
                         "delta_rmse_kg": None if ref is None else r["rmse_kg"] - ref["rmse_kg"],
                         "delta_mae_kg": None if ref is None else r["mae_kg"] - ref["mae_kg"]})
    rows.sort(key=lambda r: (r["regime"], order.get(r["stratum"], 99),
                             -1 if r["horizon"] == ex.ALL_HORIZON else int(r["horizon"]), labels.index(r["report"])))
    series = []
    for label, summ in zip(labels, summaries):
        sizes = summ.get("farm_sizes", {})
        for regime in PERSONAL_OR_LOCAL:
            per_farm = summ["regimes"].get(regime, {}).get("per_farm", {})
            for fid, s in per_farm.items():
                if sizes.get(fid, 10 ** 9) < 50:
                    series.append({"report": label, "regime": regime, "farm_id": fid, "n_animals": sizes[fid],
                                   "rmse_kg": s["rmse_kg"], "mae_kg": s["mae_kg"]})
    series.sort(key=lambda r: (r["n_animals"], r["farm_id"], r["regime"], labels.index(r["report"])))
    out = Path(args.out) if args.out else Path("comparison")
    out.mkdir(parents=True, exist_ok=True)
    (out / "comparison.csv").write_text(ex.rows_to_csv(rows, COMPARE_COLUMNS))
    (out / "small_farm_series.csv").write_text(ex.rows_to_csv(series, SERIES_COLUMNS))
    print(f"compare: {len(rows)} rows, {len(series)} small-farm points -> {out}")
    return EXIT_OK


# -- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedstock", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"fedstock {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, regime: bool = False):
        sp.add_argument("--config", required=True,
                        help=f"config JSON path or bundled name ({', '.join(ex.bundled_config_names())})")
        sp.add_argument("--out", help="output directory (default: the config's output_dir)")
        sp.add_argument("--seed", type=int, help="override the config's master seed")
        sp.add_argument("--threads", type=int, default=None, help="client worker threads (default: CPU count)")

    common(sub.add_parser("synth", help="generate the synthetic dataset"))
    t = sub.add_parser("train", help="train one regime")
    common(t)
    t.add_argument("--regime", required=True, choices=sorted(ex.REGIMES))
    e = sub.add_parser("evaluate", help="score trained regimes on the test split")
    common(e)
    e.add_argument("--regime", action="append", choices=sorted(ex.REGIMES),
                   help="regime to evaluate (repeatable; default: every trained regime)")
    c = sub.add_parser("compare", help="consolidate two or more evaluation reports")
    c.add_argument("reports", nargs="+", help="report directories or summary.json files")
    c.add_argument("--out", help="output directory (default: ./comparison)")
    return p


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "evaluate": cmd_evaluate, "compare": cmd_compare}


def main(argv: Sequence[str] | None = None) -> int:
    level = os.environ.get("FEDSTOCK_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    if getattr(args, "threads", None) is not None and args.threads < 1:
        print("error: --threads: must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except TrainingDivergence as exc:
        print(f"error: training diverged at client {exc.client_id}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
