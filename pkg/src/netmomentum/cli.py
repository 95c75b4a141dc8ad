"""Command-line entry points: synth, features, backtest, export-graphs, gradcheck.

Every command reads one JSON config; ``--set dotted.key=value`` overrides
single keys (values are parsed as JSON when possible). Exit codes: 0 ok,
1 validation error, 2 numeric/convergence failure, 3 I/O error.
"""
from __future__ import annotations

import argparse
import copy
import csv
import datetime as _dt
import hashlib
import json
import logging
import os
import platform
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import backtest as bt
from .data import DataError, PricePanel, SyntheticSpec, generate_synthetic, load_csv
from .graphsolver import edge_index
from .model import NetworkModel
from .pipeline import STRATEGIES, FeatureConfig, GraphGrid, network_snapshot, prepare, walk_forward
from .training import Ensemble, TrainConfig, TrainingDivergence, WalkForwardPlan
from .unroll import NumericError, gradcheck

logger = logging.getLogger("netmomentum")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
OUTPUT_ROOT_ENV = "NETMOMENTUM_OUTPUT_ROOT"
NETWORK_MODELS = ("l2gmom", "l2gmom_sr")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration

DEFAULT_CONFIG = {
    "data": {"synthetic": {"n_assets": 20, "n_days": 3000,
                           "planted_graph": {"kind": "blocks", "n_blocks": 2}}},
    "features": {},
    "solver": {"alphas": [0.1, 0.5, 1.0, 2.0], "betas": [0.1, 0.5, 1.0, 2.0],
               "gamma": 0.1, "tol": 1e-6, "max_iters": 2000},
    "strategies": list(STRATEGIES),
    "train": {},
    "models": {},
    "plan": {"kind": "expanding", "initial_train": 7 * 252, "test_len": 5 * 252,
             "valid_fraction": 0.1},
    "backtest": {"cost_levels_bps": list(bt.COST_LEVELS_BPS), "cost_vol": "asset"},
    "export": {"every": 21, "model": "l2gmom"},
    "output_dir": "run",
    "seed": 0,
}


def deep_merge(base: dict, over: dict) -> dict:
    """Recursive merge; a given ``data`` section replaces the default source whole."""
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "data":
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def apply_override(doc: dict, spec: str) -> None:
    """Apply one ``a.b.c=value`` override in place."""
    if "=" not in spec:
        raise ConfigError(f"override {spec!r} is not of the form key=value")
    key, raw = spec.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.split(".")
    node = doc
    for p in parts[:-1]:
        nxt = node.get(p)
        if nxt is None:
            nxt = node[p] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(f"cannot override {key!r}: {p!r} is not a section")
        node = nxt
    node[parts[-1]] = value


def _dataclass_from(cls, doc: dict, where: str):
    known = {f.name for f in fields(cls)}
    extra = set(doc) - known
    if extra:
        raise ConfigError(f"unknown {where} keys: {sorted(extra)}")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from exc


@dataclass
class RunConfig:
    data: dict
    features: FeatureConfig
    graph_grid: GraphGrid
    strategies: list
    train: dict  # model name -> TrainConfig
    plan: dict
    cost_levels_bps: list
    cost_vol: str
    export: dict
    output_dir: Path
    seed: int
    raw: dict = field(repr=False, default_factory=dict)

    @classmethod
    def from_dict(cls, doc: dict, base_dir: Path | None = None) -> "RunConfig":
        doc = deep_merge(DEFAULT_CONFIG, doc)
        unknown = set(doc) - set(DEFAULT_CONFIG)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        data = doc["data"]
        if not isinstance(data, dict) or len({"csv", "synthetic"} & set(data)) != 1 or \
                set(data) - {"csv", "synthetic", "date_format"}:
            raise ConfigError("data must name exactly one source: 'csv' or 'synthetic'")
        if "csv" in data:
            path = Path(data["csv"])
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            if not path.exists():
                raise ConfigError(f"data.csv does not exist: {path}")
            data = dict(data, csv=str(path))
        else:
            spec = dict(data["synthetic"])
            spec.setdefault("seed", doc["seed"])
            try:
                SyntheticSpec.from_dict(spec)
            except (DataError, KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"invalid data.synthetic: {exc}") from exc
            data = {"synthetic": spec}

        feats = _dataclass_from(FeatureConfig, doc["features"], "features")
        solver = dict(doc["solver"])
        grid = _dataclass_from(GraphGrid, {
            "alphas": tuple(solver.pop("alphas", GraphGrid.alphas)),
            "betas": tuple(solver.pop("betas", GraphGrid.betas)), **solver}, "solver")
        if not grid.alphas or not grid.betas or min(grid.alphas + grid.betas) <= 0:
            raise ConfigError("solver alphas and betas must be non-empty and positive")

        strategies = list(doc["strategies"])
        bad = [s for s in strategies if s not in STRATEGIES]
        if bad or not strategies or len(set(strategies)) != len(strategies):
            raise ConfigError(f"strategies must be distinct names from {list(STRATEGIES)}")

        unknown_models = set(doc["models"]) - set(NETWORK_MODELS)
        if unknown_models:
            raise ConfigError(f"unknown models sections: {sorted(unknown_models)}")
        train = {}
        for name in NETWORK_MODELS:
            merged = {"seed": doc["seed"], **doc["train"], **doc["models"].get(name, {})}
            merged["loss"] = "mse" if name == "l2gmom" else "neg_sharpe"
            if name in strategies:
                train[name] = _dataclass_from(TrainConfig, merged, f"train config for {name}")

        plan = dict(doc["plan"])
        if plan.get("kind") not in ("expanding", "by_year"):
            raise ConfigError("plan.kind must be 'expanding' or 'by_year'")
        costs = [float(c) for c in doc["backtest"].get("cost_levels_bps", bt.COST_LEVELS_BPS)]
        if any(c < 0 for c in costs):
            raise ConfigError("cost levels must be >= 0")
        cost_vol = doc["backtest"].get("cost_vol", "asset")
        if cost_vol not in ("asset", "target"):
            raise ConfigError("backtest.cost_vol must be 'asset' or 'target'")

        out = Path(doc["output_dir"])
        if not out.is_absolute():
            out = Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / out
        if not isinstance(doc["seed"], int):
            raise ConfigError("seed must be an integer")
        return cls(data, feats, grid, strategies, train, plan, costs, cost_vol,
                   dict(doc["export"]), out, doc["seed"], doc)

    def load_panel(self) -> PricePanel:
        if "csv" in self.data:
            return load_csv(self.data["csv"], self.data.get("date_format", "%Y-%m-%d"))
        return generate_synthetic(SyntheticSpec.from_dict(self.data["synthetic"]))

    def make_plan(self, dates) -> WalkForwardPlan:
        p = {k: v for k, v in self.plan.items() if k != "kind"}
        try:
            if self.plan["kind"] == "expanding":
                plan = WalkForwardPlan.expanding(len(dates), **p)
            else:
                plan = WalkForwardPlan.by_year(dates, **p)
        except TypeError as exc:
            raise ConfigError(f"invalid plan: {exc}") from exc
        if not plan.windows:
            raise ConfigError("walk-forward plan has no test window inside the data range")
        return plan


def load_config(path, overrides=()) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    for spec in overrides:
        apply_override(doc, spec)
    return RunConfig.from_dict(doc, base_dir=path.parent)


# ---------------------------------------------------------------------------
# output helpers

class OutputLock:
    """Exclusive ownership of an output directory via a lock file."""

    def __init__(self, directory: Path):
        self.path = Path(directory) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as exc:
            raise OSError(f"output directory is locked by another run: {self.path}") from exc
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=_json_default) + "\n",
                    encoding="utf-8")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not serialisable: {type(o).__name__}")


def _write_manifest(out: Path, command: str, cfg_doc: dict, started: _dt.datetime, status: str):
    _dump(out / "manifest.json", {
        "command": command, "status": status, "version": __version__,
        "python": platform.python_version(), "numpy": np.__version__,
        "config_sha256": hashlib.sha256(
            json.dumps(cfg_doc, sort_keys=True, default=_json_default).encode()).hexdigest(),
        "started": started.isoformat(timespec="seconds"),
        "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    })


def write_cumulative_csv(path: Path, dates, records: dict, rows, sigma_tgt: float) -> None:
    names = list(records)
    raw = {n: np.nan_to_num(records[n].returns[rows]) for n in names}
    resc = {}
    for n in names:
        try:
            resc[n] = np.nan_to_num(records[n].rescaled(sigma_tgt)[rows])
        except ValueError:
            resc[n] = np.full(len(rows), np.nan)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("# compounded growth of 1 unit of capital; row date is the decision date t, "
                 "return earned over (t, t+1]; raw = volatility-targeted portfolio, "
                 f"rescaled = whole series scaled to {sigma_tgt:.0%} annualised vol\n")
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["date", *(f"{n}_raw" for n in names), *(f"{n}_rescaled" for n in names)])
        cum_raw = {n: np.cumprod(1 + raw[n]) for n in names}
        cum_res = {n: np.cumprod(1 + resc[n]) for n in names}
        for k, t in enumerate(rows):
            out.writerow([str(dates[t]), *(repr(float(cum_raw[n][k])) for n in names),
                          *(repr(float(cum_res[n][k])) for n in names)])


def write_cost_csv(path: Path, curves: dict, levels, cost_vol: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# annualised Sharpe of cost-adjusted daily returns; cost in basis points "
                 f"per unit of volatility-scaled turnover; cost volatility = {cost_vol}\n")
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["cost_bps", *curves])
        for c in levels:
            out.writerow([repr(float(c)), *(bt._fmt(curves[n][c]) for n in curves)])


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    path = Path(args.config)
    doc = json.loads(path.read_text(encoding="utf-8"))
    for spec in args.set or ():
        apply_override(doc, spec)
    if "data" in doc:
        if "synthetic" not in doc["data"]:
            raise ConfigError("config has no data.synthetic section")
        spec_doc = dict(doc["data"]["synthetic"])
        spec_doc.setdefault("seed", doc.get("seed", 0))
    else:
        spec_doc = doc
    try:
        spec = SyntheticSpec.from_dict(spec_doc)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"invalid synthetic spec: {exc}") from exc
    out = Path(args.out)
    if out.exists() and not args.force:
        raise FileExistsError(f"{out} exists; pass --force to overwrite")
    out.parent.mkdir(parents=True, exist_ok=True)
    generate_synthetic(spec).to_csv(out)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_features(args) -> int:
    cfg = load_config(args.config, args.set or ())
    md = prepare(cfg.load_panel(), cfg.features)
    out = Path(args.out) if args.out else cfg.output_dir / "features.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    md.features.to_csv(out)
    print(f"wrote {out}")
    return EXIT_OK


def run_backtest(cfg: RunConfig) -> dict:
    """Run the full walk-forward backtest and write the report bundle."""
    out = cfg.output_dir
    started = _dt.datetime.now(_dt.timezone.utc)
    with OutputLock(out):
        stage = "data"
        _dump(out / "status.json", {"status": "running", "stage": stage})
        try:
            panel = cfg.load_panel()
            stage = "features"
            md = prepare(panel, cfg.features)
            plan = cfg.make_plan(md.dates)
            _dump(out / "config.resolved.json", cfg.raw)
            _dump(out / "plan.json", plan.to_dict())
            stage = "training"
            wf = walk_forward(md, plan, cfg.strategies, cfg.train, cfg.graph_grid)
            stage = "reports"
            sigma_tgt = cfg.features.sigma_tgt
            records = {n: bt.make_record(n, wf.positions[n], md.returns, md.sigma_ann,
                                         wf.test_rows, sigma_tgt) for n in cfg.strategies}
            raw = {n: bt.metrics(r.returns) for n, r in records.items()}
            resc = {n: bt.metrics(r.rescaled(sigma_tgt)) for n, r in records.items()}
            bt.write_metrics_csv(out / "metrics.csv",
                                 {"raw": raw, f"rescaled_{round(sigma_tgt * 100)}pct": resc})
            write_cumulative_csv(out / "cumulative_returns.csv", md.dates, records,
                                 wf.test_rows, sigma_tgt)
            names = list(records)
            if len(names) > 1:
                corr, agree = bt.diversification([records[n] for n in names])
                bt.write_matrix_csv(out / "return_correlation.csv", names, corr,
                                    "Pearson correlation of daily out-of-sample portfolio returns")
                bt.write_matrix_csv(out / "sign_agreement.csv", names, agree,
                                    "fraction of asset-days where both strategies hold "
                                    "positions of the same sign")
            curves = {n: bt.cost_curve(records[n].positions, md.returns, md.sigma_ann,
                                       cfg.cost_levels_bps, sigma_tgt=sigma_tgt,
                                       cost_vol=cfg.cost_vol) for n in names}
            write_cost_csv(out / "cost_curve.csv", curves, cfg.cost_levels_bps, cfg.cost_vol)
            _dump(out / "training_log.json", wf.logs)
            for k, ck in enumerate(wf.checkpoints):
                for name, doc in ck.items():
                    _dump(out / "checkpoints" / f"window_{k:02d}" / f"{name}.json", doc)
            with open(out / "positions.csv", "w", newline="", encoding="utf-8") as fh:
                fh.write("# out-of-sample positions x_{i,t} before volatility scaling\n")
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["date", "ticker", *names])
                for t in wf.test_rows:
                    for i, tk in enumerate(md.panel.tickers):
                        w.writerow([str(md.dates[t]), tk,
                                    *(bt._fmt(records[n].positions[t, i]) for n in names)])
        except BaseException as exc:
            _dump(out / "status.json", {"status": "failed", "stage": stage,
                                        "error": f"{type(exc).__name__}: {exc}",
                                        "note": "outputs in this directory are partial"})
            _write_manifest(out, "backtest", cfg.raw, started, "failed")
            raise
        _dump(out / "status.json", {"status": "ok", "stage": "done"})
        _write_manifest(out, "backtest", cfg.raw, started, "ok")
    return {"metrics": raw, "metrics_rescaled": resc, "records": records, "walk_forward": wf,
            "market": md, "cost_curves": curves}


def cmd_backtest(args) -> int:
    cfg = load_config(args.config, args.set or ())
    res = run_backtest(cfg)
    for n, m in res["metrics"].items():
        print(f"{n:10s} sharpe={bt._fmt(m.sharpe) or 'nan':>22s} vol={m.vol:.4f}")
    print(f"wrote {cfg.output_dir}")
    return EXIT_OK


def load_network_model(path) -> tuple[list, str]:
    """Members of a saved ensemble (or a single model checkpoint)."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if "members" in doc:
        return Ensemble.from_dict(doc).members, hashlib.sha256(
            json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]
    return [NetworkModel.from_dict(doc)], hashlib.sha256(
        json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def snapshot(md, members, t: int) -> tuple[np.ndarray, np.ndarray]:
    """Member-averaged normalised graph on row t, embedded in the full asset set."""
    N = len(md.panel.tickers)
    full = np.zeros((N, N))
    assets = np.zeros(0, dtype=int)
    for m in members:
        assets, G = network_snapshot(md, m, t)
        if len(assets):
            full[np.ix_(assets, assets)] += G / len(members)
    return assets, full


def snapshot_doc(md, t: int, assets, G, provenance: dict) -> dict:
    names = md.panel.tickers
    i, j = edge_index(len(names))
    edges = [{"i": names[a], "j": names[b], "weight": float(G[a, b])}
             for a, b in zip(i, j) if G[a, b] > 0]
    return {"date": str(md.dates[t]), "nodes": list(names),
            "active_nodes": [names[a] for a in assets], "edges": edges,
            "weights": "symmetrically normalised adjacency D^-1/2 A D^-1/2",
            "provenance": provenance}


def cmd_export_graphs(args) -> int:
    cfg = load_config(args.config, args.set or ())
    members, ck_id = load_network_model(args.checkpoint)
    md = prepare(cfg.load_panel(), cfg.features)
    out = Path(args.out) if args.out else cfg.output_dir / "graphs"
    out.mkdir(parents=True, exist_ok=True)
    lookup = {str(d): k for k, d in enumerate(md.dates)}
    targets, errors = [], []
    for d in args.dates or ():
        if d in lookup:
            targets.append(lookup[d])
        else:
            errors.append({"date": d, "error": "date not in the data calendar"})
    if args.every:
        start = int(np.searchsorted(md.dates, np.datetime64(args.start))) if args.start else 0
        targets += list(range(start, len(md.dates), args.every))
    targets = sorted(set(targets))
    prov = {"checkpoint": str(args.checkpoint), "checkpoint_id": ck_id,
            "members": len(members)}
    written = []
    for t in targets:
        assets, G = snapshot(md, members, t)
        name = f"graph_{md.dates[t]}.json"
        _dump(out / name, snapshot_doc(md, t, assets, G, prov))
        written.append(name)
    _dump(out / "index.json", {"snapshots": written, "errors": errors})
    print(f"wrote {len(written)} snapshots to {out}; {len(errors)} errors")
    return EXIT_OK if not errors else EXIT_VALIDATION


def cmd_gradcheck(args) -> int:
    doc = {"n": 5, "n_features": 4, "L": 4, "n_instances": 20, "eps": 1e-5, "rtol": 1e-4,
           "threshold": 0.99, "seed": 0, "upstream": "random"}
    if args.config:
        doc.update(json.loads(Path(args.config).read_text(encoding="utf-8")))
    for spec in args.set or ():
        apply_override(doc, spec)
    if doc["n"] > 8 or doc["L"] > 6:
        raise ConfigError("gradcheck needs small dimensions (n <= 8, L <= 6)")
    try:
        rep = gradcheck(**doc, corrupt=args.corrupt_gradient)
    except TypeError as exc:
        raise ConfigError(f"invalid gradcheck config: {exc}") from exc
    print(json.dumps(rep.to_dict(), indent=1))
    print("PASS" if rep.passed else "FAIL")
    return EXIT_OK if rep.passed else EXIT_NUMERIC


class _Parser(argparse.ArgumentParser):
    """Usage errors are validation errors (exit 1), not argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="netmomentum", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="JSON config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key by dotted path (repeatable)")

    s = sub.add_parser("synth", help="write a synthetic price panel CSV")
    common(s)
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true", help="overwrite an existing file")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("features", help="write the feature panel CSV")
    common(s)
    s.add_argument("--out")
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("backtest", help="walk-forward backtest and report bundle")
    common(s)
    s.set_defaults(func=cmd_backtest)

    s = sub.add_parser("export-graphs", help="export learned graph snapshots")
    common(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dates", nargs="*", help="ISO dates to export")
    s.add_argument("--every", type=int, default=0, help="also export every k-th row")
    s.add_argument("--start", help="first date for --every")
    s.add_argument("--out")
    s.set_defaults(func=cmd_export_graphs)

    s = sub.add_parser("gradcheck", help="finite-difference check of the unrolled layer")
    common(s, config_required=False)
    s.add_argument("--corrupt-gradient", type=float, default=0.0, help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (NumericError, TrainingDivergence, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DataError, ValueError, KeyError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
