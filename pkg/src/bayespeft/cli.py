"""Command line: pre-train, estimate curvature, fine-tune, sweep lambda, run studies.

    bayespeft <pretrain|estimate|finetune|sweep|study> [--config PATH] [--out DIR] [--seed N] [--jobs N]

The config is an INI-style file (``key = value`` lines under ``[section]``
headers) or any JSON report written by this tool, whose embedded effective
config is reused verbatim. Unknown sections and keys are rejected.
Exit codes: 0 success, 2 configuration or contract error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import math
import os
import re
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional

from . import __version__, bench, fisher as fisher_mod
from .data import make_pair
from .errors import BayesPeftError, ConfigError, ContractError
from .model import load_checkpoint, save_adapters, save_checkpoint
from .penalty import VARIANT_FOR, PenaltyConfig
from .serialize import dumps, file_sha256
from .trainer import TrainConfig, fit, geometric_grid, select_lambda

OUT_ENV = "BAYESPEFT_OUT"
REPORT_SCHEMA = "bayespeft-report"
COMMANDS = ("pretrain", "estimate", "finetune", "sweep", "study")


# -- config -------------------------------------------------------------------

def _int_list(text: str) -> list:
    text = text.strip()
    m = re.fullmatch(r"(-?\d+)\s*\.\.\s*(-?\d+)", text)
    if m:
        return list(range(int(m.group(1)), int(m.group(2)) + 1))
    return [int(v) for v in text.replace(",", " ").split()]


def parse_grid(text: str) -> list:
    """``"1e2..1e5 step x10"`` (``x``, ``×`` or ``*``) or a comma-separated list."""
    text = str(text).strip()
    m = re.fullmatch(r"(\S+)\s*\.\.\s*(\S+)\s+step\s*[x×*]\s*(\S+)", text)
    if m:
        lo, hi, ratio = (float(g) for g in m.groups())
        return geometric_grid(lo, hi, ratio)
    if ".." in text:
        raise ConfigError(f"cannot parse grid {text!r}; expected 'LO..HI step xR'")
    vals = [float(v) for v in text.replace(",", " ").split()]
    if not vals:
        raise ConfigError("empty lambda grid")
    return vals


def _choice(*options):
    def conv(v):
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return v
    return conv


def _opt_path(v):
    return str(v)


def _grid_or_empty(v):
    return parse_grid(v) if str(v).strip() else []


_TRAIN_KEYS = {"lr": (float, None), "epochs": (int, None), "batch_size": (int, None), "seed": (int, 0),
               "schedule": (_choice("linear", "constant"), "linear")}

SCHEMA = {
    "pair": {"kind": (_choice("clusters", "charlm"), "clusters"), "seed": (int, 0)},
    "pretrain": {**_TRAIN_KEYS, "init_seed": (int, 0)},
    "fisher": {"method": (_choice("l2sp", "ewc", "kfac"), "kfac"), "samples": (int, 1024),
               "seed": (int, 0), "damping": (float, fisher_mod.DEFAULT_DAMPING)},
    "finetune": {**_TRAIN_KEYS, "method": (_choice(*bench.METHODS), "none"), "lambda": (float, 0.0),
                 "rank": (int, 16), "gamma": (float, 2.0)},
    "sweep": {"grid": (parse_grid, "1e-3..1e1 step x10"), "seeds": (_int_list, "0..4")},
    "study": {"name": (_choice("forgetting", "sample_size", "cost"), "forgetting"),
              "methods": (lambda v: [m.strip() for m in v.split(",") if m.strip()], "none,l2sp,ewc,kfac"),
              "seeds": (_int_list, "0..4"), "sizes": (_int_list, "1024,128,16"),
              "dims": (_int_list, "16,32,64,128"), "grid_l2sp": (_grid_or_empty, ""),
              "grid_ewc": (_grid_or_empty, ""), "grid_kfac": (_grid_or_empty, ""),
              "lambda_l2sp": (float, 0.0), "lambda_ewc": (float, 0.0), "lambda_kfac": (float, 0.0),
              "cost_samples": (int, 256)},
    "paths": {"checkpoint": (_opt_path, ""), "fisher": (_opt_path, "")},
}


def _line_numbers(text: str) -> dict:
    """(section, key) -> 1-based line number, for diagnostics."""
    out, section = {}, None
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip()
            out[(section, None)] = i
        elif "=" in s and not s.startswith(("#", ";")):
            out[(section, s.split("=", 1)[0].strip().lower())] = i
    return out


def _coerce(conv, value):
    """Text goes through the key's parser; JSON values (from a report) are cast in place."""
    if isinstance(value, str):
        return conv(value)
    if isinstance(value, list):
        if conv in (parse_grid, _grid_or_empty):
            return [float(v) for v in value]
        if conv is _int_list:
            return [int(v) for v in value]
        return [str(v) for v in value]
    return conv(value)


def _convert(raw: dict, lines: Optional[dict] = None, source: str = "config") -> dict:
    lines = lines or {}
    cfg = {}
    for section, values in raw.items():
        if section not in SCHEMA:
            raise ConfigError(f"{source}:{lines.get((section, None), '?')}: unknown section [{section}]")
        for key in values:
            if key not in SCHEMA[section]:
                raise ConfigError(f"{source}:{lines.get((section, key), '?')}: unknown key {key!r} in [{section}]")
    for section, keys in SCHEMA.items():
        cfg[section] = {}
        for key, (conv, default) in keys.items():
            value = raw.get(section, {}).get(key, default)
            if value is None:
                cfg[section][key] = None
                continue
            try:
                cfg[section][key] = _coerce(conv, value)
            except (ValueError, TypeError, ConfigError) as exc:
                raise ConfigError(f"{source}:{lines.get((section, key), '?')}: [{section}] {key}: {exc}") from None
    return cfg


def load_config(path: Optional[Path]) -> dict:
    """Parse an INI file or a report JSON into a fully resolved config dict."""
    if path is None:
        return _convert({})
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if text.lstrip().startswith("{"):
        try:
            rec = json.loads(text)
            raw = rec["effective_config"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ConfigError(f"{path}: not a report with an embedded config ({exc})") from None
        return _convert(raw, source=str(path))
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}".replace("\n", " ")) from None
    raw = {s: dict(parser[s]) for s in parser.sections()}
    return _convert(raw, _line_numbers(text), str(path))


def train_config(section: dict, defaults: TrainConfig) -> TrainConfig:
    d = asdict(defaults)
    for k in ("lr", "epochs", "batch_size", "seed", "schedule"):
        if section.get(k) is not None:
            d[k] = section[k]
    return TrainConfig(**d)


def resolve_defaults(cfg: dict) -> dict:
    """Fill per-pair training defaults so the embedded config is complete."""
    setup = bench.setup_for(cfg["pair"]["kind"])
    for name, default in (("pretrain", setup.pretrain), ("finetune", setup.finetune)):
        tc = train_config(cfg[name], default)
        for k in ("lr", "epochs", "batch_size", "schedule"):
            cfg[name][k] = getattr(tc, k)
    for m in ("l2sp", "ewc", "kfac"):
        if not cfg["study"][f"grid_{m}"]:
            cfg["study"][f"grid_{m}"] = list(setup.grids[m])
    return cfg


# -- outputs ------------------------------------------------------------------

def write_csv(path: Path, rows: list, columns: Optional[list] = None) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = columns or (list(rows[0].keys()) if rows else [])
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    path.write_text(buf.getvalue())


def write_report(path: Path, command: str, cfg: dict, body: dict) -> None:
    rec = {"schema": REPORT_SCHEMA, "schema_version": bench.SCHEMA_VERSION, "software": __version__,
           "command": command, "effective_config": cfg, **body}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(_clean(rec)))


def _clean(obj):
    """JSON-safe copy: tuples to lists, numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if hasattr(obj, "item") and not isinstance(obj, (str, bytes)):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(_clean(cfg), sort_keys=True).encode()).hexdigest()[:16]


def open_store(path: Path, cfg: dict) -> bench.CellStore:
    """Cell manifest for resuming; refuses a manifest written under another config."""
    header = {"key": "#config", "result": config_digest(cfg)}
    if path.exists():
        first = path.read_text().splitlines()[:1]
        if not first or json.loads(first[0]) != header:
            raise ConfigError(f"{path} was written by a different config; remove it or use another --out")
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(header) + "\n")
    return bench.CellStore(path)


def _checkpoint_path(cfg, out: Path) -> Path:
    return Path(cfg["paths"]["checkpoint"]) if cfg["paths"]["checkpoint"] else out / "checkpoint.json"


def _fisher_path(cfg, out: Path, method: str) -> Path:
    return Path(cfg["paths"]["fisher"]) if cfg["paths"]["fisher"] else out / f"fisher_{method}.json"


def _load_base(cfg, out: Path):
    path = _checkpoint_path(cfg, out)
    if not path.exists():
        raise ContractError(f"no pre-trained checkpoint at {path}; run 'pretrain' first")
    return load_checkpoint(path)


# -- commands -------------------------------------------------------------------

def cmd_pretrain(cfg: dict, out: Path, jobs: int) -> dict:
    pair = make_pair(cfg["pair"]["kind"], cfg["pair"]["seed"])
    tc = train_config(cfg["pretrain"], bench.setup_for(pair.kind).pretrain)
    net, metrics = _pretrain(pair, tc, cfg["pretrain"]["init_seed"])
    ck = _checkpoint_path(cfg, out)
    save_checkpoint(net, ck)
    seeds = {"pair_seed": pair.seed, "init_seed": cfg["pretrain"]["init_seed"], "train_seed": tc.seed}
    write_csv(out / "pretrain_metrics.csv", [{**seeds, **metrics}])
    (out / "seeds.json").write_text(dumps(seeds))
    body = {"metrics": metrics, "seeds": seeds, "checkpoint_sha256": file_sha256(ck)}
    write_report(out / "pretrain.json", "pretrain", cfg, body)
    return body


def _pretrain(pair, tc, init_seed):
    return bench.pretrain(pair, tc, init_seed)


def cmd_estimate(cfg: dict, out: Path, jobs: int) -> dict:
    pair = make_pair(cfg["pair"]["kind"], cfg["pair"]["seed"])
    net = _load_base(cfg, out)
    f = cfg["fisher"]
    est = fisher_mod.estimate(VARIANT_FOR[f["method"]], net, pair.a_pool.x, pair.a_pool.y, f["samples"],
                              seed=f["seed"], damping=f["damping"])
    path = _fisher_path(cfg, out, f["method"])
    fisher_mod.save(est, path)
    body = {"method": f["method"], "variant": est.kind, "sample_count": est.sample_count,
            "data_pass": est.kind != "identity", "storage": est.storage(), "fisher_sha256": file_sha256(path)}
    write_report(out / f"estimate_{f['method']}.json", "estimate", cfg, body)
    return body


def _fisher_for(cfg, out: Path, method: str, net):
    if method == "none":
        return None
    if method == "l2sp":
        return fisher_mod.estimate_identity(net)
    path = _fisher_path(cfg, out, method)
    if not path.exists():
        raise ContractError(f"no {method} curvature file at {path}; run 'estimate' first")
    est = fisher_mod.load(path, net)
    if est.kind != VARIANT_FOR[method]:
        raise ConfigError(f"{path} holds a {est.kind} estimate, {method} needs {VARIANT_FOR[method]}")
    return est


def cmd_finetune(cfg: dict, out: Path, jobs: int) -> dict:
    pair = make_pair(cfg["pair"]["kind"], cfg["pair"]["seed"])
    base = _load_base(cfg, out)
    ft = cfg["finetune"]
    tc = train_config(ft, bench.setup_for(pair.kind).finetune)
    factory = bench.make_factory(pair, base, ft["rank"], ft["gamma"])
    net = factory(tc.seed)
    fis = _fisher_for(cfg, out, ft["method"], base)
    pen = PenaltyConfig(ft["method"], ft["lambda"]) if ft["method"] != "none" else PenaltyConfig()
    net, rep = fit(net, pair.b_train, fis, pen, tc, bench.evaluation_for(pair))
    write_csv(out / "finetune.csv", rep.rows())
    save_adapters(net, out / "adapters.json")
    (out / "finetune_timing.json").write_text(json.dumps({"epoch_seconds": rep.wall_clock}) + "\n")
    body = {"run": rep.to_dict(), "final": asdict(rep.final)}
    write_report(out / "finetune.json", "finetune", cfg, body)
    return body


SWEEP_COLUMNS = ["method", "lambda", "task_b_mean", "task_b_sd", "task_a_mean", "task_a_sd"]


def cmd_sweep(cfg: dict, out: Path, jobs: int) -> dict:
    pair = make_pair(cfg["pair"]["kind"], cfg["pair"]["seed"])
    base = _load_base(cfg, out)
    ft, sw = cfg["finetune"], cfg["sweep"]
    method = ft["method"]
    if method == "none":
        raise ConfigError("[finetune] method must name a penalty for a sweep")
    setup = bench.setup_for(pair.kind)
    tc = train_config(ft, setup.finetune)
    factory = bench.make_factory(pair, base, ft["rank"], ft["gamma"])
    fis = _fisher_for(cfg, out, method, base)
    store = open_store(out / "sweep_cells.jsonl", cfg)
    cells = [(bench.cell_key("none", 0.0, s), None, PenaltyConfig(), s) for s in sw["seeds"]]
    grid = [lam for lam in sw["grid"] if lam]  # lambda 0 is the baseline row
    cells += [(bench.cell_key(method, lam, s), fis, PenaltyConfig(method, lam), s)
              for lam in grid for s in sw["seeds"]]
    results = bench.run_grid(factory, pair.b_train, cells, tc, bench.evaluation_for(pair), jobs, store)
    none = bench._rows_from(results, "none", [0.0], sw["seeds"])[0]
    rows = bench._rows_from(results, method, grid, sw["seeds"])
    chosen = select_lambda(rows, none.task_b_mean, pair.b_higher_better, setup.b_tolerance, setup.b_relative)
    table = [bench._row_dict(r) for r in [none] + rows]
    write_csv(out / "sweep.csv", table, SWEEP_COLUMNS)
    body = {"metrics": {"task_b": pair.b_metric, "task_a": pair.a_metric}, "rows": table,
            "selected": bench._row_dict(chosen) if chosen else None}
    write_report(out / "sweep.json", "sweep", cfg, body)
    return body


STUDY_COLUMNS = {"forgetting": ["method", "lambda", "task_b_mean", "task_b_sd", "task_a_mean", "task_a_sd"],
                 "sample_size": ["method", "samples", "lambda", "task_b_mean", "task_b_sd", "task_a_mean",
                                 "task_a_sd"],
                 "cost": ["method", "d_out", "d_in", "parameters", "storage", "data_pass"]}


def cmd_study(cfg: dict, out: Path, jobs: int) -> dict:
    st = cfg["study"]
    name = st["name"]
    if name == "cost":
        rep = bench.run_cost_study(st["dims"], st["cost_samples"], cfg["pair"]["seed"])
        (out / "study_cost_timings.json").parent.mkdir(parents=True, exist_ok=True)
        (out / "study_cost_timings.json").write_text(json.dumps(_clean(rep.sidecar), indent=1) + "\n")
    else:
        pair = make_pair(cfg["pair"]["kind"], cfg["pair"]["seed"])
        base = _load_base(cfg, out)
        ft = cfg["finetune"]
        tc = train_config(ft, bench.setup_for(pair.kind).finetune)
        store = open_store(out / f"study_{name}_cells.jsonl", cfg)
        if name == "forgetting":
            grids = {m: st[f"grid_{m}"] for m in ("l2sp", "ewc", "kfac")}
            rep = bench.run_forgetting_study(pair, base, st["methods"], st["seeds"], grids, cfg["fisher"]["samples"],
                                             cfg["fisher"]["seed"], tc, ft["rank"], ft["gamma"], jobs, store)
        else:
            methods = [m for m in st["methods"] if m != "none"] or ["ewc", "kfac"]
            lams = {m: st[f"lambda_{m}"] for m in methods}
            missing = [m for m in methods if not lams.get(m)]
            if missing:
                raise ConfigError(f"[study] lambda_{missing[0]} must be set for the sample-size study")
            rep = bench.run_sample_size_study(pair, base, lams, st["sizes"], methods, st["seeds"],
                                              cfg["fisher"]["seed"], tc, ft["rank"], ft["gamma"], jobs, store)
    write_csv(out / f"study_{name}.csv", rep.table, STUDY_COLUMNS[name])
    body = rep.to_dict()
    write_report(out / f"study_{name}.json", "study", cfg, {"study": body})
    return body


HANDLERS = {"pretrain": cmd_pretrain, "estimate": cmd_estimate, "finetune": cmd_finetune,
            "sweep": cmd_sweep, "study": cmd_study}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bayespeft", description=__doc__.split("\n\n")[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", type=Path, default=None, help="INI config or a previous JSON report")
    ap.add_argument("--out", type=Path, default=None, help=f"output directory (default: ${OUT_ENV} or ./runs)")
    ap.add_argument("--seed", type=int, default=None, help="override the task-pair generator seed ([pair] seed)")
    ap.add_argument("--jobs", type=int, default=1, help="worker processes for sweep and study cells")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["pair"]["seed"] = args.seed
        cfg = resolve_defaults(cfg)
        out = args.out or Path(os.environ.get(OUT_ENV, "runs"))
        out.mkdir(parents=True, exist_ok=True)
        HANDLERS[args.command](cfg, out, max(1, args.jobs))
    except BayesPeftError as exc:
        err = {"error": exc.kind, "type": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code}
        print(json.dumps(err), file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(json.dumps({"error": "numeric", "type": type(exc).__name__, "message": str(exc), "exit_code": 3}),
              file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
