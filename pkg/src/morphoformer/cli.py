"""Command-line entry point: ``morphoformer <subcommand> [flags]``.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""

import argparse
import csv
import glob
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import evalkit, geosplit, prior
from .dataset import (BandStats, FormatError, export_cells, export_rasters, generate_city, import_cells,
                      import_rasters)
from .model import ConfigError, ModelConfig, MorphoFormer, desk_config, load_checkpoint
from .training import (VARIANT_LABELS, VARIANTS, DataConfig, LossConfig, SceneSource, TrainConfig,
                       ablation_model_config, city_configs, predict, run_ablation_suite, train)

log = logging.getLogger("morphoformer")

PRESETS = {"standard": lambda: ModelConfig(), "desk": desk_config, "ablation": ablation_model_config}


class UsageFailure(ValueError):
    """Bad flags, config or inputs; maps to exit code 1."""


@dataclass
class SplitConfig:
    rotate: float = 0.0


@dataclass
class EvalConfig:
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    min_bin_count: int = evalkit.MIN_BIN_COUNT
    subset: str = "test"


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "run"
    preset: str = "standard"
    dataset: DataConfig = field(default_factory=DataConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    model: dict = field(default_factory=dict)  # overrides on top of the preset
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def model_config(self):
        if self.preset not in PRESETS:
            raise UsageFailure(f"preset: unknown value {self.preset!r}; choose from {sorted(PRESETS)}")
        base = PRESETS[self.preset]().to_dict()
        unknown = set(self.model) - set(base)
        if unknown:
            raise UsageFailure(f"model: unknown keys {sorted(unknown)}")
        return ModelConfig(**{**base, **self.model}).validate()

    def to_dict(self):
        return asdict(self)


SECTIONS = {"dataset": DataConfig, "split": SplitConfig, "train": TrainConfig, "loss": LossConfig,
            "eval": EvalConfig}


def _section(cls, name, raw):
    if not isinstance(raw, dict):
        raise UsageFailure(f"{name}: expected an object")
    known = {f.name: f for f in fields(cls)}
    for k in raw:
        if k not in known:
            raise UsageFailure(f"{name}.{k}: unknown key (allowed: {', '.join(sorted(known))})")
    return cls(**raw)


def parse_run_config(raw):
    if not isinstance(raw, dict):
        raise UsageFailure("config root must be a JSON object")
    top = {f.name for f in fields(RunConfig)}
    for k in raw:
        if k not in top:
            raise UsageFailure(f"{k}: unknown top-level key (allowed: {', '.join(sorted(top))})")
    kw = {}
    for k, v in raw.items():
        if k in SECTIONS:
            kw[k] = _section(SECTIONS[k], k, v)
        elif k == "model":
            if not isinstance(v, dict):
                raise UsageFailure("model: expected an object")
            kw[k] = dict(v)
        else:
            kw[k] = v
    cfg = RunConfig(**kw)
    cfg.model_config()
    return cfg


def load_run_config(path):
    if path is None:
        return RunConfig()
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise UsageFailure(f"--config: file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise UsageFailure(f"--config: {path} is not valid JSON ({e})") from None
    return parse_run_config(raw)


# flag dest -> (section, key); None section means top level
OVERRIDES = {
    "seed": (None, "seed"), "out": (None, "out_dir"), "preset": (None, "preset"),
    "cities": ("dataset", "n_cities"), "grid_size": ("dataset", "grid_size"),
    "rotate": ("split", "rotate"),
    "epochs": ("train", "epochs"), "batch_size": ("train", "batch_size"), "lr": ("train", "lr"),
    "samples_per_epoch": ("train", "samples_per_epoch"),
    "warmup_inclusive": ("loss", "warmup_inclusive"),
    "subset": ("eval", "subset"),
}


def apply_overrides(cfg, args):
    for dest, (section, key) in OVERRIDES.items():
        val = getattr(args, dest, None)
        if val is None:
            continue
        target = cfg if section is None else getattr(cfg, section)
        setattr(target, key, val)
    seeds = getattr(args, "seeds", None)
    if seeds is not None:
        cfg.eval.seeds = list(range(seeds))
    cfg.model_config()
    return cfg


def write_resolved(cfg, out_dir, name="config.resolved.json"):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, name), "w", encoding="utf-8") as f:
        json.dump(cfg.to_dict(), f, sort_keys=True, indent=2)
        f.write("\n")


def _write_text(path, text):
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)


# ---------------------------------------------------------------- data directory helpers

def _gen_one(city_cfg):
    table, rasters, _ = generate_city(city_cfg)
    return table, rasters


def load_cities(data_dir):
    cell_files = sorted(glob.glob(os.path.join(data_dir, "cells", "*.csv")))
    if not cell_files:
        raise UsageFailure(f"--data: no cell tables under {data_dir}/cells (run `generate` first)")
    cities = []
    for path in cell_files:
        for city, table in import_cells(path).items():
            rpath = os.path.join(data_dir, "rasters", f"{city}.mras")
            if not os.path.exists(rpath):
                raise UsageFailure(f"--data: missing raster file {rpath}")
            cities.append((table, import_rasters(rpath)))
    return cities


def load_or_make_split(cities, data_dir, rotate):
    path = os.path.join(data_dir, "split.csv")
    if os.path.exists(path):
        grids = geosplit.import_split(path, {t.city_id: t.shape for t, _ in cities})
        return [grids[t.city_id] for t, _ in cities]
    return [geosplit.geosplit_city(t, rotate).subset_grid for t, _ in cities]


def sources(cities, grids, stats=None):
    by = [geosplit.centers_by_subset(g) for g in grids]
    if stats is None:
        from .dataset import band_stats
        stats = band_stats(cities, [b["train"] for b in by])
    return {name: SceneSource(cities, [b[name] for b in by], stats) for name in geosplit.SUBSETS}, stats


# ---------------------------------------------------------------- subcommands

def cmd_generate(cfg, args):
    out = cfg.out_dir
    os.makedirs(os.path.join(out, "cells"), exist_ok=True)
    os.makedirs(os.path.join(out, "rasters"), exist_ok=True)
    city_cfgs = city_configs(cfg.dataset, cfg.seed + 1)
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as ex:
            made = list(ex.map(_gen_one, city_cfgs))
    else:
        made = [_gen_one(c) for c in city_cfgs]
    summary = []
    for (table, rasters), ccfg in zip(made, city_cfgs):
        export_cells(table, os.path.join(out, "cells", f"{table.city_id}.csv"))
        export_rasters(rasters, os.path.join(out, "rasters", f"{table.city_id}.mras"))
        summary.append({"city_id": table.city_id, "valid_cells": int(table.valid.sum()),
                        "kept_cells": int(table.keep_mask().sum()), "generator": ccfg.to_dict()})
    evalkit.write_report({"cities": summary}, os.path.join(out, "generate.json"))
    write_resolved(cfg, out)
    print(f"wrote {len(made)} cities to {out}")


def cmd_split(cfg, args):
    data = args.data or cfg.out_dir
    cities = load_cities(data)
    splits = [geosplit.geosplit_city(t, cfg.split.rotate) for t, _ in cities]
    geosplit.export_split({s.city_id: s.subset_grid for s in splits}, os.path.join(data, "split.csv"))
    rows = [{"city_id": s.city_id, "core": list(s.assignment.core), "sector_counts": list(s.counts),
             "subset_of_sector": list(s.assignment.subset_of_sector), "sizes": list(s.sizes),
             "fractions": list(s.fractions)} for s in splits]
    report = {"cities": rows, "global_fractions": list(geosplit.global_fractions(splits)), "rotate": cfg.split.rotate}
    evalkit.write_report(report, os.path.join(data, "split.json"))
    write_resolved(cfg, data, "config.split.json")
    for r in rows:
        print(f"{r['city_id']}: train/val/test = {r['sizes'][0]}/{r['sizes'][1]}/{r['sizes'][2]}")


def cmd_prior(cfg, args):
    data = args.data or cfg.out_dir
    cities = load_cities(data)
    if args.cells == "all":
        pick = [t.keep_mask() for t, _ in cities]
    else:
        grids = load_or_make_split(cities, data, cfg.split.rotate)
        code = geosplit.SUBSETS.index(args.cells)
        pick = [g == code for g in grids]
    lam = np.concatenate([t.lambda_p[m] for (t, _), m in zip(cities, pick)])
    h = np.concatenate([t.h_ave[m] for (t, _), m in zip(cities, pick)])
    per_city = []
    for (t, _), m in zip(cities, pick):
        if m.sum() >= 2:
            per_city.append({"city_id": t.city_id, "n": int(m.sum()),
                             "pearson": prior.pearson(t.lambda_p[m], t.h_ave[m])})
    rep = prior.coupling_report(lam, h, args.baseline_rmse, per_city=per_city)
    evalkit.write_report(rep, os.path.join(data, f"prior_{args.cells}.json"))
    with open(os.path.join(data, f"prior_{args.cells}_hexbin.csv"), "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["lambda_lo", "lambda_hi", "h_lo", "h_hi", "count"])
        w.writerows(prior.hexbin_counts(lam, h))
    write_resolved(cfg, data, "config.prior.json")
    print(f"n={rep.n_cells} pearson={rep.pearson:.3f} spearman={rep.spearman:.3f} "
          f"v={rep.variance_explained:.4f} ceiling={rep.rmse_ceiling_m:.3f} m ({rep.rmse_ceiling_pct:.2f}%)")


def cmd_train(cfg, args):
    data = args.data or cfg.out_dir
    cities = load_cities(data)
    grids = load_or_make_split(cities, data, cfg.split.rotate)
    src, stats = sources(cities, grids)
    mcfg = cfg.model_config()
    model = MorphoFormer(mcfg, seed=cfg.seed + 2)
    tcfg = TrainConfig(**{**asdict(cfg.train), "seed": cfg.seed})
    out = args.run_dir or os.path.join(data, "train")
    os.makedirs(out, exist_ok=True)
    write_resolved(cfg, out)
    res = train(model, src["train"], src["val"], tcfg, cfg.loss,
                log_path=os.path.join(out, "train_log.jsonl"), ckpt_path=os.path.join(out, "model.ckpt"),
                ckpt_meta={"band_stats": stats.to_dict()})
    print(f"best epoch {res.best_epoch}: combined MAE {res.best_combined:.4f}")


def _load_model_and_sources(cfg, args):
    data = args.data or cfg.out_dir
    ckpt = args.ckpt or os.path.join(data, "train", "model.ckpt")
    if not os.path.exists(ckpt):
        raise UsageFailure(f"--ckpt: checkpoint not found: {ckpt}")
    model, header = load_checkpoint(ckpt)
    cities = load_cities(data)
    grids = load_or_make_split(cities, data, cfg.split.rotate)
    stats = BandStats.from_dict(header["band_stats"]) if "band_stats" in header else None
    src, _ = sources(cities, grids, stats)
    if cfg.eval.subset not in src:
        raise UsageFailure(f"eval.subset: expected one of {geosplit.SUBSETS}, got {cfg.eval.subset!r}")
    return model, src[cfg.eval.subset], data


def _predict_city(args):
    model, source = args
    return predict(model, source)


def _predict_parallel(model, source, jobs):
    if jobs <= 1 or len(source.cities) <= 1:
        return predict(model, source)
    parts = [source.subset(np.flatnonzero(source.index[:, 0] == k)) for k in range(len(source.cities))]
    parts = [p for p in parts if len(p)]
    with ProcessPoolExecutor(jobs) as ex:
        outs = list(ex.map(_predict_city, [(model, p) for p in parts]))
    order = np.concatenate([np.flatnonzero(source.index[:, 0] == k) for k in range(len(source.cities))])
    merged = {}
    for k in outs[0]:
        if outs[0][k] is None:
            merged[k] = None
            continue
        cat = np.concatenate([o[k] for o in outs])
        res = np.empty_like(cat)
        res[order] = cat
        merged[k] = res
    return merged


def cmd_eval(cfg, args):
    model, src, data = _load_model_and_sources(cfg, args)
    pred = _predict_parallel(model, src, args.jobs)
    y = src.labels()
    bh = evalkit.metrics(pred["h_pred"], y[:, 1])
    bf = evalkit.metrics(pred["lambda_pred"], y[:, 0])
    strat = evalkit.stratify(pred["h_pred"], y[:, 1], y[:, 0])
    grid = evalkit.error_grid(pred["h_pred"], pred["lambda_pred"], y[:, 1], y[:, 0],
                              min_count=cfg.eval.min_bin_count)
    report = {"subset": cfg.eval.subset, "bh": bh, "bf": bf, "stratified": strat, "error_grid": grid}
    text = evalkit.format_metrics_table([("model", bh, bf)]) + "\n" + evalkit.format_stratified(strat)
    if pred["h_from_bf"] is not None:
        sur = evalkit.surrogate_stats(pred["h_from_bf"], pred["h_pred"], y[:, 1])
        report["surrogate"] = sur
        text += "\n" + evalkit.format_surrogate(sur)
    out = os.path.join(data, "eval")
    os.makedirs(out, exist_ok=True)
    evalkit.write_report(report, os.path.join(out, "eval.json"))
    _write_text(os.path.join(out, "eval.txt"), text)
    write_resolved(cfg, out)
    print(text, end="")


def cmd_gate_stats(cfg, args):
    model, src, data = _load_model_and_sources(cfg, args)
    if model.cfg.ablate_bgtd:
        raise UsageFailure("--ckpt: this model was trained without the footprint-guided gate")
    pred = _predict_parallel(model, src, args.jobs)
    rep = evalkit.gate_stats(pred["gate"], src.labels()[:, 0])
    out = os.path.join(data, "eval")
    os.makedirs(out, exist_ok=True)
    evalkit.write_report(rep, os.path.join(out, "gate.json"))
    _write_text(os.path.join(out, "gate.txt"), evalkit.format_gate(rep))
    write_resolved(cfg, out, "config.gate.json")
    print(evalkit.format_gate(rep), end="")


def cmd_ablate(cfg, args):
    data = args.data or cfg.out_dir
    cities = load_cities(data)
    grids = load_or_make_split(cities, data, cfg.split.rotate)
    src, _ = sources(cities, grids)
    from .training import PreparedData
    prepared = PreparedData(cities, grids, src["train"], src["val"], src["test"])
    out = args.run_dir or os.path.join(data, "ablation")
    os.makedirs(out, exist_ok=True)
    write_resolved(cfg, out)
    res = run_ablation_suite(prepared, cfg.model_config(), cfg.train, cfg.loss, tuple(cfg.eval.seeds),
                             out_dir=out, keep_predictions=True)
    y = src["test"].labels()
    med_pred = {}
    for v in VARIANTS:
        stack = np.stack([r["pred"]["h_pred"] for r in res.per_run if r["variant"] == v])
        med_pred[v] = np.median(stack, axis=0)
    strat = evalkit.stratify(med_pred["full"], y[:, 1], y[:, 0],
                             others={v: med_pred[v] for v in VARIANTS if v != "full"})
    for r in res.per_run:
        r.pop("pred")
    text = res.table() + "\n" + evalkit.format_stratified(
        strat, {v: f"d {VARIANT_LABELS[v]}" for v in VARIANTS if v != "full"})
    evalkit.write_report({"ablation": res, "stratified": strat}, os.path.join(out, "ablation.json"))
    _write_text(os.path.join(out, "ablation.txt"), text)
    print(text, end="")


def cmd_leakage(cfg, args):
    data = args.data or cfg.out_dir
    cities = load_cities(data)
    rng = np.random.default_rng(cfg.seed + 5)
    rows = []
    for t, _ in cities:
        s = geosplit.geosplit_city(t, cfg.split.rotate)
        rnd = geosplit.random_split(t, rng)
        rows.append({"city_id": t.city_id, "valid_cells": int(t.valid.sum()), "fractions": list(s.fractions),
                     "geosplit_leakage": geosplit.leakage_audit(s.subset_grid, denominator=args.denominator),
                     "random_leakage": geosplit.leakage_audit(rnd, denominator=args.denominator)})
    evalkit.write_report({"denominator": args.denominator, "cities": rows}, os.path.join(data, "leakage.json"))
    write_resolved(cfg, data, "config.leakage.json")
    for r in rows:
        print(f"{r['city_id']}: geosplit {r['geosplit_leakage']:.3f}  random {r['random_leakage']:.3f}")


# ---------------------------------------------------------------- parser

def _common(p, data=True, ckpt=False, run_dir=False):
    p.add_argument("--config", help="JSON run config; flags override its values (default: built-in defaults)")
    p.add_argument("--seed", type=int, help="global seed (default: 0)")
    p.add_argument("--out", help="output directory (default: run)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for per-city work")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    if data:
        p.add_argument("--data", help="data directory written by `generate` (default: the --out directory)")
    if ckpt:
        p.add_argument("--ckpt", help="checkpoint path (default: <data>/train/model.ckpt)")
        p.add_argument("--subset", choices=geosplit.SUBSETS, help="subset to score (default: test)")
    if run_dir:
        p.add_argument("--run-dir", help="directory for logs and checkpoints (default: under --data)")
    p.add_argument("--rotate", type=float, help="sector rotation in degrees (default: 0)")


def _model_flags(p):
    p.add_argument("--preset", choices=sorted(PRESETS), help="model size preset (default: standard)")
    p.add_argument("--epochs", type=int, help="training epochs (default: 40)")
    p.add_argument("--batch-size", type=int, help="minibatch size (default: 64)")
    p.add_argument("--lr", type=float, help="learning rate (default: 0.001)")
    p.add_argument("--samples-per-epoch", type=int, help="training scenes drawn per epoch, 0 = all (default: 0)")
    p.add_argument("--warmup-inclusive", action="store_const", const=True,
                   help="reach the full consistency weight at the end of the warmup epoch (default: off)")


class _HelpFormatter(argparse.HelpFormatter):
    """Append the default unless the help text already states it."""

    def _get_help_string(self, action):
        text = action.help or ""
        if "default:" in text or action.default is argparse.SUPPRESS:
            return text
        return f"{text} (default: %(default)s)"


def build_parser():
    fmt = _HelpFormatter
    ap = argparse.ArgumentParser(prog="morphoformer", description="Joint building height / footprint estimation")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write synthetic cities", formatter_class=fmt)
    _common(p, data=False)
    p.add_argument("--cities", type=int, help="number of cities (default: 4)")
    p.add_argument("--grid-size", type=int, help="cells per city side (default: 120)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("split", help="sector split of every city", formatter_class=fmt)
    _common(p)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("prior", help="footprint/height coupling statistics", formatter_class=fmt)
    _common(p)
    p.add_argument("--cells", choices=("all",) + geosplit.SUBSETS, default="all", help="cells to pool")
    p.add_argument("--baseline-rmse", type=float, default=None,
                   help="reference RMSE in metres for the ceiling (default: std of H)")
    p.set_defaults(func=cmd_prior)

    p = sub.add_parser("train", help="train one model", formatter_class=fmt)
    _common(p, run_dir=True)
    _model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="full vs w/o BGTD vs w/o MCL over seeds", formatter_class=fmt)
    _common(p, run_dir=True)
    _model_flags(p)
    p.add_argument("--seeds", type=int, help="number of seeds, >= 3 (default: 3)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="score a checkpoint", formatter_class=fmt)
    _common(p, ckpt=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gate-stats", help="statistics of the footprint-guided gate", formatter_class=fmt)
    _common(p, ckpt=True)
    p.set_defaults(func=cmd_gate_stats)

    p = sub.add_parser("leakage-audit", help="neighbour leakage of sector vs random splits", formatter_class=fmt)
    _common(p)
    p.add_argument("--denominator", choices=("assigned", "window"), default="assigned",
                   help="normalise by assigned neighbours or by the whole window")
    p.set_defaults(func=cmd_leakage)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = apply_overrides(load_run_config(args.config), args)
        if args.jobs < 1:
            raise UsageFailure("--jobs: must be >= 1")
        args.func(cfg, args)
    except (UsageFailure, ConfigError, FormatError, TypeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - top-level runtime failure
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
