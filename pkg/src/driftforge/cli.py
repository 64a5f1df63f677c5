"""Command line entry point: ``driftforge <command> [options]``.

Every command takes an optional JSON ``--config`` whose sections mirror the
library dataclasses::

    {"seed": 0,
     "device": {...DeviceParams fields...},
     "dataset": {"count": 5000, "r_min": 100, "r_max": 750000,
                 "t_tot": 1000, "t_sample": 1, "method": "tau_leap"},
     "train": {...TrainConfig fields...},
     "quantizer": {...QuantizerConfig fields...}}

Explicit flags override file values. Each run writes ``manifest.json`` next
to its outputs with the resolved config and sha256 of every input/output.

Exit codes: 0 success, 2 validation error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .cgan import DriftModel, TrainConfig, Trainer, TrainingAborted, write_log
from .dataset import generate_dataset, load_dataset, save_dataset
from .device import METHODS, DeviceParams
from .evaluation import (
    CONSISTENCY_CONDITIONS,
    DEFAULT_DELAYS,
    DEFAULT_R_INITS,
    GanSampler,
    OracleSampler,
    conditioned_moments,
    delay_consistency,
    final_value_histogram,
    moment_match_score,
    series_dump,
)
from .nn import CheckpointError, file_sha256
from .normalization import DegenerateStatsError, compute_stats, load_stats, save_stats
from .quantizer import QuantizerConfig, SchemeError, evaluate_error, optimize

log = logging.getLogger("driftforge")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3
SWEEP_HEADER = ("bits", "levels", "delay", "error_mean", "error_stderr", "experiments")
DATASET_DEFAULTS = {"count": 5000, "r_min": 100.0, "r_max": 750e3, "t_tot": 1000.0,
                    "t_sample": 1.0, "method": "tau_leap"}


class UsageError(ValueError):
    """Bad paths, configs or grids (exit code 2)."""


# -- config plumbing ----------------------------------------------------------------
def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path} must be a JSON object")
    unknown = set(cfg) - {"seed", "device", "dataset", "train", "quantizer", "grid"}
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def _override(section: dict, args, mapping: dict) -> dict:
    out = dict(section)
    for flag, key in mapping.items():
        v = getattr(args, flag, None)
        if v is not None:
            out[key] = v
    return out


def _device(cfg: dict) -> DeviceParams:
    d = cfg.get("device", {})
    known = {f.name for f in fields(DeviceParams)}
    if set(d) - known:
        raise UsageError(f"unknown device keys: {sorted(set(d) - known)}")
    return DeviceParams(**d)


def _seed(cfg: dict, args) -> int:
    s = args.seed if getattr(args, "seed", None) is not None else cfg.get("seed", 0)
    return int(s)


def threads_from(args) -> int:
    if getattr(args, "threads", None) is not None:
        n = args.threads
    else:
        env = os.environ.get("DRIFTFORGE_THREADS")
        try:
            n = int(env) if env else 1
        except ValueError:
            raise UsageError(f"DRIFTFORGE_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise UsageError("thread count must be >= 1")
    return n


def _outdir(args) -> Path:
    out = Path(args.out)
    if out.exists() and not out.is_dir():
        raise UsageError(f"--out {out} exists and is not a directory")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create {out}: {exc}") from None
    return out


def _need(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} file {p} does not exist")
    return p


def write_manifest(out: Path, command: str, config: dict, inputs: list, outputs: list) -> Path:
    doc = {
        "command": command,
        "version": __version__,
        "config": config,
        "inputs": {str(p): file_sha256(p) for p in inputs},
        "outputs": {str(p): file_sha256(p) for p in outputs},
        "created_unix": time.time(),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str))
    return path


def _write_rows(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(header))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return path


# -- commands -------------------------------------------------------------------------
def cmd_gen_dataset(args) -> int:
    cfg = load_config(args.config)
    ds_cfg = {**DATASET_DEFAULTS, **cfg.get("dataset", {})}
    ds_cfg = _override(ds_cfg, args, {"count": "count", "r_min": "r_min", "r_max": "r_max",
                                      "ttot": "t_tot", "tsample": "t_sample", "method": "method"})
    if set(ds_cfg) - set(DATASET_DEFAULTS):
        raise UsageError(f"unknown dataset keys: {sorted(set(ds_cfg) - set(DATASET_DEFAULTS))}")
    p = _device(cfg)
    seed = _seed(cfg, args)
    out = _outdir(args)
    ds = generate_dataset(int(ds_cfg["count"]), float(ds_cfg["r_min"]), float(ds_cfg["r_max"]),
                          float(ds_cfg["t_tot"]), float(ds_cfg["t_sample"]), p, seed,
                          ds_cfg["method"], threads_from(args))
    csv_path, mpath = save_dataset(ds, out / "dataset.csv")
    resolved = {"seed": seed, "device": p.to_dict(), "dataset": ds_cfg}
    write_manifest(out, "gen-dataset", resolved, [], [csv_path, mpath])
    print(f"wrote {csv_path} ({len(ds)} series x {ds.length} points)")
    return EXIT_OK


def cmd_stats(args) -> int:
    ds_path = _need(args.dataset, "dataset")
    out = _outdir(args)
    ds = load_dataset(ds_path)
    stats = compute_stats(ds)
    path = save_stats(stats, out / "stats.json")
    write_manifest(out, "stats", {"dataset": str(ds_path)}, [ds_path], [path])
    print(f"wrote {path}")
    return EXIT_OK


def _train_config(cfg: dict, args, seed: int) -> TrainConfig:
    d = _override(cfg.get("train", {}), args, {
        "epochs": "epochs", "steps_per_epoch": "steps_per_epoch", "batch": "batch", "lr": "lr",
        "checkpoint_every": "checkpoint_every"})
    # precedence: --seed, then train.seed, then the top-level seed
    if getattr(args, "seed", None) is not None or "seed" not in d:
        d["seed"] = seed
    if args.ablation_no_dd:
        d["delay_discriminator"] = False
    return TrainConfig.from_dict(d)


def cmd_train(args) -> int:
    ds_path = _need(args.dataset, "dataset")
    st_path = _need(args.stats, "stats")
    cfg = load_config(args.config)
    seed = _seed(cfg, args)
    out = _outdir(args)
    ds = load_dataset(ds_path)
    stats = load_stats(st_path)
    if stats.dataset_hash != ds.content_hash():
        raise UsageError("stats file was computed on a different dataset (hash mismatch)")
    ckpt = out / "checkpoint.json"
    log_path = out / "train_log.csv"
    inputs = [ds_path, st_path]
    if args.resume:
        res_path = _need(args.resume, "resume")
        inputs.append(res_path)
        tcfg = _train_config(cfg, args, seed) if (args.config or _any_train_flag(args)) else None
        tr = Trainer.resume(res_path, ds, stats, tcfg)
        remaining = max(0, tr.cfg.epochs - tr.epoch)
    else:
        tcfg = _train_config(cfg, args, seed)
        tr = Trainer(ds, stats, tcfg)
        remaining = tcfg.epochs
    resolved = {"seed": tr.cfg.seed, "train": tr.cfg.to_dict(),
                "ablation_no_dd": not tr.cfg.delay_discriminator,
                "resumed_from": str(args.resume) if args.resume else None,
                "start_step": tr.step_count}
    try:
        tr.run(remaining, checkpoint_path=ckpt, log_path=log_path)
    except TrainingAborted as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        write_manifest(out, "train", {**resolved, "aborted": str(exc)}, inputs, [])
        return EXIT_NUMERICAL
    write_log(tr.log_rows, log_path)
    write_manifest(out, "train", resolved, inputs, [ckpt, log_path])
    print(f"wrote {ckpt} (step {tr.step_count}, epoch {tr.epoch})")
    return EXIT_OK


def _any_train_flag(args) -> bool:
    return any(getattr(args, k, None) is not None
               for k in ("epochs", "steps_per_epoch", "batch", "lr", "seed", "checkpoint_every")) \
        or args.ablation_no_dd


def _load_model(args) -> tuple[DriftModel, list[Path]]:
    ck = _need(args.checkpoint, "checkpoint")
    stats = load_stats(_need(args.stats, "stats")) if getattr(args, "stats", None) else None
    model = DriftModel.load(ck, stats)
    return model, [ck] + ([Path(args.stats)] if getattr(args, "stats", None) else [])


def _grid(args, cfg: dict) -> dict:
    g = dict(cfg.get("grid", {}))
    if args.grid:
        try:
            g.update(json.loads(Path(args.grid).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read grid {args.grid}: {exc}") from None
    allowed = {"r_inits", "delays", "n_samples", "total", "conditions", "bins", "delay",
               "steps", "per_init", "log_bins"}
    if set(g) - allowed:
        raise UsageError(f"unknown grid keys: {sorted(set(g) - allowed)}")
    # delay 0 is meaningful for histograms (the starting distribution)
    for key, floor in (("r_inits", 0.0), ("delays", -1.0), ("conditions", 0.0)):
        if key in g:
            vals = g[key]
            if not isinstance(vals, list) or not vals or not all(
                    isinstance(v, (int, float)) and math.isfinite(v) and v > floor for v in vals):
                kind = "nonnegative" if floor < 0 else "positive"
                raise UsageError(f"grid {key} must be a nonempty list of {kind} numbers")
    if "n_samples" in g and int(g["n_samples"]) < 2:
        raise UsageError("grid n_samples must be >= 2")
    return g


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    grid = _grid(args, cfg)
    seed = _seed(cfg, args)
    out = _outdir(args)
    r_inits = grid.get("r_inits", list(DEFAULT_R_INITS))
    n = int(grid.get("n_samples", 100))
    inputs: list[Path] = []
    outputs: list[Path] = []
    resolved = {"kind": args.kind, "seed": seed, "grid": grid, "source": args.source}
    model = None
    needs_model = args.kind in ("consistency", "series") or args.source in ("gan", "both")
    if args.kind == "histogram" and args.dataset:
        needs_model = False
    if needs_model:
        model, inputs = _load_model(args)

    if args.kind == "consistency":
        rep = delay_consistency(model, r_inits, int(grid.get("total", 500)),
                                grid.get("conditions", list(CONSISTENCY_CONDITIONS)), n, seed)
        outputs.append(rep.to_csv(out / "consistency.csv"))
    elif args.kind == "moments":
        delays = grid.get("delays", list(DEFAULT_DELAYS))
        reports = {}
        if args.source in ("oracle", "both"):
            reports["oracle"] = conditioned_moments(OracleSampler(_device(cfg)), r_inits, delays,
                                                    n, seed)
        if args.source in ("gan", "both"):
            reports["gan"] = conditioned_moments(GanSampler(model), r_inits, delays, n, seed)
        for name, rep in reports.items():
            outputs.append(rep.to_csv(out / f"moments_{name}.csv"))
        if len(reports) == 2:
            mu, sd = moment_match_score(reports["gan"], reports["oracle"])
            resolved["moment_match"] = {"mae_log_mean": mu, "mae_log_std": sd}
            print(f"MAE ln-mean {mu:.4f}  MAE ln-std {sd:.4f}")
    elif args.kind == "histogram":
        delays = grid.get("delays", [0, 10, 100, 1000])
        bins = int(grid.get("bins", 50))
        log_bins = bool(grid.get("log_bins", True))
        if args.dataset:
            ds_path = _need(args.dataset, "dataset")
            inputs.append(ds_path)
            h = final_value_histogram(load_dataset(ds_path), delays, bins, log_bins=log_bins)
            outputs.append(h.to_csv(out / "histogram_dataset.csv"))
        else:
            sources = []
            if args.source in ("oracle", "both"):
                sources.append(("oracle", OracleSampler(_device(cfg))))
            if args.source in ("gan", "both"):
                sources.append(("gan", GanSampler(model)))
            for name, smp in sources:
                h = final_value_histogram(smp, delays, bins, r_inits, n, seed, log_bins=log_bins)
                outputs.append(h.to_csv(out / f"histogram_{name}.csv"))
    elif args.kind == "series":
        d = float(grid.get("delay", 10))
        rep = series_dump(model, r_inits, d, grid.get("steps"), int(grid.get("per_init", 20)), seed)
        outputs.append(rep.to_csv(out / "series.csv"))
    outputs += [s for p in outputs
                if (s := p.with_name(p.stem + "_summary.csv")).exists()]
    write_manifest(out, f"eval {args.kind}", resolved, inputs, outputs)
    print("wrote " + ", ".join(str(p) for p in outputs))
    return EXIT_OK


def _quant_config(cfg: dict, args) -> QuantizerConfig:
    d = _override(cfg.get("quantizer", {}), args, {"max_steps": "max_steps",
                                                  "mc_trials": "mc_trials"})
    return QuantizerConfig.from_dict(d)


def cmd_quantize(args) -> int:
    cfg = load_config(args.config)
    qcfg = _quant_config(cfg, args)
    seed = _seed(cfg, args)
    if args.levels < 1:
        raise UsageError("--levels must be >= 1")
    if not args.delay > 0:
        raise UsageError("--delay must be positive")
    model, inputs = _load_model(args)
    out = _outdir(args)
    res = optimize(args.levels, args.delay, model, qcfg, seed=seed)
    sch = res.scheme
    err_oracle = evaluate_error(sch, args.delay, OracleSampler(_device(cfg)), args.trials, seed)
    err_gan = evaluate_error(sch, args.delay, GanSampler(model), args.trials, seed)
    path = sch.save(out / "scheme.json", qcfg, file_sha256(inputs[0]))
    doc = json.loads(path.read_text())
    doc.update(error_oracle=err_oracle, error_gan=err_gan, best_loss=res.best_loss,
               steps=res.steps)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    resolved = {"seed": seed, "levels": args.levels, "delay": args.delay,
                "trials": args.trials, "quantizer": qcfg.to_dict()}
    write_manifest(out, "quantize", resolved, inputs, [path])
    violations = sch.violations()
    if violations:
        print("error: optimized scheme violates its invariants: " + "; ".join(violations),
              file=sys.stderr)
        return EXIT_NUMERICAL
    print(f"wrote {path}: error oracle={err_oracle:.4f} gan={err_gan:.4f}")
    return EXIT_OK


def _parse_bits(text: str) -> list[int]:
    try:
        if ".." in text:
            a, b = text.split("..")
            bits = list(range(int(a), int(b) + 1))
        else:
            bits = [int(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"cannot parse --bits {text!r} (use 1..4 or 1,2,3)") from None
    if not bits or min(bits) < 0:
        raise UsageError("--bits must be non-negative")
    return bits


def _parse_delays(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"cannot parse --delays {text!r}") from None
    if not vals or not all(math.isfinite(v) and v > 0 for v in vals):
        raise UsageError("--delays must be positive numbers")
    return vals


def cmd_quantize_sweep(args) -> int:
    cfg = load_config(args.config)
    qcfg = _quant_config(cfg, args)
    seed = _seed(cfg, args)
    bits = _parse_bits(args.bits)
    delays = _parse_delays(args.delays)
    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    model, inputs = _load_model(args)
    out = _outdir(args)
    oracle, gan = OracleSampler(_device(cfg)), GanSampler(model)
    runs, agg = [], {"oracle": [], "gan": []}
    any_bad = False
    for b in bits:
        L = 2 ** b
        for d in delays:
            errs = {"oracle": [], "gan": []}
            for k in range(args.repeats):
                s = seed + 1000 * k + 17 * b
                res = optimize(L, d, model, qcfg, seed=s)
                bad = bool(res.scheme.violations())
                any_bad |= bad
                eo = evaluate_error(res.scheme, d, oracle, args.trials, s)
                eg = evaluate_error(res.scheme, d, gan, args.trials, s)
                errs["oracle"].append(eo)
                errs["gan"].append(eg)
                runs.append({"bits": b, "levels": L, "delay": d, "repeat": k, "seed": s,
                             "error_oracle": eo, "error_gan": eg, "best_loss": res.best_loss,
                             "steps": res.steps, "valid": not bad})
            for name in agg:
                e = np.array(errs[name])
                se = float(e.std(ddof=1) / math.sqrt(e.size)) if e.size > 1 else 0.0
                agg[name].append({"bits": b, "levels": L, "delay": d,
                                  "error_mean": float(e.mean()), "error_stderr": se,
                                  "experiments": int(e.size)})
    outputs = [
        _write_rows(out / "sweep.csv", SWEEP_HEADER, agg["oracle"]),
        _write_rows(out / "sweep_gan.csv", SWEEP_HEADER, agg["gan"]),
        _write_rows(out / "sweep_runs.csv", ("bits", "levels", "delay", "repeat", "seed",
                                              "error_oracle", "error_gan", "best_loss",
                                              "steps", "valid"), runs),
    ]
    resolved = {"seed": seed, "bits": bits, "delays": delays, "repeats": args.repeats,
                "trials": args.trials, "quantizer": qcfg.to_dict()}
    write_manifest(out, "quantize-sweep", resolved, inputs, outputs)
    if any_bad:
        print("error: at least one optimized scheme violates its invariants (see sweep_runs.csv)",
              file=sys.stderr)
        return EXIT_NUMERICAL
    print("wrote " + ", ".join(str(p) for p in outputs))
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="driftforge", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--seed", type=int, help="global seed (overrides config)")
        sp.add_argument("--threads", type=int,
                        help="cap on worker processes (default: $DRIFTFORGE_THREADS or 1)")

    g = sub.add_parser("gen-dataset", help="simulate a drift dataset")
    common(g)
    g.add_argument("--count", type=int)
    g.add_argument("--ttot", type=float)
    g.add_argument("--tsample", type=float)
    g.add_argument("--r-min", dest="r_min", type=float)
    g.add_argument("--r-max", dest="r_max", type=float)
    g.add_argument("--method", choices=METHODS)
    g.set_defaults(func=cmd_gen_dataset)

    s = sub.add_parser("stats", help="compute normalization statistics")
    common(s)
    s.add_argument("--dataset", required=True)
    s.set_defaults(func=cmd_stats)

    t = sub.add_parser("train", help="train the conditional GAN")
    common(t)
    t.add_argument("--dataset", required=True)
    t.add_argument("--stats", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--steps-per-epoch", dest="steps_per_epoch", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    t.add_argument("--ablation-no-dd", action="store_true",
                   help="disable the delay discriminator")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluation protocols")
    e.add_argument("kind", choices=("consistency", "moments", "histogram", "series"))
    common(e)
    e.add_argument("--checkpoint")
    e.add_argument("--stats", help="stats file to verify against the checkpoint")
    e.add_argument("--grid", help="JSON grid file (r_inits, delays, n_samples, ...)")
    e.add_argument("--source", choices=("gan", "oracle", "both"), default="both",
                   help="sampler(s) for moments/histogram")
    e.add_argument("--dataset", help="histogram straight from a dataset file")
    e.set_defaults(func=cmd_eval)

    q = sub.add_parser("quantize", help="optimize one quantization scheme")
    common(q)
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--stats")
    q.add_argument("--levels", type=int, required=True)
    q.add_argument("--delay", type=float, required=True)
    q.add_argument("--trials", type=int, default=10_000)
    q.add_argument("--max-steps", dest="max_steps", type=int)
    q.add_argument("--mc-trials", dest="mc_trials", type=int)
    q.set_defaults(func=cmd_quantize)

    w = sub.add_parser("quantize-sweep", help="error versus bits and delay")
    common(w)
    w.add_argument("--checkpoint", required=True)
    w.add_argument("--stats")
    w.add_argument("--bits", default="1..4")
    w.add_argument("--delays", default="1,10,100,1000")
    w.add_argument("--repeats", type=int, default=5)
    w.add_argument("--trials", type=int, default=10_000)
    w.add_argument("--max-steps", dest="max_steps", type=int)
    w.add_argument("--mc-trials", dest="mc_trials", type=int)
    w.set_defaults(func=cmd_quantize_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (TrainingAborted, FloatingPointError, SchemeError) as exc:
        print(f"error: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (UsageError, DegenerateStatsError, CheckpointError, ValueError, KeyError,
            FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
