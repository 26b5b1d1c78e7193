"""``nco`` command line: gen-data, train, eval, fit-scaling, analyze.

Exit codes: 0 ok, 2 invalid input, 3 config/checkpoint mismatch, 4 numerical failure.
Every command prints one ``key=value`` summary line on stdout.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import logging
import os
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import analysis, scaling
from .decoding import DecodeSpec
from .instances import KINDS, SizeError, build_dataset, load_dataset, save_dataset, write_tours_csv
from .model import CheckpointError, Model, ModelConfig, load_checkpoint, param_count
from .training import DataExhausted, NumericalError, TrainConfig, load_training_state, run_training

log = logging.getLogger("nco_scaling")

EXIT_OK, EXIT_INVALID, EXIT_MISMATCH, EXIT_NUMERICAL = 0, 2, 3, 4


class MismatchError(RuntimeError):
    pass


# ----------------------------------------------------------------------------
# manifest
# ----------------------------------------------------------------------------

def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(path: Path, command: str, config: dict, seed: int, started: str, outputs) -> dict:
    manifest = {
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "git": _git_describe(),
        "started": started,
        "finished": _now(),
        "outputs": sorted(str(p) for p in outputs),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def summary(**kv) -> None:
    print(" ".join(f"{k}={v}" for k, v in kv.items()), flush=True)


def _threads(v: int | None) -> int:
    return max(1, v if v else (os.cpu_count() or 1))


# ----------------------------------------------------------------------------
# gen-data
# ----------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    started = _now()
    cfg = {"kind": args.kind, "n": args.n, "count": args.count, "seed": args.seed, "label": args.label}
    ds = build_dataset(args.kind, args.n, args.count, args.seed, args.label, _threads(args.threads))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(out, ds)
    write_manifest(out.with_name(out.name + ".manifest.json"), "gen-data", cfg, args.seed, started, [out])
    mean_cost = float(ds.costs.mean()) if ds.labelled and len(ds) else float("nan")
    summary(command="gen-data", count=len(ds), n=ds.n, label=ds.label, mean_ref_cost=f"{mean_cost:.6f}",
            out=out)
    return EXIT_OK


# ----------------------------------------------------------------------------
# train
# ----------------------------------------------------------------------------

DEFAULT_MODEL = ModelConfig.tiny().to_dict()


def load_run_config(path: str | None) -> tuple[ModelConfig, TrainConfig]:
    raw = json.loads(Path(path).read_text()) if path else {}
    unknown = set(raw) - {"model", "train"}
    if unknown:
        raise ValueError(f"unknown config sections {sorted(unknown)}")
    model = ModelConfig.from_dict({**DEFAULT_MODEL, **raw.get("model", {})})
    base = TrainConfig.desk().to_dict()
    extra = set(raw.get("train", {})) - set(base)
    if extra:
        raise ValueError(f"unknown train keys {sorted(extra)}")
    return model, TrainConfig.from_dict({**base, **raw.get("train", {})})


def cmd_train(args) -> int:
    started = _now()
    mcfg, tcfg = load_run_config(args.config)
    over = {k: v for k, v in (("total_steps", args.steps), ("seed", args.seed),
                              ("batch_size", args.batch_size)) if v is not None}
    if over:
        tcfg = TrainConfig.from_dict({**tcfg.to_dict(), **over})
    ds = load_dataset(args.data)
    out = Path(args.out)
    opt = None
    if args.resume:
        model, opt, saved = load_training_state(args.resume)
        if model.config != mcfg:
            raise MismatchError(f"resume checkpoint holds {model.config}, config asks for {mcfg}")
        if saved != tcfg:
            raise MismatchError("resume checkpoint was written with a different training config")
    else:
        model = Model.create(mcfg, ds.n, seed=tcfg.seed)
    effective = {"model": mcfg.to_dict(), "train": tcfg.to_dict(), "data": str(args.data)}
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(effective, indent=2, sort_keys=True) + "\n")
    res = run_training(tcfg, ds, model, out, opt=opt, threads=_threads(args.threads),
                       log_every=args.log_every)
    write_manifest(out / "manifest.json", "train", effective, tcfg.seed, started,
                   sorted(p for p in out.iterdir() if p.name != "manifest.json"))
    last = res.curve[-1][2] if res.curve else float("nan")
    summary(command="train", steps=res.opt.step, final_loss=f"{last:.6f}",
            params=param_count(mcfg).exact, out=out)
    return EXIT_OK


# ----------------------------------------------------------------------------
# eval
# ----------------------------------------------------------------------------

def _check_expected(model: Model, args) -> None:
    for key in ("depth", "width"):
        want = getattr(args, key, None)
        if want is not None and getattr(model.config, key) != want:
            raise MismatchError(f"checkpoint {key}={getattr(model.config, key)} but --{key} {want}")


def cmd_eval(args) -> int:
    started = _now()
    model = load_checkpoint(args.ckpt)
    _check_expected(model, args)
    ds = load_dataset(args.data)
    if args.beam is not None and args.rrc_iters is not None:
        raise ValueError("--beam and --rrc-iters are mutually exclusive")
    text = args.decode
    if args.beam is not None:
        text = f"beam:{args.beam}"
    elif args.rrc_iters is not None:
        text = f"rrc:{args.rrc_iters}"
    spec = DecodeSpec.parse(text, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.orders:
        # score externally produced tours (one whitespace-separated tour per line)
        orders = np.array([[int(v) for v in line.split()] for line in
                           Path(args.orders).read_text().splitlines() if line.strip()])
        res = analysis.score_orders(ds, orders)
        res.record = scaling.EvalRecord(
            model.config.depth, model.config.width, model.config.heads, model.config.qkv_dim,
            model.config.ffn_dim, param_count(model.config).exact, "external", 1,
            args.dataset_id or f"{ds.kind}{ds.n}", ds.n, res.mean_gap, 0.0,
            scaling.flops_per_solution(model.config, ds.n), 0)
    else:
        res = analysis.evaluate(model, ds, spec, _threads(args.threads), args.dataset_id)
    write_tours_csv(out / "tours.csv", res.tour_rows())
    scaling.write_records(out / "records.csv", [res.record])
    cfg = {"ckpt": str(args.ckpt), "data": str(args.data), "decode": str(spec), "seed": args.seed,
           "orders": args.orders}
    write_manifest(out / "manifest.json", "eval", cfg, args.seed, started,
                   [out / "tours.csv", out / "records.csv"])
    summary(command="eval", decode=str(spec), count=len(ds), mean_gap_pct=f"{res.mean_gap:.6f}",
            gflops=f"{res.record.gflops_per_solution:.4f}", out=out)
    return EXIT_OK


# ----------------------------------------------------------------------------
# fit-scaling
# ----------------------------------------------------------------------------

FORMS = ("N", "S", "C", "WD", "NA", "time")


def _read_rows(src: str) -> list[dict]:
    if src.startswith("fixture:"):
        return scaling.load_fixture(src.split(":", 1)[1] + ".csv")
    with open(src, newline="") as fh:
        rd = csv.DictReader(fh)
        if not rd.fieldnames:
            raise ValueError(f"{src}: empty CSV")
        rows = list(rd)
    out = []
    for i, row in enumerate(rows):
        conv = {}
        for k, v in row.items():
            if k is None or v is None:
                raise ValueError(f"{src}: malformed row {i + 2}")
            try:
                conv[k] = int(v)
            except ValueError:
                try:
                    conv[k] = float(v)
                except ValueError:
                    conv[k] = v
        out.append(conv)
    return out


def _apply_filters(rows, filters):
    for f in filters or []:
        key, _, val = f.partition("=")
        if not val:
            raise ValueError(f"bad filter {f!r}; use key=value")
        rows = [r for r in rows if str(r.get(key)) == val]
    return rows


def _col(rows, *names):
    for name in names:
        if rows and all(name in r for r in rows):
            return np.array([float(r[name]) for r in rows])
    raise ValueError(f"records need one of the columns {names}")


def _config_for(row) -> ModelConfig:
    if all(k in row for k in ("heads", "qkv_dim", "ffn_dim")):
        return ModelConfig(int(row["depth"]), int(row["width"]), int(row["heads"]),
                           int(row["qkv_dim"]), int(row["ffn_dim"]))
    h, dk = scaling.GRID_HEADS[int(row["width"])]
    return ModelConfig(int(row["depth"]), int(row["width"]), h, dk, 4 * int(row["width"]))


def run_fit(rows: list[dict], form: str, method: str | None = None):
    """Returns (fit, x columns, gaps, dropped count)."""
    y = _col(rows, "mean_gap_pct", "gap_pct")
    if form == "N":
        x = _col(rows, "params_m", "params")
    elif form == "S":
        x = _col(rows, "samples_seen", "samples")
    elif form == "C":
        if rows and all("gflops_per_solution" in r for r in rows):
            x = _col(rows, "gflops_per_solution")
        else:
            x = np.array([scaling.flops_per_solution(_config_for(r), int(r.get("n", 100)),
                                                     int(r.get("beam", 1))) for r in rows])
    elif form == "time":
        x = _col(rows, "wall_seconds", "time_min")
    elif form in ("WD", "NA"):
        x = None
    else:
        raise ValueError(f"unknown form {form!r}")
    keep = y > 0
    dropped = int((~keep).sum())
    y = y[keep]
    rows = [r for r, k in zip(rows, keep) if k]
    if form == "WD":
        d, w = _col(rows, "depth"), _col(rows, "width")
        return scaling.fit_depth_width(d, w, y, method or "log"), (d, w), y, dropped
    if form == "NA":
        cfgs = [_config_for(r) for r in rows]
        fit = scaling.fit_params_shape(cfgs, y, method or "log")
        n = np.array([param_count(c).exact for c in cfgs]) / 1e6
        a = np.array([c.depth / c.width for c in cfgs])
        return fit, (n, a), y, dropped
    x = x[keep]
    if form == "time":
        return scaling.fit_shifted(x, y), (x,), y, dropped
    return scaling.fit_power(x, y, method or "gap"), (x,), y, dropped


def fit_plot(fit, xs, y, form: str) -> analysis.Plot:
    if len(xs) == 1:
        x = xs[0]
        grid = np.geomspace(x.min(), x.max(), 64)
        return analysis.Plot([analysis.Series("data", x.tolist(), y.tolist(), "scatter"),
                              analysis.Series("fit", grid.tolist(), fit.predict(grid).tolist(), "line")],
                             logx=True, logy=True, xlabel=form, ylabel="gap %")
    # bivariate: one fitted curve per value of the second variable
    x1, x2 = xs
    series = []
    for v in sorted(set(x2.tolist())):
        sel = x2 == v
        g = np.geomspace(x1[sel].min(), x1[sel].max(), 32) if sel.sum() > 1 else x1[sel]
        series.append(analysis.Series(f"{v:.4g} data", x1[sel].tolist(), y[sel].tolist(), "scatter"))
        series.append(analysis.Series(f"{v:.4g} fit", g.tolist(), fit.predict(g, np.full_like(g, v)).tolist(), "line"))
    return analysis.Plot(series, logx=True, logy=True, xlabel=form[0], ylabel="gap %")


def cmd_fit_scaling(args) -> int:
    started = _now()
    rows = _apply_filters(_read_rows(args.records), args.filter)
    fit, xs, y, dropped = run_fit(rows, args.form, args.method)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    points = np.column_stack([*xs, y]).tolist()
    report = scaling.fit_report(args.form, fit, points, dropped_nonpositive=dropped,
                                source=args.records, filters=args.filter or [])
    scaling.dump_report(out / "fit.json", report)
    analysis.emit(fit_plot(fit, xs, y, args.form), "svg", out / "fit.svg")
    cfg = {"records": args.records, "form": args.form, "filter": args.filter or [], "method": args.method}
    write_manifest(out / "manifest.json", "fit-scaling", cfg, 0, started, [out / "fit.json", out / "fit.svg"])
    if args.form in ("WD", "NA"):
        shown = dict(beta1=f"{fit.exponents[0]:.6f}", beta2=f"{fit.exponents[1]:.6f}")
    elif args.form == "time":
        shown = dict(alpha_t=f"{fit.alpha_t:.6f}", beta_t=f"{fit.beta_t:.6f}", gamma=f"{fit.gamma:.6f}")
    else:
        shown = dict(alpha=f"{fit.alpha:.6f}", x_c=f"{fit.x_c:.6g}")
    summary(command="fit-scaling", form=args.form, points=len(y), **shown,
            r2=f"{fit.r2:.6f}", mape=f"{fit.mape:.4f}", out=out)
    return EXIT_OK


# ----------------------------------------------------------------------------
# analyze
# ----------------------------------------------------------------------------

def cmd_analyze(args) -> int:
    started = _now()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    shown = {}
    if args.report == "flops":
        if args.ckpt:
            model = load_checkpoint(args.ckpt)
            cfg_m = model.config
        else:
            if args.depth is None or args.width is None:
                raise ValueError("--report flops needs --ckpt or --depth and --width")
            h, dk = scaling.GRID_HEADS.get(args.width, (max(1, args.width // 16), 16))
            cfg_m = ModelConfig(args.depth, args.width, h, dk, 4 * args.width)
        g = scaling.flops_per_solution(cfg_m, args.n, args.beam)
        report = {"depth": cfg_m.depth, "width": cfg_m.width, "params": param_count(cfg_m).exact,
                  "n": args.n, "beam": args.beam, "gflops_per_solution": g}
        (out / "flops.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        outputs.append(out / "flops.json")
        shown = {"gflops": f"{g:.1f}", "params": report["params"]}
    else:
        ds = load_dataset(args.data)
        if args.count:
            ds = ds.subset(np.arange(min(args.count, len(ds))))
        if args.report == "longsight":
            if not ds.labelled:
                raise analysis.UnlabelledError("longsight needs a labelled dataset")
            if args.policy == "model":
                policy = load_checkpoint(args.ckpt) if args.ckpt else None
                if policy is None:
                    raise ValueError("--policy model needs --ckpt")
            else:
                policy = {"oracle": analysis.oracle_policy, "nearest": analysis.nearest_policy}[args.policy]
            rep = analysis.long_sightedness(policy, ds, args.K)
            rate = rep.rate_above(3)
            shown = {"rate_above3": f"{rate:.4f}", "attempts": int(rep.attempts.sum())}
            name = "longsight"
        else:
            if not ds.labelled:
                raise analysis.UnlabelledError(f"{args.report} needs reference tours")
            model = load_checkpoint(args.ckpt)
            snap = analysis.snapshot(model, ds.coords[args.index], ds.tours[args.index], args.step)
            if args.report == "cosine":
                C = analysis.cosine_map(snap)
                labels = [f"{i}:{t}" for i, t in zip(snap.node_ids[1:-1], snap.available_tags)]
                rep = analysis.MatrixReport(C, labels)
                shown = {"rows": len(C), "min_cos": f"{C.min():.4f}"}
                name = "cosine"
            else:
                res = analysis.pca2d(snap)
                rep = analysis.PcaReport(res, snap.available_tags)
                shown = {"ev1": f"{res.explained[0]:.6g}", "ev2": f"{res.explained[1]:.6g}"}
                name = "pca"
        for fmt in ("csv", "json") + (("svg",) if args.report != "cosine" else ()):
            outputs.append(analysis.emit(rep, fmt, out / f"{name}.{fmt}"))
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
           if k not in ("func", "threads", "out")}
    write_manifest(out / "manifest.json", "analyze", cfg, 0, started, outputs)
    summary(command="analyze", report=args.report, **shown, out=out)
    return EXIT_OK


# ----------------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nco", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")
        return sp

    g = common(sub.add_parser("gen-data", help="generate (and label) a TSP dataset"))
    g.add_argument("--kind", choices=KINDS, default="uniform")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--label", choices=("heldkarp", "nn2opt", "none"), default="heldkarp")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = common(sub.add_parser("train", help="supervised training on a labelled dataset"))
    t.add_argument("--config", help="JSON with optional 'model' and 'train' sections")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="training-state checkpoint to continue from")
    t.add_argument("--log-every", type=int, default=0)
    t.set_defaults(func=cmd_train)

    e = common(sub.add_parser("eval", help="decode a dataset and score against references"))
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--decode", default="greedy", help="greedy | sample | beam:K | rrc:K")
    e.add_argument("--beam", type=int, help="shorthand for --decode beam:K")
    e.add_argument("--rrc-iters", type=int, help="shorthand for --decode rrc:K")
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--depth", type=int)
    e.add_argument("--width", type=int)
    e.add_argument("--dataset-id", default="")
    e.add_argument("--orders", help="score these tours instead of decoding")
    e.set_defaults(func=cmd_eval)

    f = common(sub.add_parser("fit-scaling", help="fit a power-law form to evaluation records"))
    f.add_argument("--records", required=True, help="EvalRecord CSV, fixture CSV, or fixture:<name>")
    f.add_argument("--form", choices=FORMS, required=True)
    f.add_argument("--filter", action="append", help="key=value row filter (repeatable)")
    f.add_argument("--method", choices=("gap", "log"))
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit_scaling)

    a = common(sub.add_parser("analyze", help="long-sightedness, PCA, cosine maps, FLOPs"))
    a.add_argument("--report", choices=("longsight", "pca", "cosine", "flops"), required=True)
    a.add_argument("--ckpt")
    a.add_argument("--data")
    a.add_argument("--out", required=True)
    a.add_argument("--policy", choices=("model", "oracle", "nearest"), default="model")
    a.add_argument("--K", type=int, default=10)
    a.add_argument("--count", type=int, default=0, help="use only the first COUNT instances")
    a.add_argument("--index", type=int, default=0, help="instance for pca/cosine")
    a.add_argument("--step", type=int, default=1, help="placed nodes before the pca/cosine snapshot")
    a.add_argument("--depth", type=int)
    a.add_argument("--width", type=int)
    a.add_argument("--n", type=int, default=100)
    a.add_argument("--beam", type=int, default=1)
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (MismatchError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (SizeError, DataExhausted, scaling.FitError, analysis.UnlabelledError,
            ValueError, KeyError, FileNotFoundError, IsADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
