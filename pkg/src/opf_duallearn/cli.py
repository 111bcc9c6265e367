"""Command-line pipeline: inspect | dataset | train | eval | report.

Exit codes: 0 success, 2 parse or I/O failure, 3 resample cap exceeded,
4 non-finite loss or gradient, 5 case/dataset/checkpoint mismatch or missing
labels, 6 report schema mismatch.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import duals, evaluation
from .case_io import CaseError, PowerSystem, load_case
from .data import CorruptRecord, MissingLabel, ResampleCapExceeded, VersionMismatch, load_dataset, make_dataset, save_dataset
from .gat import CheckpointError, GatConfig, GatModel, load_checkpoint, save_checkpoint
from .refsolve import reference_solve

log = logging.getLogger("opf_duallearn")

EXIT_IO = 2
EXIT_RESAMPLE = 3
EXIT_NONFINITE = 4
EXIT_MISMATCH = 5
EXIT_SCHEMA = 6

AGGREGATE_COLUMNS = ["case", "method", "metric", "mean", "std", "p95", "max"]
BLOCK_COLUMNS = [f"{b}_{s}" for b in evaluation.REPORT_BLOCKS for s in ("mean", "max")]
SAMPLE_COLUMNS = ["sample_id", "optgap", "mean_viol", "max_viol", "invariant_metric", "projected", "nr_iterations",
                  *BLOCK_COLUMNS]


class CliError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([v if isinstance(v, str) else _fmt(v) for v in row])
    path.write_text(buf.getvalue())


def _threads(args) -> int:
    if getattr(args, "threads", None) is not None:
        return max(1, args.threads)
    env = os.environ.get("OPF_DUALLEARN_THREADS")
    return max(1, int(env)) if env else 1


# ---------------------------------------------------------------------------
# configuration: [train] and [gat] sections, flags override file values

_SECTIONS = {"train": duals.TrainingConfig, "gat": GatConfig}


def _parse_value(text: str, default):
    text = text.strip()
    if text.lower() in ("none", ""):
        return None
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, tuple):
        return tuple(float(x) for x in text.split(","))
    if isinstance(default, str):
        return text
    return float(text)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    for section, cls in _SECTIONS.items():
        grp = p.add_argument_group(f"[{section}] options")
        for f in fields(cls):
            if (section, f.name) in (("train", "method"), ("gat", "seed")):
                continue
            flag = "--" + f.name.replace("_", "-")
            grp.add_argument(flag, dest=f"{section}__{f.name}", default=None, metavar="V",
                             help=f"default {f.default!r}")


def resolve_config(args) -> tuple[duals.TrainingConfig, GatConfig]:
    """Defaults, then the config file, then command-line flags."""
    cp = configparser.ConfigParser()
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                cp.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise CliError(EXIT_IO, f"cannot read config {args.config}: {exc}") from None
    out = {}
    for section, cls in _SECTIONS.items():
        kw = {}
        for f in fields(cls):
            default = f.default
            probe = default if default is not None else 0.0
            raw = cp.get(section, f.name, fallback=None)
            flag = getattr(args, f"{section}__{f.name}", None)
            for src in (raw, flag):
                if src is None:
                    continue
                try:
                    kw[f.name] = _parse_value(src, probe)
                except ValueError as exc:
                    raise CliError(EXIT_IO, f"[{section}] {f.name}: {exc}") from None
        if section == "train" and getattr(args, "method", None):
            kw["method"] = args.method.replace("-", "_")
        try:
            out[section] = cls(**kw)
        except (TypeError, ValueError) as exc:
            raise CliError(EXIT_IO, f"invalid [{section}] configuration: {exc}") from None
    return out["train"], out["gat"]


def echo_config(directory: Path, train_cfg=None, gat_cfg=None, extra: dict | None = None) -> None:
    cp = configparser.ConfigParser()
    if extra:
        cp["run"] = {k: str(v) for k, v in extra.items()}
    for name, cfg in (("train", train_cfg), ("gat", gat_cfg)):
        if cfg is None:
            continue
        d = asdict(cfg)
        cp[name] = {k: (",".join(repr(x) for x in v) if isinstance(v, tuple) else str(v)) for k, v in d.items()}
    with open(directory / "config.ini", "w") as fh:
        cp.write(fh)


# ---------------------------------------------------------------------------
# commands

def _load_system(case) -> PowerSystem:
    try:
        return load_case(case)
    except (CaseError, OSError) as exc:
        raise CliError(EXIT_IO, f"cannot load case {case}: {exc}") from None


def _load_data(path, sys):
    try:
        return load_dataset(path, sys)
    except VersionMismatch as exc:
        raise CliError(EXIT_MISMATCH, str(exc)) from None
    except (CorruptRecord, OSError) as exc:
        raise CliError(EXIT_IO, f"cannot read dataset {path}: {exc}") from None


def cmd_inspect(args) -> int:
    s = _load_system(args.case)
    A = s.arrays
    ref = s.buses[s.ref_index].id
    n_gen = int(np.count_nonzero(A.gen_mask))
    print(f"case {s.name}")
    print(f"N={s.n_buses} M={s.n_branches} generators={n_gen} reference_bus={ref} base_mva={s.base_mva:g}")
    print(f"inequalities={s.n_ineq} equalities={s.n_eq}")
    gm = A.gen_mask.astype(bool)
    print(f"Re s range [{A.s_min.real[gm].min():.4g}, {A.s_max.real[gm].max():.4g}] p.u.")
    print(f"Im s range [{A.s_min.imag[gm].min():.4g}, {A.s_max.imag[gm].max():.4g}] p.u.")
    print(f"|v| range [{A.v_min.min():.4g}, {A.v_max.max():.4g}] p.u.")
    print(f"flow limits [{A.f_max_from.min():.4g}, {A.f_max_from.max():.4g}] p.u.")
    print(f"angle limits [{A.theta_min.min():.4g}, {A.theta_max.max():.4g}] rad")
    print(f"total demand {A.demand.sum().real:.4g} + {A.demand.sum().imag:.4g}j p.u.")
    return 0


def cmd_dataset(args) -> int:
    s = _load_system(args.case)
    out = Path(args.out)
    try:
        def progress(done, drawn):
            log.info("labelled %d/%d (draws %d)", done, args.n, drawn)

        ds = make_dataset(s, args.n, args.seed, with_labels=args.labels, threads=_threads(args), progress=progress)
    except ResampleCapExceeded as exc:
        raise CliError(EXIT_RESAMPLE, str(exc)) from None
    except ValueError as exc:
        raise CliError(EXIT_IO, str(exc)) from None
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        save_dataset(ds, out)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {out}: {exc}") from None
    sizes = "/".join(str(len(ds.split[k])) for k in ("train", "val", "test"))
    print(f"wrote {ds.n_samples} samples to {out} (split {sizes})")
    if args.labels:
        print(f"labels: {ds.n_samples} certified, {ds.resampled} resampled")
    return 0


def _c_bar(ds, s) -> float:
    if ds.labels is not None:
        return ds.mean_label_cost("train")
    sol = reference_solve(s, s.arrays.demand)
    log.info("no labels: using the nominal-demand optimum %.6g as the cost scale", sol.cost_star)
    return float(sol.cost_star)


def cmd_train(args) -> int:
    tcfg, gcfg = resolve_config(args)
    s = _load_system(args.case)
    ds = _load_data(args.dataset, s)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(out, tcfg, gcfg, {"case": s.name, "dataset": args.dataset})
    model = GatModel(s, gcfg)
    rows = []

    def on_epoch(row):
        rows.append(row)
        if row["epoch"] % max(1, args.log_every) == 0:
            log.info("epoch %d loss %.6g val gap %.4g viol %.4g", row["epoch"], row["train_loss"],
                     row["val_optgap_mean"], row["val_mean_violation"])

    try:
        c_bar = _c_bar(ds, s)
        mpath = out / "multipliers.npy" if tcfg.multiplier_mode in ("pointwise", "hybrid") else None
        state = duals.train(model, ds, tcfg, c_bar=c_bar, multiplier_path=mpath, on_epoch=on_epoch)
    except MissingLabel as exc:
        raise CliError(EXIT_MISMATCH, f"missing labels: {exc}") from None
    except (duals.NonFiniteLoss, duals.NonFiniteGradient) as exc:
        _write_csv(out / "metrics.csv", duals.HISTORY_COLUMNS, [[r[c] for c in duals.HISTORY_COLUMNS] for r in rows])
        raise CliError(EXIT_NONFINITE, f"training diverged: {exc}") from None
    if mpath is not None:
        state.store.table.flush()
    _write_csv(out / "metrics.csv", duals.HISTORY_COLUMNS, [[r[c] for c in duals.HISTORY_COLUMNS] for r in rows])
    extra = {"method": tcfg.method, "c_bar": state.c_bar, "epochs": state.epoch, "train": tcfg.to_dict()}
    save_checkpoint(out / "checkpoint.json", gcfg, state.params, s, extra)
    _save_multipliers(state, out)
    print(f"trained {tcfg.method} for {state.epoch} epochs; checkpoint in {out}")
    return 0


def _save_multipliers(state, out: Path) -> None:
    st = state.store
    np.save(out / "multipliers_shared.npy", np.concatenate([st.lam_bar, st.mu_bar]))


def cmd_eval(args) -> int:
    s = _load_system(args.case)
    ds = _load_data(args.dataset, s)
    out = Path(args.out)
    ids = ds.split[args.split]
    if args.use_labels:
        if ds.labels is None:
            raise CliError(EXIT_MISMATCH, "--use-labels needs a labelled dataset")
        pred_s, pred_v = ds.labels.s[ids], ds.labels.v[ids]
        method = "labels"
        c_bar = ds.mean_label_cost("train")
        gcfg = None
    else:
        if not args.checkpoint:
            raise CliError(EXIT_IO, "eval needs --checkpoint or --use-labels")
        try:
            gcfg, params, doc = load_checkpoint(args.checkpoint, s)
        except CheckpointError as exc:
            raise CliError(EXIT_MISMATCH, str(exc)) from None
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot read checkpoint: {exc}") from None
        extra = doc.get("extra", {})
        method = extra.get("method", "unknown")
        c_bar = extra.get("c_bar") or (ds.mean_label_cost("train") if ds.labels is not None else None)
        pred_s, pred_v = GatModel(s, gcfg).predict(params, ds.r[ids])
    if args.method_label:
        method = args.method_label
    label_costs = None if ds.labels is None else ds.labels.cost[ids]
    metrics = evaluation.evaluate_predictions(s, ds.r[ids], pred_s, pred_v, label_costs, c_bar)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(out, None, gcfg, {"case": s.name, "dataset": args.dataset, "checkpoint": args.checkpoint or "",
                                  "split": args.split, "method": method})
    rows = []
    for k, m in zip(ids, metrics):
        rows.append([int(k), m.optgap, m.mean_violation, m.max_violation, m.invariant_metric, m.projected,
                     m.nr_iterations, *[m.blocks[c] for c in BLOCK_COLUMNS]])
    _write_csv(out / "per_sample.csv", SAMPLE_COLUMNS, rows)
    agg = evaluation.aggregate(metrics, case=s.name, method=method)
    _write_csv(out / "aggregate.csv", AGGREGATE_COLUMNS,
               [[a.case, a.method, a.metric, a.mean, a.std, a.p95, a.max] for a in agg])
    gap = next(a for a in agg if a.metric == "optgap")
    viol = next(a for a in agg if a.metric == "mean_violation")
    n_fail = sum(not m.projected for m in metrics)
    print(f"{method} on {s.name} [{args.split}, {len(ids)} samples]: optgap mean {gap.mean:.4%}, "
          f"mean violation {viol.mean:.4%}, power-flow failures {n_fail}")
    return 0


def cmd_report(args) -> int:
    groups: dict = {}
    metrics: list = []
    for path in args.inputs:
        try:
            with open(path, newline="") as fh:
                reader = csv.reader(fh)
                header = next(reader, None)
                if header != AGGREGATE_COLUMNS:
                    raise CliError(EXIT_SCHEMA, f"{path}: expected columns {','.join(AGGREGATE_COLUMNS)}")
                for row in reader:
                    if len(row) != len(AGGREGATE_COLUMNS):
                        raise CliError(EXIT_SCHEMA, f"{path}: row has {len(row)} fields")
                    case, method, metric = row[:3]
                    if metric not in metrics:
                        metrics.append(metric)
                    groups.setdefault((case, method), {})[metric] = row[3:]
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot read {path}: {exc}") from None
    header = ["case", "method"] + [f"{m}_{s}" for m in metrics for s in ("mean", "std", "p95", "max")]
    rows = []
    for key in sorted(groups):
        vals = groups[key]
        row = list(key)
        for m in metrics:
            row += vals.get(m, ["", "", "", ""])
        rows.append(row)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(out, header, rows)
    print(f"wrote {len(rows)} rows to {out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="opf-duallearn", description=__doc__.split("\n")[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="progress logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("inspect", parents=[common], help="summarize a case file")
    q.add_argument("case", help="case path or shipped name (e.g. case30_ieee)")
    q.set_defaults(func=cmd_inspect)

    q = sub.add_parser("dataset", parents=[common], help="sample demands and optionally solve reference labels")
    q.add_argument("--case", required=True)
    q.add_argument("--n", type=int, required=True, help="number of samples")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--labels", action="store_true", help="solve and certify reference solutions")
    q.add_argument("--threads", type=int, default=None)
    q.add_argument("--out", required=True, help="output .jsonl path")
    q.set_defaults(func=cmd_dataset)

    q = sub.add_parser("train", parents=[common], help="train a GAT with one of the methods")
    q.add_argument("--case", required=True)
    q.add_argument("--dataset", required=True)
    q.add_argument("--method", default="dual-p",
                   choices=["dual-p", "dual-s", "dual-h", "mse", "mse-penalty", "penalty"])
    q.add_argument("--config", help="key=value config file with [train] and [gat] sections")
    q.add_argument("--out", required=True, help="output directory")
    q.add_argument("--log-every", type=int, default=10)
    _add_config_flags(q)
    q.set_defaults(func=cmd_train)

    q = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a dataset split")
    q.add_argument("--case", required=True)
    q.add_argument("--dataset", required=True)
    q.add_argument("--checkpoint")
    q.add_argument("--split", default="test", choices=["train", "val", "test"])
    q.add_argument("--use-labels", action="store_true", help="evaluate the reference labels themselves")
    q.add_argument("--method-label", help="method name written to the aggregate CSV")
    q.add_argument("--out", required=True, help="output directory")
    q.set_defaults(func=cmd_eval)

    q = sub.add_parser("report", parents=[common], help="merge aggregate CSVs into one table")
    q.add_argument("inputs", nargs="+")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_IO if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
