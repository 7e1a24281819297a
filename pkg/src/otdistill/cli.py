"""Single executable surface: solver checks, benchmarks, and the pipeline.

Exit codes are stable API:

    0  success
    2  usage, config, or file-format errors
    3  numerical failure (solver underflow, non-finite inputs, failed
       gradient checks)
    4  training divergence (non-finite loss component)
    5  missing artifact (referenced checkpoint does not exist)

All randomness is surfaced as explicit seeds; identical flags produce
byte-identical primary outputs, timing fields aside.
"""

import argparse
import json
import os
import sys

from . import bench as bench_mod
from .backend import ACTIVE_BACKEND
from .autodiff import ShapeMismatch, gradcheck_suite
from .data import (
    InconsistentWidth,
    InvalidFraction,
    InvalidParams,
    ParseError,
    gen_gaussian_mixture,
    save_csv,
)
from .distill import (
    ConfigError,
    DivergenceDetected,
    PRESET_NAMES,
    compare_losses,
    distill_student,
    load_run_config,
    make_data_from_config,
    preset_loss_config,
    summarize_accuracies,
    train_teacher,
)
from .model import (
    ArchSpec,
    FormatVersionMismatch,
    InvalidSpec,
    load_checkpoint,
    save_checkpoint,
)
from .ot_core import (
    DimensionMismatch,
    FeatureFormatError,
    MassVector,
    NonFinite,
    NonSquare,
    ZeroNormRow,
    cosine_cost,
    exact_emd_uniform,
    load_feature_file,
)
from .solvers import IpotConfig, NumericalUnderflow, SinkhornConfig, ipot, remd, sinkhorn_rot

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_DIVERGED = 4
EXIT_MISSING = 5

_FORMAT_ERRORS = (
    FeatureFormatError, ConfigError, InvalidParams, InvalidFraction, ParseError,
    InconsistentWidth, InvalidSpec, FormatVersionMismatch, DimensionMismatch,
)
_NUMERIC_ERRORS = (NumericalUnderflow, NonFinite, NonSquare, ZeroNormRow, ShapeMismatch)


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


# ---------------------------------------------------------------------------
# solve
# ---------------------------------------------------------------------------

def cmd_solve(args) -> int:
    try:
        teacher = load_feature_file(args.teacher)
        student = load_feature_file(args.student)
    except FileNotFoundError as exc:
        return _fail(EXIT_USAGE, f"cannot read feature file: {exc}")
    except _FORMAT_ERRORS as exc:
        return _fail(EXIT_USAGE, str(exc))

    try:
        C = cosine_cost(teacher, student)
        b = C.size
        uniform = MassVector.uniform(b)
        if args.method == "exact":
            sol = exact_emd_uniform(C)
        elif args.method == "sinkhorn":
            sol = sinkhorn_rot(
                C, uniform, uniform,
                SinkhornConfig(epsilon=args.epsilon, max_iters=args.iters),
            )
        elif args.method == "ipot":
            sol = ipot(C, uniform, uniform, IpotConfig(beta=args.beta, num_iters=args.iters))
        else:
            sol = remd(C)
    except _NUMERIC_ERRORS as exc:
        return _fail(EXIT_NUMERIC, str(exc))
    except _FORMAT_ERRORS as exc:
        return _fail(EXIT_USAGE, str(exc))

    payload = {
        "cost": sol.cost,
        "converged": sol.converged,
        "iterations": sol.iterations_used,
        "marginal_violation": sol.marginal_violation,
    }
    with open(args.out, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    results = gradcheck_suite(seed=args.seed)
    width = max(len(name) for name, _ in results)
    print(f"{'op':<{width}}  {'max_rel_err':>12}  {'tol':>8}  status")
    all_pass = True
    for name, report in results:
        status = "ok" if report.passed else "FAIL"
        all_pass = all_pass and report.passed
        print(f"{name:<{width}}  {report.max_rel_err:12.3e}  {report.tol:8.0e}  {status}")
    return EXIT_OK if all_pass else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def _write_bench_csv(rows, out, with_backend=False):
    header = ("backend,method,b,median_ms,iters" if with_backend
              else "method,b,median_ms,iters")
    lines = [header]
    for r in rows:
        prefix = f"{r['backend']}," if with_backend else ""
        lines.append(f"{prefix}{r['method']},{r['b']},{r['median_ms']!r},{r['iters']}")
    text = "\n".join(lines) + "\n"
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_bench(args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    sizes = []
    for tok in args.sizes.split(","):
        tok = tok.strip()
        if tok:
            sizes.append(int(tok))
    if not methods or not sizes or any(b < 1 for b in sizes):
        return _fail(EXIT_USAGE, "need at least one method and positive sizes")
    unknown = [m for m in methods if m not in bench_mod.BENCH_METHODS]
    if unknown:
        return _fail(EXIT_USAGE, f"unknown methods {unknown}; choose from {bench_mod.BENCH_METHODS}")

    if args.compare_kernels:
        rows = bench_mod.run_kernel_comparison(
            methods, sizes, reps=args.reps, seed=args.seed, d=args.dim,
            epsilon=args.epsilon, beta=args.beta, iters=args.iters,
        )
        _write_bench_csv(rows, args.out, with_backend=True)
    else:
        rows = bench_mod.run_bench(
            methods, sizes, reps=args.reps, seed=args.seed, d=args.dim,
            epsilon=args.epsilon, beta=args.beta, iters=args.iters,
        )
        _write_bench_csv(rows, args.out)
        if args.out and len(sizes) >= 2:
            for method, slope in bench_mod.slopes_by_method(rows).items():
                print(f"loglog_slope {method} {slope:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# pipeline commands
# ---------------------------------------------------------------------------

def _arch_from_config(model_cfg: dict, key: str, input_dim: int, num_classes: int) -> ArchSpec:
    if key not in model_cfg:
        raise ConfigError(f"[model] section is missing {key!r}")
    return ArchSpec(input_dim, tuple(model_cfg[key]), num_classes)


def cmd_train_teacher(args) -> int:
    cfg = load_run_config(args.config)
    train_ds, test_ds = make_data_from_config(cfg["data"])
    spec = _arch_from_config(cfg["model"], "teacher_widths", train_ds.dim, train_ds.class_count)
    model, report = train_teacher(train_ds, test_ds, spec, cfg["train"])
    save_checkpoint(model, args.out)
    if args.report:
        report.write_json(args.report)
    if args.epoch_csv:
        report.write_epoch_csv(args.epoch_csv)
    print(f"teacher accuracy {report.final_accuracy:.4f} -> {args.out}")
    return EXIT_OK


def cmd_distill(args) -> int:
    cfg = load_run_config(args.config)
    try:
        teacher = load_checkpoint(args.teacher)
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING, f"missing teacher checkpoint: {exc}")
    train_ds, test_ds = make_data_from_config(cfg["data"])
    spec = _arch_from_config(cfg["model"], "student_widths", train_ds.dim, train_ds.class_count)
    student, _, report = distill_student(
        teacher, spec, train_ds, test_ds, cfg["loss"], cfg["train"], label=args.label
    )
    save_checkpoint(student, args.out)
    if args.report:
        report.write_json(args.report)
    if args.epoch_csv:
        report.write_epoch_csv(args.epoch_csv)
    print(f"student accuracy {report.final_accuracy:.4f} -> {args.out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = load_run_config(args.config)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    names = [n.strip() for n in args.methods.split(",") if n.strip()]
    named_cfgs = [(name, preset_loss_config(name, cfg["loss"])) for name in names]
    os.makedirs(args.out_dir, exist_ok=True)

    def make_data(seed):
        return make_data_from_config(cfg["data"], seed_override=seed)

    train_ds, _ = make_data(seeds[0])
    teacher_spec = _arch_from_config(
        cfg["model"], "teacher_widths", train_ds.dim, train_ds.class_count
    )
    student_spec = _arch_from_config(
        cfg["model"], "student_widths", train_ds.dim, train_ds.class_count
    )
    table, reports = compare_losses(
        named_cfgs, seeds, make_data, teacher_spec, student_spec, cfg["train"],
        progress=not args.quiet,
    )
    for (label, seed), report in reports.items():
        safe = label.replace("+", "_")
        report.write_json(os.path.join(args.out_dir, f"report_{safe}_seed{seed}.json"))
    table.to_csv(os.path.join(args.out_dir, "comparison.csv"))
    text = table.to_text()
    with open(os.path.join(args.out_dir, "comparison.txt"), "w") as fh:
        fh.write(text + "\n")
    print(text)
    return EXIT_OK


def cmd_report(args) -> int:
    paths = []
    for entry in args.runs:
        if os.path.isdir(entry):
            for name in sorted(os.listdir(entry)):
                if name.endswith(".json") and not name.endswith(".meta.json"):
                    paths.append(os.path.join(entry, name))
        else:
            paths.append(entry)
    if not paths:
        return _fail(EXIT_USAGE, "no report files found")
    entries = []
    for path in paths:
        try:
            with open(path) as fh:
                doc = json.load(fh)
            label = doc["config"].get("label", "run")
            seed = doc["config"]["train"]["seed"]
            entries.append((label, seed, doc["final_accuracy"]))
        except FileNotFoundError as exc:
            return _fail(EXIT_MISSING, f"missing report: {exc}")
        except (KeyError, ValueError) as exc:
            return _fail(EXIT_USAGE, f"{path}: not a RunReport JSON ({exc})")
    table = summarize_accuracies(entries)
    if args.out_csv:
        table.to_csv(args.out_csv)
    print(table.to_text())
    return EXIT_OK


def cmd_gen_data(args) -> int:
    ds = gen_gaussian_mixture(
        classes=args.classes, per_class=args.per_class, dim=args.dim,
        spread=args.spread, seed=args.seed,
    )
    save_csv(ds, args.out)
    print(f"wrote {len(ds)} examples ({args.classes} classes, dim {args.dim}) -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="otdistill",
        description="Optimal-transport feature-matching losses and a desk-scale "
                    f"distillation pipeline (kernel backend: {ACTIVE_BACKEND})",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="run one transport solve on two feature files")
    p.add_argument("--method", required=True, choices=["exact", "sinkhorn", "ipot", "remd"])
    p.add_argument("--teacher", required=True)
    p.add_argument("--student", required=True)
    p.add_argument("--epsilon", type=float, default=0.05)
    p.add_argument("--beta", type=float, default=20.0)
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("gradcheck", help="finite-difference check of every autodiff op")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="time the solvers over batch sizes")
    p.add_argument("--methods", default="remd,ipot")
    p.add_argument("--sizes", default="32,64,128,256")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--epsilon", type=float, default=0.05)
    p.add_argument("--beta", type=float, default=20.0)
    p.add_argument("--iters", type=int, default=50)
    p.add_argument("--out", default=None, help="CSV path (stdout when omitted)")
    p.add_argument("--compare-kernels", action="store_true",
                   help="time numpy and numba kernel variants side by side")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gen-data", help="generate a Gaussian-mixture dataset CSV")
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--spread", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-teacher", help="train the teacher with cross-entropy only")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None)
    p.add_argument("--epoch-csv", default=None)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", help="train a student against a frozen teacher")
    p.add_argument("--config", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None)
    p.add_argument("--epoch-csv", default=None)
    p.add_argument("--label", default=None)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("compare", help="multi-seed comparison over loss presets")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", required=True, help="comma-separated, at least 2")
    p.add_argument("--methods", default="ce,kd,ipot,ipot+kd",
                   help=f"comma-separated presets from {PRESET_NAMES}")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("report", help="tabulate stored RunReport JSONs")
    p.add_argument("--runs", nargs="+", required=True, help="report files or directories")
    p.add_argument("--out-csv", default=None)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DivergenceDetected as exc:
        return _fail(EXIT_DIVERGED, str(exc))
    except _NUMERIC_ERRORS as exc:
        return _fail(EXIT_NUMERIC, str(exc))
    except _FORMAT_ERRORS as exc:
        return _fail(EXIT_USAGE, str(exc))
    except FileNotFoundError as exc:
        return _fail(EXIT_USAGE, str(exc))


if __name__ == "__main__":
    sys.exit(main())
