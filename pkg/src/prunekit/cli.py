"""``prunekit`` command line: train, sweep, report, inspect, compare.

Exit codes: 0 success, 2 configuration/usage/format error, 3 numeric
failure, 4 sweep finished with failed points.
"""

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import model_io
from .config import build, load_config
from .exceptions import ConfigurationError, FormatError, NumericError, UsageError
from .experiments import (
    TRACE_OUTPUT,
    TRACE_SAMPLES,
    best_rows,
    emit_curves,
    emit_report,
    make_dataset,
    markdown_table,
    read_rows,
    run_experiment,
    run_sweep,
)
from .nn_core import forward, mae

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_PARTIAL = 0, 2, 3, 4
OUT_ENV = "PRUNEKIT_OUT"
DTYPE_NAMES = {model_io.DENSE: "f32", model_io.SPARSE: "f32-sparse", model_io.Q8: "q8"}


def _out_dir(args):
    out = args.out or os.environ.get(OUT_ENV) or "."
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _config(args):
    if args.config is None:
        return build({}, seed=args.seed)
    return load_config(args.config, seed=args.seed)


def _write_text(path, text):
    model_io.atomic_write(path, text.encode("utf-8"))


def _print_best(rows):
    for label, r in best_rows(rows):
        print(f"{label}: s_i={r['s_i']} s_f={r['s_f']} t0={r['t0']} tf={r['tf']} "
              f"mae pruned/sparse/quant={r['mae_pruned']:.5f}/{r['mae_sparse']:.5f}/"
              f"{r['mae_quant']:.5f} gz bytes={r['size_pruned_gz']}/{r['size_sparse_gz']}/"
              f"{r['size_quant_gz']}")


def cmd_train(args):
    cfg = _config(args).experiment
    print(f"effective seed: {cfg.seed}")
    result = run_experiment(cfg)
    out = _out_dir(args)
    files = {"pruned": "pruned.pmk", "sparse": "sparse.pmk", "quantized": "quant.pmk"}
    for variant, fname in files.items():
        model_io.write_artifact(out / fname, result.artifacts[variant].payload)
    csv_text, _ = emit_report([result])
    _write_text(out / "result.csv", csv_text)
    print(f"baseline mae: {result.baseline_mae:.6f}")
    print(f"achieved sparsity: {result.achieved_sparsity:.4f}")
    for variant, m in result.variants.items():
        print(f"{variant:>9}: mae={m.mae:.6f} raw={m.raw_size} gzip={m.gzip_size}")
    return EXIT_OK


def cmd_sweep(args):
    loaded = _config(args)
    base, grid = loaded.experiment, loaded.grid
    if args.scale_steps:
        grid = grid.scaled(base.training.epochs)
    print(f"effective seed: {base.seed}")
    results = run_sweep(grid, base, jobs=args.jobs)
    out = _out_dir(args)
    failed = [r for r in results if not r.ok]
    done = [r for r in results if r.ok]
    if done:
        csv_text, md = emit_report(results)
        _write_text(out / "sweep.csv", csv_text)
        _write_text(out / "report.md", md)
        for fname, text in emit_curves(done).items():
            _write_text(out / fname, text)
        _print_best(read_rows(csv_text))
    print(f"{len(done)} of {len(results)} points completed")
    for r in failed:
        s = r.config.schedule
        print(f"failed: {s.kind} s_f={s.target} t0={s.t0} tf={s.tf}: {r.error}", file=sys.stderr)
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_report(args):
    print(f"effective seed: {args.seed if args.seed is not None else 'n/a'}")
    try:
        text = Path(args.sweep_csv).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read {args.sweep_csv}: {exc}") from None
    rows = read_rows(text)
    md = "## Best models\n\n" + markdown_table(rows)
    _write_text(_out_dir(args) / "report.md", md)
    _print_best(rows)
    return EXIT_OK


def _read_artifact(path):
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from None


def cmd_inspect(args):
    print(f"effective seed: {args.seed if args.seed is not None else 'n/a'}")
    data = _read_artifact(args.artifact)
    records = model_io.read_records(data)
    print(f"variant: {model_io.container_variant(records)}")
    zeros = total = 0
    for rec in records:
        if isinstance(rec.weight, model_io.QuantizedTensor):
            q = rec.weight
            z = int(np.count_nonzero(q.values == q.zero_point))
            extra = (f" scale={q.scale:.8g} zero_point={q.zero_point}"
                     f" bias_scale={rec.bias.scale:.8g} bias_zero_point={rec.bias.zero_point}")
        else:
            z = int(np.count_nonzero(rec.weight == 0))
            extra = ""
        n = rec.shape[0] * rec.shape[1]
        zeros += z
        total += n
        print(f"layer {rec.name}: shape={rec.shape[0]}x{rec.shape[1]} dtype={DTYPE_NAMES[rec.dtype]} "
              f"bytes={rec.size} zero_fraction={z / n:.4f}{extra}")
    print(f"global sparsity: {zeros / total:.4f}")
    print(f"raw size: {len(data)}")
    print(f"gzip size: {model_io.gzip_size(data)}")
    return EXIT_OK


def cmd_compare(args):
    cfg = _config(args).experiment
    print(f"effective seed: {cfg.seed}")
    a = model_io.as_float_model(model_io.load(_read_artifact(args.artifact_a)))
    b = model_io.as_float_model(model_io.load(_read_artifact(args.artifact_b)))
    data = make_dataset(cfg.dataset)
    dims = {(m.in_dim, m.out_dim) for m in (a, b)}
    want = (data.X_test.shape[1], data.y_test.shape[1])
    if dims != {want}:
        raise UsageError(f"artifact dims {sorted(dims)} do not match dataset {want}")
    pa, pb = forward(a, data.X_test), forward(b, data.X_test)
    print(f"mae A: {mae(pa, data.y_test):.6f}")
    print(f"mae B: {mae(pb, data.y_test):.6f}")
    k = TRACE_OUTPUT if want[1] > TRACE_OUTPUT else 0
    lines = ["sample,true,a,b,diff"]
    n = min(TRACE_SAMPLES, len(data.X_test))
    for i in range(n):
        ya, yb = float(pa[i, k]), float(pb[i, k])
        lines.append(f"{i},{float(data.y_test[i, k])!r},{ya!r},{yb!r},{ya - yb!r}")
    print(f"max trace difference: {float(np.max(np.abs(pa[:n, k] - pb[:n, k]))):.6g}")
    _write_text(_out_dir(args) / "compare_trace.csv", "\r\n".join(lines) + "\r\n")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="prunekit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or .)")
        p.add_argument("--seed", type=int, help="override the run seed")
        return p

    p = common(sub.add_parser("train", help="run one experiment and write its artifacts"))
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("sweep", help="run the parameter grid"))
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--scale-steps", action="store_true",
                   help="rescale grid t0/tf from 80 epochs to train.epochs")
    p.set_defaults(func=cmd_sweep)

    p = common(sub.add_parser("report", help="rebuild report.md from a sweep CSV"), config=False)
    p.add_argument("sweep_csv")
    p.set_defaults(func=cmd_report)

    p = common(sub.add_parser("inspect", help="describe a .pmk artifact"), config=False)
    p.add_argument("artifact")
    p.set_defaults(func=cmd_inspect)

    p = common(sub.add_parser("compare", help="compare two artifacts on the test split"))
    p.add_argument("artifact_a")
    p.add_argument("artifact_b")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, UsageError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
