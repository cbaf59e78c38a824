"""Command-line entry point: ``evolution verify | bench | dump-kernel``."""

from __future__ import annotations

import argparse
import json
import statistics
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import core
from .equivalence import (
    OperatorSpec,
    build_scenario,
    compare_tensors,
    regression_grid,
    run_scenario,
)
from .io import save_tensor
from .tensor import ConfigurationError

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _add_spec_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--family", choices=core.FAMILIES)
    p.add_argument("--h", type=int, default=4)
    p.add_argument("--w", type=int, default=4)
    p.add_argument("--din", type=int, default=2)
    p.add_argument("--dout", type=int, default=2)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--m", type=int, default=1)
    p.add_argument("--g", type=int, default=1)
    p.add_argument("--r", type=int, default=1)
    p.add_argument("--dk", type=int, default=2)
    p.add_argument("--dp", type=int, default=2)
    p.add_argument("--dh", type=int, default=None)
    p.add_argument("--pos", choices=("none", "absolute", "relative"), default="none")
    p.add_argument("--unfused", action="store_true", help="msa: apply wo after the kernel")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-9)


def _spec_from_flags(args) -> OperatorSpec:
    if args.family is None:
        raise UsageError("--family is required when no config is given")
    spec = OperatorSpec(
        family=args.family, h=args.h, w=args.w, d_in=args.din, d_out=args.dout, k=args.k,
        m=args.m, g=args.g, r=args.r, d_k=args.dk, d_p=args.dp, d_h=args.dh,
        pos_kind=args.pos, fused=not args.unfused, seed=args.seed, tolerance=args.tol,
    )
    spec.validate()
    return spec


def load_config(path: Path) -> list[OperatorSpec]:
    try:
        obj = json.loads(path.read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict) or not isinstance(obj.get("scenarios"), list):
        raise UsageError('config must be an object with a "scenarios" list')
    if not obj["scenarios"]:
        raise UsageError("config holds no scenarios")
    specs = []
    for i, entry in enumerate(obj["scenarios"]):
        try:
            if not isinstance(entry, dict):
                raise ConfigurationError("scenario must be an object")
            spec = OperatorSpec.from_dict(entry)
            spec.validate()
        except (TypeError, ValueError) as exc:
            raise UsageError(f"scenario {i}: {exc}") from exc
        specs.append(spec)
    return specs


def _format_line(report) -> str:
    spec = report.spec
    verdict = "PASS" if report.passed else "FAIL"
    if report.error:
        return f"{verdict} {spec.family:<13} {spec.describe()}  error: {report.error}"
    return f"{verdict} {spec.family:<13} {spec.describe()}  max_abs_diff={report.max_abs_diff:.3e}"


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_verify(args) -> int:
    if args.config:
        config = Path(args.config)
        specs, base_dir = load_config(config), config.parent
    elif args.grid:
        specs, base_dir = regression_grid(), None
    else:
        specs, base_dir = [_spec_from_flags(args)], None

    jobs = max(1, args.jobs)
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        reports = list(pool.map(lambda s: run_scenario(s, base_dir), specs))

    if args.format == "json":
        text = json.dumps([r.to_dict() for r in reports], indent=2) + "\n"
    else:
        lines = [_format_line(r) for r in reports]
        failed = sum(not r.passed for r in reports)
        lines.append(f"{len(reports) - failed}/{len(reports)} scenarios passed")
        text = "\n".join(lines) + "\n"
    _emit(text, args.out)
    return EXIT_OK if all(r.passed for r in reports) else EXIT_FAIL


def cmd_bench(args) -> int:
    if args.repeats < 1:
        raise UsageError(f"--repeats must be positive, got {args.repeats}")
    spec = _spec_from_flags(args)
    classic_t, evo_t, worst = [], [], 0.0
    for _ in range(args.repeats):
        run = build_scenario(spec)
        classic_t.append(run.classic_nanos)
        evo_t.append(run.evolution_nanos)
        worst = max(worst, compare_tensors(run.classic, run.evolution, spec.tolerance)[0])
    kernel_bytes = run.kernel.w.size * 8
    passed = worst <= spec.tolerance
    rows = [
        {"path": "classic", "min_nanos": min(classic_t), "median_nanos": int(statistics.median(classic_t))},
        {"path": "evolution", "min_nanos": min(evo_t), "median_nanos": int(statistics.median(evo_t)),
         "kernel_bytes": kernel_bytes},
    ]
    if args.format == "json":
        text = json.dumps({"spec": spec.to_dict(), "repeats": args.repeats, "timings": rows,
                           "max_abs_diff": worst, "pass": passed}, indent=2) + "\n"
    else:
        lines = [f"{spec.family} {spec.describe()} repeats={args.repeats}"]
        for row in rows:
            line = f"{row['path']:<10} min={row['min_nanos'] / 1e6:.3f} ms  median={row['median_nanos'] / 1e6:.3f} ms"
            if "kernel_bytes" in row:
                line += f"  kernel={row['kernel_bytes']} bytes"
            lines.append(line)
        lines.append(f"{'PASS' if passed else 'FAIL'} max_abs_diff={worst:.3e}")
        text = "\n".join(lines) + "\n"
    _emit(text, args.out)
    return EXIT_OK if passed else EXIT_FAIL


def cmd_dump_kernel(args) -> int:
    spec = _spec_from_flags(args)
    kern = build_scenario(spec).kernel
    out = Path(args.out)
    meta = {
        "family": kern.meta,
        "groups": kern.groups,
        "n": kern.n,
        "shape": list(kern.w.shape),
        "spec": spec.to_dict(),
    }
    try:
        save_tensor(out, kern.w)
        Path(f"{out}.meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    except OSError as exc:
        raise UsageError(f"cannot write {out}: {exc.strerror or exc}") from exc
    print(f"wrote {out} shape={tuple(kern.w.shape)} G={kern.groups}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evolution", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    verify = sub.add_parser("verify", help="check Evolution kernels against the classic operators")
    _add_spec_flags(verify)
    verify.add_argument("--config", help="JSON file with a scenarios list")
    verify.add_argument("--grid", action="store_true", help="run the built-in regression grid")
    verify.add_argument("--jobs", type=int, default=1)
    verify.add_argument("--format", choices=("text", "json"), default="text")
    verify.add_argument("--out")
    verify.set_defaults(func=cmd_verify)

    bench = sub.add_parser("bench", help="time the classic and Evolution paths")
    _add_spec_flags(bench)
    bench.add_argument("--repeats", type=int, default=5)
    bench.add_argument("--format", choices=("text", "json"), default="text")
    bench.add_argument("--out")
    bench.set_defaults(func=cmd_bench)

    dump = sub.add_parser("dump-kernel", help="write the generated Evolution Kernel as tensor JSON")
    _add_spec_flags(dump)
    dump.add_argument("--out", required=True)
    dump.set_defaults(func=cmd_dump_kernel)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (UsageError, ValueError) as exc:
        print(f"evolution: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
