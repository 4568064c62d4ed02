"""``uniwrv`` command-line entry point.

Exit codes: 0 success, 1 verification failure, 2 usage or config error, 3 I/O error.
"""

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from .errors import CheckpointError, ConfigError, DatasetError, UniWRVError, UsageError

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("uniwrv")


def _write_resolved(out_dir, name, payload):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(yaml.safe_dump(payload, sort_keys=True))


def cmd_generate(args):
    from .config import load_config
    from .weathergen import make_dataset

    cfg = load_config(args.config)
    data = cfg.data if args.seed is None else replace(cfg.data, seed=args.seed)
    paths = make_dataset(data, args.out, force=args.force)
    _write_resolved(args.out, "resolved_config.yaml", {**cfg.to_dict(), "data": {**cfg.to_dict()["data"], "seed": data.seed}})
    print(f"wrote {len(paths)} clips to {args.out}")
    return EXIT_OK


def cmd_train(args):
    from .config import load_config
    from .train import train

    cfg = load_config(args.config)

    def progress(it, losses):
        if it % max(1, cfg.train.iterations // 20) == 0:
            log.info("iter %d total %.4f l1 %.4f", it, losses["total"], losses["l1"])

    res = train(cfg, args.data, args.out, callback=progress)
    print(f"trained {cfg.train.iterations} iterations in {res.seconds:.1f}s; final checkpoint {Path(args.out) / 'final.uwrv'}")
    return EXIT_OK


def cmd_eval(args):
    from .checkpoint import load_checkpoint
    from .train import evaluate, load_test_clips, summarize, write_metrics_csv

    model = load_checkpoint(args.ckpt)
    clips = load_test_clips(args.data)
    report = Path(args.report)
    rows = evaluate(model, clips, args.max_triplets, image_dir=None if args.no_images else report / "restored")
    report.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(rows, report / "metrics.csv")
    _write_resolved(report, "resolved_config.yaml", {"model": model.cfg.to_dict(), "ckpt": str(args.ckpt), "data": str(args.data)})
    for key, (p, s, ip, iss, n) in sorted(summarize(rows).items(), key=lambda kv: str(kv[0])):
        print(f"condition {key}: psnr {p:.4f} (input {ip:.4f})  ssim {s:.4f} (input {iss:.4f})  n={n}")
    return EXIT_OK


def cmd_gradcheck(args):
    from .checks import register_composites
    from .tensorkit import backend
    from .tensorkit.gradcheck import REGISTRY, gradcheck

    register_composites()
    if args.backend:
        backend.use(args.backend)
    names = sorted(REGISTRY) if args.all or not args.op else args.op
    failed = 0
    print(f"{'op':<28} {'trials':>6} {'max_rel_err':>12}  result")
    for name in names:
        rep = gradcheck(name, trials=args.trials, eps=args.eps, tol=args.tol, seed=args.seed)
        failed += not rep.passed
        print(f"{name:<28} {rep.trials:>6} {rep.worst:>12.3e}  {'PASS' if rep.passed else 'FAIL'}")
    print(f"{len(names) - failed}/{len(names)} passed")
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_bench_routing(args):
    from .analysis import complexity_table, write_complexity_csv
    from .config import load_config

    cfg = load_config(args.config)
    rows = complexity_table(cfg.model, args.input_size)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_complexity_csv(rows, out)
    _write_resolved(out.parent, out.stem + "_config.yaml", {**cfg.to_dict(), "input_size": args.input_size})
    for r in rows:
        print(f"{r.scheme:<18} params {r.params:>10}  macs {r.macs:>12}")
    return EXIT_OK


def cmd_inspect(args):
    from .analysis import specialization_report, write_report_csvs
    from .checkpoint import load_checkpoint
    from .train import load_test_clips

    model = load_checkpoint(args.ckpt)
    for b in model.banks():
        b.reset_usage()
    clips = load_test_clips(args.data)
    rep = specialization_report(model, clips, args.samples)
    write_report_csvs(rep, args.out, banks=model.banks())
    _write_resolved(args.out, "resolved_config.yaml", {"model": model.cfg.to_dict(), "ckpt": str(args.ckpt),
                                                       "data": str(args.data), "samples": args.samples})
    conds = sorted(rep.purity)
    for c in conds:
        print(f"condition {c}: purity {rep.purity[c]:.3f} at layer {rep.purity_layer}")
    for i, a in enumerate(conds):
        for b in conds[i + 1:]:
            gap = rep.routing_gap(a, b)
            print(f"routing L1 {a} vs {b}: " + " ".join(f"{x:.3f}" for x in gap))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="uniwrv", description="Weather-robust video restoration toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a synthetic weather dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-condition PSNR/SSIM on the test split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--max-triplets", type=int)
    e.add_argument("--no-images", action="store_true")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("--op", action="append")
    c.add_argument("--all", action="store_true")
    c.add_argument("--eps", type=float, default=1e-5)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--trials", type=int, default=10)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--backend", choices=("python", "cython"))
    c.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench-routing", help="params / MACs of the four aggregation schemes")
    b.add_argument("--config", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--input-size", type=int, default=64)
    b.set_defaults(func=cmd_bench_routing)

    i = sub.add_parser("inspect", help="routing and prior specialization CSVs")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--samples", type=int, default=32)
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    threads = os.environ.get("UNIWRV_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except UniWRVError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
