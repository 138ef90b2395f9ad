"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

import argparse
import logging
import sys
from dataclasses import replace

import numpy as np

from . import config as configmod
from . import evalsuite, grid, modelfile, synthdata
from .errors import DataError, DatasetTooSmall, DkefError, NumericalError
from .preprocess import Whitening, dequantize, drop_constant_columns, fit_whitening, read_csv
from .trainer import train

log = logging.getLogger("dkef")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _run_config(args):
    cfg = configmod.load(args.config) if args.config else configmod.RunConfig()
    t = cfg.train
    if args.seed is not None:
        t = replace(t, seed=args.seed)
    if args.threads is not None:
        t = replace(t, threads=args.threads)
    if args.noise_std is not None:
        t = replace(t, data_noise_std=args.noise_std)
    cfg = replace(cfg, train=t)
    if args.dequantize:
        cfg = replace(cfg, dequantize=True)
    return cfg


def cmd_fit(args):
    cfg = _run_config(args)
    raw = read_csv(args.data)
    need = 4 * cfg.train.batch_train
    if raw.shape[0] < need:
        raise DatasetTooSmall(f"DatasetTooSmall: {raw.shape[0]} rows, need at least {need}")
    n_cols = raw.shape[1]
    data, dropped = drop_constant_columns(raw)
    if data.shape[1] == 0:
        raise DataError("every column is constant")
    columns = tuple(j for j in range(n_cols) if j not in set(dropped.tolist()))
    if cfg.dequantize:
        data = dequantize(data, np.random.default_rng(cfg.train.seed))
    w = fit_whitening(data, seed=cfg.train.seed) if cfg.whiten else Whitening.identity(data.shape[1])
    w = Whitening(w.mean, w.transform, w.log_abs_det, columns)
    model, report = train(data, cfg.train, cfg.architecture(data.shape[1]), whitening=w)
    modelfile.save(model, args.out)
    if args.trace:
        report.to_csv(args.trace)
    print(f"wrote {args.out}; held-out objective {report.final_validation:.6g}")


def cmd_eval(args):
    model = modelfile.load(args.model)
    test = model.whitening.select(read_csv(args.data)) if model.whitening else read_csv(args.data)
    seed = args.seed if args.seed is not None else 0
    rep = evalsuite.evaluate(model, test, n_samples=args.samples, seed=seed)
    text = rep.record()
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    sys.stdout.write(text)


def cmd_grid(args):
    model = modelfile.load(args.model)
    xs, ys, vals = grid.evaluate(model, args.bounds, args.resolution)
    if args.csv:
        grid.write_csv(args.csv, xs, ys, vals)
    if args.pgm:
        grid.write_pgm(args.pgm, vals)
    if not (args.csv or args.pgm):
        grid.write_csv("/dev/stdout", xs, ys, vals)


def cmd_synth(args):
    spec = synthdata.get(args.name)
    X = synthdata.sample(spec, args.n, args.seed if args.seed is not None else 0)
    out = args.out or "/dev/stdout"
    with open(out, "w") as fh:
        fh.write("x1,x2\n")
        for a, b in X:
            fh.write(f"{float(a)!r},{float(b)!r}\n")


def cmd_logz(args):
    model = modelfile.load(args.model)
    seed = args.seed if args.seed is not None else 0
    est = evalsuite.estimate_log_z(model, args.samples, seed)
    lines = [f"log_z_hat={est.log_z!r}", f"n_samples={est.n}"]
    if args.bias_bound:
        bb = evalsuite.model_bias_bound(model, args.samples, seed=seed + 1)
        lines.append(f"bias_bound={bb.bound!r}")
        lines += [f"note={n}" for n in bb.notes]
    sys.stdout.write("\n".join(lines) + "\n")


def build_parser():
    p = _Parser(prog="dkef", description="Deep kernel exponential family density estimation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int)

    f = sub.add_parser("fit", help="fit a model to a CSV file")
    f.add_argument("--data", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--trace", help="training trace CSV")
    f.add_argument("--config")
    f.add_argument("--noise-std", type=float)
    f.add_argument("--dequantize", action="store_true")
    common(f)
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("eval", help="evaluate a model on a test CSV")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out")
    e.add_argument("--samples", type=int, default=100_000)
    common(e)
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("grid", help="export a 2-d log-density lattice")
    g.add_argument("--model", required=True)
    g.add_argument("--bounds", type=float, nargs=4, metavar=("XMIN", "XMAX", "YMIN", "YMAX"), default=[-5, 5, -5, 5])
    g.add_argument("--resolution", type=int, default=200)
    g.add_argument("--csv")
    g.add_argument("--pgm")
    g.set_defaults(func=cmd_grid)

    s = sub.add_parser("synth", help="sample a synthetic dataset")
    s.add_argument("--name", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--out")
    common(s)
    s.set_defaults(func=cmd_synth)

    z = sub.add_parser("logz", help="estimate the log normalizer")
    z.add_argument("--model", required=True)
    z.add_argument("--samples", type=int, default=1_000_000)
    z.add_argument("--bias-bound", action="store_true")
    common(z)
    z.set_defaults(func=cmd_logz)
    return p


def _msg(exc):
    return exc.args[0] if len(exc.args) == 1 and isinstance(exc.args[0], str) else str(exc)


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (DataError, OSError) as exc:
        print(f"data error: {_msg(exc)}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {_msg(exc)}", file=sys.stderr)
        return 3
    except (DkefError, ValueError) as exc:
        print(f"error: {_msg(exc)}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
