"""Command-line entry point: ``lmmnn {simulate,run,eigendecay,fit,predict}``."""

import argparse
import json
import sys

import joblib
import numpy as np

from . import eigendecay, harness
from .nll import TrainConfig
from .predictor import write_blup, write_predictions
from .simgen import SimSpec, gen, read_dataset, sample_cluster_sizes, write_dataset


def _floats(s):
    return tuple(float(v) for v in s.split(",") if v)


def _ints(s):
    return tuple(int(v) for v in s.split(",") if v)


def cmd_simulate(args):
    d = json.loads(open(args.config).read()) if args.config else {}
    for key in ("scenario", "n", "p", "qs", "sig2e", "sig2bs", "g_mode", "split_mode",
                "f_mode", "seed"):
        val = getattr(args, key)
        if val is not None:
            d[key] = val
    ds = gen(SimSpec.from_dict(d))
    write_dataset(ds, args.out)
    print("wrote %s (%d rows, %d test) and %s.json" % (args.out, ds.n, ds.test_idx.size, args.out))
    return 0


def cmd_run(args):
    cfg = harness.ExperimentConfig.from_json(args.config)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    log = None if args.quiet else (lambda msg: print(msg, file=sys.stderr, flush=True))
    report = harness.run(cfg, log=log)
    out = harness.report_write(report, cfg.resolved_output_dir())
    print(report.summary().to_string(index=False))
    print("report written to %s" % out)
    return 0 if report.all_ok else 1


def cmd_eigendecay(args):
    if args.sizes:
        sizes = np.asarray(_ints(args.sizes))
    else:
        sizes = sample_cluster_sizes(args.n, args.q, args.seed)[1]
        sizes = sizes[sizes > 0]
    window = tuple(args.window) if args.window else None
    rep = eigendecay.categorical_spectrum(sizes, args.sigma2, window=window)
    rep.to_frame().to_csv(args.out, index=False, float_format="%.17g")
    msg = "n=%d q=%d" % (rep.eigenvalues.size, sizes.size)
    if rep.C is not None:
        msg += " fit C=%.6g p=%.6g" % (rep.C, rep.p)
    if rep.max_dev is not None:
        msg += " closed-form vs dense max dev=%.3g" % rep.max_dev
    print(msg)
    return 0


def cmd_fit(args):
    ds = read_dataset(args.data)
    cfg = TrainConfig.from_dict(json.loads(args.train_config) if args.train_config else {})
    net = harness.NetConfig.from_dict(json.loads(args.net) if args.net else {})
    spec = ds.cov_spec()
    est = harness._estimator(args.method, ds.sim.scenario, spec, net, cfg, cfg.seed,
                             harness.level_counts(spec))
    X, y, re = ds.part("train")
    est.fit(X, y, re=re)
    joblib.dump({"estimator": est, "scenario": ds.sim.scenario, "method": args.method},
                args.model)
    print("fitted %s in %d epochs; model saved to %s" % (args.method, est.n_epochs_, args.model))
    return 0


def cmd_predict(args):
    bundle = joblib.load(args.model)
    est = bundle["estimator"]
    ds = read_dataset(args.data)
    rows = {"test": ds.test_idx, "train": ds.train_idx, "all": np.arange(ds.n)}[args.rows]
    X, re = ds.X[rows], ds.re.take(rows)
    if bundle["scenario"] == "glmm-binary":
        y_pred = est.predict_proba(X, re)[:, 1]
    else:
        y_pred = est.predict(X, re)
    write_predictions(args.out, ds.y[rows], y_pred, rows)
    if args.blup_out:
        b = getattr(est, "b_hat_", None)
        if b is None and hasattr(est, "result_"):
            b = est.result_.b_hat
        if b is None:
            raise SystemExit("model %s has no random-effect predictions" % bundle["method"])
        write_blup(args.blup_out, b)
    print("wrote %d predictions to %s" % (rows.size, args.out))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="lmmnn", description="Mixed-effects neural networks.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic dataset CSV")
    s.add_argument("--config", help="JSON file of SimSpec fields")
    s.add_argument("--scenario", choices=("single-categorical", "multiple-categorical",
                                          "longitudinal", "spatial", "combined", "glmm-binary"))
    s.add_argument("--n", type=int)
    s.add_argument("--p", type=int)
    s.add_argument("--q", dest="qs", type=_ints, help="comma-separated level counts")
    s.add_argument("--sig2e", type=float)
    s.add_argument("--sig2b", dest="sig2bs", type=_floats, help="comma-separated variances")
    s.add_argument("--g-mode", dest="g_mode", choices=("identity", "linear-W", "nonlinear-W"))
    s.add_argument("--split-mode", dest="split_mode", choices=("random", "future"))
    s.add_argument("--f-mode", dest="f_mode", choices=("nonlinear", "linear", "zero"))
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("run", help="run an experiment from a JSON config")
    r.add_argument("config")
    r.add_argument("--output-dir")
    r.add_argument("--quiet", action="store_true")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eigendecay", help="categorical kernel spectrum and power-law fit")
    e.add_argument("--sizes", help="comma-separated cluster sizes")
    e.add_argument("--n", type=int, default=1000)
    e.add_argument("--q", type=int, default=338)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--sigma2", type=float, default=1.0)
    e.add_argument("--window", type=int, nargs=2, metavar=("LO", "HI"))
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eigendecay)

    f = sub.add_parser("fit", help="fit one method on a dataset's training rows and save it")
    f.add_argument("--data", required=True)
    f.add_argument("--method", choices=harness.METHODS, default="lmmnn")
    f.add_argument("--net", help="JSON object of network fields")
    f.add_argument("--train-config", help="JSON object of TrainConfig fields")
    f.add_argument("--model", required=True)
    f.set_defaults(func=cmd_fit)

    pr = sub.add_parser("predict", help="apply a saved model to a dataset")
    pr.add_argument("--model", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--rows", choices=("test", "train", "all"), default="test")
    pr.add_argument("--out", required=True)
    pr.add_argument("--blup-out")
    pr.set_defaults(func=cmd_predict)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
