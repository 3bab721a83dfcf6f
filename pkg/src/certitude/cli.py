"""Command-line entry point: train, verify, compare-bounds, schedule-study.

Exit codes: 0 success, 2 numeric abort during training, 64 usage error,
65 data/model validation error.  Every run serializes its resolved
configuration to the output directory so it can be replayed.

Heavy imports are deferred so that CERTITUDE_THREADS can cap the BLAS
thread pools before numpy initializes.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

EXIT_OK = 0
EXIT_NUMERIC = 2
EXIT_USAGE = 64
EXIT_DATA = 65

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _apply_thread_cap():
    cap = os.environ.get("CERTITUDE_THREADS")
    if cap:
        for var in _THREAD_VARS:
            os.environ.setdefault(var, cap)


def _add_dataset_flags(p):
    p.add_argument("--dataset", required=True, choices=["mnist", "cifar10", "synthetic"])
    p.add_argument("--data-dir", default="data", help="root directory holding dataset files")
    p.add_argument("--synthetic-n", type=int, default=2000)
    p.add_argument("--synthetic-dims", type=int, default=2)
    p.add_argument("--synthetic-classes", type=int, default=3)
    p.add_argument("--limit", type=int, default=None, help="cap the number of evaluation examples")


def _add_train_flags(p):
    p.add_argument("--model", default="mlp", help="preset name or model manifest path")
    p.add_argument("--method", required=True, choices=["pure-ibp", "natural-ibp", "crown-ibp"])
    p.add_argument("--eps", type=float, required=True, help="target perturbation radius")
    p.add_argument("--ramp-epochs", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--warmup-epochs", type=int, default=None)
    p.add_argument("--kappa-final", type=float, default=None,
                   help="final natural-CE weight (natural-ibp only)")
    p.add_argument("--l1", type=float, default=0.0)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--lr-decay-interval", type=int, default=10)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--clip-input-box", action="store_true",
                   help="clip the perturbation box to the [0,1] pixel range")
    p.add_argument("--augment", action="store_true",
                   help="random flip/crop on training batches (full-scale runs only)")
    p.add_argument("--train-limit", type=int, default=None)
    p.add_argument("--eval-limit", type=int, default=None)
    p.add_argument("--dtype", choices=["f64", "f32"], default="f64")
    p.add_argument("--no-plot", action="store_true")


def build_parser():
    parser = _Parser(prog="certitude",
                     description="Certified bounds and verifiable training for ReLU networks")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a verifiably robust classifier")
    _add_dataset_flags(p_train)
    _add_train_flags(p_train)

    p_verify = sub.add_parser("verify", help="certify a trained model on a dataset")
    _add_dataset_flags(p_verify)
    p_verify.add_argument("--model", required=True)
    p_verify.add_argument("--eps", type=float, required=True)
    p_verify.add_argument("--method", default="ibp", choices=["ibp", "crown-ibp", "crown-full"])
    p_verify.add_argument("--out", required=True, help="per-example CSV path")
    p_verify.add_argument("--clip-input-box", action="store_true")
    p_verify.add_argument("--no-plot", action="store_true")

    p_cmp = sub.add_parser("compare-bounds", help="margin bounds across an eps grid")
    _add_dataset_flags(p_cmp)
    p_cmp.add_argument("--model", required=True)
    p_cmp.add_argument("--eps-grid", required=True, help="comma-separated eps values")
    p_cmp.add_argument("--methods", default="ibp,crown-ibp",
                       help="comma-separated subset of ibp,crown-ibp,crown-full")
    p_cmp.add_argument("--oracle", action="store_true",
                       help="add grid-oracle rows (input dimension <= 3 only)")
    p_cmp.add_argument("--out", required=True)
    p_cmp.add_argument("--clip-input-box", action="store_true")
    p_cmp.add_argument("--no-plot", action="store_true")

    p_study = sub.add_parser("schedule-study",
                             help="verified error vs ramp length across seeds and methods")
    _add_dataset_flags(p_study)
    _add_train_flags(p_study)
    p_study.add_argument("--ramp-lengths", required=True, help="comma-separated ramp lengths")
    p_study.add_argument("--seeds", default="0", help="comma-separated seeds")
    p_study.add_argument("--methods", default=None,
                         help="comma-separated training methods (overrides --method)")
    return parser


# ---------------------------------------------------------------------------
# shared helpers (import heavy modules lazily)
# ---------------------------------------------------------------------------

def _dataset_defaults(args):
    mnistish = args.dataset in ("mnist", "synthetic")
    merged = {
        "lr": 5e-4 if mnistish else 1e-3,
        "batch": 256 if mnistish else 128,
        "epochs": 100 if mnistish else 200,
        "ramp_epochs": 60 if mnistish else 120,
        "warmup_epochs": 1 if mnistish else 10,
    }
    for key, val in merged.items():
        if getattr(args, key, None) is None:
            setattr(args, key, val)


def _load_datasets(args, need_train: bool):
    from .data import load_cifar10_bin, load_mnist, synthetic_blobs

    if args.dataset == "mnist":
        root = os.path.join(args.data_dir, "mnist")
        train = load_mnist(root, "train") if need_train else None
        test = load_mnist(root, "test")
    elif args.dataset == "cifar10":
        root = os.path.join(args.data_dir, "cifar-10-batches-bin")
        train_paths = [os.path.join(root, f"data_batch_{i}.bin") for i in range(1, 6)]
        train = load_cifar10_bin(train_paths) if need_train else None
        test = load_cifar10_bin(os.path.join(root, "test_batch.bin"))
    else:
        n = args.synthetic_n
        n_test = max(n // 4, 64)
        # one draw, split in two: train and test share the cluster layout
        full = synthetic_blobs(n + n_test, args.synthetic_dims,
                               args.synthetic_classes, seed=getattr(args, "seed", 0))
        train, test = full.split(n)
        if not need_train:
            train = None
    return train, test


def _load_net(args, input_shape, num_classes):
    from .model import build_preset, load_model, preset_names

    name = args.model
    if os.path.exists(name):
        return load_model(name)
    if name.lower() in [p.lower() for p in preset_names()]:
        return build_preset(name, input_shape, num_classes, seed=getattr(args, "seed", 0))
    _usage_error(f"--model {name!r} is neither a file nor one of {preset_names()}")


def _usage_error(message):
    print(f"certitude: error: {message}", file=sys.stderr)
    raise SystemExit(EXIT_USAGE)


def _save_run_config(args, out_dir=None, out_file=None):
    from . import __version__

    cfg = {k: v for k, v in sorted(vars(args).items()) if k != "command"}
    cfg["command"] = args.command
    cfg["version"] = __version__
    if out_dir is not None:
        path = os.path.join(out_dir, "run_config.json")
    else:
        path = os.path.splitext(out_file)[0] + "_run_config.json"
    with open(path, "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
    return path


def _write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


def _fmt(x) -> str:
    return f"{x:.10g}"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    from . import autodiff as ad
    from .model import save_model
    from .training import TrainPlan, TrainingDiverged, metrics_to_csv, train

    if args.kappa_final is not None and args.method != "natural-ibp":
        _usage_error("--kappa-final only applies to --method natural-ibp")
    _dataset_defaults(args)
    if args.dtype == "f32":
        ad.set_default_dtype("float32")
    os.makedirs(args.out, exist_ok=True)
    train_ds, test_ds = _load_datasets(args, need_train=True)
    if args.train_limit:
        train_ds = train_ds.subset(args.train_limit)
    net = _load_net(args, train_ds.input_shape, train_ds.num_classes)
    plan = TrainPlan(
        method=args.method, eps_max=args.eps, epochs=args.epochs,
        ramp_epochs=args.ramp_epochs, warmup_epochs=args.warmup_epochs,
        kappa_final=args.kappa_final if args.kappa_final is not None else 0.5,
        lr=args.lr, lr_decay_interval=args.lr_decay_interval,
        batch_size=args.batch, l1=args.l1, seed=args.seed,
        clip_input_box=args.clip_input_box, augment=args.augment,
    )
    _save_run_config(args, args.out)
    summary_path = os.path.join(args.out, "summary.json")
    try:
        net, metrics = train(net, train_ds, plan, test_ds, out_dir=args.out,
                             eval_limit=args.eval_limit,
                             log=lambda s: print(s, flush=True))
    except TrainingDiverged as e:
        metrics_to_csv(e.metrics, os.path.join(args.out, "metrics.csv"))
        with open(summary_path, "w") as fh:
            json.dump({"schema": "certitude-run-summary/1", "status": "diverged",
                       "epoch": e.epoch, "batch": e.batch, "message": str(e)},
                      fh, indent=2)
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    save_model(net, os.path.join(args.out, "model.certnet"))
    metrics_to_csv(metrics, os.path.join(args.out, "metrics.csv"))
    last = metrics[-1]
    summary = {
        "schema": "certitude-run-summary/1",
        "status": "ok",
        "method": plan.method,
        "eps": plan.eps_max,
        "epochs": plan.epochs,
        "seed": plan.seed,
        "final_standard_error": last.test_standard_error,
        "final_verified_error": last.test_verified_error,
        "wall_seconds": sum(m.seconds for m in metrics),
    }
    with open(summary_path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    if not args.no_plot:
        from .plots import training_curves

        training_curves(metrics, os.path.join(args.out, "training_curves.png"))
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_verify(args) -> int:
    from .training import evaluate

    _, test_ds = _load_datasets(args, need_train=False)
    net = _load_net(args, test_ds.input_shape, test_ds.num_classes)
    clip = (0.0, 1.0) if args.clip_input_box else None
    _save_run_config(args, out_file=args.out)
    res = evaluate(net, test_ds, args.eps, args.method, clip, limit=args.limit)
    rows = [
        (str(i), str(int(res.labels[i])), str(int(res.predicted[i])),
         _fmt(res.min_margin[i]), str(int(res.verified[i])))
        for i in range(res.n)
    ]
    _write_csv(args.out, "index,label,predicted,min_margin,verified", rows)
    if not args.no_plot:
        from .plots import margin_histogram

        margin_histogram(res.min_margin, res.verified,
                         os.path.splitext(args.out)[0] + "_margins.png")
    print(json.dumps({
        "eps": args.eps, "method": args.method, "n": res.n,
        "standard_error": res.standard_error,
        "verified_error": res.verified_error,
    }, sort_keys=True))
    return EXIT_OK


def cmd_compare_bounds(args) -> int:
    import numpy as np

    from .oracle import grid_min_margin
    from .training import evaluate

    _, test_ds = _load_datasets(args, need_train=False)
    net = _load_net(args, test_ds.input_shape, test_ds.num_classes)
    clip = (0.0, 1.0) if args.clip_input_box else None
    try:
        eps_grid = [float(v) for v in args.eps_grid.split(",") if v != ""]
        methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    except ValueError:
        _usage_error(f"bad --eps-grid {args.eps_grid!r}")
    bad = [m for m in methods if m not in ("ibp", "crown-ibp", "crown-full")]
    if bad:
        _usage_error(f"unknown methods {bad}")
    _save_run_config(args, out_file=args.out)
    limit = args.limit if args.limit is not None else 50
    n = min(limit, len(test_ds))
    rows = []
    tuples = []
    for eps in eps_grid:
        for method in methods:
            res = evaluate(net, test_ds, eps, method, clip, limit=n)
            for i in range(n):
                rows.append((str(i), _fmt(eps), method, _fmt(res.min_margin[i])))
                tuples.append((i, eps, method, float(res.min_margin[i])))
        if args.oracle:
            from .model import spec_matrices

            d = int(np.prod(test_ds.input_shape))
            if d <= 3:
                for i in range(n):
                    c = spec_matrices(test_ds.labels[i : i + 1], net.num_classes)[0]
                    raw = test_ds.normalize(test_ds.images[i : i + 1])[0]
                    rep = grid_min_margin(net, raw, eps, c, clip=clip)
                    off = rep.empirical_min_margin.copy()
                    off[test_ds.labels[i]] = np.inf
                    rows.append((str(i), _fmt(eps), "oracle", _fmt(off.min())))
                    tuples.append((i, eps, "oracle", float(off.min())))
    rows.sort(key=lambda r: (int(r[0]), float(r[1]), r[2]))
    _write_csv(args.out, "example,eps,method,min_margin", rows)
    if not args.no_plot:
        from .plots import bounds_vs_eps

        bounds_vs_eps(tuples, os.path.splitext(args.out)[0] + ".png")
    print(json.dumps({"rows": len(rows), "eps_grid": eps_grid,
                      "methods": methods + (["oracle"] if args.oracle else [])},
                     sort_keys=True))
    return EXIT_OK


def cmd_schedule_study(args) -> int:
    import numpy as np

    if args.methods:
        methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    else:
        methods = [args.method]
    try:
        ramps = [int(v) for v in args.ramp_lengths.split(",") if v != ""]
        seeds = [int(v) for v in args.seeds.split(",") if v != ""]
    except ValueError:
        _usage_error("--ramp-lengths and --seeds take comma-separated integers")
    os.makedirs(args.out, exist_ok=True)
    _save_run_config(args, args.out)
    results = {}
    for method in methods:
        for ramp in ramps:
            for seed in seeds:
                sub = argparse.Namespace(**vars(args))
                sub.method = method
                sub.ramp_epochs = ramp
                sub.seed = seed
                sub.out = os.path.join(args.out, f"run_{method}_r{ramp}_s{seed}")
                sub.no_plot = True
                code = cmd_train(sub)
                summary = json.load(open(os.path.join(sub.out, "summary.json")))
                err = summary.get("final_verified_error", float("nan"))
                if code != EXIT_OK:
                    err = float("nan")
                results.setdefault((method, ramp), []).append(err)
    rows = []
    tuples = []
    for (method, ramp), errs in sorted(results.items()):
        arr = np.array(errs, dtype=float)
        ok = arr[~np.isnan(arr)]
        if ok.size == 0:
            best = med = worst = float("nan")
        else:
            best, med, worst = float(ok.min()), float(np.median(ok)), float(ok.max())
        rows.append((method, str(ramp), _fmt(best), _fmt(med), _fmt(worst),
                     str(int(np.isnan(arr).sum()))))
        tuples.append((method, ramp, best, med, worst))
    path = os.path.join(args.out, "schedule_study.csv")
    _write_csv(path, "method,ramp_epochs,best,median,worst,diverged", rows)
    if not args.no_plot:
        from .plots import schedule_study

        schedule_study(tuples, os.path.join(args.out, "schedule_study.png"))
    print(json.dumps({"runs": sum(len(v) for v in results.values()),
                      "csv": path}, sort_keys=True))
    return EXIT_OK


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    from .errors import CapacityError, ContractError, DimensionError, FormatError, ValidationError

    handlers = {
        "train": cmd_train,
        "verify": cmd_verify,
        "compare-bounds": cmd_compare_bounds,
        "schedule-study": cmd_schedule_study,
    }
    try:
        return handlers[args.command](args)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    except (ValidationError, FormatError, DimensionError, CapacityError) as e:
        print(f"certitude: {e}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as e:
        print(f"certitude: {e}", file=sys.stderr)
        return EXIT_DATA
    except ContractError as e:
        print(f"certitude: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
