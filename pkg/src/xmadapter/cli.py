"""Command-line entry point.

Subcommands: gen-synthetic, train, eval, sweep, inspect, param-count.
Configuration comes from flags, optionally seeded by a JSON config file
(``--config``); explicit flags win over file values, file values win over
built-in defaults. Failures print a single machine-parsable JSON line to
stderr and exit with a code identifying the failure class.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .adapter import PHI_ORDERS, HyperParams
from .errors import (
    BundleError,
    DegenerateInputError,
    EvaluationError,
    InsufficientSamplesError,
    ShapeError,
    TrainingDivergenceError,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING_FILE = 3
EXIT_INVALID_INPUT = 4
EXIT_DIVERGENCE = 5
EXIT_UNEXPECTED = 1

_DEFAULTS = {
    "shots": 16,
    "seed": 0,
    "gamma": 0.7,
    "alpha": 1.2,
    "beta": 3.5,
    "dim_d": 256,
    "epochs": 20,
    "batch_size": 32,
    "lr": 1e-3,
    "jobs": 1,
    "hidden_dim": None,
    "phi_order": "post_aggregate",
    "learn_gamma": False,
    "mask_self": False,
    "retrain_per_cell": None,  # per-axis default resolved in cmd_sweep
    "ce_class_scale": False,
    "raw_log_ce": False,
    "checkpoint_dtype": "f32",
    "classes": 16,
    "dim": 64,
    "test_per_class": 32,
    "separation": 4.0,
    "modality_noise": 0.0,
    "axis": "gamma",
    "gamma_grid": "0,0.1,0.3,0.5,0.7,0.9,1.0",
    "alpha_grid": "0.0,0.5,1.0,1.2,2.0,3.0,4.0",
    "beta_grid": "0.5,1.5,3.5,5.5,7.5,9.5,11.5",
    "shots_grid": "1,2,4,8,16",
}


def _add_common_hyper_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--gamma", type=float, help="image/text affinity fusion ratio")
    p.add_argument("--alpha", type=float, help="cache-vs-zero-shot residual ratio")
    p.add_argument("--beta", type=float, help="affinity sharpness ratio")
    p.add_argument("--dim-d", type=int, dest="dim_d",
                   help="shared projection dimension")
    p.add_argument("--hidden-dim", type=int, dest="hidden_dim",
                   help="optional hidden width for the projection heads")
    p.add_argument("--phi-order", choices=PHI_ORDERS, dest="phi_order",
                   help="apply sharpening after (default) or before aggregation")
    p.add_argument("--learn-gamma", action=argparse.BooleanOptionalAction,
                   dest="learn_gamma", help="train gamma through a sigmoid logit")
    p.add_argument("--mask-self", action=argparse.BooleanOptionalAction,
                   dest="mask_self",
                   help="zero a training sample's own cache column")
    p.add_argument("--ce-class-scale", action=argparse.BooleanOptionalAction,
                   dest="ce_class_scale",
                   help="divide per-sample cross entropy by the class count")
    p.add_argument("--raw-log-ce", action=argparse.BooleanOptionalAction,
                   dest="raw_log_ce",
                   help="take the log of raw blended logits (unstable; for demos)")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xmadapter",
        description="Cross-modal cache-model adapter on embedding bundles",
    )
    parser.add_argument("--config", help="JSON config file; flags override it")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="write a synthetic embedding bundle")
    p.add_argument("--classes", type=int, help="number of classes")
    p.add_argument("--shots", type=int, help="training examples per class")
    p.add_argument("--dim", type=int, help="feature dimension")
    p.add_argument("--test-per-class", type=int, dest="test_per_class")
    p.add_argument("--separation", type=float,
                   help="cluster tightness; 0 means no class signal")
    p.add_argument("--modality-noise", type=float, dest="modality_noise",
                   help="independent perturbation of the text features")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output bundle path")

    p = sub.add_parser("train", help="train the adapter on a bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--shots", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float, help="initial learning rate")
    p.add_argument("--checkpoint-dtype", choices=("f32", "f64"),
                   dest="checkpoint_dtype")
    p.add_argument("--out", required=True, help="output directory")
    _add_common_hyper_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on bundles")
    p.add_argument("--bundle", required=True, help="source bundle")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target", action="append", default=None,
                   help="cross-domain target bundle (repeatable)")
    p.add_argument("--out", help="optional path for the accuracy JSON")
    _add_common_hyper_flags(p)

    p = sub.add_parser("sweep", help="grid-search gamma, alpha/beta, or shots")
    p.add_argument("--axis", choices=("gamma", "alpha-beta", "shots"))
    p.add_argument("--bundle", required=True)
    p.add_argument("--shots", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--jobs", type=int, help="parallel sweep cells")
    p.add_argument("--gamma-grid", dest="gamma_grid",
                   help="comma-separated gamma grid")
    p.add_argument("--alpha-grid", dest="alpha_grid")
    p.add_argument("--beta-grid", dest="beta_grid")
    p.add_argument("--shots-grid", dest="shots_grid",
                   help="comma-separated shot counts (shot-curve axis)")
    p.add_argument("--retrain-per-cell", action=argparse.BooleanOptionalAction,
                   dest="retrain_per_cell",
                   help="retrain each cell (default: on for gamma, off for alpha-beta)")
    p.add_argument("--out", required=True, help="output directory")
    _add_common_hyper_flags(p)

    p = sub.add_parser("inspect", help="summarize a bundle or checkpoint")
    p.add_argument("--bundle")
    p.add_argument("--checkpoint")

    p = sub.add_parser("param-count", help="trainable-parameter accounting")
    p.add_argument("--checkpoint", help="count from a checkpoint")
    p.add_argument("--dim-c", type=int, dest="dim_c", help="feature dimension")
    p.add_argument("--dim-d", type=int, dest="dim_d")
    p.add_argument("--cache-entries", type=int, dest="cache_entries")
    p.add_argument("--hidden-dim", type=int, dest="hidden_dim")
    p.add_argument("--learn-gamma", action=argparse.BooleanOptionalAction,
                   dest="learn_gamma")
    return parser


def _merge_config(args: argparse.Namespace) -> argparse.Namespace:
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as fh:
            file_values = json.load(fh)
        for key, value in file_values.items():
            attr = key.replace("-", "_")
            if getattr(args, attr, None) is None:
                setattr(args, attr, value)
    # Record what the user (flags or config file) actually supplied, so eval
    # can tell explicit overrides apart from built-in defaults.
    args._provided = {k for k, v in vars(args).items() if v is not None}
    for key, value in _DEFAULTS.items():
        if getattr(args, key, "missing") is None:
            setattr(args, key, value)
    return args


def _hyper_from_args(args) -> HyperParams:
    return HyperParams(
        gamma=args.gamma,
        alpha=args.alpha,
        beta=args.beta,
        d=args.dim_d,
        learn_gamma=bool(args.learn_gamma),
        hidden_dim=args.hidden_dim,
        phi_order=args.phi_order,
        mask_self=bool(args.mask_self),
        raw_log_ce=bool(args.raw_log_ce),
        ce_class_scale=bool(args.ce_class_scale),
    )


def _parse_grid(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).split(",") if v.strip()]


def cmd_gen_synthetic(args) -> int:
    from .dataio import generate_synthetic, save_bundle

    bundle = generate_synthetic(
        num_classes=args.classes,
        shots=args.shots,
        feature_dim=args.dim,
        test_per_class=args.test_per_class,
        class_separation=args.separation,
        modality_noise=args.modality_noise,
        seed=args.seed,
    )
    save_bundle(
        bundle,
        args.out,
        provenance={"encoder": "synthetic", "dataset": "synthetic"},
    )
    print(json.dumps({"bundle": args.out, "classes": bundle.num_classes,
                      "train": bundle.num_train, "test": bundle.num_test}))
    return EXIT_OK


def cmd_train(args) -> int:
    from .dataio import load_bundle, sample_few_shot
    from .training import train

    bundle = load_bundle(args.bundle)
    split = sample_few_shot(bundle, args.shots, args.seed)
    hyper = _hyper_from_args(args)
    os.makedirs(args.out, exist_ok=True)
    checkpoint = os.path.join(args.out, "checkpoint.xmck")
    params, report = train(
        bundle,
        split,
        hyper,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        base_lr=args.lr,
        checkpoint_path=checkpoint,
        checkpoint_dtype=args.checkpoint_dtype,
    )
    report_path = os.path.join(args.out, "report.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
        fh.write("\n")
    print(json.dumps({
        "checkpoint": checkpoint,
        "report": report_path,
        "final_test_accuracy": report.final_test_accuracy,
    }))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .dataio import load_bundle
    from .evaluation import cross_domain_eval, evaluate
    from .training import load_checkpoint

    bundle = load_bundle(args.bundle)
    params, hyper = load_checkpoint(args.checkpoint)
    # The checkpoint's hyperparameter echo is authoritative unless the user
    # explicitly supplied an inference-time override.
    for name in ("gamma", "alpha", "beta"):
        if name in args._provided:
            hyper = hyper.with_overrides(**{name: getattr(args, name)})
    result = {"source_accuracy": evaluate(params, bundle, hyper)}
    if args.target:
        targets = [load_bundle(t) for t in args.target]
        cross = cross_domain_eval(params, bundle, targets, hyper)
        result["targets"] = {
            path: acc for path, acc in zip(args.target, cross["per_target"])
        }
        result["target_average"] = cross["average"]
    text = json.dumps(result, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
            fh.write("\n")
    print(text)
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .dataio import load_bundle, sample_few_shot
    from .evaluation import shot_curve, sweep_alpha_beta, sweep_gamma

    bundle = load_bundle(args.bundle)
    hyper = _hyper_from_args(args)
    os.makedirs(args.out, exist_ok=True)
    if args.axis == "gamma":
        split = sample_few_shot(bundle, args.shots, args.seed)
        retrain = True if args.retrain_per_cell is None else args.retrain_per_cell
        table = sweep_gamma(
            bundle, split, hyper,
            grid=_parse_grid(args.gamma_grid),
            epochs=args.epochs, batch_size=args.batch_size,
            base_seed=args.seed, base_lr=args.lr,
            retrain_per_cell=retrain, jobs=args.jobs,
        )
    elif args.axis == "shots":
        table = shot_curve(
            bundle, hyper,
            shots_grid=[int(v) for v in _parse_grid(args.shots_grid)],
            epochs=args.epochs, batch_size=args.batch_size,
            base_seed=args.seed, base_lr=args.lr, jobs=args.jobs,
        )
    else:
        split = sample_few_shot(bundle, args.shots, args.seed)
        retrain = False if args.retrain_per_cell is None else args.retrain_per_cell
        table = sweep_alpha_beta(
            bundle, split, hyper,
            alpha_grid=_parse_grid(args.alpha_grid),
            beta_grid=_parse_grid(args.beta_grid),
            epochs=args.epochs, batch_size=args.batch_size,
            base_seed=args.seed, base_lr=args.lr,
            retrain_per_cell=retrain, jobs=args.jobs,
        )
    csv_path = os.path.join(args.out, "sweep.csv")
    json_path = os.path.join(args.out, "sweep.json")
    dat_path = os.path.join(args.out, "sweep.dat")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(table.to_csv())
    with open(json_path, "w", encoding="utf-8") as fh:
        fh.write(table.to_json())
        fh.write("\n")
    with open(dat_path, "w", encoding="utf-8") as fh:
        fh.write(table.to_gnuplot())
    print(json.dumps({
        "csv": csv_path,
        "json": json_path,
        "gnuplot": dat_path,
        "best": {"values": list(table.best_cell), "accuracy": table.best_accuracy},
    }))
    return EXIT_OK


def cmd_inspect(args) -> int:
    if not args.bundle and not args.checkpoint:
        raise ShapeError("inspect needs --bundle or --checkpoint")
    if args.bundle:
        from .dataio import load_bundle

        bundle = load_bundle(args.bundle)
        counts = np.bincount(bundle.train_labels, minlength=bundle.num_classes)
        print(f"bundle: {args.bundle}")
        print(f"  feature_dim: {bundle.feature_dim}")
        print(f"  classes: {bundle.num_classes}")
        print(f"  train rows: {bundle.num_train} (per class: min {counts.min()}, "
              f"max {counts.max()})")
        print(f"  test rows: {bundle.num_test}")
        preview = ", ".join(bundle.class_names[:5])
        suffix = ", ..." if bundle.num_classes > 5 else ""
        print(f"  class names: {preview}{suffix}")
    if args.checkpoint:
        from .evaluation import forward_mac_count, params_parameter_count
        from .training import load_checkpoint

        params, hyper = load_checkpoint(args.checkpoint)
        nk, c = params.cache.image_keys.shape
        print(f"checkpoint: {args.checkpoint}")
        print(f"  cache entries: {nk}, feature_dim: {c}, "
              f"classes: {params.cache.num_classes}")
        print(f"  gamma={hyper.gamma} alpha={hyper.alpha} beta={hyper.beta} "
              f"d={hyper.d} phi_order={hyper.phi_order}")
        if params.gamma_logit is not None:
            print(f"  learned gamma logit: {float(params.gamma_logit):.6f}")
        print(f"  trainable parameters: {params_parameter_count(params)['total']}")
        macs = forward_mac_count(
            nk, c, params.cache.num_classes, hyper.d,
            hidden_dim=hyper.hidden_dim, phi_order=hyper.phi_order,
        )
        print(f"  multiply-adds per query: {macs}")
    return EXIT_OK


def cmd_param_count(args) -> int:
    from .evaluation import count_parameters, params_parameter_count

    if args.checkpoint:
        from .training import load_checkpoint

        params, _ = load_checkpoint(args.checkpoint)
        counts = params_parameter_count(params)
    else:
        if args.dim_c is None or args.dim_d is None or args.cache_entries is None:
            raise ShapeError(
                "param-count needs --checkpoint or all of "
                "--dim-c/--dim-d/--cache-entries"
            )
        counts = count_parameters(
            args.cache_entries,
            args.dim_c,
            args.dim_d,
            hidden_dim=args.hidden_dim,
            learn_gamma=bool(args.learn_gamma),
        )
    print(json.dumps(counts, indent=2, sort_keys=True))
    return EXIT_OK


_COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "inspect": cmd_inspect,
    "param-count": cmd_param_count,
}


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        args = _merge_config(args)
        return _COMMANDS[args.command](args)
    except FileNotFoundError as exc:
        return _fail("missing-file", str(exc), EXIT_MISSING_FILE)
    except TrainingDivergenceError as exc:
        return _fail("divergence", str(exc), EXIT_DIVERGENCE)
    except (
        BundleError,
        ShapeError,
        DegenerateInputError,
        InsufficientSamplesError,
        EvaluationError,
        ValueError,
    ) as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_INVALID_INPUT)
    except Exception as exc:  # pragma: no cover - last-resort guard
        return _fail("unexpected", f"{type(exc).__name__}: {exc}", EXIT_UNEXPECTED)


if __name__ == "__main__":
    sys.exit(main())
