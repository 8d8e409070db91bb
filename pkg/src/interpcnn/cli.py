"""Command-line entry point: train, eval, verify, bench, and infer.

Exit codes: 0 success, 2 usage/config error, 3 training divergence.
Every command honors --seed, --threads, and --deterministic; the
effective configuration is persisted into the output directory so a run
is reproducible from its artifacts alone.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def _apply_threads(threads: int | None) -> None:
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(threads)


def _load_config(args):
    from .config import default_config, load_config

    config = load_config(args.config) if args.config else default_config(args.task)
    if args.seed is not None:
        config.runtime["seed"] = args.seed
    if args.threads is not None:
        config.runtime["threads"] = args.threads
    if args.deterministic:
        config.runtime["deterministic"] = True
    if args.out:
        config.out_dir = str(args.out)
    _apply_threads(config.runtime["threads"])
    return config


def _prepare_runtime(config) -> None:
    from .tensor import set_precision

    set_precision(config.runtime["precision"])


def cmd_train(args) -> int:
    from .config import build_datasets, build_network_spec, build_train_config, effective_toml
    from .networks import Network
    from .plots import save_training_curves
    from .training import train

    config = _load_config(args)
    _prepare_runtime(config)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "effective.toml").write_text(effective_toml(config))
    train_set, test_set = build_datasets(config)
    network = Network(build_network_spec(config), seed=config.runtime["seed"])
    print(f"training {config.task} network: {network.parameter_count()} parameters, "
          f"{len(train_set)} train / {len(test_set)} test clouds")
    result = train(network, train_set, test_set, build_train_config(config, out_dir),)
    save_training_curves(result.rows, out_dir / "training_curves.png")
    best = result.best_metrics
    print(f"best epoch {result.best_epoch}: accuracy={best.accuracy:.4f}"
          + (f" miou_inst={best.miou_inst:.4f}" if best.miou_inst is not None else ""))
    print(f"artifacts in {out_dir}: metrics.csv, best.icnn, effective.toml, "
          f"training_curves.png")
    return EXIT_OK


def _load_eval_data(args, config, network):
    from .config import build_datasets

    if args.data:
        from .data import load_manifest_dataset

        splits = load_manifest_dataset(args.data)
        merged = [item for items in splits.values() for item in items]
        return merged
    _, test_set = build_datasets(config)
    return test_set


def cmd_eval(args) -> int:
    import numpy as np

    from .checkpoint import load_checkpoint
    from .plots import save_confusion_matrix
    from .tensor import no_grad
    from .training import evaluate

    config = _load_config(args)
    _prepare_runtime(config)
    network, _, extra = load_checkpoint(args.checkpoint)
    dataset = _load_eval_data(args, config, network)
    metrics = evaluate(network, dataset, batch_size=config.optimizer["batch_size"])
    print(f"{'metric':<12} value")
    print(f"{'loss':<12} {metrics.loss:.6f}")
    print(f"{'accuracy':<12} {metrics.accuracy:.6f}")
    if metrics.miou_cat is not None:
        print(f"{'miou_cat':<12} {metrics.miou_cat:.6f}")
        print(f"{'miou_inst':<12} {metrics.miou_inst:.6f}")
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "eval_metrics.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["loss", "accuracy", "miou_cat", "miou_inst"])
        writer.writerow([f"{metrics.loss:.6f}", f"{metrics.accuracy:.6f}",
                         "" if metrics.miou_cat is None else f"{metrics.miou_cat:.6f}",
                         "" if metrics.miou_inst is None else f"{metrics.miou_inst:.6f}"])
    if network.spec.task == "classification":
        k = network.spec.n_outputs
        matrix = np.zeros((k, k))
        with no_grad():
            for item in dataset:
                out = network.forward([item.cloud], training=False)
                matrix[int(item.label), int(np.argmax(out.logits.values))] += 1
        save_confusion_matrix(matrix, out_dir / "confusion_matrix.png")
    print(f"wrote {out_dir / 'eval_metrics.csv'}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .plots import save_check_report_plot
    from .verify import check_names, format_summary, run_invariant_suite, write_report_csv

    _apply_threads(args.threads)
    if args.list:
        for name in check_names():
            print(name)
        return EXIT_OK
    reports = run_invariant_suite(name_filter=args.filter)
    print(format_summary(reports))
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_report_csv(reports, out_dir / "verify_report.csv")
        save_check_report_plot(reports, out_dir / "verify_report.png")
        print(f"wrote {out_dir / 'verify_report.csv'}")
    return EXIT_OK if all(r.passed for r in reports) else 1


def cmd_bench(args) -> int:
    import numpy as np

    from .data import SyntheticShapeSpec, generate_synthetic
    from .networks import Network
    from .plots import save_bench_plot
    from .config import build_network_spec
    from .tensor import backward, no_grad, reset_tape, sum_all, zero_grads

    config = _load_config(args)
    _prepare_runtime(config)
    point_counts = [int(p) for p in (args.points or "256,1024").split(",")]
    batch = args.batch
    repeats = args.repeats
    rows = []
    for n_points in point_counts:
        config.network["n_points"] = n_points
        network = Network(build_network_spec(config), seed=config.runtime["seed"])
        clouds = [generate_synthetic(SyntheticShapeSpec(
            "sphere", n_points, 0.02, seed=i)).cloud for i in range(batch)]
        fwd_times, bwd_times = [], []
        with no_grad():
            network.forward(clouds, training=False)  # warm-up
        for _ in range(repeats):
            start = time.perf_counter()
            with no_grad():
                network.forward(clouds, training=False)
            fwd_times.append((time.perf_counter() - start) * 1e3)
        params = network.named_parameters()
        for _ in range(repeats):
            reset_tape()
            start = time.perf_counter()
            out = network.forward(clouds, training=True)
            backward(sum_all(out.logits))
            bwd_times.append((time.perf_counter() - start) * 1e3)
            zero_grads(t for _, t in params)
            reset_tape()
        rows.append({
            "points": n_points, "batch": batch,
            "forward_ms_mean": float(np.mean(fwd_times)),
            "forward_ms_std": float(np.std(fwd_times)),
            "backward_ms_mean": float(np.mean(bwd_times)),
            "backward_ms_std": float(np.std(bwd_times)),
            "parameters": network.parameter_count(),
        })
        print(f"points={n_points} batch={batch} "
              f"forward={rows[-1]['forward_ms_mean']:.1f}±{rows[-1]['forward_ms_std']:.1f}ms "
              f"forward+backward={rows[-1]['backward_ms_mean']:.1f}ms "
              f"params={rows[-1]['parameters']}")
    out_dir = Path(args.out or config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "bench.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    save_bench_plot(rows, out_dir / "bench.png")
    print(f"wrote {out_dir / 'bench.csv'} and bench.png")
    return EXIT_OK


def cmd_infer(args) -> int:
    import numpy as np

    from .checkpoint import load_checkpoint
    from .data import load_ply, load_xyz
    from .tensor import no_grad

    _apply_threads(args.threads)
    network, _, _ = load_checkpoint(args.checkpoint)
    path = Path(args.input)
    loaded = load_ply(path) if path.suffix.lower() == ".ply" else load_xyz(path)
    with no_grad():
        out = network.forward([loaded.cloud], training=False)
    pred = np.argmax(out.logits.values, axis=1)
    if network.spec.task == "classification":
        print(f"predicted class: {int(pred[0])}")
    else:
        target = Path(args.out or ".") / f"{path.stem}_predictions.csv"
        target.parent.mkdir(parents=True, exist_ok=True)
        with open(target, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["x", "y", "z", "label"])
            for point, label in zip(loaded.cloud.coords, pred):
                writer.writerow([f"{point[0]:.6f}", f"{point[1]:.6f}",
                                 f"{point[2]:.6f}", int(label)])
        print(f"wrote {target}")
    return EXIT_OK


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="TOML run configuration")
    parser.add_argument("--out", help="output directory (overrides config)")
    parser.add_argument("--seed", type=int, help="override runtime.seed")
    parser.add_argument("--threads", type=int, help="override runtime.threads")
    parser.add_argument("--deterministic", action="store_true",
                        help="fixed seeds and timing-free logs")
    parser.add_argument("--task", default="classification",
                        choices=["classification", "segmentation"],
                        help="task when no config file is given")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="interpcnn",
        description="Interpolated convolutions for irregular 3D point clouds",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a network from a config")
    _add_common(p_train)
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p_eval)
    p_eval.add_argument("checkpoint", help="path to a .icnn checkpoint")
    p_eval.add_argument("--data", help="manifest CSV to evaluate on "
                                       "(defaults to the config's test split)")
    p_eval.set_defaults(fn=cmd_eval)

    p_verify = sub.add_parser("verify", help="run the invariant suite")
    p_verify.add_argument("--filter", help="run only checks whose name contains this")
    p_verify.add_argument("--list", action="store_true", help="list check names and exit")
    p_verify.add_argument("--out", help="directory for verify_report.csv/.png")
    p_verify.add_argument("--seed", type=int, help="unused; accepted for uniformity")
    p_verify.add_argument("--threads", type=int)
    p_verify.add_argument("--deterministic", action="store_true")
    p_verify.set_defaults(fn=cmd_verify)

    p_bench = sub.add_parser("bench", help="time the classifier forward/backward")
    _add_common(p_bench)
    p_bench.add_argument("--points", help="comma-separated point counts (default 256,1024)")
    p_bench.add_argument("--batch", type=int, default=16)
    p_bench.add_argument("--repeats", type=int, default=5)
    p_bench.set_defaults(fn=cmd_bench)

    p_infer = sub.add_parser("infer", help="predict for one input cloud")
    p_infer.add_argument("checkpoint")
    p_infer.add_argument("input", help="xyz/ply point file")
    p_infer.add_argument("--out", help="output directory for segmentation predictions")
    p_infer.add_argument("--threads", type=int)
    p_infer.set_defaults(fn=cmd_infer)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except BrokenPipeError:
        return EXIT_OK
    except Exception as exc:
        from .errors import ConfigError, ContractError, InputError, ParseError, TrainingError

        if isinstance(exc, TrainingError):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
        if isinstance(exc, (ConfigError, ParseError, InputError, ContractError,
                            FileNotFoundError)):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        raise


if __name__ == "__main__":
    sys.exit(main())
