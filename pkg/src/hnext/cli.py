"""Command-line entry point: ``hnext {generate|train|eval|verify} --config FILE``.

Exit codes: 0 success, 1 a verification check failed, 2 usage, configuration
or input error.  Every command writes a ``manifest.json`` with SHA-256
checksums of the files it produced.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_run_config
from .data import (
    file_sha256,
    generate_dataset,
    load_mnist_dir,
    read_archive,
    split_sizes,
    write_archive,
)
from .errors import HNextError
from .grid import make_circular_mask
from .model import count_parameters, init_params
from .train import TrainRecord, accuracy, train
from .verify import equivariance_report, fixed_angle_table, invariance_gap

__all__ = ["main", "build_parser"]

EXIT_OK, EXIT_CHECK_FAILED, EXIT_ERROR = 0, 1, 2
CHECKPOINT_NAME = "checkpoint.hnxc"


class CliError(Exception):
    """Reported on stderr, exit code 2."""


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hnext", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=("generate", "train", "eval", "verify"))
    parser.add_argument("--config", required=True, help="YAML run configuration")
    parser.add_argument("--seed", type=int, help="override every seed in the config")
    parser.add_argument("--force", action="store_true", help="overwrite existing outputs")
    parser.add_argument("--random-weights", action="store_true",
                        help="verify: use a seeded initialization instead of a checkpoint")
    parser.add_argument("--out", help="output directory (overrides paths.out)")
    return parser


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        cfg = dataclasses.replace(
            cfg,
            train=dataclasses.replace(cfg.train, seed=args.seed),
            data=dataclasses.replace(cfg.data, seed=args.seed),
            verify=dataclasses.replace(cfg.verify, seed=args.seed),
        )
    if args.out is not None:
        cfg = dataclasses.replace(cfg, paths=dataclasses.replace(cfg.paths, out=args.out))
    return cfg


def _dataset_dir(cfg: RunConfig) -> Path:
    if cfg.paths.dataset_dir:
        return Path(cfg.paths.dataset_dir)
    return cfg.paths.resolved_data_dir() / cfg.data.variant


def _prepare_out(out: Path, names, force: bool) -> None:
    existing = [n for n in names if (out / n).exists()]
    if existing and not force:
        raise CliError(f"{out}: {', '.join(existing)} already exist (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)


def _write_manifest(out: Path, files, meta: dict) -> None:
    entries = {name: {"sha256": file_sha256(out / name), "bytes": (out / name).stat().st_size}
               for name in sorted(files)}
    doc = {"files": entries, **meta}
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _split_file(variant: str, split: str) -> str:
    return f"{variant}-{split}.hnxd"


def _load_split(cfg: RunConfig, split: str):
    path = _dataset_dir(cfg) / _split_file(cfg.data.variant, split)
    if not path.exists():
        raise CliError(f"dataset split not found: {path} (run 'generate' first)")
    ds = read_archive(path)
    if ds.variant != cfg.data.variant:
        raise CliError(f"{path} holds variant {ds.variant!r}, config asks for {cfg.data.variant!r}")
    size = cfg.network.input_size
    if ds.images.shape[1:] != (size, size):
        raise CliError(f"{path}: {ds.images.shape[1]}x{ds.images.shape[2]} images, "
                       f"network expects {size}x{size}")
    return ds


def cmd_generate(cfg: RunConfig, args) -> int:
    source_dir = cfg.paths.resolved_data_dir()
    try:
        source = load_mnist_dir(source_dir)
    except FileNotFoundError as exc:
        raise CliError(f"MNIST source file missing: {exc.args[0]}") from None
    out = Path(args.out) if args.out else _dataset_dir(cfg)
    names = [_split_file(cfg.data.variant, s) for s in ("train", "valid", "test")]
    _prepare_out(out, names + ["manifest.json"], args.force)
    sizes = split_sizes(cfg.data.variant, cfg.data.swap_rot_mnist_sizes)
    sizes.update(cfg.data.overrides())
    splits = generate_dataset(cfg.data.variant, cfg.data.seed, source, sizes)
    for name, ds in splits.items():
        write_archive(out / _split_file(cfg.data.variant, name), ds)
    sizes = {name: len(ds) for name, ds in splits.items()}
    _write_manifest(out, names, {"command": "generate", "variant": cfg.data.variant,
                                 "seed": cfg.data.seed, "sizes": sizes})
    print(f"wrote {cfg.data.variant} to {out}: " + ", ".join(f"{k}={v}" for k, v in sizes.items()))
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    out = Path(cfg.paths.out)
    names = [CHECKPOINT_NAME, "metrics.csv"]
    _prepare_out(out, names + ["manifest.json"], args.force)
    dataset = {"train": _load_split(cfg, "train"), "valid": _load_split(cfg, "valid")}
    n_params = count_parameters(cfg.network)
    print(f"parameters: {n_params}")
    params, records = train(cfg.network, dataset, train_config=cfg.train,
                            log=lambda r: print(f"epoch {r.epoch}: loss {r.loss:.4f} "
                                                f"acc@0 {r.acc_0:.4f} acc@45 {r.acc_45:.4f}"))
    save_checkpoint(out / CHECKPOINT_NAME, cfg.network, params)
    lines = [TrainRecord.CSV_HEADER] + [r.csv_row() for r in records]
    (out / "metrics.csv").write_text("\n".join(lines) + "\n")
    _write_manifest(out, names, {"command": "train", "seed": cfg.train.seed,
                                 "parameters": n_params})
    return EXIT_OK


def _checkpoint_path(cfg: RunConfig) -> Path:
    return Path(cfg.paths.checkpoint) if cfg.paths.checkpoint else Path(cfg.paths.out) / CHECKPOINT_NAME


def _load_params(cfg: RunConfig):
    path = _checkpoint_path(cfg)
    if not path.exists():
        raise CliError(f"checkpoint not found: {path}")
    network, params = load_checkpoint(path)
    if network != cfg.network:
        raise CliError(f"{path} was trained with a different network config")
    return params


def cmd_eval(cfg: RunConfig, args) -> int:
    """Test accuracy as stored, the 0-vs-45 gap on valid, and (when the test
    split holds upright images) the fixed-angle table over those images."""
    out = Path(cfg.paths.out)
    _prepare_out(out, ["summary.csv", "fixed_angles.csv", "manifest.json"], args.force)
    params = _load_params(cfg)
    test, valid = _load_split(cfg, "test"), _load_split(cfg, "valid")
    test_acc = accuracy(cfg.network, params, test.images, test.labels)
    gap = invariance_gap(cfg.network, params, valid)
    written = ["summary.csv"]
    meta = {"command": "eval", "test_accuracy": test_acc, "invariance_gap": gap}
    subset = _upright_subset(test)
    if subset is not None:
        report = fixed_angle_table(cfg.network, params, subset, cfg.verify.table_angles)
        (out / "fixed_angles.csv").write_text(report.to_csv())
        written.append("fixed_angles.csv")
        meta["overall_accuracy"] = report.overall_accuracy
        meta["angle_spread"] = report.spread
        print(report.to_csv(), end="")
    (out / "summary.csv").write_text(
        f"metric,value\ntest_accuracy,{test_acc:.6f}\ninvariance_gap,{gap:.6f}\n")
    _write_manifest(out, written, meta)
    print(f"test accuracy: {test_acc:.4f}")
    print(f"invariance gap (0 vs 45 degrees): {gap:.4f}")
    return EXIT_OK


def _upright_subset(ds):
    upright = ds.angles == 0
    if not upright.any():
        return None
    return dataclasses.replace(ds, images=ds.images[upright], labels=ds.labels[upright],
                               angles=ds.angles[upright])


def cmd_verify(cfg: RunConfig, args) -> int:
    """Equivariance residuals on seeded masked inputs; the fixed-angle
    invariance table is added when a generated test split is available."""
    out = Path(cfg.paths.out)
    _prepare_out(out, ["equivariance.csv", "invariance.csv", "manifest.json"], args.force)
    v = cfg.verify
    params = init_params(cfg.network, v.seed) if args.random_weights else _load_params(cfg)
    rng = np.random.default_rng(v.seed)
    size = cfg.network.input_size
    images = rng.random((v.num_inputs, size, size)) * make_circular_mask(size, size)
    report = equivariance_report(cfg.network, params, images, v.angles)
    (out / "equivariance.csv").write_text(report.to_csv())
    written = ["equivariance.csv"]
    meta = {"command": "verify", "random_weights": bool(args.random_weights), "seed": v.seed}
    test_path = _dataset_dir(cfg) / _split_file(cfg.data.variant, "test")
    subset = _upright_subset(_load_split(cfg, "test")) if test_path.exists() else None
    if subset is not None:
        table = fixed_angle_table(cfg.network, params, subset, v.table_angles)
        (out / "invariance.csv").write_text(table.to_csv())
        written.append("invariance.csv")
        meta["overall_accuracy"] = table.overall_accuracy
    failures = report.failures(v.hard_tolerance, v.arbitrary_tolerance)
    meta["failures"] = len(failures)
    _write_manifest(out, written, meta)
    for r in failures:
        print(f"FAIL layer {r.layer} order {r.order} at {r.theta_deg:g} deg: "
              f"abs {r.abs_residual:.3e}, magnitude {r.mag_residual:.3e}", file=sys.stderr)
    print(f"{len(report.rows)} residual rows, {len(failures)} failure(s)")
    return EXIT_CHECK_FAILED if failures else EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "verify": cmd_verify}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _apply_overrides(load_run_config(args.config), args)
        return COMMANDS[args.command](cfg, args)
    except (CliError, HNextError, FileNotFoundError, NotImplementedError) as exc:
        print(f"hnext {args.command}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
