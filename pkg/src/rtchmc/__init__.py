import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .artifacts import get_output_dir, load_chain, save_json, save_report
from .config import (
    load_config,
    load_preset,
    parse_experiment,
    sampler_config,
    settings_of,
    validate_config,
)
from .covest import (
    covariance_metrics,
    estimate_covariance,
    ingest,
    loaded_sample_covariance,
    synthetic_spiked_data,
)
from .errors import ConfigError
from .experiments import diagnose_chain, run_experiment, run_sweep
from .logger import setup_logging
from .models import IssueLevel


def main(argv: Optional[List[str]] = None) -> None:
    args = parse_args(argv)

    # Set up logging
    logger = setup_logging(args.verbose, args.log_file)

    try:
        run(args, logger)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        print(f"Configuration error: {e}", file=sys.stderr)
        sys.exit(1)
    except Exception as e:
        logger.error(f"Error: {e}", exc_info=True)
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(1)


def _common_arguments() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML or JSON experiment file")
    common.add_argument("--preset", type=str, help="Built-in experiment preset")
    common.add_argument("--seed", type=int, help="Override the RNG seed")
    common.add_argument("--n-samples", type=int, help="Override the chain length")
    common.add_argument(
        "--out",
        type=Path,
        help="Output directory (default: ${RTCHMC_OUTPUT_DIR:-./runs})",
    )
    common.add_argument(
        "--force",
        action="store_true",
        help="Overwrite existing artifact files",
    )
    common.add_argument(
        "--verbose",
        action="store_true",
        help="Enable verbose output",
    )
    common.add_argument("--log-file", type=Path, help="Also write the log to this file")
    return common


def parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        description="Randomized-time constrained HMC on manifolds"
    )
    common = _common_arguments()
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser(
        "sample", parents=[common], help="Run the configured samplers once"
    )

    sweep = commands.add_parser(
        "sweep", parents=[common], help="Run a parameter sweep"
    )
    sweep.add_argument(
        "--threads",
        type=int,
        default=1,
        help="Worker processes for sweep points (default: 1)",
    )

    diagnose = commands.add_parser(
        "diagnose", parents=[common], help="Recompute IAC/ESS from a chain CSV"
    )
    diagnose.add_argument("chain", type=Path, help="Chain CSV, one sample per row")
    diagnose.add_argument("--skip-header", action="store_true")
    diagnose.add_argument(
        "--burn-in",
        type=float,
        default=0.1,
        help="Fraction of samples discarded (default: 0.1)",
    )

    covest = commands.add_parser(
        "covest", parents=[common], help="Bayesian spiked-covariance estimation"
    )
    covest.add_argument("--data", type=Path, help="CSV of data vectors, one per row")
    covest.add_argument("--skip-header", action="store_true")
    covest.add_argument("--rank", type=int, help="Spike rank m (default: ceil(p/6))")
    covest.add_argument(
        "--reference", type=Path, help="Reference covariance CSV for metrics"
    )

    commands.add_parser(
        "validate", parents=[common], help="Check a configuration without running"
    )

    return parser.parse_args(argv)


def load_raw(args: argparse.Namespace) -> Tuple[Dict[str, Any], Optional[Path], str]:
    """Raw config dict, its base directory and a run name, with CLI overrides."""
    if args.config is not None:
        raw = load_config(args.config)
        base_dir: Optional[Path] = args.config.parent
        name = args.config.stem
    elif args.preset is not None:
        raw = load_preset(args.preset)
        base_dir = None
        name = args.preset
    else:
        raise ConfigError("Either --config or --preset is required")

    if args.seed is not None:
        raw["seed"] = args.seed
    if args.n_samples is not None:
        raw["n_samples"] = args.n_samples
    return raw, base_dir, name


def output_dir_for(args: argparse.Namespace, configured: Optional[Path]) -> Path:
    return args.out or configured or get_output_dir()


def run(args: argparse.Namespace, logger) -> None:
    if args.command == "diagnose":
        run_diagnose(args, logger)
        return

    raw, base_dir, name = load_raw(args)

    if args.command == "validate":
        issues = validate_config(raw, base_dir)
        for issue in issues:
            print(f"{issue.level.value.upper()}: {issue.message}")
        if any(issue.level == IssueLevel.ERROR for issue in issues):
            logger.info("Configuration has errors")
        return

    if args.command == "covest":
        run_covest(args, raw, base_dir, name, logger)
        return

    config = parse_experiment(raw, base_dir, name)
    output_dir = output_dir_for(args, config.output_dir)
    if args.command == "sweep":
        rows = run_sweep(config, output_dir, args.threads, args.force)
        logger.info(f"Sweep finished with {len(rows)} rows in {output_dir}")
    else:
        run_experiment(config, output_dir, args.force)
        logger.info(f"Chains saved to {output_dir}")


def run_diagnose(args: argparse.Namespace, logger) -> None:
    samples = load_chain(args.chain, args.skip_header)
    diagnostics = diagnose_chain(samples, args.chain.stem, args.burn_in)

    meta_path = args.chain.with_name(f"{args.chain.stem}.meta.json")
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        for key in ("sampler", "acceptance_rate", "grad_evals"):
            if key in meta:
                diagnostics[key] = meta[key]

    output_dir = args.out or args.chain.parent
    save_json(
        diagnostics,
        output_dir / f"{args.chain.stem}.diagnostics.json",
        args.force,
    )
    for item in diagnostics["observables"]:
        print(
            f"{item['observable']}: tau={item['tau']:.4g} ess={item['ess']:.4g} "
            f"mean={item['mean']:.6g} stderr={item['stderr']:.3g}"
        )
    logger.info(f"Diagnosed {diagnostics['n_samples']} samples from {args.chain}")


def run_covest(
    args: argparse.Namespace,
    raw: Dict[str, Any],
    base_dir: Optional[Path],
    name: str,
    logger,
) -> None:
    issues = validate_config(raw, base_dir)
    for issue in issues:
        if issue.level == IssueLevel.WARNING:
            logger.warning(issue.message)
    errors = [issue.message for issue in issues if issue.level == IssueLevel.ERROR]
    if errors:
        raise ConfigError("; ".join(errors))

    options = dict(raw.get("covest", {}))
    cfg = sampler_config(settings_of(raw))
    reference = None

    if args.data is not None:
        skip_header = args.skip_header or bool(options.get("skip_header", False))
        data = ingest(args.data, skip_header=skip_header)
    elif "synthetic" in options:
        synthetic = options["synthetic"]
        data, reference = synthetic_spiked_data(
            int(synthetic["p"]),
            int(synthetic["m"]),
            int(synthetic["count"]),
            np.random.default_rng(cfg.seed),
        )
    else:
        raise ConfigError("covest needs --data or a [covest.synthetic] table")

    reference_path = args.reference or options.get("reference")
    if reference_path is not None:
        reference_path = Path(reference_path)
        if base_dir is not None and not reference_path.is_absolute():
            reference_path = base_dir / reference_path
        reference = np.loadtxt(reference_path, delimiter=",", ndmin=2)

    report = estimate_covariance(
        data,
        cfg,
        m=args.rank or options.get("m"),
        sigma1=float(options.get("sigma1", 2.0)),
        sigma2=float(options.get("sigma2", 2.0)),
        map_steps=int(options.get("map_steps", 500)),
        map_lr=float(options.get("map_lr", 1e-3)),
        refine_iters=int(options.get("refine_iters", 0)),
        reference=reference,
        burn_in=float(raw.get("burn_in", 0.1)),
    )
    if reference is not None:
        report.metrics["loaded_sample_covariance"] = covariance_metrics(
            reference, loaded_sample_covariance(data)
        )

    configured = Path(raw["output_dir"]) if raw.get("output_dir") else None
    output_dir = output_dir_for(args, configured)
    written = save_report(report, output_dir, name, args.force)
    logger.info(f"Saved {len(written)} covariance files to {output_dir}")


if __name__ == "__main__":
    main()
