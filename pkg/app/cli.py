import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from app.config import COVARIATES, DATA_DIR, LOG_LEVEL, OUTPUT_DIR, PipelineConfig, load_config
from app.errors import EXIT_OK, EXIT_USAGE, DataValidationError, SocialDiffError
from app.io.bundle import load_bundle, write_bundle
from app.io.report import FORMATS, emit_report
from app.pipeline import MANIFEST, STAGES, hash_file, recovery_records, run_all
from app.simulation.simulator import ScenarioSpec, simulate

logger = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; 2 is reserved for bad data here."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(parser: argparse.ArgumentParser, data: bool = True) -> None:
    parser.add_argument("--config", type=Path, help="JSON configuration file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a configuration value (repeatable)")
    parser.add_argument("--seed", type=int, help="run seed (overrides the configuration)")
    if data:
        parser.add_argument("--data-dir", type=Path, default=DATA_DIR, help="input bundle directory")
    parser.add_argument("--output-dir", type=Path, default=OUTPUT_DIR, help="where reports are written")
    parser.add_argument("--format", choices=FORMATS, default="json", help="report format")
    parser.add_argument("--progress", action="store_true", help="show progress bars for long chains")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="socialdiff", description="Social-learning diffusion and choice estimation")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sim = sub.add_parser("simulate", help="write a synthetic bundle with known ground truth")
    _common(sim, data=False)
    sim.add_argument("--categories", type=int, default=10)
    sim.add_argument("--days", type=int, default=200)
    sim.add_argument("--weeks", type=int, default=20)
    sim.add_argument("--customers", type=int, default=1258)
    sim.add_argument("--social-source", choices=COVARIATES, default="local-adopters")
    sim.add_argument("--obs-noise", type=float, default=0.01)

    for name, text in (
        ("fit-diffusion", "fit the diffusion model on the macro series"),
        ("fit-factors", "extract varimax-rotated category factors"),
        ("fit-choice", "fit the choice-model variants and compare them"),
        ("counterfactual", "optimise the social-influence policy"),
        ("run-all", "run every stage and write the manifest"),
    ):
        _common(sub.add_parser(name, help=text))

    report = sub.add_parser("report", help="verify a finished run against its manifest and print the comparison")
    report.add_argument("--output-dir", type=Path, default=OUTPUT_DIR)

    recover = sub.add_parser("recover", help="simulate, fit and compare estimates with the ground truth")
    _common(recover, data=False)
    recover.add_argument("--social-source", choices=COVARIATES, default="local-adopters")
    recover.add_argument("--customers", type=int, default=400)
    return parser


def _stages(command: str, config: PipelineConfig) -> Sequence[str]:
    if command == "fit-diffusion":
        return ("diffusion",)
    if command == "fit-factors":
        return ("factors",)
    if command == "fit-choice":
        needs_diffusion = any(c.endswith("imitators") for c in config.covariates)
        return (("diffusion",) if needs_diffusion else ()) + ("factors", "choice", "comparison")
    return STAGES


def _simulate(args, config: PipelineConfig) -> int:
    spec = ScenarioSpec.default(
        n_categories=args.categories, n_days=args.days, n_weeks=args.weeks, n_customers=args.customers,
        social_source=args.social_source, obs_noise=args.obs_noise, seed=config.seed,
    )
    spec.settings = config.simulation
    data = simulate(spec)
    write_bundle(data.bundle, args.output_dir)
    truth = {
        "diffusion": data.spec.params.records(data.bundle.categories),
        "coefficients": data.choices.coefficients,
        "labels": data.choices.labels,
        "social_source": spec.social_source,
    }
    emit_report({"truth": truth}, args.output_dir, "json")
    print(f"wrote synthetic bundle to {args.output_dir}")
    return EXIT_OK


def _report(args) -> int:
    manifest_path = args.output_dir / MANIFEST
    if not manifest_path.exists():
        raise DataValidationError("no manifest found; run a fitting command first", file=manifest_path)
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    for name, digest in sorted(manifest["artifacts"].items()):
        path = args.output_dir / name
        if not path.exists():
            raise DataValidationError("artifact listed in the manifest is missing", file=path)
        if hash_file(path) != digest:
            raise DataValidationError("artifact hash does not match the manifest", file=path)
    print(f"{len(manifest['artifacts'])} artifacts verified")
    comparison = args.output_dir / "choice_comparison.json"
    if comparison.exists():
        for row in json.loads(comparison.read_text(encoding="utf-8")):
            print(f"{row['rank']:>2}  {row['covariate']:<18} log-lik {row['log_likelihood']:.3f}  n_obs {row['n_obs']}")
    if manifest.get("failed_stage"):
        print(f"run stopped in stage {manifest['failed_stage']}: {manifest['error']}")
    return EXIT_OK


def _recover(args, config: PipelineConfig) -> int:
    spec = ScenarioSpec.default(n_customers=args.customers, social_source=args.social_source, seed=config.seed)
    spec.settings = config.simulation
    data = simulate(spec)
    stages = ("diffusion", "factors", "choice", "comparison")
    run = run_all(data.bundle, config, args.output_dir, stages=stages, progress=args.progress, fmt=args.format)
    emit_report({"recovery": recovery_records(run, data)}, args.output_dir, "json")
    print(f"recovery report written to {args.output_dir}; selected variant {run.selected}")
    return EXIT_OK


def run(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=LOG_LEVEL, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    if args.command == "report":
        return _report(args)

    config = load_config(args.config, args.overrides, args.seed)
    if args.command == "simulate":
        return _simulate(args, config)
    if args.command == "recover":
        return _recover(args, config)

    bundle = load_bundle(args.data_dir, monotonize=config.monotonize_inputs)
    result = run_all(bundle, config, args.output_dir, stages=_stages(args.command, config),
                     progress=args.progress, fmt=args.format)
    if result.selected is not None:
        print(f"selected choice variant: {result.selected}")
    print(f"reports written to {args.output_dir}")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    try:
        return run(argv)
    except SocialDiffError as e:
        logger.error("%s", e)
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
