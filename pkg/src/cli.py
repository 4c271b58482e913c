"""
Command-line front end.

    python -m src.cli fit --config example1 --long long.csv --surv surv.csv --out run/
    python -m src.cli summarize --fit run/fit --sdcor
    python -m src.cli predict --fit run/fit --newdata new.csv --horizon 14 --out pred/
    python -m src.cli simulate --scenario scenario.json --out sim/
    python -m src.cli verify --suite all

Exit codes: 0 success, 1 unexpected error or failed verification,
2 invalid input (model, data, archive, missing file, unknown suite),
3 non-convergence.
"""

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import List, Optional, Tuple

from colorama import Fore, Style
from colorama import init as colorama_init

from config.config import config_loader
from src.services.archive import RunManifest, load_fit, save_fit, write_atomic
from src.services.assembly import assemble
from src.services.errors import (
    ArchiveError,
    ConvergenceError,
    DataValidationError,
    LikelihoodDomainError,
    ModelSpecError,
    PredictionError,
)
from src.services.inference import fit as fit_model
from src.services.model_spec import IntStrategy, load_table, parse_config
from src.services.oracle import SimScenario, simulate_joint
from src.services.predict import PredictRequest, predict
from src.services.summaries import baseline_curves, posterior_densities, summarize
from src.services.verification import all_passed, available_suites, render, run_suite

logger = logging.getLogger("src.cli")

SEED_ENV = "LGMJOINT_SEED"
EXIT_OK, EXIT_ERROR, EXIT_INVALID, EXIT_CONVERGENCE = 0, 1, 2, 3
FIT_DIR = "fit"


def _version() -> str:
    return config_loader.load_engine_config()["project"]["version"]


def _configure_logging(verbose: bool) -> None:
    settings = config_loader.load_engine_config().get("logging", {})
    level = logging.DEBUG if verbose else getattr(logging, settings.get("level", "INFO"))
    logging.basicConfig(level=level, format=settings.get("format"), datefmt=settings.get("datefmt"), force=True)


def _resolve_seed(flag: Optional[int]) -> Optional[int]:
    if flag is not None:
        return flag
    value = os.environ.get(SEED_ENV)
    if value is None:
        return None
    try:
        return int(value)
    except ValueError:
        raise ModelSpecError(f"{SEED_ENV} must be an integer, got '{value}'")


def _read_model_document(value: str) -> Tuple[str, Optional[Path]]:
    """A path to a JSON document or the name of a bundled one"""
    path = Path(value)
    if path.exists():
        return path.read_text(encoding="utf-8"), path
    if path.suffix == "" and "/" not in value:
        return config_loader.model_document(value), None
    raise FileNotFoundError(f"Model document not found: {path}")


def _write_json(path: Path, document) -> Path:
    write_atomic(path, json.dumps(document, indent=2, sort_keys=True))
    return path


# ==================== Commands ====================

def cmd_fit(args) -> int:
    started = time.perf_counter()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config_text, config_path = _read_model_document(args.config)
    long_data = load_table(args.long) if args.long else None
    surv_data = load_table(args.surv) if args.surv else None
    spec = parse_config(config_text, long_data, surv_data)

    changes = {}
    seed = _resolve_seed(args.seed)
    if seed is not None:
        changes["seed"] = seed
    if args.strategy:
        changes["int_strategy"] = IntStrategy(args.strategy)
    if args.threads:
        changes["threads"] = args.threads
    if changes:
        spec = spec.with_controls(**changes)

    model = assemble(spec)
    result = fit_model(model, threads=spec.controls.threads)
    written = save_fit(result, out / FIT_DIR)
    summary = summarize(result, sdcor=args.sdcor, hr=args.hr)
    written.append(_write_json(out / "summary.json", summary.to_dict()))
    write_atomic(out / "summary.txt", summary.to_text() + "\n")
    written.append(out / "summary.txt")
    written.append(_write_json(out / "densities.json", posterior_densities(result)))
    if spec.survival:
        baseline_curves(result).to_csv(out / "baseline.csv", index=False)
        written.append(out / "baseline.csv")

    manifest = RunManifest(command="fit", version=_version(), seed=spec.controls.seed,
                           strategy=result.strategy.value, wall_clock=time.perf_counter() - started)
    manifest.add_inputs(config_path, [args.long, args.surv])
    manifest.add_outputs(written, out)
    manifest.write(out)
    print(summary.to_text())
    return EXIT_OK


def cmd_summarize(args) -> int:
    result = load_fit(args.fit)
    out = Path(args.out) if args.out else Path(args.fit).parent
    out.mkdir(parents=True, exist_ok=True)
    summary = summarize(result, sdcor=args.sdcor, hr=args.hr)
    _write_json(out / "summary.json", summary.to_dict())
    write_atomic(out / "summary.txt", summary.to_text() + "\n")
    print(summary.to_text())
    return EXIT_OK


def cmd_predict(args) -> int:
    started = time.perf_counter()
    result = load_fit(args.fit)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    new_data = load_table(args.newdata)
    surv_data = load_table(args.newdata_surv) if args.newdata_surv else None
    seed = _resolve_seed(args.seed)
    request = PredictRequest(
        new_data=new_data, horizon=args.horizon, n_time_points=args.n_time_points, n_sample=args.nsample,
        n_sample_re=args.nsample_re, inv_link=args.inv_link, survival=not args.no_survival, cif=args.cif,
        csurv=args.csurv, return_samples=args.return_samples, surv_data=surv_data,
        seed=result.model.controls.seed if seed is None else seed,
    )
    prediction = predict(result, request)
    written = []
    prediction.longitudinal.to_csv(out / "predL.csv", index=False)
    written.append(out / "predL.csv")
    if len(prediction.survival):
        prediction.survival.to_csv(out / "predS.csv", index=False)
        written.append(out / "predS.csv")
    if prediction.samples is not None:
        prediction.samples.to_csv(out / "samples.csv", index=False)
        written.append(out / "samples.csv")
    manifest = RunManifest(command="predict", version=_version(), seed=request.seed,
                           strategy=result.strategy.value, wall_clock=time.perf_counter() - started)
    manifest.add_inputs(None, [args.newdata, args.newdata_surv])
    manifest.add_outputs(written, out)
    manifest.write(out)
    logger.info(f"Predictions written to {out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    started = time.perf_counter()
    path = Path(args.scenario)
    if not path.exists():
        raise FileNotFoundError(f"Scenario file not found: {path}")
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ModelSpecError(f"Malformed scenario file {path}: {e}")
    scenario = SimScenario.from_dict(document)
    seed = _resolve_seed(args.seed)
    if seed is not None:
        scenario.seed = seed
    long_table, surv_table = simulate_joint(scenario)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    long_table.to_csv(out / "long.csv", index=False)
    surv_table.to_csv(out / "surv.csv", index=False)
    written = [out / "long.csv", out / "surv.csv", _write_json(out / "model.json", scenario.model_document())]
    manifest = RunManifest(command="simulate", version=_version(), seed=scenario.seed,
                           wall_clock=time.perf_counter() - started)
    manifest.add_inputs(path)
    manifest.add_outputs(written, out)
    manifest.write(out)
    return EXIT_OK


def cmd_verify(args) -> int:
    try:
        results = run_suite(args.suite, threads=args.threads)
    except KeyError:
        print(f"Unknown suite '{args.suite}'; available: {', '.join(available_suites())}", file=sys.stderr)
        return EXIT_INVALID
    print(render(results))
    if all_passed(results):
        print(f"{Fore.GREEN}All checks passed{Style.RESET_ALL}")
        return EXIT_OK
    failed = sum(1 for r in results if r.status == "FAIL")
    print(f"{Fore.RED}{failed} check(s) failed{Style.RESET_ALL}")
    return EXIT_ERROR


# ==================== Parser ====================

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--verbose", action="store_true", help="Debug logging")

    parser = argparse.ArgumentParser(prog="lgmjoint", description="Joint longitudinal and survival models")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", parents=[common], help="Fit a model and write its archive and summaries")
    p.add_argument("--config", required=True, help="Model document path or bundled name (example1, example2)")
    p.add_argument("--long", help="Longitudinal CSV")
    p.add_argument("--surv", help="Survival CSV (one row per subject)")
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("--strategy", choices=[s.value for s in IntStrategy])
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--sdcor", action="store_true", help="Report sd / correlation instead of variance / covariance")
    p.add_argument("--hr", action="store_true", help="Report survival effects as hazard ratios")
    p.set_defaults(handler=cmd_fit)

    p = sub.add_parser("summarize", parents=[common], help="Re-render summaries from a fit archive")
    p.add_argument("--fit", required=True, help="Fit archive directory")
    p.add_argument("--out", help="Output directory (default: the archive's parent)")
    p.add_argument("--sdcor", action="store_true")
    p.add_argument("--hr", action="store_true")
    p.set_defaults(handler=cmd_summarize)

    p = sub.add_parser("predict", parents=[common], help="Predict trajectories and survival curves")
    p.add_argument("--fit", required=True, help="Fit archive directory")
    p.add_argument("--newdata", required=True, help="Longitudinal rows of the subjects to predict")
    p.add_argument("--newdata-surv", help="Survival covariates of the subjects to predict")
    p.add_argument("--out", required=True)
    p.add_argument("--horizon", type=float, required=True)
    p.add_argument("--n-time-points", type=int)
    p.add_argument("--nsample", type=int)
    p.add_argument("--nsample-re", type=int)
    p.add_argument("--inv-link", action="store_true")
    p.add_argument("--cif", action="store_true")
    p.add_argument("--csurv", type=float)
    p.add_argument("--no-survival", action="store_true")
    p.add_argument("--return-samples", action="store_true")
    p.add_argument("--seed", type=int)
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("simulate", parents=[common], help="Simulate joint data from a scenario document")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("verify", parents=[common], help="Run acceptance suites")
    p.add_argument("--suite", default="all", help=f"One of: {', '.join(available_suites())}")
    p.add_argument("--threads", type=int)
    p.set_defaults(handler=cmd_verify)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    colorama_init()
    _configure_logging(args.verbose)
    try:
        return args.handler(args)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (ModelSpecError, DataValidationError, PredictionError, ArchiveError, LikelihoodDomainError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except ConvergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except Exception as e:
        logger.exception("Unexpected failure")
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
