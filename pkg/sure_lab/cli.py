import argparse
import inspect
import json
import logging
import sys
import typing
from pathlib import Path

import anyio
import pandas as pd
from pydantic import ValidationError

from . import pipeline, utils
from .configuration import Configuration, Method, RunConfig, load_dataset_config, load_run_config
from .errors import ConfigError, SureLabError
from .evaluation import deferral_from_records, records_frame, write_deferral_csv, write_metrics_json
from .synth_data import generate, parse_scenario, save_splits, scenario_name
from .verify import run_all

logger = logging.getLogger(__name__)


def _seed_list(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--seeds expects comma-separated integers, got {text!r}")
    if not seeds or any(s < 0 for s in seeds):
        raise argparse.ArgumentTypeError(f"--seeds expects non-negative integers, got {text!r}")
    return seeds


def _quantile_list(text: str) -> list[float]:
    try:
        return [float(q) for q in text.split(",") if q.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--quantiles expects comma-separated numbers, got {text!r}")


def _seed(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError("--seed must be non-negative")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sure-lab",
        description="Missing-modality reconstruction with correlation-trained uncertainty on synthetic tasks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="Generate and export the synthetic splits.")
    gen.add_argument("--config", required=True, help="Dataset or run config JSON.")
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=_seed)

    pre = sub.add_parser("pretrain", help="Pretrain the backbone on full-modality data.")
    pre.add_argument("--config", required=True)
    pre.add_argument("--out", required=True)
    pre.add_argument("--seed", type=_seed)

    train = sub.add_parser("train", help="Run phase 1 and 2, a baseline, or an ablation.")
    train.add_argument("--config", required=True)
    train.add_argument("--out", required=True)
    train.add_argument("--method", choices=[m.value for m in Method])
    seeds = train.add_mutually_exclusive_group()
    seeds.add_argument("--seed", type=_seed)
    seeds.add_argument("--seeds", type=_seed_list, help="Comma-separated seeds; one run directory per seed.")
    train.add_argument("--parallel", action="store_true", help="Run the seeds concurrently.")

    ablate = sub.add_parser("ablate", help="Run SURE and every ablation on one seed.")
    ablate.add_argument("--config", required=True)
    ablate.add_argument("--out", required=True)
    ablate.add_argument("--seed", type=_seed)

    ev = sub.add_parser("eval", help="Re-evaluate a trained run per missing-modality scenario.")
    ev.add_argument("--run", required=True)
    ev.add_argument("--scenario", help="e.g. missing=0,2 (default: every scenario)")
    ev.add_argument("--out")

    defer = sub.add_parser("defer", help="Deferral curves from a run's records.")
    defer.add_argument("--run", required=True)
    defer.add_argument("--scenario")
    defer.add_argument("--quantiles", type=_quantile_list)
    defer.add_argument("--out")

    verify = sub.add_parser("verify", help="Analytic self-checks.")
    verify.add_argument("--seeds", type=int)
    return parser


def _run_config(args: argparse.Namespace) -> RunConfig:
    config = load_run_config(args.config)
    if getattr(args, "method", None):
        config = config.model_copy(update={"method": Method(args.method)})
    if getattr(args, "seed", None) is not None:
        config = config.with_seed(args.seed)
    return config


def _gen_data(args: argparse.Namespace, settings: Configuration) -> int:
    config = load_dataset_config(args.config)
    if args.seed is not None:
        config = config.model_copy(update={"seed": args.seed})
    out = Path(args.out)
    files = save_splits(out, generate(config), config, settings.float_format)
    utils.write_manifest(out, files, config.seed, "gen-data", config)
    print(out)
    return 0


def _pretrain(args: argparse.Namespace, settings: Configuration) -> int:
    print(pipeline.write_pretrained(_run_config(args), args.out))
    return 0


async def _train(args: argparse.Namespace, settings: Configuration) -> int:
    config = _run_config(args)
    seeds = args.seeds or (config.seeds if args.seed is None else None)
    if seeds:
        dirs = await pipeline.train_seeds(config, seeds, args.out, "train", settings, parallel=args.parallel)
        for d in dirs:
            print(d)
    else:
        print(pipeline.train_and_write(config, args.out, "train", settings))
    return 0


def _ablate(args: argparse.Namespace, settings: Configuration) -> int:
    print(pipeline.run_ablation_matrix(_run_config(args), args.out, settings))
    return 0


def _eval(args: argparse.Namespace, settings: Configuration) -> int:
    scenarios = [parse_scenario(args.scenario)] if args.scenario else None
    config, results, report = pipeline.evaluate_run(args.run, scenarios, settings)
    out = Path(args.out) if args.out else Path(args.run) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_json(out / "metrics.json", report)
    records_frame(results).to_csv(out / "records.csv", index=False, float_format=settings.float_format)
    files = [out / "metrics.json", out / "records.csv"]
    deferral = {n: m["deferral"] for n, m in report.scenarios.items() if m.get("deferral")}
    if deferral:
        write_deferral_csv(out / "deferral.csv", deferral, settings.float_format)
        files.append(out / "deferral.csv")
    utils.write_manifest(out, files, config.seed, "eval", config)
    for res in results:
        print(res.name)
    return 0


def _defer(args: argparse.Namespace, settings: Configuration) -> int:
    run_dir = Path(args.run)
    config = load_run_config(run_dir / "config.json")
    try:
        frame = pd.read_csv(run_dir / "records.csv")
    except OSError as e:
        raise ConfigError(f"cannot read records from {run_dir}: {e}") from e
    scenario = scenario_name(parse_scenario(args.scenario)) if args.scenario else None
    rows = deferral_from_records(frame, args.quantiles or settings.deferral_quantiles, scenario)
    out = Path(args.out) if args.out else run_dir / "defer"
    out.mkdir(parents=True, exist_ok=True)
    write_deferral_csv(out / "deferral.csv", rows, settings.float_format)
    utils.write_manifest(out, [out / "deferral.csv"], config.seed, "defer", config)
    print(out / "deferral.csv")
    return 0


def _verify(args: argparse.Namespace, settings: Configuration) -> int:
    results = run_all(args.seeds or settings.verify_seeds)
    for res in results:
        status = "PASS" if res["passed"] else "FAIL"
        print(f"{status} {res['name']} worst={res['worst']:.3g} tol={res['tolerance']:.3g} {res['detail']}".rstrip())
    return 0 if all(res["passed"] for res in results) else 1


HANDLERS: dict[str, typing.Callable[[argparse.Namespace, Configuration], typing.Any]] = {
    "gen-data": _gen_data,
    "pretrain": _pretrain,
    "train": _train,
    "ablate": _ablate,
    "eval": _eval,
    "defer": _defer,
    "verify": _verify,
}


async def main(args: argparse.Namespace, settings: Configuration) -> int:
    result = HANDLERS[args.command](args, settings)
    if inspect.isawaitable(result):
        result = await result
    return result


def dispatch(argv: typing.Sequence[str] | None = None) -> int:
    """Parse, run one subcommand and map library errors to exit code 1 with a JSON line on stderr."""
    args = build_parser().parse_args(argv)
    try:
        try:
            settings = Configuration()
        except ValidationError as e:
            raise ConfigError(f"invalid SURE_LAB_ environment settings: {e.errors()[0]['msg']}") from e
        logging.basicConfig(
            level=settings.log_level.upper(), format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
        )
        return anyio.run(main, args, settings)
    except (SureLabError, OSError) as e:
        logger.debug("Command %s failed", args.command, exc_info=True)
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1


def run():
    sys.exit(dispatch())


if __name__ == "__main__":
    run()
