"""Command line interface: ``aem <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
from pydantic import ValidationError

from . import conjoint as cj
from . import generation as gen
from . import pipeline as pl
from . import reporting, storage
from .config import RunConfig, load_config
from .domain import PERIODS, DomainError

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2, 64
log = logging.getLogger("aem")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit with status 2
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML or JSON run configuration")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--out", help="output root directory (overrides the config)")
    p.add_argument("--scenario", choices=["conjoint", "regional-timewise", "regional-regionwise"])
    p.add_argument("--corrector", choices=["mixture", "integrated", "logistic"])
    p.add_argument("--bootstrap-reps", type=int, dest="bootstrap_reps")
    p.add_argument("--provider", help="oracle | distorted | external:<endpoint>")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="aem", description="Bias-corrected synthetic choice data pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_text in (
        ("gen", "generate datasets into <run dir>/data"),
        ("correct", "train the corrector on generated data and save models and shares"),
        ("run", "generation, correction and inference end to end"),
        ("bootstrap", "pipeline-wide bootstrap confidence interval"),
    ):
        _common(sub.add_parser(name, help=help_text))
    p = sub.add_parser("infer", help="estimate effects from a run directory's persisted outputs")
    p.add_argument("run_dir")
    p = sub.add_parser("report", help="render tables and charts for a run directory")
    p.add_argument("run_dir")
    p.add_argument("--no-svg", action="store_true")
    p = sub.add_parser("validate", help="check dataset files")
    p.add_argument("files", nargs="+")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["output_dir"] = args.out
    if args.scenario is not None:
        changes["scenario"] = args.scenario
    if args.bootstrap_reps is not None:
        changes["bootstrap.replications"] = args.bootstrap_reps
    if args.provider is not None:
        changes["regional.provider"] = args.provider
    cfg = cfg.updated(**changes) if changes else cfg
    if args.corrector is not None:
        if (args.corrector == "logistic") != (cfg.scenario == "conjoint"):
            raise UsageError(f"corrector {args.corrector!r} does not apply to scenario {cfg.scenario!r}")
        if args.corrector != "logistic":
            cfg = cfg.updated(**{"corrector.kinds": [args.corrector]})
    return cfg


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen(cfg: RunConfig) -> Path:
    run_dir = reporting.run_dir_for(cfg)
    (run_dir / "data").mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(cfg.canonical_json() + "\n", encoding="utf-8")
    if cfg.scenario == "conjoint":
        storage.write_conjoint(run_dir / "data" / "conjoint.csv", gen.make_conjoint_dataset(pl.conjoint_config(cfg)))
    else:
        world = pl.build_world(cfg)
        storage.write_triplets(run_dir / "data" / "triplets.csv", world.agent)
        rids = world.tasks.region_ids
        for name, arr in (("human", world.human_shares), ("full", world.full_shares), ("expected", world.expected_shares)):
            storage.write_shares(run_dir / "data" / f"{name}_shares.csv", storage.shares_array_to_dict(arr, rids),
                                 world.arms, label=name)
    print(run_dir)
    return run_dir


def _shares_array(table: dict, region_ids: Sequence[str], k: int) -> np.ndarray:
    out = np.empty((len(region_ids), 2, k))
    for r, rid in enumerate(region_ids):
        for t, period in enumerate(PERIODS):
            if (rid, period) not in table:
                raise DomainError(f"share table lacks region {rid} ({period})")
            out[r, t] = table[(rid, period)]
    return out


def world_from_data(cfg: RunConfig, data_dir: Path) -> pl.RegionalWorld:
    """Regional world whose triplets and shares come from files written by ``gen``."""
    pop, tasks = pl.build_design(cfg)
    agent = storage.read_triplets(data_dir / "triplets.csv")
    if agent.region_ids != tasks.region_ids or agent.persona_ids != tuple(p.persona_id for p in pop.personas):
        raise DomainError("triplet file does not match the configured population")
    tables = {name: storage.read_shares(data_dir / f"{name}_shares.csv")[0] for name in ("human", "full", "expected")}
    arr = {k: _shares_array(v, tasks.region_ids, agent.n_categories) for k, v in tables.items()}
    theta = gen.community_theta(pop, gen.CommunityWeights(tuple(cfg.regional.community_coef)))
    return pl.RegionalWorld(pop, tasks, agent, agent, theta, arr["human"], arr["full"], arr["expected"])


def cmd_correct(cfg: RunConfig) -> Path:
    run_dir = reporting.run_dir_for(cfg)
    data_dir = run_dir / "data"
    if cfg.scenario == "conjoint":
        data = storage.read_conjoint(data_dir / "conjoint.csv")
        c = cfg.conjoint
        model = cj.fit_correction(data.X_primary, data.y_primary, data.z_primary, c.lam, c.tol, c.max_iter, c.interactions)
        report, extra = pl.conjoint_report(cfg, data, model)
        artifacts = {"dataset": data, "model": model, **extra}
    else:
        report, artifacts = pl.run_regional(cfg, world_from_data(cfg, data_dir))
    reporting.write_run(run_dir, cfg, report, artifacts)
    print(run_dir)
    return run_dir


def cmd_run(cfg: RunConfig) -> Path:
    report, artifacts = pl.run_pipeline(cfg)
    run_dir = reporting.write_run(reporting.run_dir_for(cfg), cfg, report, artifacts)
    print(reporting.effect_table(report) if cfg.scenario != "conjoint" else reporting.mape_table(report), end="")
    print(run_dir)
    return run_dir


def cmd_bootstrap(cfg: RunConfig) -> Path:
    run_dir = reporting.run_dir_for(cfg)
    result = pl.bootstrap_ci(cfg)
    record = result.to_record()
    record["plan"] = cfg.bootstrap.model_dump(mode="json")
    if cfg.scenario != "conjoint":
        world = pl.build_world(cfg)
        inputs, _ = pl.prepare_inputs(world, cfg)
        full = pl._share_dict(world.full_shares, world.tasks.region_ids)
        injected = pl.effect_from_shares(full, world.arms, cfg.regional.outcome_category, inputs.target_regions, "injected")
        record["injected_bps"] = injected.beta3_bps
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(cfg.canonical_json() + "\n", encoding="utf-8")
    reporting.dump_json(run_dir / "bootstrap.json", record)
    e = result.estimate
    if cfg.scenario == "conjoint":
        record["statistic"] = "bias reduction of the corrected estimator (bps fields are x 1e4)"
        print(f"bootstrap bias reduction {e.beta3:.4f}, CI [{e.ci_low:.4f}, {e.ci_high:.4f}] "
              f"from {len(result.replicas)} replicas")
    else:
        record["statistic"] = "DiD effect"
        print(f"bootstrap mean {e.beta3 * 1e4:.2f} bps, CI [{e.ci_low * 1e4:.2f}, {e.ci_high * 1e4:.2f}] "
              f"from {len(result.replicas)} replicas")
    print(run_dir)
    return run_dir


def cmd_infer(run_dir: Path) -> Path:
    report = reporting.reinfer_run(run_dir)
    reporting.dump_json(run_dir / "report.json", report)
    reporting.write_tables(run_dir, report)
    print(run_dir)
    return run_dir


def cmd_report(run_dir: Path, svg: bool = True) -> Path:
    report = reporting.load_report(run_dir) if (run_dir / "report.json").exists() else None
    boot = run_dir / "bootstrap.json"
    if report is None:
        if not boot.exists():
            raise FileNotFoundError(f"{run_dir} has neither report.json nor bootstrap.json")
        cfg = reporting.load_run_config(run_dir)
        report = {"scenario": cfg.scenario, "effects": {}, "mape": {}, "bias_reduction": {}}
    if boot.exists():
        report["bootstrap"] = json.loads(boot.read_text(encoding="utf-8"))
    for path in reporting.write_tables(run_dir, report, svg):
        if path.suffix == ".csv":
            print(f"== {path.name}")
            print(path.read_text(encoding="utf-8"), end="")
    return run_dir


def cmd_validate(files: Sequence[str]) -> int:
    status = EXIT_OK
    for f in files:
        problems = storage.validate_file(f)
        if problems:
            status = EXIT_INVALID
            for msg in problems:
                print(f"{f}: {msg}", file=sys.stderr)
        else:
            print(f"{f}: ok")
    return status


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("AEM_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "validate":
            return cmd_validate(args.files)
        if args.command == "infer":
            cmd_infer(Path(args.run_dir))
        elif args.command == "report":
            cmd_report(Path(args.run_dir), not args.no_svg)
        else:
            cfg = resolve_config(args)
            {"gen": cmd_gen, "correct": cmd_correct, "run": cmd_run, "bootstrap": cmd_bootstrap}[args.command](cfg)
        return EXIT_OK
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (ValidationError, storage.DatasetError, DomainError, pl.SplitError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except pl.PipelineError as exc:
        if isinstance(exc.cause, (storage.DatasetError, DomainError, pl.SplitError)):
            print(f"invalid input: {exc}", file=sys.stderr)
            return EXIT_INVALID
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
