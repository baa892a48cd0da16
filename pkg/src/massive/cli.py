"""Command line interface.

Subcommands::

    massive simulate   synthetic rows CSV + truth JSON
    massive fit        full model search and BMA on rows or GWAS summaries
    massive profile    profiled log-posterior over a (gamma_x, gamma_y) grid
    massive benchmark  RMSE of several estimators over simulated replicates

Exit codes: 0 success, 1 usage error, 2 bad input, 3 numerical failure.
Every command is deterministic given its flags; ``--threads`` never changes
the output.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from massive import __version__
from massive.errors import MassiveError, ParseError, PreconditionError
from massive.ingest import (
    SummaryInput,
    moments_from_rows,
    read_rows_csv,
    read_summary_csv,
    stats_from_summary,
    summarize_rows,
    summary_csv_text,
)
from massive.posterior import WEAK_FACTORS, PosteriorProblem, empirical_hyperparams
from massive.search import MassiveRun, RunConfig, log_model_prior, run_massive
from massive.simulate import SimConfig, default_estimators, rmse_benchmark, simulate_dataset
from massive.types import Hyperparams, ModelIndicator, SufficientStats

log = logging.getLogger("massive")

EXIT_USAGE = 1

BENCHMARK_COLUMNS = ("n", "j", "k", "valid", "beta", "sigma", "estimator", "rmse", "ci_low", "ci_high", "failures")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# output helpers
# --------------------------------------------------------------------------


def atomic_write_text(path, text: str) -> None:
    """Write ``text`` to ``path`` via a temporary file and rename."""
    path = Path(path)
    directory = path.parent if str(path.parent) else Path(".")
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=directory)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False, allow_nan=False) + "\n"


def _num(x: float) -> str:
    return "" if x is None or not math.isfinite(x) else repr(float(x))


# --------------------------------------------------------------------------
# shared input handling
# --------------------------------------------------------------------------


def _add_input_args(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help="individual-level CSV with header G1,...,GJ,X,Y")
    src.add_argument("--summary", help="per-variant summary CSV (snp,eaf,beta_x,se_x,n_x,beta_y,se_y,n_y)")
    p.add_argument("--ploidy", type=int, default=2, help="allele copies per variant (summary input)")
    p.add_argument("--beta-obs", type=float, help="observational X-Y regression slope (required with --summary)")
    p.add_argument("--n-obs", type=int, help="sample size of the observational slope (summary input)")
    p.add_argument("--intercept", action="store_true", help="profile out intercepts (use centered moments)")


def _add_hyper_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--sd-slab", type=float, help="override the slab standard deviation")
    p.add_argument("--sd-spike", type=float, help="override the spike standard deviation")
    p.add_argument(
        "--weak-factor",
        choices=WEAK_FACTORS,
        default="literal_101",
        help="multiplier in the empirical slab scale (default: %(default)s)",
    )


def load_stats(args) -> tuple[SufficientStats, dict]:
    if args.input is not None:
        if args.beta_obs is not None or args.n_obs is not None:
            raise UsageError("--beta-obs and --n-obs only apply to --summary input")
        table = read_rows_csv(args.input)
        stats = moments_from_rows(table.rows, intercept=args.intercept)
        meta = {"kind": "rows", "path": str(args.input), "columns": table.columns}
    else:
        if args.beta_obs is None:
            raise UsageError("--summary input requires --beta-obs")
        records = read_summary_csv(args.summary)
        summary = SummaryInput(records, beta_obs=args.beta_obs, ploidy=args.ploidy, n_obs=args.n_obs)
        stats = stats_from_summary(summary, intercept=args.intercept)
        meta = {"kind": "summary", "path": str(args.summary), "snps": [r.snp for r in records]}
    meta.update({"n": stats.n, "j": stats.j, "intercept": bool(args.intercept)})
    return stats, meta


def _hyper_override(args):
    if (args.sd_slab is None) != (args.sd_spike is None):
        raise UsageError("--sd-slab and --sd-spike must be given together")
    if args.sd_slab is None:
        return None
    return (args.sd_slab, args.sd_spike)


# --------------------------------------------------------------------------
# simulate
# --------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    config = SimConfig(
        n=args.n,
        j=args.j,
        k=args.k,
        beta=args.beta,
        sigma=args.sigma,
        ploidy=args.ploidy,
        seed=args.seed,
        directional=args.directional,
        gaussian_g=args.gaussian_g,
    )
    rows, truth = simulate_dataset(config)
    header = [f"G{i + 1}" for i in range(config.j)] + ["X", "Y"]
    atomic_write_text(args.out, _csv_text(header, [[repr(float(v)) for v in row] for row in rows]))
    doc = {"config": config.to_dict(), "truth": truth.to_dict()}
    if args.summary_out:
        summary = summarize_rows(rows, ploidy=config.ploidy)
        atomic_write_text(args.summary_out, summary_csv_text(summary))
        doc["summary"] = {"path": args.summary_out, "beta_obs": summary.beta_obs, "n_obs": summary.n_obs}
    truth_path = args.truth_out or str(Path(args.out).with_suffix("")) + ".truth.json"
    atomic_write_text(truth_path, _json_text(doc))
    log.info("wrote %d rows to %s", config.n, args.out)
    return 0


# --------------------------------------------------------------------------
# fit
# --------------------------------------------------------------------------


def result_document(run: MassiveRun, input_meta: dict, hyper_source: str) -> dict:
    """JSON-ready summary of a run (see ``schema/fit_result.schema.json``)."""
    rate = run.config.model_prior_rate
    config = run.config.to_dict()
    config.pop("threads")  # never affects the result
    models = []
    for wm in run.bma.models:
        comps = []
        total = [c.log_mass for c in wm.evidence.components]
        for c in wm.evidence.components:
            comps.append(
                {
                    "log_mass": c.log_mass,
                    "component_weight": float(np.exp(c.log_mass - np.logaddexp.reduce(total))),
                    "log_posterior": c.log_post_at_mode,
                    "beta": c.mode.causal_effect(),
                    "beta_t": float(c.mode.beta_t),
                    "log_sd_x": float(c.mode.log_sd_x),
                    "log_sd_y": float(c.mode.log_sd_y),
                    "gamma_x_t": float(c.mode.gamma_x_t),
                    "gamma_y_t": float(c.mode.gamma_y_t),
                    "floored_eigenvalues": int(c.floored),
                }
            )
        models.append(
            {
                "bitmask": str(wm.model),
                "log_evidence": wm.evidence.log_evidence,
                "log_model_prior": log_model_prior(wm.model, rate),
                "weight": wm.weight,
                "components": comps,
            }
        )
    lo, hi = run.interval(0.9)
    beta = run.samples.beta
    return {
        "tool": "massive",
        "version": __version__,
        "seed": run.config.seed,
        "input": input_meta,
        "config": config,
        "hyperparameters": {**run.hyper.to_dict(), "source": hyper_source},
        "search": {
            "greedy_model": str(run.greedy_model),
            "evaluated_models": len(run.trace.evaluated),
            "failed_models": sorted(str(m) for m in run.evidence_failures),
            "mc3_iterations": len(run.trace.chain) - 1,
            "mc3_accepted": run.trace.accepted_count,
            "pruned_models": len(models),
        },
        "models": models,
        "inclusion_probabilities": [float(p) for p in run.inclusion],
        "beta": {
            "count": int(beta.size),
            "median": run.median,
            "mean": float(np.mean(beta)),
            "sd": float(np.std(beta)),
            "interval_90": [lo, hi],
        },
    }


def cmd_fit(args) -> int:
    config = RunConfig(
        seed=args.seed,
        mc3_iters=args.mc3_iters,
        occam_ratio=args.occam_ratio,
        n_samples=args.samples,
        hyper_override=_hyper_override(args),
        model_prior_rate=args.model_prior_rate,
        weak_factor=args.weak_factor,
        threads=args.threads,
    )
    stats, meta = load_stats(args)
    run = run_massive(stats, config)
    doc = result_document(run, meta, "override" if config.hyper_override else "empirical")
    atomic_write_text(args.out, _json_text(doc))
    if args.samples_out:
        atomic_write_text(args.samples_out, _csv_text(["beta"], [[repr(float(b))] for b in run.samples.beta]))
    log.info("beta median %.6g, 90%% interval [%.6g, %.6g]", doc["beta"]["median"], *doc["beta"]["interval_90"])
    return 0


# --------------------------------------------------------------------------
# profile
# --------------------------------------------------------------------------


def parse_grid_axis(text: str) -> np.ndarray:
    """``"lo:hi:num"`` -> ``num`` evenly spaced values from lo to hi inclusive."""
    parts = text.split(":")
    if len(parts) != 3:
        raise UsageError(f"grid axis must look like lo:hi:num, got {text!r}")
    try:
        lo, hi, num = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError:
        raise UsageError(f"grid axis must look like lo:hi:num, got {text!r}") from None
    if num < 1 or not (math.isfinite(lo) and math.isfinite(hi)):
        raise UsageError(f"bad grid axis {text!r}")
    return np.linspace(lo, hi, num)


def cmd_profile(args) -> int:
    gx = parse_grid_axis(args.gamma_x)
    gy = parse_grid_axis(args.gamma_y)
    stats, _ = load_stats(args)
    try:
        model = ModelIndicator.from_string(args.model)
    except (PreconditionError, ValueError):
        raise UsageError(f"--model must be a bit string of 0/1, got {args.model!r}") from None
    if model.j != stats.j:
        raise UsageError(f"--model has {model.j} indicators but the data has J={stats.j}")
    override = _hyper_override(args)
    hyper = Hyperparams(*override) if override else empirical_hyperparams(stats, weak_factor=args.weak_factor)
    grid = np.stack(np.meshgrid(gx, gy, indexing="ij"), axis=-1)
    values = PosteriorProblem(stats, hyper).profile_grid(model, grid)
    rows = [
        [repr(float(grid[a, b, 0])), repr(float(grid[a, b, 1])), _num(values[a, b])]
        for a in range(gx.size)
        for b in range(gy.size)
    ]
    atomic_write_text(args.out, _csv_text(["gamma_x", "gamma_y", "log_posterior"], rows))
    return 0


# --------------------------------------------------------------------------
# benchmark
# --------------------------------------------------------------------------

_KNOWN_ESTIMATORS = ("massive", "ivw", "observational", "truth")


def load_benchmark_config(path) -> dict:
    """Read and check a benchmark JSON file.

    Expected keys: ``configs`` (list of simulation settings with n, j, k, beta,
    sigma and optionally ploidy, directional, gaussian_g), ``reps``, and
    optionally ``estimators``, ``master_seed``, ``resamples``, ``intercept``
    and ``run`` (RunConfig fields for the massive estimator).
    """
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(doc, dict) or "configs" not in doc or "reps" not in doc:
        raise ParseError(f"{path}: benchmark config needs 'configs' and 'reps'")
    estimators = doc.get("estimators", ["massive", "ivw", "observational"])
    unknown = [e for e in estimators if e not in _KNOWN_ESTIMATORS]
    if unknown:
        raise ParseError(f"{path}: unknown estimators {unknown}; choose from {_KNOWN_ESTIMATORS}")
    try:
        configs = [SimConfig(**{k: v for k, v in c.items() if k != "seed"}) for c in doc["configs"]]
        run = RunConfig(**{**doc.get("run", {}), "threads": 1})
    except TypeError as exc:
        raise ParseError(f"{path}: {exc}") from None
    return {
        "configs": configs,
        "reps": int(doc["reps"]),
        "estimators": list(estimators),
        "master_seed": int(doc.get("master_seed", 0)),
        "resamples": int(doc.get("resamples", 1000)),
        "intercept": bool(doc.get("intercept", False)),
        "run": run,
    }


def cmd_benchmark(args) -> int:
    spec = load_benchmark_config(args.config)
    available = default_estimators(spec["run"])
    available["truth"] = lambda stats, truth, seed: truth.beta
    estimators = {name: available[name] for name in spec["estimators"]}
    threads = args.threads or os.cpu_count() or 1
    with ThreadPoolExecutor(max_workers=threads) as pool:
        table = rmse_benchmark(
            spec["configs"],
            spec["reps"],
            estimators,
            master_seed=spec["master_seed"],
            resamples=spec["resamples"],
            intercept=spec["intercept"],
            map_fn=pool.map if threads > 1 else map,
        )
    rows = []
    for r in table:
        rows.append([r["n"], r["j"], r["k"], r["valid"], repr(float(r["beta"])), repr(float(r["sigma"])), r["estimator"],
                     _num(r["rmse"]), _num(r["ci_low"]), _num(r["ci_high"]), r["failures"]])
        log.info("n=%d j=%d k=%d sigma=%g %s: rmse %.4g", r["n"], r["j"], r["k"], r["sigma"], r["estimator"], r["rmse"])
    atomic_write_text(args.out, _csv_text(BENCHMARK_COLUMNS, rows))
    return 0


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="massive", description="Bayesian model averaging for Mendelian randomization.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="simulate a rows table from the linear structural model")
    p.add_argument("--n", type=int, required=True, help="number of observations")
    p.add_argument("--j", type=int, required=True, help="number of candidate instruments")
    p.add_argument("--k", type=int, default=0, help="candidates with a pleiotropic effect")
    p.add_argument("--beta", type=float, required=True, help="true causal effect")
    p.add_argument("--sigma", type=float, default=1.0, help="noise and confounding scale")
    p.add_argument("--ploidy", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--directional", action="store_true", help="make all pleiotropic effects positive")
    p.add_argument("--gaussian-g", action="store_true", help="draw continuous instead of binomial genotypes")
    p.add_argument("--out", required=True, help="rows CSV path")
    p.add_argument("--truth-out", help="truth JSON path (default: <out>.truth.json)")
    p.add_argument("--summary-out", help="also write per-variant regression summaries here")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="model search, BMA and posterior sampling")
    _add_input_args(p)
    _add_hyper_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mc3-iters", type=int, default=1000)
    p.add_argument("--occam-ratio", type=float, default=20.0)
    p.add_argument("--samples", type=int, default=100_000, help="posterior draws")
    p.add_argument("--model-prior-rate", type=float, default=0.5, help="prior slab probability per candidate")
    p.add_argument("--threads", type=int, help="worker threads (default: all cores)")
    p.add_argument("--out", required=True, help="result JSON path")
    p.add_argument("--samples-out", help="write the causal-effect draws as a one-column CSV")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("profile", help="profiled log-posterior over a confounding grid")
    _add_input_args(p)
    _add_hyper_args(p)
    p.add_argument("--model", required=True, help="indicator bit string, candidate 1 first, e.g. 0110")
    p.add_argument(
        "--gamma-x", default="-3:3:31", help="lo:hi:num; write --gamma-x=-3:3:31 for negative bounds (default: %(default)s)"
    )
    p.add_argument("--gamma-y", default="-3:3:31", help="lo:hi:num (default: %(default)s)")
    p.add_argument("--out", required=True, help="grid CSV path")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("benchmark", help="RMSE study over simulated replicates")
    p.add_argument("--config", required=True, help="benchmark JSON file")
    p.add_argument("--threads", type=int, help="replicates run concurrently (default: all cores)")
    p.add_argument("--out", required=True, help="RMSE CSV path")
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    if getattr(args, "threads", None) is not None and args.threads < 1:
        parser.error("--threads must be at least 1")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except MassiveError as exc:
        print(f"massive {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"massive {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
