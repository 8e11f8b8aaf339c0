"""Command-line entry point: ``dwts {synth,ddl,run,clinical,plot}``.

Every subcommand prints one JSON summary line on standard output. Logs go to
standard error. Exit status is 2 for flag or configuration problems and 3 for
failures while running.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

log = logging.getLogger("dwts")


class ConfigError(Exception):
    pass


def _load_json(path, what: str) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"{what} not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{what} {path} must hold a JSON object")
    return data


def _build(factory, *args, **kw):
    try:
        return factory(*args, **kw)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from None


def _jobs(n: int | None) -> int:
    return n if n else (os.cpu_count() or 1)


def cmd_synth(args) -> dict:
    from .synth import SemConfig, build_true_params, generate_dataset

    if not args.config:
        raise ConfigError("synth needs --config")
    data = _load_json(args.config, "SemConfig")
    if args.seed is not None:
        data["seed"] = args.seed
    cfg = _build(SemConfig.from_dict, data)
    out = Path(args.out or "offline.csv")
    root = np.random.SeedSequence([cfg.seed])
    params_ss, data_ss = root.spawn(2)
    params = build_true_params(cfg, np.random.default_rng(params_ss))
    ds = generate_dataset(cfg, params, np.random.default_rng(data_ss))
    out.parent.mkdir(parents=True, exist_ok=True)
    ds.to_csv(out)
    truth = out.with_suffix(".params.json")
    truth.write_text(json.dumps({
        "config": cfg.to_dict(),
        "arms": [{"arm": a + 1, "theta_star": pa.theta_star.tolist(), "phi_star": pa.phi_star.tolist(),
                  "psi_star": pa.psi_star.tolist()} for a, pa in enumerate(params)],
    }, indent=2) + "\n", encoding="utf-8")
    return {"command": "synth", "csv": str(out), "params": str(truth), "K": cfg.K, "p": cfg.p,
            "rows": cfg.K * cfg.n_per_arm}


def cmd_ddl(args) -> dict:
    from .deconfound import DdlOptions, ddl_fit
    from .synth import OfflineDataset

    if not args.input:
        raise ConfigError("ddl needs --input")
    opts = _build(DdlOptions, **(_load_json(args.config, "DDL options") if args.config else {}))
    try:
        ds = OfflineDataset.from_csv(args.input)
    except FileNotFoundError:
        raise ConfigError(f"input not found: {args.input}") from None
    arms = [a - 1 for a in args.arm] if args.arm else list(ds.arm_ids)
    missing = [a + 1 for a in arms if a not in ds.arm_ids]
    if missing:
        raise ConfigError(f"arms {missing} absent from {args.input}")
    seed = 0 if args.seed is None else args.seed
    results = []
    for a in arms:
        Z, y = ds.block(a)
        est = ddl_fit(Z, y, opts, rng=np.random.SeedSequence([seed, a]))
        lo, hi = est.confidence_interval(args.alpha)
        d = est.to_dict()
        d["arm"] = a + 1
        d["ci_low"] = [float(v) if np.isfinite(v) else None for v in lo]
        d["ci_high"] = [float(v) if np.isfinite(v) else None for v in hi]
        results.append(d)
    if args.out:
        Path(args.out).write_text(json.dumps(results, indent=2) + "\n", encoding="utf-8")
    return {"command": "ddl", "input": str(args.input), "estimates": results}


def cmd_run(args) -> dict:
    from .harness import ExperimentConfig, run_suite

    if not args.config:
        raise ConfigError("run needs --config")
    data = _load_json(args.config, "experiment config")
    if args.seed is not None:
        data["base_seed"] = args.seed
    cfg = _build(ExperimentConfig.from_dict, data)
    t0 = time.perf_counter()
    manifest = run_suite(cfg, _jobs(args.jobs), args.out)
    medians = {}
    out = Path(args.out or cfg.output_dir)
    for cell in manifest["cells"]:
        if cell["csv"]:
            medians[f"p{cell['p']}/{cell['policy']}"] = _final_median(out / cell["csv"])
    if manifest["failed"]:
        raise RuntimeError(f"some replications failed; see {out / 'manifest.json'}")
    return {"command": "run", "out": str(out), "config_sha256": manifest["config_sha256"],
            "final_median_regret": medians, "wall_clock_s": round(time.perf_counter() - t0, 3)}


def _final_median(path) -> float:
    from .harness import read_results_csv

    tab = read_results_csv(path)[0]
    return float(tab.values[-1, len(tab.quantiles) // 2])


def cmd_clinical(args) -> dict:
    from .clinical import RiskModel, VirtualTrialConfig, ingest_csv, run_clinical_experiment, synth_patients

    if (args.patients is None) == (args.synthetic is None):
        raise ConfigError("give exactly one of --patients or --synthetic")
    data = _load_json(args.config, "trial config") if args.config else {}
    if args.seed is not None:
        data["seed"] = args.seed
    if args.synthetic is not None:
        if args.synthetic < 1:
            raise ConfigError("--synthetic must be at least 1")
        data["n_synthetic"] = args.synthetic
    cfg = _build(VirtualTrialConfig.from_dict, data)
    model = RiskModel()
    if args.risk_table:
        model = _build(RiskModel, "coefficient_table", _load_json(args.risk_table, "risk table"), 0.0)
    if args.patients:
        if not Path(args.patients).exists():
            raise ConfigError(f"patients file not found: {args.patients}")
        patients = ingest_csv(args.patients)
        rejected = len(patients.rejected)
    else:
        patients = synth_patients(cfg.n_synthetic, rng=np.random.SeedSequence([cfg.seed, 2**32]))
        rejected = 0
    out = Path(args.out or "clinical")
    res = run_clinical_experiment(cfg, patients, model, out, _jobs(args.jobs))
    medians = {k: float(np.median([tr.cumulative[-1] for tr in trs])) for k, trs in res.traces.items()}
    return {"command": "clinical", "out": str(out), "patients": len(patients), "rejected": rejected,
            "final_median_regret": medians}


def cmd_plot(args) -> dict:
    from .harness import read_results_csv, render_regret_svg

    if not args.input:
        raise ConfigError("plot needs at least one --input")
    style = _load_json(args.config, "style") if args.config else {}
    tables = []
    for path in args.input:
        try:
            tables.extend(read_results_csv(path))
        except FileNotFoundError:
            raise ConfigError(f"input not found: {path}") from None
    out = Path(args.out or "regret.svg")
    render_regret_svg(tables, out, style)
    return {"command": "plot", "svg": str(out), "policies": [t.policy for t in tables]}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dwts", description="Deconfounded warm-start Thompson sampling simulator.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more log output on stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{synth,ddl,run,clinical,plot}")

    def common(p, config_help, out_help):
        p.add_argument("--config", help=config_help)
        p.add_argument("--out", help=out_help)
        p.add_argument("--seed", type=int, help="seed overriding the one in the config")

    p = sub.add_parser("synth", help="generate a confounded offline CSV")
    common(p, "SemConfig JSON file", "output CSV path (default offline.csv); true parameters go to <out>.params.json")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ddl", help="fit doubly debiased lasso estimates from an offline CSV")
    common(p, "optional JSON of DDL options", "optional JSON file for the estimates")
    p.add_argument("action", nargs="?", choices=["fit"], default="fit", help="what to do (only 'fit')")
    p.add_argument("--input", help="offline CSV (columns arm, z_1..z_p, y)")
    p.add_argument("--arm", type=int, action="append", help="1-based arm to fit; repeatable; default all")
    p.add_argument("--alpha", type=float, default=0.05, help="confidence level is 1 - alpha (default 0.05)")
    p.set_defaults(func=cmd_ddl)

    p = sub.add_parser("run", help="run a synthetic regret suite")
    common(p, "ExperimentConfig JSON file", "output directory (default: output_dir from the config)")
    p.add_argument("--jobs", type=int, help="parallel replications (default: all cores)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("clinical", help="run the virtual clinical trial")
    common(p, "optional VirtualTrialConfig JSON file", "output directory (default clinical)")
    p.add_argument("--patients", help="patient CSV following docs/schema.md")
    p.add_argument("--synthetic", type=int, help="generate this many calibrated synthetic patients instead")
    p.add_argument("--risk-table", help="JSON coefficient table; default is the logistic surrogate")
    p.add_argument("--jobs", type=int, help="parallel replications (default: all cores)")
    p.set_defaults(func=cmd_clinical)

    p = sub.add_parser("plot", help="render regret quantile CSVs to one SVG")
    common(p, "optional style JSON (title, colors, figsize, band_alpha)", "output SVG path (default regret.svg)")
    p.add_argument("--input", "--in", dest="input", action="append", help="quantile CSV; repeatable")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = args.func(args)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"dwts {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as a structured failure
        log.debug("failure", exc_info=True)
        print(json.dumps({"command": args.command, "error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 3
    print(json.dumps(summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
