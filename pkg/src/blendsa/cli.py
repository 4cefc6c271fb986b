"""Command-line front end.

Exit codes: 0 success, 2 configuration or usage error, 3 numerical failure,
4 sweep finished with some failed cells.
"""

from __future__ import annotations

import json
import platform
import sys
from pathlib import Path

import click
import numpy as np
import scipy

from . import __version__, sim
from ._parallel import resolve_threads
from .config import ConfigError, RunConfig, config_digest, load_config
from .engine import as_delta, run_blended
from .errors import BlendsaError, NumericalError
from .heatmap import sweep_heatmap
from .inference import bootstrap_mi
from .sweep import conditional_sweep, default_grid, full_grid_size, parse_grid, sweep_grid, tipping_point, write_sweep
from .tabular import ColumnSchema, ColumnTable, write_csv, write_schema

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_PARTIAL = 0, 2, 3, 4


class _Exit(Exception):
    def __init__(self, code, message=""):
        super().__init__(message)
        self.code = code


def _versions():
    return {
        "blendsa": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
    }


def _write_table(table: ColumnTable, out: Path, name: str, written: list):
    write_csv(table, out / name)
    write_schema(table.schema, out / f"{name}.schema.json")
    written += [name, f"{name}.schema.json"]


def _manifest(out: Path, command, digest, seed, written, extra=None):
    doc = {
        "command": command,
        "config_sha256": digest,
        "seed": seed,
        "versions": _versions(),
        "outputs": sorted(written),
    }
    if extra:
        doc.update(extra)
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _outdir(cfg_out, flag_out) -> Path:
    out = Path(flag_out) if flag_out else cfg_out
    if out is None:
        raise ConfigError("no output directory: give --out or set 'out'", "/out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _run(fn, *args, **kw):
    try:
        code = fn(*args, **kw)
    except _Exit as exc:
        if str(exc):
            click.echo(f"error: {exc}", err=True)
        sys.exit(exc.code)
    except NumericalError as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        sys.exit(EXIT_NUMERIC)
    except (BlendsaError, ValueError, KeyError) as exc:
        click.echo(f"configuration error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    sys.exit(code or EXIT_OK)


threads_option = click.option(
    "--threads", type=click.IntRange(min=1), default=None, envvar="BLENDSA_THREADS",
    help="Worker processes (results do not depend on it).",
)


@click.group()
@click.version_option(__version__)
def main():
    """Blended IPW/MI analysis with delta-adjusted sensitivity analysis."""


# ---------------------------------------------------------------- simulate


@main.command()
@click.option("--scenario", type=click.Choice(["1", "2"]), default="1", show_default=True)
@click.option("--assignment", type=click.Choice(sim.ASSIGNMENTS), default="III", show_default=True)
@click.option("--delta-grid", default="-2:2:0.1", show_default=True, help="lo:hi:step or comma list.")
@click.option("--reps", type=click.IntRange(min=1), default=200, show_default=True)
@click.option("--n", "n", type=click.IntRange(min=1), default=1000, show_default=True)
@click.option("--M", "M", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--coverage-B", "coverage_B", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--seed", type=click.IntRange(min=0), required=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--gen-only", is_flag=True, help="Write one generated data set instead of running the study.")
@click.option("--durable-like", is_flag=True, help="With --gen-only: generate the five-mechanism cohort.")
@threads_option
def simulate(scenario, assignment, delta_grid, reps, n, M, coverage_B, seed, out, gen_only, durable_like, threads):
    """Generate scenario data or run the bias/coverage study."""
    _run(_simulate, int(scenario), assignment, delta_grid, reps, n, M, coverage_B, seed, Path(out), gen_only,
         durable_like, threads)


def _simulate(scenario, assignment, delta_grid, reps, n, M, coverage_B, seed, out, gen_only, durable_like, threads):
    out.mkdir(parents=True, exist_ok=True)
    args = {
        "scenario": scenario, "assignment": assignment, "delta_grid": delta_grid, "reps": reps, "n": n,
        "M": M, "coverage_B": coverage_B, "seed": seed, "gen_only": gen_only, "durable_like": durable_like,
    }
    written: list = []
    if durable_like and not gen_only:
        raise click.UsageError("--durable-like requires --gen-only")
    if gen_only:
        if durable_like:
            table, latent = sim.generate_durable_like(n, seed)
            spec_obj = sim.durable_like_spec().source
        else:
            cfg = sim.ScenarioConfig(n=n, delta_gen=sim.SCENARIO_GENERATOR[scenario], seed=seed)
            table, latent = sim.generate_scenario(cfg)
            spec_obj = sim.scenario_spec(assignment).source
            _write_table(sim.latent_table(latent), out, "latent.csv", written)
        _write_table(table, out, "data.csv", written)
        with open(out / "spec.json", "w", encoding="utf-8") as fh:
            json.dump(spec_obj, fh, indent=2)
            fh.write("\n")
        written.append("spec.json")
    else:
        grid = parse_grid(delta_grid)
        reports = sim.run_scenario(scenario, assignment, grid, n=n, n_reps=reps, M=M, seed=seed,
                                   coverage_B=coverage_B, threads=resolve_threads(threads))
        _write_table(sim.bias_table(reports), out, "bias.csv", written)
    _manifest(out, "simulate", config_digest(args), seed, written, {"arguments": args})
    return EXIT_OK


# ---------------------------------------------------------------- analyze


@main.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), default=None)
@threads_option
def analyze(config, out, threads):
    """Blended estimate at a fixed delta, with Bootstrap-MI intervals when B > 0."""
    _run(_analyze, config, out, threads)


ESTIMATE_COLUMNS = ("estimate", "ci_lo", "ci_hi", "ess_min", "analysis_n", "failed_replicates")


def _analyze(config, out, threads):
    cfg = load_config(config)
    out = _outdir(cfg.out, out)
    threads = resolve_threads(threads or cfg.threads)
    delta = as_delta(cfg.spec, cfg.raw.get("delta"))
    fit = run_blended(cfg.table, cfg.spec, delta, M=cfg.M, seed=cfg.seed, weight_cap=cfg.weight_cap)
    lo = hi = np.full(len(fit.coef_names), np.nan)
    failed = 0
    if cfg.B > 0:
        br = bootstrap_mi(cfg.table, cfg.spec, delta, B=cfg.B, M=cfg.M, alpha=cfg.alpha, seed=cfg.seed,
                          threads=threads, weight_cap=cfg.weight_cap, point=fit)
        lo, hi, failed = br.ci_lower, br.ci_upper, br.n_failed
    names = fit.coef_names
    schema = {"coef": ColumnSchema("categorical", names, names[0])}
    schema.update({c: ColumnSchema("continuous") for c in ESTIMATE_COLUMNS})
    p = len(names)
    est = ColumnTable.from_arrays(
        {
            "coef": list(names),
            "estimate": fit.theta_hat,
            "ci_lo": lo,
            "ci_hi": hi,
            "ess_min": np.full(p, float(np.min(fit.ess))),
            "analysis_n": np.full(p, float(fit.analysis_n)),
            "failed_replicates": np.full(p, float(failed)),
        },
        schema,
    )
    written: list = []
    _write_table(est, out, "estimates.csv", written)
    if fit.weight_diagnostics:
        mechs = tuple(fit.weight_diagnostics)
        diag = ColumnTable.from_arrays(
            {
                "mechanism": list(mechs),
                "min_pi": [fit.weight_diagnostics[m].min_pi for m in mechs],
                "max_w": [fit.weight_diagnostics[m].max_w for m in mechs],
                "ess": [fit.weight_diagnostics[m].ess for m in mechs],
            },
            {
                "mechanism": ColumnSchema("categorical", mechs, mechs[0]),
                "min_pi": ColumnSchema("continuous"),
                "max_w": ColumnSchema("continuous"),
                "ess": ColumnSchema("continuous"),
            },
        )
        _write_table(diag, out, "weights.csv", written)
    _manifest(out, "analyze", cfg.digest, cfg.seed, written, {"warnings": list(fit.warnings)})
    return EXIT_OK


# ---------------------------------------------------------------- sweep


def _axes(cfg: RunConfig) -> dict:
    axes = cfg.raw.get("axes")
    if not axes:
        raise ConfigError("sweep needs 'axes' (mechanism -> grid)", "/axes")
    out = {}
    for name, g in axes.items():
        try:
            k = cfg.spec.index(name)
        except BlendsaError:
            raise ConfigError(f"no mechanism named {name!r}", f"/axes/{name}") from None
        out[k] = parse_grid(g) if isinstance(g, str) else np.asarray(g, dtype=np.float64)
    return out


@main.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), default=None)
@click.option("--full-grid", is_flag=True, help="Allow more than two varied axes.")
@threads_option
def sweep(config, out, full_grid, threads):
    """Conditional or two-way sensitivity sweep; two-way sweeps also get SVG heat maps."""
    _run(_sweep, config, out, full_grid, threads)


def _sweep(config, out, full_grid, threads):
    cfg = load_config(config)
    axes = _axes(cfg)
    if len(axes) > 2 and not (full_grid or cfg.full_grid):
        n = full_grid_size(cfg.spec, axes)
        raise _Exit(EXIT_CONFIG, f"{len(axes)} varied axes span {n} cells; rerun with --full-grid to proceed")
    out = _outdir(cfg.out, out)
    threads = resolve_threads(threads or cfg.threads)
    res = sweep_grid(cfg.table, cfg.spec, axes, M=cfg.M, seed=cfg.seed, per_cell_B=cfg.per_cell_ci,
                     alpha=cfg.alpha, threads=threads, weight_cap=cfg.weight_cap)
    written = ["sweep.csv", "sweep.csv.schema.json"]
    write_sweep(res, out / "sweep.csv")
    if len(res.axes) == 2:
        for j, coef in enumerate(res.coef_names):
            name = f"heatmap_{j}.svg"
            (out / name).write_text(sweep_heatmap(res, coef), encoding="utf-8")
            written.append(name)
    failed = [
        {"delta": [float(v) for v in c.delta], "error": c.error} for c in res.cells if not c.ok
    ]
    _manifest(out, "sweep", cfg.digest, cfg.seed, written, {"failed_cells": failed})
    if failed:
        click.echo(f"{len(failed)} of {len(res.cells)} cells failed; see sweep.csv", err=True)
        return EXIT_PARTIAL
    return EXIT_OK


# ---------------------------------------------------------------- diagnose


@main.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), default=None)
@threads_option
def diagnose(config, out, threads):
    """Connecting quantities over a delta grid for one mechanism."""
    _run(_diagnose, config, out, threads)


def _diagnose(config, out, threads):
    cfg = load_config(config)
    if "mechanism" not in cfg.raw:
        raise ConfigError("diagnose needs 'mechanism'", "/mechanism")
    k = cfg.spec.index(cfg.raw["mechanism"])
    mech = cfg.spec.mechanisms[k]
    if mech.method not in ("IPW", "MI") or mech.is_decision:
        raise click.UsageError(f"mechanism {mech.name} is handled by {mech.method}; diagnose needs IPW or MI")
    if mech.method == "IPW" and mech.sensitivity_column is None:
        raise click.UsageError(f"mechanism {mech.name} has no sensitivity column")
    g = cfg.raw.get("grid")
    grid = default_grid(cfg.spec, k) if g is None else (parse_grid(g) if isinstance(g, str) else np.asarray(g))
    out = _outdir(cfg.out, out)
    res = conditional_sweep(cfg.table, cfg.spec, k, grid, M=cfg.M, seed=cfg.seed,
                            threads=resolve_threads(threads or cfg.threads), weight_cap=cfg.weight_cap)
    grid = res.axes[0][1]
    vals = np.array([c.connecting.get(mech.name, np.nan) for c in res.cells])
    anchor = vals[int(np.flatnonzero(grid == 0.0)[0])]
    if mech.method == "MI":
        first = next((v for v in mech.variables if cfg.table[v].kind != "categorical"), None)
        kind = "probability" if first and cfg.table[first].kind == "binary" else "mean"
    else:
        kind = "probability" if cfg.table[mech.sensitivity_column].kind == "binary" else "mean"
    cols = {"delta": grid, "connecting": vals, "shift": vals - anchor}
    schema = {"delta": ColumnSchema("continuous"), "connecting": ColumnSchema("continuous"),
              "shift": ColumnSchema("continuous")}
    # a continuous shift moves the imputed mean by exactly delta
    if mech.method == "MI" and kind == "mean":
        cols["expected_shift"] = grid.copy()
        schema["expected_shift"] = ColumnSchema("continuous")
    written: list = []
    _write_table(ColumnTable.from_arrays(cols, schema), out, "diagnose.csv", written)
    _manifest(out, "diagnose", cfg.digest, cfg.seed, written,
              {"mechanism": mech.name, "method": mech.method, "quantity": kind,
               "assumption": "covariate distribution among R = 0 rows does not depend on delta"})
    return EXIT_PARTIAL if res.n_failed else EXIT_OK


# ---------------------------------------------------------------- tipping


@main.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(file_okay=False), default=None)
@threads_option
def tipping(config, out, threads):
    """Smallest |delta| at which a coefficient's significance flips."""
    _run(_tipping, config, out, threads)


def _tipping(config, out, threads):
    cfg = load_config(config)
    for key in ("mechanism", "coefficient"):
        if key not in cfg.raw:
            raise ConfigError(f"tipping needs '{key}'", f"/{key}")
    k = cfg.spec.index(cfg.raw["mechanism"])
    interval = tuple(cfg.raw.get("search_interval", (-2.0, 2.0)))
    out = _outdir(cfg.out, out)
    probes: list = []
    d = tipping_point(cfg.table, cfg.spec, k, cfg.raw["coefficient"], interval, B=max(cfg.B, 1), M=cfg.M,
                      seed=cfg.seed, alpha=cfg.alpha, threads=resolve_threads(threads or cfg.threads), trace=probes)
    written: list = []
    table = ColumnTable.from_arrays(
        {
            "delta": [p.delta for p in probes],
            "ci_lo": [p.lower for p in probes],
            "ci_hi": [p.upper for p in probes],
            "significant": [float(p.significant) for p in probes],
        },
        {"delta": ColumnSchema("continuous"), "ci_lo": ColumnSchema("continuous"),
         "ci_hi": ColumnSchema("continuous"), "significant": ColumnSchema("binary")},
    )
    _write_table(table, out, "tipping_probes.csv", written)
    _manifest(out, "tipping", cfg.digest, cfg.seed, written,
              {"mechanism": cfg.spec.mechanisms[k].name, "coefficient": cfg.raw["coefficient"],
               "tipping_point": d, "search_interval": list(interval)})
    click.echo("none" if d is None else f"{d:g}")
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    main()
