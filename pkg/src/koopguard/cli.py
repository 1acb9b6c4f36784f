"""Command line front end.

Every subcommand reads one YAML config (``--config``) and writes to
``--out``.  Exit codes: 0 success, 2 invalid config, 3 unreadable or
malformed input data, 4 runtime failure.
"""
from __future__ import annotations

import json
import sys
from pathlib import Path
from typing import Optional

import click
import numpy as np
from pydantic import Field

from . import gpr, harness
from .pack_sim import CellParams, OcvSocMap, build_ocv_soc_map
from .regions import DEFAULT_EDGES, REPAIRED_EDGE, curvature_nodes, derive_regions
from .telemetry import TelemetryError, write_stream

EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_RUNTIME = 4


class DeriveRegionsCfg(harness._Model):
    cell: harness.CellCfg = Field(default_factory=harness.CellCfg)
    ocv_csv: Optional[str] = None
    resolution: int = Field(1001, ge=200)
    smoothing: int = Field(5, ge=1)


def _fail(code, msg):
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


def _guard(fn):
    """Map library exceptions onto the documented exit codes."""
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except harness.ConfigError as exc:
            _fail(EXIT_CONFIG, f"invalid config: {exc}")
        except (gpr.BankFormatError, TelemetryError, FileNotFoundError) as exc:
            _fail(EXIT_INPUT, str(exc))
        except Exception as exc:
            _fail(EXIT_RUNTIME, f"{type(exc).__name__}: {exc}")
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _options(fn):
    fn = click.option("--out", "out", required=True, type=click.Path(path_type=Path),
                      help="Output path.")(fn)
    fn = click.option("--config", "config", required=True,
                      type=click.Path(exists=True, dir_okay=False, path_type=Path),
                      help="YAML config file.")(fn)
    return fn


@click.group()
@click.version_option(package_name="koopguard")
def main():
    """Secure Koopman voltage estimation for battery packs."""


@main.command()
@_options
@_guard
def simulate(config, out):
    """Simulate the scenario's pack and write its telemetry CSV (attack-free)."""
    cfg = harness.load_config(config)
    stream = harness.simulate(cfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_stream(stream, out)
    click.echo(f"{len(stream)} frames, status {stream.status} -> {out}")


@main.command("train-gpr")
@_options
@_guard
def train_gpr(config, out):
    """Harvest shadow Stage-I rows on nominal runs and write a GPR bank."""
    cfg = harness.load_config(config, harness.TrainGprCfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    bank = harness.train_gpr_command(cfg, out)
    click.echo(f"{len(bank.models)} models, {len(bank.fallback)} fallbacks -> {out} "
               f"(sha256 {harness.file_checksum(out)[:12]})")


@main.command()
@_options
@_guard
def run(config, out):
    """Run one scenario; writes samples.csv and report.json into the --out directory."""
    cfg = harness.load_config(config)
    result = harness.run_scenario(cfg)
    harness.write_run(result, out)
    rep = result.report
    click.echo(f"trigger {rep.trigger_time_s} s, max RMSE {max(rep.rmse_v):.4f} V, "
               f"{rep.mean_step_ms:.3f} ms/sample -> {out}")


@main.command()
@_options
@_guard
def montecarlo(config, out):
    """Seeded Monte Carlo sweep; writes aggregate.csv, runs.csv and violin.csv."""
    cfg = harness.load_config(config, harness.MonteCarloCfg)
    agg, raw = harness.monte_carlo(cfg, out)
    failed = sum(a["failed"] for a in agg)
    click.echo(f"{len(raw)} run rows, {failed} failed method runs -> {out}")


@main.command("derive-regions")
@_options
@_guard
def derive_regions_cmd(config, out):
    """Derive SOC region boundaries from an OCV-SOC map and compare with the default table."""
    cfg = harness.load_config(config, DeriveRegionsCfg)
    if cfg.ocv_csv:
        try:
            ocv = OcvSocMap.from_csv(cfg.ocv_csv)
        except (OSError, ValueError) as exc:
            raise TelemetryError(f"cannot read OCV map: {exc}") from None
    else:
        c = cfg.cell
        ocv = build_ocv_soc_map(CellParams(capacity_ah=c.capacity_ah, r0=c.r0, r1=c.r1,
                                           c1=c.c1), cfg.resolution)
    d2, d3 = curvature_nodes(ocv, cfg.smoothing)
    bounds = derive_regions(ocv, cfg.smoothing)
    table = list(DEFAULT_EDGES[1:-1])
    table[11] = REPAIRED_EDGE
    doc = {"boundaries": bounds, "d2_zeros": d2, "d3_zeros": d3, "default_table": table}
    if len(bounds) == len(table):
        doc["max_deviation"] = float(np.max(np.abs(np.subtract(bounds, table))))
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(doc, indent=2))
    click.echo(f"{len(bounds)} boundaries -> {out}")


if __name__ == "__main__":
    main()
