"""Command-line front door.

Settings come from the defaults, then ``--config``, then ``--overrides``,
then ``--seed`` (later sources win).  Every verb writes its artifacts and a
``manifest.json`` into ``--out``.  Exit status: 0 success, 1 failure (with
``error.json``), 2 usage error.
"""

from __future__ import annotations

import csv
import json
import logging
import sys
from pathlib import Path

import click
import numpy as np

from . import harness
from .connection import canonical_connection, canonical_residuals, levi_civita
from .flow import FlowParams, rhs, run
from .linear import flat_handle, weitzenbock_residual
from .perturb import generate_perturbation
from .storage import (
    CONFIG_KEYS,
    ExperimentConfig,
    StorageError,
    load_config,
    parse_overrides,
    write_checkpoint,
    write_csv,
    write_json,
    write_manifest,
)
from .lattice import Lattice
from .structure import check_structure, standard_structure

log = logging.getLogger("ahcf")

IDENTITY_TOL = 1e-8
CANONICAL_POINTS = 16


class CommandFailure(RuntimeError):
    pass


def _config(ctx_obj: dict) -> ExperimentConfig:
    try:
        overrides = parse_overrides(ctx_obj["overrides"])
        if ctx_obj["seed"] is not None:
            overrides["seed"] = str(ctx_obj["seed"])
        return load_config(ctx_obj["config"], overrides)
    except (StorageError, ValueError, TypeError) as exc:
        raise click.UsageError(str(exc)) from exc


def _finish(out: Path, cfg: ExperimentConfig, artifacts: list[str], summary: dict, quiet: bool) -> None:
    write_manifest(out, cfg.to_dict(), artifacts)
    if not quiet:
        click.echo(json.dumps(summary, sort_keys=True))


_SHARED = ("config_path", "out_dir", "overrides", "seed", "quiet")


def _shared_options(fn):
    """The global flags, also accepted after the verb (they then take precedence)."""
    fn = click.option("--quiet", is_flag=True, default=None, help="suppress the summary line")(fn)
    fn = click.option("--seed", type=int, default=None, help="wins over config and overrides")(fn)
    fn = click.option("--overrides", default=None, help="k=v[,k=v...]; wins over the config file")(fn)
    fn = click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None, help="output directory")(fn)
    fn = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)(fn)
    return fn


def _guarded(fn):
    """Turn runtime failures into exit 1 with an ``error.json`` artifact."""

    @_shared_options
    @click.pass_context
    def wrapper(ctx, **kwargs):
        local = {k: kwargs.pop(k) for k in _SHARED}
        keys = {"config_path": "config", "out_dir": "out"}
        for k, v in local.items():
            if v is not None and v is not False:
                ctx.obj[keys.get(k, k)] = v
        try:
            return ctx.invoke(fn, **kwargs)
        except (click.UsageError, click.exceptions.Exit):
            raise
        except Exception as exc:
            err = {"error": type(exc).__name__, "message": str(exc), "command": ctx.info_name}
            out = Path(ctx.obj["out"])
            try:
                out.mkdir(parents=True, exist_ok=True)
                write_json(out / "error.json", err)
            except OSError:
                pass
            click.echo(json.dumps(err, sort_keys=True), err=True)
            ctx.exit(1)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@click.group(
    help=__doc__ + "\n\nConfig keys: " + ", ".join(CONFIG_KEYS) + ".\n\n"
    f"Thread count for sweeps: ${harness.THREADS_ENV} (default: all cores)."
)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="key = value config file")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="ahcf_out", show_default=True)
@click.option("--overrides", default=None, help="k=v[,k=v...]; wins over the config file")
@click.option("--seed", type=int, default=None, help="wins over config and overrides")
@click.option("--quiet", is_flag=True, help="suppress the summary line and progress logging")
@click.pass_context
def main(ctx, config_path, out_dir, overrides, seed, quiet):
    logging.basicConfig(level=logging.ERROR if quiet else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    ctx.ensure_object(dict)
    ctx.obj.update(config=config_path, out=out_dir, overrides=overrides, seed=seed, quiet=quiet)


def _out(ctx) -> Path:
    out = Path(ctx.obj["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


@main.command()
@_guarded
def simulate():
    """Full pipeline: generate, flow, fit, iterated re-centering."""
    ctx = click.get_current_context()
    cfg = _config(ctx.obj)
    out = _out(ctx)
    report = harness.run_experiment(cfg)
    artifacts = ["report.json"]
    write_json(out / "report.json", report.to_dict())
    if report.trajectory is not None:
        traj = report.trajectory
        write_csv(out / "trajectory.csv", traj.records, cfg.norm_order)
        write_checkpoint(out / "trajectory.ckpt", traj.times, [s.structure for s in traj.states], traj.records)
        artifacts += ["trajectory.csv", "trajectory.ckpt"]
    summary = {"status": report.status, "errors": report.errors}
    if report.decay is not None:
        summary["fit_rate"] = report.decay.fit_rate
    _finish(out, cfg, artifacts, summary, ctx.obj["quiet"])
    if report.status == "failed":
        raise CommandFailure("; ".join(report.errors))


@main.command("spectrum")
@click.option("--method", type=click.Choice(["auto", "dense", "iterative"]), default="auto", show_default=True)
@click.option("--count", type=int, default=None, help="eigenvalues for the iterative route")
@_guarded
def spectrum_cmd(method, count):
    """Spectrum of the linearized operator at the flat structure."""
    from .linear import spectrum

    ctx = click.get_current_context()
    cfg = _config(ctx.obj)
    out = _out(ctx)
    h = flat_handle(cfg.lattice(), cfg.s_param)
    if method == "auto" and count is None:
        rep = harness.experiment_spectrum(cfg)
    else:
        rep = spectrum(h, count=count, method=method, seed=cfg.seed)
    write_json(out / "spectrum.json", rep.to_dict())
    _finish(
        out,
        cfg,
        ["spectrum.json"],
        {"gap_lambda": rep.gap_lambda, "kernel_dimension": rep.kernel_dimension, "method": rep.method},
        ctx.obj["quiet"],
    )


def identity_table(cfg: ExperimentConfig) -> dict:
    """Residuals that must vanish: Weitzenböck identities, fixed point, structure compatibility."""
    lat = cfg.lattice()
    ref = standard_structure(lat)
    table = {}
    w = weitzenbock_residual(ref, trials=10, seed=cfg.seed)
    for key in ("hodge_11", "hodge_20_02", "dbar"):
        table[f"weitzenbock_{key}"] = getattr(w, key)
    d_omega, d_J = rhs(ref, FlowParams(dt=cfg.dt, gauge=cfg.gauge))
    table["fixed_point_rhs"] = float(max(np.abs(d_omega).max(), np.abs(d_J).max()))
    amp = min(cfg.amplitude, 1e-2) or 1e-2
    s = generate_perturbation(ref, amp, tuple(cfg.mode_band), cfg.seed, cfg.components)
    for key, val in check_structure(s).to_dict().items():
        if key != "min_eig_g":
            table[f"perturbed_{key}"] = val
    kahler = canonical_connection(ref, check=False)
    table["canonical_minus_levi_civita_flat"] = float(
        np.abs(kahler.coefficients - levi_civita(ref.g.data, lat).coefficients).max()
    )
    # the canonical residuals carry a spectral truncation floor of ~1e-7 at 12 points
    fine = Lattice(lat.n, max(lat.points_per_axis, CANONICAL_POINTS), lat.side_length)
    sf = generate_perturbation(standard_structure(fine), amp, tuple(cfg.mode_band), cfg.seed, cfg.components)
    for key, val in canonical_residuals(sf, canonical_connection(sf, check=False)).items():
        table[f"canonical_{key}"] = val
    return table


@main.command("verify-identities")
@click.option("--tol", type=float, default=IDENTITY_TOL, show_default=True)
@_guarded
def verify_identities(tol):
    """Residual table; exits 1 when any entry exceeds the tolerance."""
    ctx = click.get_current_context()
    cfg = _config(ctx.obj)
    out = _out(ctx)
    table = identity_table(cfg)
    failed = sorted(k for k, v in table.items() if not v <= tol)
    write_json(out / "identities.json", {"tolerance": tol, "residuals": table, "failed": failed})
    _finish(out, cfg, ["identities.json"], {"max_residual": max(table.values()), "failed": failed}, ctx.obj["quiet"])
    if failed:
        raise CommandFailure(f"residuals above {tol:g}: {', '.join(failed)}")


def _read_series(path: Path, column: str) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or column not in rows[0]:
        raise click.UsageError(f"{path} has no column {column!r}")
    t = np.array([float(r["t"]) for r in rows])
    v = np.array([float(r[column]) for r in rows])
    return t, v


@main.command("decay-fit")
@click.option("--series", "series_path", type=click.Path(exists=True, dir_okay=False), help="CSV written by simulate")
@click.option("--column", default="psi_l2", show_default=True)
@click.option("--window", nargs=2, type=float, default=None, help="t_start t_end (default: skip the first fraction)")
@click.option("--fraction", type=float, default=0.8, show_default=True, help="verdict threshold relative to the gap")
@_guarded
def decay_fit_cmd(series_path, column, window, fraction):
    """Fit an exponential rate to a norm series (runs the flow when no CSV is given)."""
    ctx = click.get_current_context()
    cfg = _config(ctx.obj)
    out = _out(ctx)
    artifacts = []
    if series_path:
        t, v = _read_series(Path(series_path), column)
    else:
        lat = cfg.lattice()
        ref = standard_structure(lat)
        s0 = generate_perturbation(ref, cfg.amplitude, tuple(cfg.mode_band), cfg.seed, cfg.components)
        traj = run(s0, FlowParams(dt=cfg.dt, gauge=cfg.gauge), cfg.t_end, cfg.record_every, ref, cfg.norm_order)
        harness.attach_pi0(traj, ref)
        write_csv(out / "trajectory.csv", traj.records, cfg.norm_order)
        artifacts.append("trajectory.csv")
        t, v = traj.times, traj.series(column)
    gap = harness.experiment_spectrum(cfg).gap_lambda
    if not window:
        window = (cfg.fit_window_fraction * t[-1], t[-1])
    rep = harness.decay_fit(t, v, tuple(window), gap, fraction)
    write_json(out / "decay.json", rep.to_dict())
    artifacts.append("decay.json")
    _finish(out, cfg, artifacts, rep.to_dict(), ctx.obj["quiet"])


@main.command("recenter")
@click.option("--t0", type=float, default=None, help="re-centering time (default: recenter_T, else 3/gap)")
@click.option("--interval", type=float, default=2.0, show_default=True)
@_guarded
def recenter_cmd(t0, interval):
    """Re-center on the flat family at t0 and track the kernel fraction over an interval."""
    ctx = click.get_current_context()
    cfg = _config(ctx.obj)
    out = _out(ctx)
    lat = cfg.lattice()
    ref = standard_structure(lat)
    if t0 is None:
        t0 = cfg.recenter_T if cfg.recenter_T > 0 else 3.0 / harness.experiment_spectrum(cfg).gap_lambda
    s0 = generate_perturbation(ref, cfg.amplitude, tuple(cfg.mode_band), cfg.seed, cfg.components)
    t_end = max(cfg.t_end, t0 + interval)
    t_end = round(t_end / cfg.dt) * cfg.dt
    traj = run(s0, FlowParams(dt=cfg.dt, gauge=cfg.gauge), t_end, cfg.record_every, ref, cfg.norm_order)
    if traj.failure:
        raise CommandFailure(traj.failure)
    rec = harness.recenter(traj, t0, interval=interval, k=cfg.norm_order)
    write_json(out / "recenter.json", rec.to_dict())
    summary = {
        "pi0_ratio_at_t0": rec.pi0_ratio_at_t0,
        "max_pi0_ratio": float(rec.pi0_ratio_series.max()),
        "neighborhood_ratio": rec.neighborhood_ratio,
    }
    _finish(out, cfg, ["recenter.json"], summary, ctx.obj["quiet"])


@main.command()
@click.option("--amplitudes", default="0.01,0.005,0.0025", show_default=True)
@click.option("--T", "horizon", type=float, default=3.0, show_default=True)
@click.option("--k", "order", type=int, default=2, show_default=True)
@_guarded
def sweep(amplitudes, horizon, order):
    """Start-close/stay-close amplitude sweep."""
    ctx = click.get_current_context()
    cfg = _config(ctx.obj)
    out = _out(ctx)
    try:
        amps = [float(a) for a in amplitudes.split(",") if a.strip()]
    except ValueError as exc:
        raise click.UsageError(f"bad --amplitudes: {exc}") from exc
    rep = harness.start_close_stay_close(amps, horizon, order, cfg)
    write_json(out / "sweep.json", rep.to_dict())
    _finish(out, cfg, ["sweep.json"], rep.to_dict(), ctx.obj["quiet"])


if __name__ == "__main__":
    sys.exit(main())
