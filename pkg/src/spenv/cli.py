"""Command-line interface.

Subcommands: fit, predict, simulate, compare, diagnose. All randomness is
seeded, outputs are written atomically, and a flat key-value YAML config
file can supply any long option (explicit flags win). Exit codes: 0 on
success, 2 for bad input or schema problems, 3 for numerical failures.
"""

import csv
import json
import os
import sys
import tempfile

import click
import numpy as np
import yaml

from . import __version__
from .envopt import EnvelopeFit, EnvelopeParams, OptimizerConfig, fit, select_u
from .evalsim import METHODS, SimConfig, compare, simulate
from .model import RankDeficientError, SpatialDataset
from .predict import predict, predict_grid
from .spatialcov import (MaternModel, NotPositiveDefiniteError,
                         empirical_variogram, morans_i)

SCHEMA_VERSION = 1
EXIT_USER = 2
EXIT_NUMERIC = 3


class UserInputError(ValueError):
    pass


# ---------------------------------------------------------------------------
# small IO helpers
# ---------------------------------------------------------------------------

def atomic_write(path, text):
    """Write a file via a temporary sibling and an atomic rename."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, payload):
    atomic_write(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_csv(path, header, rows):
    import io

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    atomic_write(path, buf.getvalue())


def _parse_cols(spec_str):
    return [c.strip() for c in str(spec_str).split(",") if c.strip()]


def load_dataset(path, loc_cols, response_cols, covariate_cols):
    try:
        with open(path, newline="") as handle:
            reader = csv.DictReader(handle)
            if reader.fieldnames is None:
                raise UserInputError(f"{path}: empty file")
            missing = [c for c in loc_cols + response_cols + covariate_cols
                       if c not in reader.fieldnames]
            if missing:
                raise UserInputError(
                    f"{path}: missing columns {missing}; found "
                    f"{reader.fieldnames}")
            rows = list(reader)
    except OSError as exc:
        raise UserInputError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise UserInputError(f"{path}: no data rows")

    def grab(cols):
        out = np.empty((len(rows), len(cols)))
        for i, row in enumerate(rows):
            for j, col in enumerate(cols):
                cell = row[col]
                try:
                    out[i, j] = float(cell)
                except (TypeError, ValueError):
                    raise UserInputError(
                        f"{path}: row {i + 2}, column {col!r}: "
                        f"cannot parse {cell!r} as a number") from None
        return out

    try:
        return SpatialDataset(loc=grab(loc_cols), Y=grab(response_cols),
                              X=grab(covariate_cols),
                              response_names=tuple(response_cols),
                              covariate_names=tuple(covariate_cols))
    except ValueError as exc:
        raise UserInputError(str(exc)) from exc


def _arr(a):
    return np.asarray(a, dtype=float).tolist()


def fit_to_report(fitres, ds, seed):
    theta = fitres.params.theta
    return {
        "schema_version": SCHEMA_VERSION,
        "software_version": __version__,
        "seed": seed,
        "data": {
            "n": ds.n, "r": ds.r, "p": ds.p,
            "loc": _arr(ds.loc), "Y": _arr(ds.Y), "X": _arr(ds.X),
            "response_names": list(ds.response_names),
            "covariate_names": list(ds.covariate_names),
        },
        "u": fitres.params.u,
        "alpha": _arr(fitres.alpha),
        "beta": _arr(fitres.beta),
        "beta_unreduced": _arr(fitres.beta_mle),
        "gamma1": _arr(fitres.params.gamma1),
        "eta": _arr(fitres.params.eta),
        "omega1": _arr(fitres.params.omega1),
        "omega0": _arr(fitres.params.omega0),
        "theta": None if theta is None else {
            "range": theta.range_param, "smoothness": theta.smoothness,
            "nugget": theta.nugget,
        },
        "loglik": fitres.loglik,
        "converged": fitres.converged,
        "n_iter": fitres.n_iter,
        "theta_at_bounds": fitres.theta_at_bounds,
        "trace": [[float(o), float(c)] for o, c in fitres.trace],
    }


def report_to_fit(report):
    try:
        data = report["data"]
        ds = SpatialDataset(loc=np.asarray(data["loc"]),
                            Y=np.asarray(data["Y"]), X=np.asarray(data["X"]),
                            response_names=tuple(data["response_names"]),
                            covariate_names=tuple(data["covariate_names"]))
        theta = report["theta"]
        model = None if theta is None else MaternModel(
            range_param=theta["range"], smoothness=theta["smoothness"],
            nugget=theta["nugget"])
        gamma1 = np.asarray(report["gamma1"], dtype=float)
        from .matalg import orth_complement

        params = EnvelopeParams(u=int(report["u"]), gamma1=gamma1,
                                gamma0=orth_complement(gamma1),
                                eta=np.asarray(report["eta"], dtype=float),
                                omega1=np.asarray(report["omega1"], dtype=float),
                                omega0=np.asarray(report["omega0"], dtype=float),
                                theta=model)
        fitres = EnvelopeFit(params=params,
                             alpha=np.asarray(report["alpha"], dtype=float),
                             beta=np.asarray(report["beta"], dtype=float),
                             beta_mle=np.asarray(report["beta_unreduced"],
                                                 dtype=float),
                             loglik=float(report["loglik"]),
                             trace=[], converged=bool(report["converged"]),
                             n_iter=int(report["n_iter"]))
        return fitres, ds
    except (KeyError, TypeError) as exc:
        raise UserInputError(f"malformed fit report: {exc}") from exc


def load_report(path):
    try:
        with open(path) as handle:
            report = json.load(handle)
    except (OSError, json.JSONDecodeError) as exc:
        raise UserInputError(f"cannot read report {path}: {exc}") from exc
    if report.get("schema_version") != SCHEMA_VERSION:
        raise UserInputError(
            f"{path}: unsupported schema version "
            f"{report.get('schema_version')!r}, expected {SCHEMA_VERSION}")
    return report


def apply_config(ctx, param, value):
    """Load defaults for the current subcommand from a flat YAML mapping."""
    if not value:
        return None
    try:
        with open(value) as handle:
            cfg = yaml.safe_load(handle) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise click.ClickException(f"cannot read config {value}: {exc}")
    if not isinstance(cfg, dict):
        raise click.UsageError(f"{value}: config must be a flat mapping")
    known = {p.name for p in ctx.command.params}
    unknown = [k for k in cfg if k not in known]
    if unknown:
        raise click.UsageError(f"{value}: unknown config keys {unknown}")
    ctx.default_map = {**(ctx.default_map or {}), **cfg}
    return value


def _config_option():
    return click.option("--config", callback=apply_config, is_eager=True,
                        expose_value=False,
                        help="YAML file of flat key-value defaults for this "
                             "subcommand; explicit flags win.")


def _data_options(fn):
    for deco in reversed([
        click.option("--loc-cols", default="coord1,coord2", show_default=True,
                     help="comma-separated coordinate columns"),
        click.option("--response-cols", required=True,
                     help="comma-separated response columns"),
        click.option("--covariate-cols", default="", show_default=True,
                     help="comma-separated covariate columns (may be empty)"),
    ]):
        fn = deco(fn)
    return fn


@click.group()
@click.version_option(__version__)
def cli():
    """Reduced-rank multivariate regression for spatially correlated data."""


@cli.command("fit")
@click.argument("data_csv", type=click.Path())
@_data_options
@click.option("--u", "u_value", type=int, default=None,
              help="reduction dimension; omit with --select-u")
@click.option("--select-u", "do_select", is_flag=True,
              help="choose u by k-fold cross-validated prediction error")
@click.option("--folds", type=int, default=5, show_default=True)
@click.option("--no-spatial", is_flag=True,
              help="freeze the site correlation at the identity")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_path", default="fit_report.json",
              show_default=True)
@_config_option()
def cmd_fit(data_csv, loc_cols, response_cols, covariate_cols, u_value,
            do_select, folds, no_spatial, seed, out_path):
    """Fit the model to a CSV of sites, responses and covariates."""
    ds = load_dataset(data_csv, _parse_cols(loc_cols),
                      _parse_cols(response_cols), _parse_cols(covariate_cols))
    cfg = OptimizerConfig(seed=seed)
    spatial = not no_spatial
    if do_select:
        u_value, table = select_u(ds, cfg=cfg, folds=folds, spatial=spatial)
        click.echo("u selection (k-fold squared prediction error):")
        for u, score in sorted(table.items()):
            marker = "  <-- selected" if u == u_value else ""
            click.echo(f"  u={u}: {score:.6g}{marker}")
    elif u_value is None:
        raise UserInputError("provide --u or --select-u")
    elif not (1 <= u_value <= ds.r):
        raise UserInputError(f"--u must be between 1 and r={ds.r}")
    fitres = fit(ds, u_value, cfg, spatial=spatial)
    report = fit_to_report(fitres, ds, seed)
    write_json(out_path, report)
    click.echo(f"fitted u={u_value} on n={ds.n} sites "
               f"(r={ds.r}, p={ds.p}); loglik={fitres.loglik:.4f}")
    theta = fitres.params.theta
    if theta is not None:
        click.echo(f"correlation: range={theta.range_param:.4g} "
                   f"smoothness={theta.smoothness:.4g}")
    if not fitres.converged:
        click.echo("warning: outer loop hit the iteration limit", err=True)
    if fitres.theta_at_bounds:
        click.echo("warning: correlation parameters at search bounds",
                   err=True)
    click.echo(f"report written to {out_path}")


@cli.command("predict")
@click.option("--report", "report_path", required=True, type=click.Path())
@click.option("--sites", "sites_csv", type=click.Path(), default=None,
              help="CSV of prediction sites (and optional covariates)")
@click.option("--grid", "grid_spec", default=None,
              help="bounding box xmin,ymin,xmax,ymax for a regular lattice")
@click.option("--resolution", type=int, default=25, show_default=True)
@click.option("--loc-cols", default="coord1,coord2", show_default=True)
@click.option("--covariate-cols", default=None,
              help="covariate columns in the sites CSV; defaults to the "
                   "training covariate names when present")
@click.option("--out", "out_path", default="predictions.csv",
              show_default=True)
@_config_option()
def cmd_predict(report_path, sites_csv, grid_spec, resolution, loc_cols,
                covariate_cols, out_path):
    """Predict responses at new sites from a saved fit report."""
    if (sites_csv is None) == (grid_spec is None):
        raise UserInputError("provide exactly one of --sites or --grid")
    fitres, ds = report_to_fit(load_report(report_path))
    names = list(ds.response_names) or [f"y{j + 1}" for j in range(ds.r)]
    if sites_csv is not None:
        lc = _parse_cols(loc_cols)
        with open(sites_csv, newline="") as handle:
            fields = csv.DictReader(handle).fieldnames or []
        if covariate_cols is not None:
            cc = _parse_cols(covariate_cols)
        else:
            cc = [c for c in ds.covariate_names if c in fields]
            if ds.p and len(cc) != ds.p:
                cc = []
        if cc and len(cc) != ds.p:
            raise UserInputError(f"need {ds.p} covariate columns, got {cc}")
        tmp = load_sites(sites_csv, lc, cc)
        new_loc, new_x = tmp
        res = predict(fitres, ds, new_loc,
                      new_x=new_x if new_x is not None else None)
        coords = new_loc
        mean, sd = res.mean, res.sd
    else:
        try:
            bbox = [float(v) for v in grid_spec.split(",")]
            if len(bbox) != 4:
                raise ValueError
        except ValueError:
            raise UserInputError(
                "--grid expects xmin,ymin,xmax,ymax") from None
        grid = predict_grid(fitres, ds, bbox, resolution)
        coords, mean, sd = grid.coords, grid.mean, grid.sd
    header = ["coord1", "coord2"]
    for name in names:
        header += [f"pred_{name}", f"sd_{name}"]
    rows = []
    for k in range(coords.shape[0]):
        row = [f"{coords[k, 0]:.10g}", f"{coords[k, 1]:.10g}"]
        for j in range(len(names)):
            row += [f"{mean[k, j]:.10g}", f"{sd[k, j]:.10g}"]
        rows.append(row)
    write_csv(out_path, header, rows)
    click.echo(f"wrote {coords.shape[0]} predictions to {out_path}")


def load_sites(path, loc_cols, covariate_cols):
    try:
        with open(path, newline="") as handle:
            reader = csv.DictReader(handle)
            if reader.fieldnames is None:
                raise UserInputError(f"{path}: empty file")
            missing = [c for c in loc_cols + covariate_cols
                       if c not in reader.fieldnames]
            if missing:
                raise UserInputError(f"{path}: missing columns {missing}")
            rows = list(reader)
    except OSError as exc:
        raise UserInputError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise UserInputError(f"{path}: no data rows")

    def grab(cols):
        out = np.empty((len(rows), len(cols)))
        for i, row in enumerate(rows):
            for j, col in enumerate(cols):
                try:
                    out[i, j] = float(row[col])
                except (TypeError, ValueError):
                    raise UserInputError(
                        f"{path}: row {i + 2}, column {col!r}: not a "
                        "number") from None
        return out

    loc = grab(loc_cols)
    x = grab(covariate_cols) if covariate_cols else None
    return loc, x


@cli.command("simulate")
@click.option("--scenario", type=click.IntRange(1, 3), default=1,
              show_default=True)
@click.option("--n", "n_sites", type=int, default=100, show_default=True)
@click.option("--sampling", type=click.Choice(["random", "grid"]),
              default="random", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out-data", default="sim_data.csv", show_default=True)
@click.option("--out-truth", default="sim_truth.json", show_default=True)
@_config_option()
def cmd_simulate(scenario, n_sites, sampling, seed, out_data, out_truth):
    """Draw one synthetic dataset and save the data and generating values."""
    cfg = SimConfig(n=n_sites, scenario=scenario, sampling=sampling)
    try:
        ds, truth = simulate(cfg, seed=seed)
    except ValueError as exc:
        raise UserInputError(str(exc)) from exc
    header = (["coord1", "coord2"]
              + [f"y{j + 1}" for j in range(ds.r)]
              + [f"x{j + 1}" for j in range(ds.p)])
    rows = [[f"{v:.10g}" for v in np.concatenate([ds.loc[i], ds.Y[i],
                                                  ds.X[i]])]
            for i in range(ds.n)]
    write_csv(out_data, header, rows)
    model = truth.matern_model
    write_json(out_truth, {
        "schema_version": SCHEMA_VERSION,
        "scenario": scenario, "seed": seed, "n": ds.n,
        "gamma1": _arr(truth.gamma1), "eta": _arr(truth.eta),
        "beta": _arr(truth.beta), "omega1": _arr(truth.omega1),
        "omega0": _arr(truth.omega0),
        "matern": None if model is None else {
            "range": model.range_param, "smoothness": model.smoothness,
            "scale": model.scale},
    })
    click.echo(f"wrote {out_data} and {out_truth}")


@cli.command("compare")
@click.option("--scenario", type=click.IntRange(1, 3), default=1,
              show_default=True)
@click.option("--n", "n_sites", type=int, default=100, show_default=True)
@click.option("--reps", type=int, default=20, show_default=True)
@click.option("--methods", default="mlr,env,spenv", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out-prefix", default="compare", show_default=True)
@_config_option()
def cmd_compare(scenario, n_sites, reps, methods, seed, out_prefix):
    """Repeat a scenario and tabulate leave-one-out errors per method."""
    chosen = tuple(_parse_cols(methods))
    bad = [m for m in chosen if m not in METHODS]
    if bad:
        raise UserInputError(f"unknown methods {bad}; choose from {METHODS}")
    cfg = SimConfig(n=n_sites, scenario=scenario)
    rows = compare(cfg, methods=chosen, n_reps=reps, seed=seed)
    out_rows = [[row.method,
                 "" if np.isnan(row.mean_mspe) else f"{row.mean_mspe:.6g}",
                 "" if np.isnan(row.sd_mspe) else f"{row.sd_mspe:.6g}",
                 str(row.n_fail), row.note] for row in rows]
    write_csv(out_prefix + ".csv",
              ["method", "mean_mspe", "sd_mspe", "n_fail", "note"], out_rows)
    write_json(out_prefix + ".json", {
        "schema_version": SCHEMA_VERSION, "scenario": scenario,
        "n": n_sites, "reps": reps, "seed": seed,
        "rows": [row.__dict__ for row in rows]})
    click.echo(f"{'method':8s} {'mean':>12s} {'sd':>12s} {'fail':>5s}")
    for row in rows:
        mean = "-" if np.isnan(row.mean_mspe) else f"{row.mean_mspe:12.4f}"
        sd = "-" if np.isnan(row.sd_mspe) else f"{row.sd_mspe:12.4f}"
        click.echo(f"{row.method:8s} {mean:>12s} {sd:>12s} {row.n_fail:5d}"
                   + (f"  ({row.note})" if row.note else ""))


@cli.command("diagnose")
@click.argument("data_csv", type=click.Path())
@_data_options
@click.option("--bins", type=int, default=15, show_default=True)
@click.option("--out-prefix", default="diagnostics", show_default=True)
@_config_option()
def cmd_diagnose(data_csv, loc_cols, response_cols, covariate_cols, bins,
                 out_prefix):
    """Residual autocorrelation diagnostics: Moran's I and semivariograms.

    Residuals come from the per-response least-squares fit; each response
    gets one Moran test and one binned semivariogram.
    """
    ds = load_dataset(data_csv, _parse_cols(loc_cols),
                      _parse_cols(response_cols), _parse_cols(covariate_cols))
    a = np.column_stack([np.ones(ds.n), ds.X])
    resid = ds.Y - a @ np.linalg.lstsq(a, ds.Y, rcond=None)[0]
    names = list(ds.response_names)
    mi_rows = []
    vg_rows = []
    click.echo(f"{'response':12s} {'moran_i':>10s} {'expected':>10s} "
               f"{'sd':>10s} {'p_value':>10s}")
    for j, name in enumerate(names):
        mi = morans_i(resid[:, j], ds.loc)
        mi_rows.append([name, f"{mi.observed:.10g}", f"{mi.expected:.10g}",
                        f"{mi.sd:.10g}", f"{mi.p_value:.10g}"])
        click.echo(f"{name:12s} {mi.observed:10.5f} {mi.expected:10.6f} "
                   f"{mi.sd:10.5f} {mi.p_value:10.5f}")
        for b in empirical_variogram(resid[:, j], ds.loc, n_bins=bins):
            vg_rows.append([name, f"{b.lower:.10g}", f"{b.upper:.10g}",
                            f"{b.midpoint:.10g}", str(b.n_pairs),
                            "" if np.isnan(b.semivariance)
                            else f"{b.semivariance:.10g}"])
    write_csv(out_prefix + "_moran.csv",
              ["response", "observed", "expected", "sd", "p_value"], mi_rows)
    write_csv(out_prefix + "_variogram.csv",
              ["response", "lower", "upper", "midpoint", "n_pairs",
               "semivariance"], vg_rows)
    click.echo(f"wrote {out_prefix}_moran.csv and {out_prefix}_variogram.csv")


def main(argv=None):
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except (click.UsageError, click.ClickException) as exc:
        click.echo(f"error: {exc.format_message()}", err=True)
        return EXIT_USER
    except UserInputError as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_USER
    except (NotPositiveDefiniteError, RankDeficientError,
            np.linalg.LinAlgError) as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
