"""Command-line front end: ``betamrf {simulate,fit-rnd,sample,calibrate,report}``.

Every command reads the same flat config file and writes into ``--out``.
Exit status: 0 success, 2 validation failure, 3 convergence warning.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
import warnings
from importlib import resources
from pathlib import Path

import numpy as np

from .calibration import calibrate_density, calibrated_pit_cdf, layout_from_chain
from .config import ConfigError, ExperimentConfig, load_config
from .market import LognormalRnd, NumericRnd, build_pit_panel, read_panel_csv, simulate_gbm, trading_dates, write_panel_csv
from .mcmc import ChainOutput, run_chain, summarize
from .model import PitPanel
from .rnd import fit_surface, pits_from_surface, read_smile_csv

log = logging.getLogger("betamrf")

EXIT_OK, EXIT_INVALID, EXIT_CONVERGENCE = 0, 2, 3
GEWEKE_LIMIT = 1.96
GEWEKE_MAX_FRACTION = 0.2


class MissingInputError(ConfigError):
    pass


def _finite(obj):
    """Replace non-finite floats by ``None`` so the JSON stays standard."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_finite(obj), indent=2, sort_keys=True, allow_nan=False) + "\n")


def _read_json(path: Path):
    return json.loads(path.read_text())


def _require(*paths: Path) -> None:
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise MissingInputError("missing input(s): " + ", ".join(missing))


def _tenor_tag(tau: float) -> str:
    return f"{tau:g}"


def physical_pit_law(spec, tau: float) -> dict[str, float]:
    """``Phi^{-1}(PIT)`` is normal under GBM; its mean and sd for one tenor."""
    sd_rn = spec.sigma_rn * math.sqrt(tau)
    mean = ((spec.mu - spec.r) - 0.5 * (spec.sigma_true**2 - spec.sigma_rn**2)) * tau / sd_rn
    return {"probit_mean": mean, "probit_sd": spec.sigma_true / spec.sigma_rn}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_simulate(cfg: ExperimentConfig) -> dict[str, Path]:
    if cfg.data.source != "gbm":
        raise ConfigError("data.source: simulate needs the gbm data source")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = cfg.data.gbm
    rng = np.random.default_rng([cfg.seed, 0])
    path = simulate_gbm(spec, rng)
    panel = build_pit_panel(path, spec, cfg.grid, cfg.data.start_date)
    write_panel_csv(out / "panel.csv", panel)
    with open(out / "prices.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "price"])
        for d, s in zip(trading_dates(path.size, cfg.data.start_date), path):
            w.writerow([d, repr(float(s))])
    _write_json(out / "simulate.json", {
        "seed": cfg.seed,
        "spec": {k: getattr(spec, k) for k in ("s0", "mu", "r", "sigma_true", "sigma_rn", "horizon_years", "steps_per_year")},
        "tenors": list(cfg.data.tenors),
        "lookahead_days": list(cfg.grid.lookahead_days),
        "n_prices": int(path.size),
        "panel_shape": [panel.T, panel.M],
        "physical": {
            "drift": spec.mu,
            "volatility": spec.sigma_true,
            "pit_law": {_tenor_tag(t): physical_pit_law(spec, t) for t in cfg.data.tenors},
        },
    })
    return {"panel": out / "panel.csv", "prices": out / "prices.csv", "sidecar": out / "simulate.json"}


def read_realized_csv(path) -> dict[tuple[str, float], float]:
    """``date,tenor_years,level`` rows; ``level`` is the price realised at ``date + tenor``."""
    out = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["date", "tenor_years", "level"]:
            raise ValueError(f"{path}:1: expected header date,tenor_years,level")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ValueError(f"{path}:{line}: expected 3 fields, got {len(row)}")
            try:
                tau, level = float(row[1]), float(row[2])
            except ValueError as exc:
                raise ValueError(f"{path}:{line}: {exc}") from None
            if not level > 0:
                raise ValueError(f"{path}:{line}: realised level must be positive")
            out[(row[0].strip(), tau)] = level
    return out


def cmd_fit_rnd(cfg: ExperimentConfig) -> dict[str, Path]:
    if cfg.data.source != "smiles":
        raise ConfigError("data.source: fit-rnd needs the smiles data source")
    _require(Path(cfg.data.smile_csv), Path(cfg.data.realized_csv))
    out = Path(cfg.out)
    curves_dir = out / "curves"
    curves_dir.mkdir(parents=True, exist_ok=True)
    quotes = read_smile_csv(cfg.data.smile_csv)
    realized = read_realized_csv(cfg.data.realized_csv)
    curves = fit_surface(quotes, cfg.rnd.lam, cfg.rnd.grid_size)
    index = []
    for (date, tau), curve in sorted(curves.items()):
        name = f"curve_{date}_{_tenor_tag(tau)}.csv"
        curve.to_csv(curves_dir / name)
        index.append({"date": date, "tenor": tau, "file": f"curves/{name}"})
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        panel = pits_from_surface(quotes, realized, curves)
    for w in caught:
        log.warning("%s", w.message)
    write_panel_csv(out / "panel.csv", panel)
    fitted = {(c["date"], c["tenor"]) for c in index}
    _write_json(out / "fit_rnd.json", {
        "curves": index,
        "skipped": [{"date": q.date, "tenor": q.tenor} for q in quotes if (q.date, q.tenor) not in fitted],
        "tenors": sorted({q.tenor for q in quotes}),
        "panel_shape": [panel.T, panel.M],
        "warnings": sorted({str(w.message) for w in caught}),
    })
    return {"panel": out / "panel.csv", "curves": curves_dir, "sidecar": out / "fit_rnd.json"}


def _load_panel(cfg: ExperimentConfig, panel_path=None) -> PitPanel:
    path = Path(panel_path) if panel_path else Path(cfg.out) / "panel.csv"
    _require(path)
    return read_panel_csv(path)


def cmd_sample(cfg: ExperimentConfig, panel_path=None) -> tuple[dict[str, Path], bool]:
    """Run the chain; the flag is True when the Geweke check fails."""
    panel = _load_panel(cfg, panel_path)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    layout = cfg.layout(panel.M)
    chain = run_chain(panel, layout, cfg.hyper, cfg.sampler)
    chain.to_csv(out / "draws.csv")
    z = np.asarray(chain.geweke_z, dtype=float)
    finite = np.isfinite(z)
    frac = float(np.mean(np.abs(z[finite]) > GEWEKE_LIMIT)) if finite.any() else 0.0
    warn = frac > GEWEKE_MAX_FRACTION
    diag = chain.diagnostics(include_runtime=cfg.include_runtime)
    diag["geweke_fraction_exceeding"] = frac
    diag["convergence_warning"] = warn
    diag["config"] = cfg.flat()
    _write_json(out / "chain.json", diag)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "mean", "lo", "hi"])
        for name, (m, lo, hi) in summarize(chain).items():
            w.writerow([name, repr(m), repr(lo), repr(hi)])
    if warn:
        log.warning("Geweke |z| > %.2f on %.0f%% of coordinates", GEWEKE_LIMIT, 100 * frac)
    return {"draws": out / "draws.csv", "sidecar": out / "chain.json", "summary": out / "summary.csv"}, warn


def _load_chain(out: Path) -> ChainOutput:
    if not (out / "draws.csv").exists():
        raise MissingInputError(f"missing input(s): {out / 'draws.csv'} (run 'sample' first)")
    _require(out / "chain.json")
    return ChainOutput.load(out / "draws.csv", out / "chain.json")


def _forecast_curves(cfg: ExperimentConfig, out: Path):
    """``(date, tenor) -> (risk-neutral curve, physical reference or None)`` at the latest curve date."""
    result = {}
    if cfg.data.source == "gbm":
        _require(out / "prices.csv", out / "simulate.json")
        with open(out / "prices.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        date, s_t = rows[-1]["date"], float(rows[-1]["price"])
        spec = cfg.data.gbm
        for tau in cfg.data.tenors:
            q = LognormalRnd(s_t, spec.r, spec.sigma_rn, tau)
            ref = LognormalRnd(s_t, spec.mu, spec.sigma_true, tau)
            result[(date, tau)] = (q, ref)
        return result
    _require(out / "fit_rnd.json")
    index = _read_json(out / "fit_rnd.json")["curves"]
    if not index:
        raise MissingInputError("missing input(s): no fitted curves in fit_rnd.json")
    latest = max(c["date"] for c in index)
    for c in index:
        if c["date"] == latest:
            path = out / c["file"]
            _require(path)
            result[(c["date"], float(c["tenor"]))] = (NumericRnd.read_csv(path), None)
    return result


def cmd_calibrate(cfg: ExperimentConfig, panel_path=None) -> dict[str, Path]:
    """Calibrated forecast curves at the latest curve date and PIT ECDF diagnostics per tenor.

    Conditioning follows the filtering convention: the last ``p`` panel rows
    are the lags and the last row supplies the neighbour PITs.
    """
    out = Path(cfg.out)
    panel = _load_panel(cfg, panel_path)
    chain = _load_chain(out)
    layout = layout_from_chain(chain)
    if layout.nbhd.M != panel.M:
        raise ConfigError("panel: column count differs from the sampled chain")
    cal_dir = out / "calibrated"
    cal_dir.mkdir(parents=True, exist_ok=True)
    curves = _forecast_curves(cfg, out)
    if cfg.data.source == "smiles":
        tenors = [float(t) for t in _read_json(out / "fit_rnd.json")["tenors"]]
    else:
        tenors = list(cfg.data.tenors)
    y = panel.values
    lags_all = [y[-k] for k in range(1, layout.p + 1)]
    files = []
    for (date, tau), (rnd, ref) in sorted(curves.items()):
        j = tenors.index(tau)
        lags = [row[j] for row in lags_all]
        neighbours = {k: float(y[-1, k]) for k in layout.nbhd.neighbors(j)}
        strikes = rnd.grid(cfg.rnd.grid_size) if isinstance(rnd, LognormalRnd) else None
        curve = calibrate_density(rnd, chain, j, lags, neighbours, strikes=strikes, layout=layout)
        name = f"curve_tenor_{j + 1}_{date}.csv"
        curve.to_csv(cal_dir / name)
        files.append(name)
        if ref is not None:
            ref_name = f"reference_tenor_{j + 1}_{date}.csv"
            with open(cal_dir / ref_name, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["strike", "pdf", "cdf"])
                for k, f, c in zip(curve.strikes, ref.pdf(curve.strikes), ref.cdf(curve.strikes)):
                    w.writerow([repr(float(k)), repr(float(f)), repr(float(c))])
            files.append(ref_name)
    ks = {}
    for d in calibrated_pit_cdf(panel, chain, layout.nbhd):
        name = f"pit_ecdf_tenor_{d.site + 1}.csv"
        d.to_csv(cal_dir / name)
        files.append(name)
        ks[f"tenor_{d.site + 1}"] = {"ks_uncal": d.ks_uncal, "ks_cal": d.ks_cal, "improved": d.ks_cal < d.ks_uncal}
    _write_json(cal_dir / "calibrate.json", {"ks": ks, "files": sorted(files)})
    return {"dir": cal_dir, "sidecar": cal_dir / "calibrate.json"}


def _parameter_tables(chain: ChainOutput) -> list[dict]:
    layout = layout_from_chain(chain)
    summary = summarize(chain)

    def row(name):
        key = "gamma" + name[len("sigma"):] if name.startswith("sigma") else name
        m, lo, hi = summary[key]
        return {"name": key, "mean": m, "lo": lo, "hi": hi}

    tables = []
    for j in layout.groups:
        idx = list(layout.alpha(j)) + sorted(set(layout.beta(j).values())) + [layout.sigma(j)]
        tables.append({"site": "pooled" if layout.pooled else j + 1, "rows": [row(layout.names[i]) for i in idx]})
    return tables


def report_schema() -> dict:
    return json.loads(resources.files("betamrf").joinpath("report.schema.json").read_text())


def cmd_report(cfg: ExperimentConfig) -> dict[str, Path]:
    out = Path(cfg.out)
    needed = [out / "draws.csv", out / "chain.json", out / "calibrated" / "calibrate.json"]
    _require(*needed)
    chain = _load_chain(out)
    diag = _read_json(out / "chain.json")
    cal = _read_json(out / "calibrated" / "calibrate.json")
    report = {
        "model": {k: diag["meta"][k] for k in ("p", "topology", "M", "pooled", "step1_target", "inner_sweeps")},
        "seed": diag["meta"]["seed"],
        "n_iter": diag["n_iter"],
        "n_burnin": diag["meta"]["n_burnin"],
        "parameters": _parameter_tables(chain),
        "acceptance": {
            "outer": diag["accept_rate_outer"],
            "exchange": diag["accept_rate_exchange"],
            "inner": diag["accept_rate_inner"],
        },
        "geweke": {
            "fraction_exceeding": diag["geweke_fraction_exceeding"],
            "convergence_warning": diag["convergence_warning"],
        },
        "ks": cal["ks"],
        "runtime": diag.get("runtime") if cfg.include_runtime else None,
    }
    if (out / "simulate.json").exists():
        report["truth"] = _read_json(out / "simulate.json")["physical"]
    _write_json(out / "report.json", report)
    return {"report": out / "report.json"}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat key = value config file")
    common.add_argument("--seed", type=int, metavar="N", help="overrides the config seed")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides output.dir)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="betamrf", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="simulate a GBM world and its PIT panel")
    sub.add_parser("fit-rnd", parents=[common], help="fit smiles, extract densities, build the PIT panel")
    for name, text in (("sample", "run the double MH sampler"), ("calibrate", "calibrate curves and PITs")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--panel", metavar="PATH", help="PIT panel CSV (default OUT/panel.csv)")
    sub.add_parser("report", parents=[common], help="aggregate outputs into report.json")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    started = time.perf_counter()
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out)
        if args.command == "simulate":
            cmd_simulate(cfg)
        elif args.command == "fit-rnd":
            cmd_fit_rnd(cfg)
        elif args.command == "sample":
            _, warn = cmd_sample(cfg, args.panel)
            if warn:
                return EXIT_CONVERGENCE
        elif args.command == "calibrate":
            cmd_calibrate(cfg, args.panel)
        elif args.command == "report":
            cmd_report(cfg)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"betamrf {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    log.info("%s finished in %.1fs", args.command, time.perf_counter() - started)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
