"""``spinbath`` command line: simulate, fit, report, preset.

Exit codes: 0 success, 2 usage or config error, 3 fit did not converge,
4 data error. ``SPINBATH_WORKERS`` sets the Monte Carlo thread count; results do
not depend on it.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
import warnings
from importlib import resources
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import __version__
from .config import (
    ConfigError,
    CurveExperiment,
    DipExperiment,
    SimulationConfig,
    SweepExperiment,
    bath_params,
    canonical_json,
    config_hash,
    grid_values,
    load_config,
    parse_config,
)
from .decoherence import OUNoise, DipModel, chi_deer, coherence_curve, deer_dip, deer_echo_sweep, resonance_frequency
from .domain import CONSTANTS, CoherenceCurve, DomainError, FitResult, NVSensor, TauSweep, MAGIC_ANGLE
from .fitting import CouplingStrengthFit, DeerEchoFit, DepthRequiredError, StretchedExpFit
from .fitting.pipelines import DEPTH_MESSAGE, NonIdentifiableWarning
from .io import (
    SCHEMA_VERSION,
    DataError,
    Dataset,
    atomic_write,
    curve_dataset,
    dataset_curve,
    dataset_sweep,
    file_sha256,
    read_dataset,
    read_result,
    spectrum_dataset,
    sweep_dataset,
    write_dataset,
    write_result,
)
from .montecarlo import SimConfig, simulate_curve, simulate_tau_sweep
from .sequences import SequenceSpec
from .spectroscopy import DoubleLorentzianFit, double_lorentzian, reconstruct_spectrum

__all__ = ["main", "EXIT_OK", "EXIT_USAGE", "EXIT_NONCONVERGED", "EXIT_DATA", "PIPELINES", "PRESETS"]

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NONCONVERGED = 3
EXIT_DATA = 4

PIPELINES = ("t2", "coupling", "deer-echo", "spectrum")
PRESETS = {"paper-regime": "paper_regime.yaml"}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- simulate


def _seed_for(master: int, *key: int) -> int:
    return int(np.random.SeedSequence(master, spawn_key=key).generate_state(1, dtype=np.uint64)[0])


def _add_noise(values, unc, std, seed):
    if std == 0:
        return values, unc
    rng = np.random.default_rng(seed)
    noisy = np.asarray(values) + rng.normal(0.0, std, len(values))
    base = np.zeros(len(values)) if unc is None else np.asarray(unc)
    return noisy, np.sqrt(base**2 + std**2)


def simulate(cfg: SimulationConfig, out_dir) -> list:
    """Run every experiment for every bath and write one dataset per curve.

    Returns the written paths in a fixed order. Dip spectra are always
    computed with the analytic engine.
    """
    out_dir = Path(out_dir)
    sensor = cfg.sensor.build()
    chash = config_hash(cfg)
    written = []
    for bi, (bname, bcfg) in enumerate(cfg.baths.items()):
        bath = bath_params(bcfg, sensor)
        noise = OUNoise(bath.b_rms, bath.tau_c)
        common = {
            "bath": bname,
            "bath_config": bcfg.model_dump(mode="json", exclude_none=True),
            "b_rms_T": bath.b_rms,
            "sensor": cfg.sensor.model_dump(mode="json"),
            "master_seed": cfg.seed,
            "config_hash": chash,
        }
        for ei, exp in enumerate(cfg.experiments):
            if isinstance(exp, CurveExperiment):
                for ni, n in enumerate(exp.pulse_counts()):
                    spec = SequenceSpec(exp.family, n, exp.tau_offset_us, exp.tau_fraction)
                    times = grid_values(exp.times_us)
                    seed = _seed_for(cfg.seed, bi, ei, ni)
                    if cfg.engine == "montecarlo":
                        mc = SimConfig(cfg.montecarlo.n_trials, cfg.montecarlo.disk_radius_factor, seed,
                                       cfg.montecarlo.fixed_count)
                        curve = simulate_curve(spec, times, bath, sensor, mc)
                    else:
                        curve = coherence_curve(spec, noise, times)
                    vals, unc = _add_noise(curve.values, curve.uncertainty, exp.noise_std, seed ^ 1)
                    curve = CoherenceCurve(curve.times, vals, spec, unc, seed)
                    head = dict(common, experiment=exp.name, engine=cfg.engine, seed=seed, noise_std=exp.noise_std)
                    if cfg.engine == "montecarlo":
                        head["montecarlo"] = cfg.montecarlo.model_dump(mode="json")
                    suffix = f"_N{n}" if exp.family == "CPMG" else ""
                    path = out_dir / f"{bname}__{exp.name}{suffix}.csv"
                    write_dataset(path, curve_dataset(curve, head))
                    written.append(path)
            elif isinstance(exp, SweepExperiment):
                taus = grid_values(exp.taus_us)
                seed = _seed_for(cfg.seed, bi, ei, 0)
                if cfg.engine == "montecarlo":
                    mc = SimConfig(cfg.montecarlo.n_trials, cfg.montecarlo.disk_radius_factor, seed,
                                   cfg.montecarlo.fixed_count)
                    sweep = simulate_tau_sweep(exp.total_time_us, taus, bath, sensor, mc)
                else:
                    sweep = deer_echo_sweep(noise, exp.total_time_us, taus)
                vals, unc = _add_noise(sweep.values, sweep.uncertainty, exp.noise_std, seed ^ 1)
                sweep = TauSweep(sweep.taus, vals, sweep.total_time, unc, seed)
                head = dict(common, experiment=exp.name, engine=cfg.engine, seed=seed, noise_std=exp.noise_std)
                if cfg.engine == "montecarlo":
                    head["montecarlo"] = cfg.montecarlo.model_dump(mode="json")
                path = out_dir / f"{bname}__{exp.name}.csv"
                write_dataset(path, sweep_dataset(sweep, head))
                written.append(path)
            else:
                written.append(_simulate_dip(exp, noise, sensor, common, _seed_for(cfg.seed, bi, ei, 0),
                                             out_dir / f"{bname}__{exp.name}.csv"))
    manifest = {"config_hash": chash, "files": [p.name for p in written], "schema_version": SCHEMA_VERSION}
    atomic_write(out_dir / "manifest.json", json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return written


def _simulate_dip(exp: DipExperiment, noise: OUNoise, sensor: NVSensor, common, seed, path):
    freqs = grid_values(exp.freqs_mhz)
    center = resonance_frequency(sensor.bias_field, exp.g_ratio)
    baseline = float(chi_deer(exp.total_time_us, noise))
    values = deer_dip(freqs, DipModel(center, exp.rabi_mhz, exp.contrast_scale), baseline)
    values, unc = _add_noise(values, None, exp.noise_std, seed)
    head = dict(common, experiment=exp.name, engine="analytic", seed=seed, noise_std=exp.noise_std,
                center_mhz=center, rabi_mhz=exp.rabi_mhz, baseline_chi=baseline, total_time_us=exp.total_time_us)
    cols = ("freq_mhz", "coherence") + (("stderr",) if unc is not None else ())
    arrs = [freqs, values] + ([unc] if unc is not None else [])
    write_dataset(path, Dataset("dip_spectrum", head, cols, np.column_stack(arrs)))
    return path


# ---------------------------------------------------------------- fit


QUANTITIES = {
    "t2": (("T2", "T2_us", "us"), ("p", "p", "")),
    "coupling": (("K", "coupling_khz", "kHz"), ("tau_c", "tau_c_us", "us")),
    "deer-echo": (("sigma", "sigma_nm2", "nm^-2"), ("tau_c", "tau_c_us", "us")),
    "spectrum": (("delta1", "delta1_rad_per_us", "rad/us"), ("tau1", "tau1_us", "us"),
                 ("delta2", "delta2_rad_per_us", "rad/us"), ("tau2", "tau2_us", "us")),
}


def _quantities(pipeline: str, res: FitResult) -> dict:
    out = {}
    for pname, qname, unit in QUANTITIES[pipeline]:
        scale = 1e3 if pname == "K" else 1.0  # K is fitted in 1/us
        out[qname] = {"value": scale * res.params[pname], "stderr": scale * res.stderr[pname], "unit": unit}
    return out


def _load_curve(path):
    return dataset_curve(read_dataset(path), str(path))


def _sensor_from_header(header, depth) -> NVSensor:
    s = header.get("sensor", {})
    angle = math.radians(s["axis_polar_angle_deg"]) if "axis_polar_angle_deg" in s else MAGIC_ANGLE
    return NVSensor(depth=depth, axis_polar_angle=angle, bias_field=s.get("bias_field_gauss", 382.0))


class _Job:
    """One pipeline run: data, an estimator factory and how to refit on new y."""

    def __init__(self, x, y, sigma, make: Callable, x_name: str):
        self.x, self.y, self.sigma, self.make, self.x_name = x, np.asarray(y, float), sigma, make, x_name

    def run(self, y=None):
        est = self.make()
        est.fit(self.x, self.y if y is None else y, sigma=self.sigma)
        return est


def _build_job(pipeline, paths, depth, fast_noise):
    extra = {}
    if pipeline == "t2":
        if len(paths) != 1:
            raise UsageError("the t2 pipeline takes exactly one dataset")
        c = _load_curve(paths[0])
        return _Job(c.times, c.values, c.uncertainty, StretchedExpFit, "time_us"), extra
    if pipeline == "coupling":
        if len(paths) != 1:
            raise UsageError("the coupling pipeline takes exactly one dataset")
        c = _load_curve(paths[0])
        if c.sequence.family != "DEER":
            raise DataError(f"{paths[0]}: coupling fits need a DEER curve, got {c.sequence.label}")
        if fast_noise is not None:
            from .spectroscopy import normalize_by_fast_noise

            rec = read_result(fast_noise)
            if rec["pipeline"] != "spectrum":
                raise DataError(f"{fast_noise}: fast-noise parameters must come from a spectrum fit")
            p = rec["fit"]["params"]
            c = normalize_by_fast_noise(c, (p["delta2"], p["tau2"]))
            extra["normalized_by"] = {"delta2": p["delta2"], "tau2": p["tau2"]}
        return _Job(c.times, c.values, c.uncertainty, CouplingStrengthFit, "time_us"), extra
    if pipeline == "deer-echo":
        if len(paths) != 1:
            raise UsageError("the deer-echo pipeline takes exactly one dataset")
        if depth is None:
            raise DepthRequiredError(DEPTH_MESSAGE)
        ds = read_dataset(paths[0])
        sw = dataset_sweep(ds, str(paths[0]))
        sensor = _sensor_from_header(ds.header, depth)
        extra["depth_nm"] = depth
        return _Job(sw.taus, sw.values, sw.uncertainty,
                    lambda: DeerEchoFit(sw.total_time, sensor.depth, sensor.axis_polar_angle), "tau_us"), extra
    if pipeline == "spectrum":
        curves = [_load_curve(p) for p in paths]
        spec = reconstruct_spectrum(curves)
        extra["spectrum"] = spec
        return _Job(spec.omegas, spec.amplitudes, spec.uncertainty, DoubleLorentzianFit, "omega_rad_per_us"), extra
    raise UsageError(f"unknown pipeline {pipeline!r}; choose from {PIPELINES}")


def _bootstrap(job: _Job, est, n: int, seed: int, pipeline: str) -> dict:
    """Residual bootstrap: refit ``model + resampled residuals`` ``n`` times."""
    rng = np.random.default_rng(seed)
    model = est.predict(job.x)
    if pipeline == "spectrum":
        rel = job.y / model - 1.0
        draw = lambda: model * (1.0 + rng.choice(rel, rel.size))
    else:
        resid = job.y - model
        draw = lambda: model + rng.choice(resid, resid.size)
    samples = {q: [] for _, q, _ in QUANTITIES[pipeline]}
    failed = 0
    for _ in range(n):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NonIdentifiableWarning)
            try:
                r = job.run(draw()).result_
            except DomainError:
                failed += 1
                continue
        if not r.converged:
            failed += 1
            continue
        for q, v in _quantities(pipeline, r).items():
            samples[q].append(v["value"])
    out = {"n": n, "seed": seed, "failed": failed, "stderr": {}}
    for q, vals in samples.items():
        out["stderr"][q] = float(np.std(vals, ddof=1)) if len(vals) > 1 else math.inf
    return out


def _summary(pipeline: str, res: FitResult, quantities: dict) -> str:
    parts = []
    for q, v in quantities.items():
        unit = f" {v['unit']}" if v["unit"] else ""
        parts.append(f"{q} = {v['value']:.6g} +- {v['stderr']:.3g}{unit}")
    state = "converged" if res.converged else f"NOT converged ({res.message})"
    return f"{pipeline}: " + ", ".join(parts) + f" [{state}, {res.iterations} iterations]"


def fit(pipeline: str, paths, out: Path, depth=None, bootstrap=0, seed=0, fast_noise=None,
        spectrum_out: Optional[Path] = None) -> dict:
    """Fit datasets with one pipeline and write the result record."""
    paths = [Path(p) for p in paths]
    job, extra = _build_job(pipeline, paths, depth, fast_noise)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", NonIdentifiableWarning)
        est = job.run()
    res = est.result_
    quantities = _quantities(pipeline, res)
    inputs = []
    for p in paths:
        ds = read_dataset(p)
        inputs.append({"name": p.name, "sha256": file_sha256(p), "config_hash": ds.header.get("config_hash")})
    options = {"depth_nm": depth, "bootstrap": bootstrap, "seed": seed,
               "normalized_by": extra.get("normalized_by")}
    record = {
        "kind": "fit_result",
        "pipeline": pipeline,
        "inputs": inputs,
        "options": options,
        "fit": res.to_dict(),
        "quantities": quantities,
        "warnings": [str(w.message) for w in caught],
        "plot": {"x_name": job.x_name, "x": [float(v) for v in job.x], "data": [float(v) for v in job.y],
                 "model": [float(v) for v in est.predict(job.x)]},
    }
    if pipeline == "coupling":
        b = OUNoise.from_coupling(res.params["K"], res.params["tau_c"])
        record["derived"] = {"b_rms_T": b.b_rms}
    if pipeline == "deer-echo":
        record["derived"] = {"b_rms_T": est.b_rms_}
    if bootstrap:
        record["bootstrap"] = _bootstrap(job, est, bootstrap, seed, pipeline)
    if pipeline == "spectrum":
        spec = extra["spectrum"]
        spath = spectrum_out or out.with_suffix(".spectrum.csv")
        ds = spectrum_dataset(spec, {"config_hash": inputs[0]["config_hash"],
                                     "sources": [i["name"] for i in inputs]})
        write_dataset(spath, ds)
        record["spectrum_file"] = spath.name
        record["spectrum_dropped_points"] = spec.dropped
    record["config_hash"] = config_hash({k: record[k] for k in ("pipeline", "inputs", "options")})
    record["summary"] = _summary(pipeline, res, quantities)
    write_result(out, record)
    return record


# ---------------------------------------------------------------- report


def report(before_path, after_path, out_dir) -> dict:
    """Side-by-side comparison of two results from the same pipeline."""
    before, after = read_result(before_path), read_result(after_path)
    for name, rec in ((before_path, before), (after_path, after)):
        if rec["schema_version"] != SCHEMA_VERSION:
            raise DataError(f"{name}: schema version {rec['schema_version']} differs from {SCHEMA_VERSION}")
    if before["pipeline"] != after["pipeline"]:
        raise DataError(f"cannot compare a {before['pipeline']!r} result with a {after['pipeline']!r} result")
    out_dir = Path(out_dir)
    rows = []
    for q, vb in before["quantities"].items():
        va = after["quantities"][q]
        delta = va["value"] - vb["value"]
        comb = math.hypot(vb["stderr"], va["stderr"])
        rows.append({"quantity": q, "unit": vb["unit"], "before": vb["value"], "before_stderr": vb["stderr"],
                     "after": va["value"], "after_stderr": va["stderr"], "delta": delta,
                     "delta_stderr": comb,
                     "change": "increased" if delta > 0 else "decreased" if delta < 0 else "unchanged"})
    width = max(len(r["quantity"]) for r in rows)
    lines = [f"pipeline: {before['pipeline']}",
             f"before: {Path(before_path).name} ({before['config_hash'][:12]})",
             f"after:  {Path(after_path).name} ({after['config_hash'][:12]})",
             ""]
    lines.append(f"{'quantity':<{width}}  {'before':>22}  {'after':>22}  {'delta':>22}  change")
    for r in rows:
        fmt = lambda v, e: f"{v:.5g} +- {e:.2g}"
        lines.append(f"{r['quantity']:<{width}}  {fmt(r['before'], r['before_stderr']):>22}  "
                     f"{fmt(r['after'], r['after_stderr']):>22}  {fmt(r['delta'], r['delta_stderr']):>22}  "
                     f"{r['change']}")
    text = "\n".join(lines) + "\n"
    atomic_write(out_dir / "report.txt", text)
    rec = {"kind": "report", "pipeline": before["pipeline"], "rows": rows,
           "before": before["config_hash"], "after": after["config_hash"]}
    rec["config_hash"] = config_hash({"before": before["config_hash"], "after": after["config_hash"]})
    write_result(out_dir / "report.json", rec)
    cols = ("quantity", "unit", "before", "before_stderr", "after", "after_stderr", "delta", "delta_stderr")
    table = [",".join(cols)] + [",".join(r[c] if isinstance(r[c], str) else repr(float(r[c])) for c in cols)
                               for r in rows]
    atomic_write(out_dir / "comparison.csv", "\n".join(table) + "\n")
    for side, r in (("before", before), ("after", after)):
        p = r["plot"]
        ds = Dataset("plot", {"side": side, "pipeline": r["pipeline"], "config_hash": r["config_hash"]},
                     (p["x_name"], "data", "model"), np.column_stack([p["x"], p["data"], p["model"]]))
        write_dataset(out_dir / f"{side}_{r['pipeline']}.csv", ds)
    return rec


# ---------------------------------------------------------------- preset


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise UsageError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    return resources.files("spinbath.presets").joinpath(PRESETS[name]).read_text()


def run_preset(name: str, out_dir, seed=None, engine=None, trials=None, write_only=False) -> int:
    """Write the preset config and, unless ``write_only``, run the full suite.

    Datasets land in ``data/``, fit records in ``results/`` and one comparison
    per pipeline in ``report/<pipeline>/``. The first bath is reported as
    before, the second as after.
    """
    out_dir = Path(out_dir)
    text = preset_text(name)
    atomic_write(out_dir / PRESETS[name], text)
    if write_only:
        return EXIT_OK
    cfg = parse_config(text, PRESETS[name]).with_overrides(seed, engine, trials)
    simulate(cfg, out_dir / "data")
    baths = list(cfg.baths)
    names = {e.name: e for e in cfg.experiments}
    status = EXIT_OK
    results = {}
    for bname in baths:
        data = out_dir / "data"
        res_dir = out_dir / "results"
        plan = [
            ("t2", [data / f"{bname}__hahn.csv"], {}),
            ("deer-echo", [data / f"{bname}__echo.csv"], {"depth": cfg.sensor.depth_nm}),
            ("spectrum", [data / f"{bname}__cpmg_N{n}.csv" for n in names["cpmg"].pulse_counts()], {}),
        ]
        for pipeline, paths, kw in plan:
            rec = fit(pipeline, paths, res_dir / f"{bname}__{pipeline}.json", **kw)
            print(f"[{bname}] {rec['summary']}")
            results[(bname, pipeline)] = res_dir / f"{bname}__{pipeline}.json"
            status = max(status, EXIT_OK if rec["fit"]["converged"] else EXIT_NONCONVERGED)
        rec = fit("coupling", [data / f"{bname}__deer.csv"], res_dir / f"{bname}__coupling.json")
        print(f"[{bname}] {rec['summary']}")
        results[(bname, "coupling")] = res_dir / f"{bname}__coupling.json"
        status = max(status, EXIT_OK if rec["fit"]["converged"] else EXIT_NONCONVERGED)
    if len(baths) >= 2:
        for pipeline in PIPELINES:
            report(results[(baths[0], pipeline)], results[(baths[1], pipeline)], out_dir / "report" / pipeline)
            print((out_dir / "report" / pipeline / "report.txt").read_text())
    return status


# ---------------------------------------------------------------- entry point


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spinbath", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"spinbath {__version__}")
    sub = ap.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("simulate", help="generate coherence datasets from a config file")
    s.add_argument("--config", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path, help="output directory")
    s.add_argument("--seed", type=int)
    s.add_argument("--engine", choices=("analytic", "montecarlo"))
    s.add_argument("--trials", type=int, help="Monte Carlo trials per point")

    f = sub.add_parser("fit", help="fit datasets with one extraction pipeline")
    f.add_argument("pipeline", choices=PIPELINES)
    f.add_argument("datasets", nargs="+", type=Path)
    f.add_argument("--out", required=True, type=Path, help="result file (JSON)")
    f.add_argument("--depth", type=float, help="sensor depth in nm (required for deer-echo)")
    f.add_argument("--bootstrap", type=int, default=0, metavar="N", help="residual-bootstrap resamples")
    f.add_argument("--seed", type=int, default=0, help="bootstrap seed")
    f.add_argument("--fast-noise", type=Path, help="spectrum result whose fast Lorentzian is divided out")
    f.add_argument("--spectrum-out", type=Path, help="where the reconstructed spectrum goes")

    r = sub.add_parser("report", help="compare two results from the same pipeline")
    r.add_argument("before", type=Path)
    r.add_argument("after", type=Path)
    r.add_argument("--out", required=True, type=Path, help="output directory")

    p = sub.add_parser("preset", help="write and run a bundled configuration")
    p.add_argument("name", nargs="?", default="paper-regime")
    p.add_argument("--out", type=Path)
    p.add_argument("--list", action="store_true")
    p.add_argument("--print", action="store_true", dest="print_only")
    p.add_argument("--write-only", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--engine", choices=("analytic", "montecarlo"))
    p.add_argument("--trials", type=int)
    return ap


def _dispatch(args) -> int:
    if args.verb == "simulate":
        cfg = load_config(args.config).with_overrides(args.seed, args.engine, args.trials)
        for path in simulate(cfg, args.out):
            print(path)
        return EXIT_OK
    if args.verb == "fit":
        if args.depth is not None and not args.depth > 0:
            raise UsageError("--depth must be > 0 nm")
        if args.bootstrap < 0:
            raise UsageError("--bootstrap must be >= 0")
        rec = fit(args.pipeline, args.datasets, args.out, args.depth, args.bootstrap, args.seed,
                  args.fast_noise, args.spectrum_out)
        print(rec["summary"])
        for w in rec["warnings"]:
            print(f"warning: {w}", file=sys.stderr)
        return EXIT_OK if rec["fit"]["converged"] else EXIT_NONCONVERGED
    if args.verb == "report":
        report(args.before, args.after, args.out)
        print((args.out / "report.txt").read_text(), end="")
        return EXIT_OK
    if args.list:
        for name in sorted(PRESETS):
            print(name)
        return EXIT_OK
    if args.print_only:
        print(preset_text(args.name), end="")
        return EXIT_OK
    if args.out is None:
        raise UsageError("preset needs --out (or --list / --print)")
    return run_preset(args.name, args.out, args.seed, args.engine, args.trials, args.write_only)


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _dispatch(args)
    except (UsageError, ConfigError, DepthRequiredError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DomainError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
