"""Batch driver: every pipeline stage as a subcommand over a JSON config.

Usage:

    slabwave <command> CONFIG.json [--set key=value ...] [--jobs N]
                                   [--output DIR]

Commands: generate-medium, solve, corrector-stats, clt-test, scaling-study,
transport, green-diagnostics, correlation.

The config is a strict JSON document (schema below); unknown keys and type
mismatches are rejected with a pointer to the offending key and exit
status 2.  Flat overrides use dotted paths, e.g.
``--set scales.sigma=0.2`` or ``--set ensemble.count=16``; values are parsed
as JSON literals where possible, otherwise taken as strings.

Every command writes its artifacts plus a ``<command>-manifest.json``
recording the config hash, package version, seeds and wall time.  Binary
artifacts are bitwise reproducible for identical config and seeds at any
``--jobs`` level, because every parallel reduction is order-fixed.

Output locations: relative ``output_dir`` values resolve against the
``SLABWAVE_OUTPUT_ROOT`` environment variable (default: the working
directory).

Exit codes: 0 success, 2 config error, 3 missing upstream artifact,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .core import (ComplexField, Grid, LayerStack, load_field, save_field,
                   scales_from_physical)
from .corrector import (CorrectorEnsemble, born_corrector, clt_test,
                        load_ensemble, make_test_functions, save_ensemble,
                        scaling_study, build_ensemble, fit_scaling,
                        _config_hash as ensemble_config_hash)
from .helmholtz import (SolverConfig, green_norm_diagnostics,
                        solve_homogenized, solve_random)
from .medium import (CovarianceModel, InclusionSpec,
                     analytic_covariance_model, sample_realization,
                     save_realization)
from .transport import (Caps, TransportMedium, correlation_C0,
                        detector_flux_csv, emit_source, flux_balance,
                        load_wigner, propagate, save_wigner)

__all__ = ["main", "ConfigError", "MissingArtifact", "validate_config",
           "load_config", "DEFAULT_CONFIG"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERICAL = 4


class ConfigError(Exception):
    """Schema violation; message carries a dotted pointer to the key."""


class MissingArtifact(Exception):
    """A downstream command could not find its upstream input."""


class NumericalFailure(Exception):
    """A solve or audit left the numerical contract."""


# ---------------------------------------------------------------------------
# configuration schema
# ---------------------------------------------------------------------------

_NUM = (int, float)

DEFAULT_CONFIG = {
    "scenario": "default",
    "scales": {"lambda0": 0.5235987755982988, "ell_c": 0.1047197551196597,
               "H": 1.0, "sigma": 0.15, "alpha": 0.05},
    "stack": {"n0_sq": [1.0, 0.2], "ne_sq": [3.0, 0.3], "n2_sq": [6.0, 0.5],
              "L": 1.0, "kappa_m": 0.2},
    "medium": {"intensity": 40.0, "radius_range": [0.5, 1.0],
               "contrast_re_range": [0.05, 0.15],
               "contrast_im_range": [0.0, 0.02], "cap_sigmas": 8.0},
    "solver": {"points_per_wavelength": 10, "sponge_width": 3.0,
               "sponge_strength": 6.0},
    "domain": {"origin": [-1.6, -1.7], "spacing": 0.02,
               "shape": [161, 131]},
    "source": {"center": [0.0, 0.45], "width": 0.12},
    "k_region": [[-0.5, 0.5], [0.1, 0.7]],
    "ensemble": {"seed_base": 0, "count": 4, "beta_values": [0.08],
                 "min_samples": 200},
    "transport": {"n_angles": 64, "max_bounces": 80, "min_weight": 1e-13,
                  "detector_z": 0.25, "x_window": [-3.0, 3.0],
                  "wigner_shape": [64, 48], "max_cells": 1024},
    "diagnostics": {"k_sweep": [6.0, 12.0, 24.0],
                    "kappa_sweep": [0.05, 0.1, 0.2, 0.5],
                    "include_linf": False},
    "correlation": {"base_point": [0.0, -0.5], "offsets": 8,
                    "offset_step": 0.02},
    "output_dir": "out",
}

_SCHEMA = {
    "scenario": str,
    "scales": {"lambda0": _NUM, "ell_c": _NUM, "H": _NUM, "sigma": _NUM,
               "alpha": _NUM},
    "stack": {"n0_sq": list, "ne_sq": list, "n2_sq": list, "L": _NUM,
              "kappa_m": _NUM},
    "medium": {"intensity": _NUM, "radius_range": list,
               "contrast_re_range": list, "contrast_im_range": list,
               "cap_sigmas": _NUM},
    "solver": {"points_per_wavelength": _NUM, "sponge_width": _NUM,
               "sponge_strength": _NUM},
    "domain": {"origin": list, "spacing": _NUM, "shape": list},
    "source": {"center": list, "width": _NUM},
    "k_region": list,
    "ensemble": {"seed_base": int, "count": int, "beta_values": list,
                 "min_samples": int},
    "transport": {"n_angles": int, "max_bounces": int, "min_weight": _NUM,
                  "detector_z": _NUM, "x_window": list,
                  "wigner_shape": list, "max_cells": int},
    "diagnostics": {"k_sweep": list, "kappa_sweep": list,
                    "include_linf": bool},
    "correlation": {"base_point": list, "offsets": int, "offset_step": _NUM},
    "output_dir": str,
}


def validate_config(cfg, schema=None, path=""):
    """Reject unknown keys and type mismatches with a dotted pointer."""
    if schema is None:
        schema = _SCHEMA
    if not isinstance(cfg, dict):
        raise ConfigError(f"expected an object at '{path or '<root>'}'")
    for key, value in cfg.items():
        here = f"{path}.{key}" if path else key
        if key not in schema:
            raise ConfigError(f"unknown key '{here}'")
        want = schema[key]
        if isinstance(want, dict):
            validate_config(value, want, here)
        elif want is int:
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"expected an integer at '{here}'")
        elif want is bool:
            if not isinstance(value, bool):
                raise ConfigError(f"expected a boolean at '{here}'")
        elif not isinstance(value, want):
            name = want[0].__name__ if isinstance(want, tuple) \
                else want.__name__
            raise ConfigError(f"expected {name} at '{here}'")


def _merge(base, override, path=""):
    out = dict(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            out[key] = _merge(base[key], value, here)
        else:
            out[key] = value
    return out


def load_config(path, overrides=()):
    """Read, merge onto defaults, apply --set overrides, validate."""
    try:
        user = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    validate_config(user)
    # deep-copy so --set overrides can never alias into the defaults
    cfg = _merge(copy.deepcopy(DEFAULT_CONFIG), user)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not of the form k=v")
        dotted, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = dotted.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"unknown key '{dotted}'")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown key '{dotted}'")
        node[parts[-1]] = value
    validate_config(cfg)
    return cfg


def config_hash(cfg) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# scene assembly
# ---------------------------------------------------------------------------

def _scene(cfg):
    """Instantiate the model objects a command needs from the config."""
    s = cfg["scales"]
    scales = scales_from_physical(s["lambda0"], s["ell_c"], s["H"],
                                  s["sigma"], s["alpha"])
    st = cfg["stack"]
    stack = LayerStack(complex(*st["n0_sq"]), complex(*st["ne_sq"]),
                       complex(*st["n2_sq"]), L=st["L"],
                       kappa_m=st["kappa_m"])
    m = cfg["medium"]
    spec = InclusionSpec(intensity=m["intensity"],
                         radius_range=tuple(m["radius_range"]),
                         contrast_re_range=tuple(m["contrast_re_range"]),
                         contrast_im_range=tuple(m["contrast_im_range"]),
                         cap_sigmas=m["cap_sigmas"], d=2)
    sv = cfg["solver"]
    config = SolverConfig(points_per_wavelength=sv["points_per_wavelength"],
                          sponge_width=sv["sponge_width"],
                          sponge_strength=sv["sponge_strength"])
    dom = cfg["domain"]
    h = dom["spacing"]
    grid = Grid(origin=tuple(dom["origin"]), spacing=(h, h),
                shape=tuple(dom["shape"]))
    c = cfg["source"]
    X, Z = grid.meshgrid()
    bump = np.exp(-((X - c["center"][0]) / c["width"]) ** 2
                  - ((Z - c["center"][1]) / c["width"]) ** 2)
    f = ComplexField(grid, bump.astype(complex))
    k_region = tuple(tuple(r) for r in cfg["k_region"])
    return {"scales": scales, "stack": stack, "spec": spec,
            "config": config, "grid": grid, "f": f, "k_region": k_region,
            "k": scales.k, "sigma": scales.sigma}


def _covariance(scene) -> CovarianceModel:
    a = analytic_covariance_model(scene["spec"])
    return CovarianceModel.from_integrals(a.sigma_r_sq, a.sigma_i_sq,
                                          a.gamma, scene["sigma"],
                                          a.corr_range)


def _out_dir(cfg, override=None) -> Path:
    raw = Path(override) if override else Path(cfg["output_dir"])
    if not raw.is_absolute():
        raw = Path(os.environ.get("SLABWAVE_OUTPUT_ROOT", ".")) / raw
    raw.mkdir(parents=True, exist_ok=True)
    return raw


def _write_manifest(out, command, cfg, seeds, t0, artifacts, extra=None):
    manifest = {
        "command": command,
        "scenario": cfg["scenario"],
        "config_hash": config_hash(cfg),
        "version": __version__,
        "seeds": [int(s) for s in seeds],
        "wall_time_s": round(time.monotonic() - t0, 3),
        "artifacts": [str(a) for a in artifacts],
    }
    if extra:
        manifest.update(extra)
    path = out / f"{command}-manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def _write_csv(path, header, rows):
    with Path(path).open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, float) else v
                             for v in row])
    return path


def _seeds(cfg):
    e = cfg["ensemble"]
    return [e["seed_base"] + i for i in range(e["count"])]


def _slab_box(scene):
    (x_lo, x_hi), _ = scene["grid"].bounds()
    return ((x_lo, x_hi), (-scene["stack"].L, 0.0))


# ---------------------------------------------------------------------------
# command handlers
# ---------------------------------------------------------------------------

def _cmd_generate_medium(cfg, out, jobs):
    t0 = time.monotonic()
    scene = _scene(cfg)
    beta = min(cfg["ensemble"]["beta_values"])
    spec = scene["spec"].with_beta(beta)
    box = _slab_box(scene)
    artifacts, rows = [], []
    for seed in _seeds(cfg):
        r = sample_realization(spec, box, seed)
        path = save_realization(r, out / f"medium-{seed:05d}.bin")
        artifacts.append(path)
        rows.append([seed, r.centers.shape[0], beta])
    stats = _write_csv(out / "medium-stats.csv",
                       ["seed", "n_inclusions", "beta"], rows)
    artifacts.append(stats)
    _write_manifest(out, "generate-medium", cfg, _seeds(cfg), t0, artifacts)
    return EXIT_OK


def _cmd_solve(cfg, out, jobs):
    t0 = time.monotonic()
    scene = _scene(cfg)
    seed = cfg["ensemble"]["seed_base"]
    beta = min(cfg["ensemble"]["beta_values"])
    u = solve_homogenized(scene["f"], scene["stack"], scene["k"],
                          scene["config"])
    if not np.all(np.isfinite(u.values)):
        raise NumericalFailure("homogenized solve produced non-finite values")
    r = sample_realization(scene["spec"].with_beta(beta), _slab_box(scene),
                           seed)
    u_beta = solve_random(r, scene["f"], scene["stack"], scene["k"],
                          scene["sigma"], scene["config"])
    if not np.all(np.isfinite(u_beta.values)):
        raise NumericalFailure("random solve produced non-finite values")
    a = [save_field(u, out / "u.bin"), save_field(u_beta, out / "u_beta.bin")]
    _write_manifest(out, "solve", cfg, [seed], t0, a,
                    {"beta": beta, "sigma": scene["sigma"]})
    return EXIT_OK


def _ensemble_path(out) -> Path:
    return out / "ensemble"


def _cmd_corrector_stats(cfg, out, jobs):
    t0 = time.monotonic()
    scene = _scene(cfg)
    betas = tuple(cfg["ensemble"]["beta_values"])
    seeds = _seeds(cfg)
    ens = build_ensemble(scene["f"], scene["stack"], scene["k"],
                         scene["sigma"], scene["spec"], betas, seeds,
                         scene["k_region"], config=scene["config"],
                         n_jobs=jobs)
    manifest_path = save_ensemble(ens, _ensemble_path(out))
    rows = []
    for bi, beta in enumerate(ens.beta_values):
        for si, seed in enumerate(ens.seeds):
            rows.append([beta, seed, float(ens.norm_v[bi, si]),
                         float(ens.norm_resid[bi, si])])
    stats = _write_csv(out / "corrector-stats.csv",
                       ["beta", "seed", "norm_v_L2K", "norm_resid_L2K"],
                       rows)
    _write_manifest(out, "corrector-stats", cfg, seeds, t0,
                    [manifest_path, stats],
                    {"ensemble_hash": ens.config_hash})
    return EXIT_OK


def _load_full_ensemble(cfg, out, scene) -> CorrectorEnsemble:
    """Reattach stored projections/norms to a rebuilt solver context."""
    path = _ensemble_path(out)
    if not path.with_suffix(".json").exists():
        raise MissingArtifact(
            f"missing ensemble: expected {path.with_suffix('.json')} "
            "(run corrector-stats or scaling-study first)")
    stored = load_ensemble(path)
    u = solve_homogenized(scene["f"], scene["stack"], scene["k"],
                          scene["config"])
    phis = make_test_functions(scene["grid"], scene["k_region"])
    expected = ensemble_config_hash(scene["stack"], scene["k"],
                                    scene["sigma"], scene["spec"],
                                    scene["config"], scene["grid"])
    if stored["config_hash"] != expected:
        raise ConfigError(
            "stored ensemble was built from a different config "
            f"(hash {stored['config_hash']} != {expected})")
    return CorrectorEnsemble(
        stack=scene["stack"], k=scene["k"], sigma=scene["sigma"],
        spec=scene["spec"], config=scene["config"],
        beta_values=tuple(stored["beta_values"]),
        seeds=tuple(stored["seeds"]), k_region=scene["k_region"], u=u,
        phis=phis, proj_du=stored["proj_du"], proj_v=stored["proj_v"],
        norm_v=stored["norm_v"], norm_resid=stored["norm_resid"],
        config_hash=stored["config_hash"])


def _cmd_clt_test(cfg, out, jobs):
    t0 = time.monotonic()
    scene = _scene(cfg)
    ens = _load_full_ensemble(cfg, out, scene)
    cov = _covariance(scene)
    rows = []
    for phi_index in range(len(ens.phis)):
        res = clt_test(ens, phi_index, cov,
                       min_samples=cfg["ensemble"]["min_samples"])
        row = res.as_row()
        row["phi_index"] = phi_index
        rows.append(row)
    header = ["phi_index", "beta", "n", "ks_p_re", "ks_p_im", "cov_ratio",
              "pred_var_re", "pred_var_im", "emp_var_re", "emp_var_im"]
    table = _write_csv(out / "clt-test.csv", header,
                       [[r[h] for h in header] for r in rows])
    _write_manifest(out, "clt-test", cfg, ens.seeds, t0, [table],
                    {"n_phi": len(ens.phis)})
    return EXIT_OK


def _cmd_scaling_study(cfg, out, jobs):
    t0 = time.monotonic()
    scene = _scene(cfg)
    betas = tuple(cfg["ensemble"]["beta_values"])
    seeds = _seeds(cfg)
    fit, ens = scaling_study(betas, len(seeds), f=scene["f"],
                             stack=scene["stack"], k=scene["k"],
                             sigma=scene["sigma"], spec=scene["spec"],
                             k_region=scene["k_region"],
                             config=scene["config"],
                             seed_base=cfg["ensemble"]["seed_base"],
                             n_jobs=jobs)
    manifest_path = save_ensemble(ens, _ensemble_path(out))
    rows = [[b, float(mv), float(mr)] for b, mv, mr
            in zip(fit.beta_values, fit.mean_v, fit.mean_resid)]
    means = _write_csv(out / "scaling-means.csv",
                       ["beta", "mean_norm_v", "mean_norm_resid"], rows)
    fits = _write_csv(out / "scaling-fits.csv",
                      ["slope_v", "slope_v_se", "slope_resid",
                       "slope_resid_se", "monotone", "skipped"],
                      [[fit.slope_v, fit.slope_v_se, fit.slope_resid,
                        fit.slope_resid_se, fit.monotone, fit.skipped]])
    _write_manifest(out, "scaling-study", cfg, seeds, t0,
                    [manifest_path, means, fits],
                    {"slope_v": fit.slope_v,
                     "slope_resid": fit.slope_resid})
    return EXIT_OK


def _cmd_transport(cfg, out, jobs):
    t0 = time.monotonic()
    scene = _scene(cfg)
    tc = cfg["transport"]
    u = solve_homogenized(scene["f"], scene["stack"], scene["k"],
                          scene["config"])
    med = TransportMedium.from_stack(scene["stack"], scene["k"])
    src = emit_source(u, med, scene["scales"], _covariance(scene),
                      n_angles=tc["n_angles"], max_cells=tc["max_cells"])
    res = propagate(src, med, detector_z=tc["detector_z"],
                    x_window=tuple(tc["x_window"]),
                    caps=Caps(max_bounces=tc["max_bounces"],
                              min_weight=tc["min_weight"]),
                    wigner_shape=tuple(tc["wigner_shape"]), n_jobs=jobs)
    report = flux_balance(res)
    if report.imbalance > 1e-8:
        raise NumericalFailure(
            f"transport flux imbalance {report.imbalance:.3e} exceeds 1e-8")
    if np.any(res.wigner.values < 0.0):
        raise NumericalFailure("negative phase-space density")
    artifacts = [
        save_field(u, out / "u.bin"),
        save_wigner(res.wigner, out / "wigner.bin"),
        detector_flux_csv(res.detector, out / "detector-flux.csv"),
    ]
    flux_path = out / "flux-report.json"
    flux_path.write_text(json.dumps(
        {"emitted": report.emitted, "absorbed": report.absorbed,
         "escaped": report.escaped, "capped": report.capped,
         "dropped": report.dropped, "imbalance": report.imbalance,
         **report.items}, indent=2, sort_keys=True))
    artifacts.append(flux_path)
    _write_manifest(out, "transport", cfg, [], t0, artifacts,
                    {"imbalance": report.imbalance})
    return EXIT_OK


def _cmd_green_diagnostics(cfg, out, jobs):
    t0 = time.monotonic()
    scene = _scene(cfg)
    dg = cfg["diagnostics"]
    rows = green_norm_diagnostics(scene["stack"], dg["k_sweep"],
                                  dg["kappa_sweep"],
                                  alpha=scene["scales"].alpha,
                                  include_linf=dg["include_linf"])
    header = ["k", "kappa_e", "norm_name", "value", "normalized_ratio"]
    table = _write_csv(out / "green-diagnostics.csv", header,
                       [[r[h] for h in header] for r in rows])
    ratios = [r["normalized_ratio"] for r in rows]
    if not all(np.isfinite(ratios)):
        raise NumericalFailure("non-finite normalized envelope ratio")
    _write_manifest(out, "green-diagnostics", cfg, [], t0, [table],
                    {"ratio_min": min(ratios), "ratio_max": max(ratios)})
    return EXIT_OK


def _cmd_correlation(cfg, out, jobs):
    t0 = time.monotonic()
    scene = _scene(cfg)
    w_path = out / "wigner.bin"
    u_path = out / "u.bin"
    for path in (w_path, u_path):
        if not path.exists():
            raise MissingArtifact(
                f"missing transport output: expected {path} "
                "(run the transport command first)")
    W = load_wigner(w_path)
    u = load_field(u_path)
    cc = cfg["correlation"]
    base = tuple(cc["base_point"])
    rows = []
    for i in range(cc["offsets"] + 1):
        dx = i * cc["offset_step"]
        x = (base[0] + dx / 2.0, base[1])
        y = (base[0] - dx / 2.0, base[1])
        val = correlation_C0(x, y, u, W, scene["scales"])
        herm = correlation_C0(y, x, u, W, scene["scales"])
        rows.append([x[0], x[1], y[0], y[1], val.real, val.imag,
                     abs(val - np.conj(herm))])
    table = _write_csv(out / "correlation.csv",
                       ["x1", "z1", "x2", "z2", "re", "im",
                        "hermitian_residual"], rows)
    _write_manifest(out, "correlation", cfg, [], t0, [table])
    return EXIT_OK


_COMMANDS = {
    "generate-medium": _cmd_generate_medium,
    "solve": _cmd_solve,
    "corrector-stats": _cmd_corrector_stats,
    "clt-test": _cmd_clt_test,
    "scaling-study": _cmd_scaling_study,
    "transport": _cmd_transport,
    "green-diagnostics": _cmd_green_diagnostics,
    "correlation": _cmd_correlation,
}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _build_parser():
    parser = argparse.ArgumentParser(
        prog="slabwave",
        description="Layered random-media Helmholtz pipeline driver")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", help="path to the JSON run configuration")
        p.add_argument("--set", dest="overrides", action="append",
                       default=[], metavar="KEY=VALUE",
                       help="override a config entry (dotted path)")
        p.add_argument("--jobs", type=int, default=1,
                       help="process-pool size for ensemble members")
        p.add_argument("--output", default=None,
                       help="output directory (overrides output_dir)")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        if args.jobs < 1:
            raise ConfigError("--jobs must be a positive integer")
        out = _out_dir(cfg, args.output)
        return _COMMANDS[args.command](cfg, out, args.jobs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"missing dependency: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        # model-object validation errors are config errors at this surface
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
