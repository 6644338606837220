"""``dynlead`` command line: generate | analyze | verify.

Exit codes: 0 success, 1 verification failure, 2 input error.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import analysis as an
from .config import ConfigError, ExperimentConfig, config_hash, dump_config, from_dict, load_config
from .core import (
    LeadField, MatrixFileError, NoiseModel, SensorArray, SourceSpace, load_edges, read_matrix,
    save_edges, save_matrix,
)
from .dynamics import DynamicsModel
from .dynmap import (
    ModelKind, assemble_dyn, assemble_ind, assemble_naive_reversal, assemble_sts,
    build_sts_temporal_cov, stationary_cross_cov,
)
from .forward import SphereConfig, build_sphere_geometry, compute_lead_field
from .oracle import CheckResult, check_cross_cov, simulate, verify_orthogonality
from .reports import write_csv, write_json, write_source_values, write_spectrum

log = logging.getLogger("dynlead")

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    pass


@dataclass
class Workspace:
    sources: SourceSpace
    sensors: SensorArray | None
    lead: LeadField
    sphere_radius: float | None
    positions_known: bool
    warnings: tuple = ()
    neighbor_radius: float | None = None


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------


def _import_workspace(cfg: ExperimentConfig) -> Workspace:
    imp = cfg.geometry.imports
    gain = read_matrix(imp.leadfield)
    n, p = gain.shape
    edges = load_edges(imp.graph)
    if edges:
        top = max(max(i, j) for i, j, _ in edges)
        if top >= p:
            raise InputError(f"{imp.graph}: source index {top} out of range for a lead field with {p} columns")
    positions_known = imp.positions is not None
    pos = read_matrix(imp.positions) if positions_known else np.zeros((p, 3))
    if pos.shape != (p, 3):
        raise InputError(f"{imp.positions}: expected {p} x 3 positions, got {pos.shape[0]} x {pos.shape[1]}")
    if imp.orientations is not None:
        ori = read_matrix(imp.orientations)
        if ori.shape != (p, 3):
            raise InputError(f"{imp.orientations}: expected {p} x 3 orientations, got {ori.shape}")
    else:
        ori = np.tile([0.0, 0.0, 1.0], (p, 1))
    try:
        src = SourceSpace.from_edges(pos, ori, edges)
    except ValueError as exc:
        raise InputError(f"{imp.graph}: {exc}") from None
    return Workspace(src, None, LeadField(gain), imp.sphere_radius, positions_known and imp.sphere_radius is not None)


def build_workspace(cfg: ExperimentConfig) -> Workspace:
    if cfg.geometry.mode == "import":
        return _import_workspace(cfg)
    sph = cfg.geometry.sphere
    geo = build_sphere_geometry(sph)
    lead = compute_lead_field(geo.sources, geo.sensors, sphere_radius=sph.sphere_radius)
    return Workspace(geo.sources, geo.sensors, lead, sph.sphere_radius, True, geo.warnings, geo.neighbor_radius)


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.out is not None:
        cfg.output_dir = str(args.out)
    if args.seed is not None:
        if args.command == "verify":
            cfg.oracle.seed = args.seed
        else:
            cfg.geometry.sphere = dataclasses.replace(cfg.geometry.sphere, seed=args.seed)
    if args.tolerance is not None:
        if args.command == "verify":
            cfg.oracle.rtol = args.tolerance
        else:
            cfg.analysis.tolerance = args.tolerance
    return cfg


def _prepare_out(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise InputError(f"output directory {out} is not writable: {exc.strerror or exc}") from None
    dump_config(cfg, out / "effective_config.yaml")
    return out


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_generate(cfg: ExperimentConfig, args=None) -> int:
    ws = build_workspace(cfg)
    out = _prepare_out(cfg)
    gdir = out / "geometry"
    gdir.mkdir(exist_ok=True)
    save_matrix(ws.sources.positions, gdir / "source_positions.dlf")
    save_matrix(ws.sources.orientations, gdir / "source_orientations.dlf")
    save_edges(ws.sources.edges(), gdir / "graph.csv")
    save_matrix(ws.lead.gain, gdir / "leadfield.dlf")
    if ws.sensors is not None:
        save_matrix(ws.sensors.positions, gdir / "sensor_positions.dlf")
        save_matrix(ws.sensors.orientations, gdir / "sensor_orientations.dlf")
    counts = ws.sources.neighbor_counts()
    dists = [d for _, _, d in ws.sources.edges()]
    mean_dist = float(np.mean(dists)) if dists else float("nan")
    meta = {
        "n": ws.lead.sensor_count,
        "p": ws.lead.source_count,
        "mode": cfg.geometry.mode,
        "sphere_radius": ws.sphere_radius,
        "neighbor_radius": ws.neighbor_radius,
        "mean_neighbor_distance_m": mean_dist,
        "mean_neighbor_count": float(np.mean(counts)),
        "edges": len(dists),
        "warnings": list(ws.warnings),
        "config_sha256": config_hash(cfg),
    }
    write_json(gdir / "geometry.json", meta)
    for w in ws.warnings:
        log.warning(w)
    print(f"generated n={meta['n']} p={meta['p']} mean_neighbor_distance={mean_dist * 1e3:.3f} mm "
          f"mean_neighbors={meta['mean_neighbor_count']:.2f} -> {gdir}")
    return EXIT_OK


def _check_budget(cfg: ExperimentConfig, n: int, p: int, allow_large: bool):
    k_max = max(cfg.analysis.k)
    need_mb = (2 * k_max + 1) * n * p * 8 / 2**20
    if need_mb > cfg.analysis.memory_budget_mb:
        msg = (f"D(k={k_max}) needs ~{need_mb:.1f} MiB per stacked mapping, above the "
               f"{cfg.analysis.memory_budget_mb:g} MiB budget")
        if not allow_large:
            raise InputError(msg + "; rerun with --allow-large to proceed")
        log.warning(msg)


def _mapping(kind: str, ws: Workspace, dyn, gamma, t, k):
    if kind == "DYN":
        return assemble_dyn(ws.lead, dyn, k)
    if kind == "IND":
        return assemble_ind(ws.lead, k)
    return assemble_sts(ws.lead, gamma, t, k)


def cmd_analyze(cfg: ExperimentConfig, args=None) -> int:
    ws = build_workspace(cfg)
    n, p = ws.lead.sensor_count, ws.lead.source_count
    _check_budget(cfg, n, p, bool(getattr(args, "allow_large", False)))
    out = _prepare_out(cfg)
    sha = config_hash(cfg)
    ks = list(cfg.analysis.k)
    models = list(cfg.analysis.models)
    tol = cfg.analysis.tolerance

    dyn = None
    if "DYN" in models:
        d = cfg.dynamics
        dyn = DynamicsModel.build(ws.sources, ws.lead, d.phi, d.lam, d.nu)
    gamma, t_sts = None, None
    if "STS" in models:
        T, t_sts = cfg.sts_window()
        gamma = build_sts_temporal_cov(T, cfg.sts.delta, cfg.sts.psi)

    depth = an.source_depth(ws.sources.positions, ws.sphere_radius) if ws.positions_known else None
    extra = {"depth": depth} if depth is not None else None
    static = an.sensitivity(assemble_ind(ws.lead, 0))

    rank_rows, spectra_summary, sens, maps = [], {}, {}, {}
    for kind in models:
        static_kind = an.SensitivityMap(static.values, 0, ModelKind(kind))
        for k in ks:
            m = _mapping(kind, ws, dyn, gamma, t_sts, k)
            rep = an.singular_spectrum(m, tol)
            rank_rows.append((kind, k, rep.numerical_rank, rep.shape[0], rep.shape[1], rep.tolerance))
            spectra_summary[f"{kind}_k{k}"] = rep.summary()
            write_spectrum(out / "spectra" / f"{kind.lower()}_k{k}.csv", rep, sha)
            s = an.sensitivity(m)
            sens[kind, k] = s
            maps[kind, k] = m
            write_source_values(out / "sensitivity" / f"absolute_{kind.lower()}_k{k}.csv", s.values, sha, extra)
            if k > 0:
                rel = an.relative_sensitivity(s, static_kind)
                write_source_values(out / "sensitivity" / f"relative_{kind.lower()}_k{k}.csv", rel, sha, extra)
        for k1, k2 in zip(ks, ks[1:]):
            proj = an.null_space_projected_sensitivity(maps[kind, k2], maps[kind, k1], tol)
            write_source_values(out / "sensitivity" / f"nullspace_{kind.lower()}_k{k1}_k{k2}.csv", proj, sha, extra)
        # only the neighboring pairs are needed; free the stacks as we go
        for k in ks:
            maps.pop((kind, k))

    diffs = {}
    if "DYN" in models:
        for other in (m for m in models if m != "DYN"):
            for k in ks:
                diff = an.sensitivity_difference(sens["DYN", k], sens[other, k])
                write_source_values(out / "sensitivity" / f"difference_dyn_minus_{other.lower()}_k{k}.csv",
                                    diff, sha, extra)
                diffs[f"dyn_minus_{other.lower()}_k{k}"] = {
                    "fraction_positive": float(np.mean(diff > 0)),
                    "mean": float(np.mean(diff)),
                }

    write_csv(out / "rank_table.csv", ["model", "k", "rank", "rows", "cols", "tolerance"], rank_rows, sha)

    depth_corr = {}
    if depth is not None:
        # IND and STS gains are spatially flat, so only DYN has a meaningful correlation
        if "DYN" in models:
            for k in ks[1:] if ks[0] == 0 else ks:
                rel = an.relative_sensitivity(sens["DYN", k], an.SensitivityMap(static.values, 0, ModelKind.DYN))
                depth_corr[f"DYN_k{k}"] = an.depth_gain_correlation(depth, rel)

    static_rank = an.singular_spectrum(ws.lead.gain, tol).numerical_rank
    summary = {
        "n": n,
        "p": p,
        "k": ks,
        "models": models,
        "rank_X": static_rank,
        "ranks": {kind: {str(k): r for kk, k, r, *_ in rank_rows if kk == kind} for kind in models},
        "spectra": spectra_summary,
        "depth_gain_spearman": depth_corr,
        "differences": diffs,
        "config_sha256": sha,
    }
    if gamma is not None:
        summary["sts"] = {"T": gamma.horizon, "t": t_sts, "delta": cfg.sts.delta, "psi": cfg.sts.psi}
    write_json(out / "summary.json", summary)

    for kind in models:
        ranks = " ".join(f"k={k}:{summary['ranks'][kind][str(k)]}" for k in ks)
        print(f"{kind:>3} rank {ranks}")
    print(f"wrote reports to {out}")
    return EXIT_OK


def oracle_setup(cfg: ExperimentConfig):
    """Small seeded model for the Monte Carlo identity suite."""
    o = cfg.oracle
    sph = SphereConfig(sensor_count=o.sensor_count, source_count=o.source_count, seed=o.geometry_seed)
    geo = build_sphere_geometry(sph)
    lead = compute_lead_field(geo.sources, geo.sensors, sphere_radius=sph.sphere_radius)
    nu = cfg.dynamics.nu if np.isscalar(cfg.dynamics.nu) else None
    dyn = DynamicsModel.build(geo.sources, lead, cfg.dynamics.phi, cfg.dynamics.lam, nu)
    signal_power = np.trace(lead.gain @ dyn.steady_cov @ lead.gain.T) / o.sensor_count
    noise = NoiseModel.isotropic(o.sensor_count, o.noise_ratio * signal_power)
    return lead, dyn, noise


def run_verification(cfg: ExperimentConfig, negative_control: bool = False) -> dict:
    o = cfg.oracle
    lead, dyn, noise = oracle_setup(cfg)
    checks: list[CheckResult] = []

    diag = dyn.diagnostics()
    checks.append(CheckResult("lyapunov_residual", diag["lyapunov_residual"], 1e-10,
                              diag["lyapunov_residual"] < 1e-10))
    checks.append(CheckResult("backward_identity", diag["backward_identity"], 1e-10,
                              diag["backward_identity"] < 1e-10))
    checks.append(CheckResult("back_input_cov_psd", -diag["back_input_cov_min_eig"], diag["psd_tolerance"],
                              diag["back_input_cov_min_eig"] >= -diag["psd_tolerance"]))

    run = simulate(dyn, lead, noise, o.T, o.seed)
    lags = [0] + [s * lag for lag in o.lags for s in (1, -1)]
    for lag in lags:
        checks.append(check_cross_cov(run, lag, stationary_cross_cov(dyn, lag), o.rtol))

    k = max([abs(v) for v in o.offsets] + [2])
    mapping = assemble_dyn(lead, dyn, k)
    for off in o.offsets:
        checks.append(verify_orthogonality(run, mapping, off, o.batches))

    neg_off = min([v for v in o.offsets if v < 0], default=-2)
    naive = verify_orthogonality(run, assemble_naive_reversal(lead, dyn, k), neg_off, o.batches)
    if negative_control:
        checks.append(dataclasses.replace(naive, name=f"naive_reversal_offset{neg_off:+d}"))
    else:
        checks.append(dataclasses.replace(naive, name=f"naive_reversal_offset{neg_off:+d}",
                                          expect="exceeds_bound", passed=naive.measured > naive.bound))

    return {
        "T": o.T,
        "seed": o.seed,
        "p": o.source_count,
        "n": o.sensor_count,
        "widened_bounds": any(c.widened for c in checks),
        "negative_control_mode": negative_control,
        "checks": [c.as_dict() for c in checks],
        "all_passed": all(c.passed for c in checks),
        "config_sha256": config_hash(cfg),
    }


def cmd_verify(cfg: ExperimentConfig, args=None) -> int:
    out = _prepare_out(cfg)
    report = run_verification(cfg, bool(getattr(args, "negative_control", False)))
    write_json(out / "verify_report.json", report)
    for c in report["checks"]:
        flag = "PASS" if c["passed"] else "FAIL"
        note = " (widened)" if c["widened"] else ""
        print(f"[{flag}] {c['name']:<32} measured={c['measured']:.3e} bound={c['bound']:.3e} "
              f"expect={c['expect']}{note}")
    print(f"wrote {out / 'verify_report.json'}")
    return EXIT_OK if report["all_passed"] else EXIT_FAIL


COMMANDS = {"generate": cmd_generate, "analyze": cmd_analyze, "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynlead", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, help="YAML experiment config (defaults if omitted)")
        sp.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
        sp.add_argument("--seed", type=int, help="geometry seed (generate/analyze) or oracle seed (verify)")
        sp.add_argument("--tolerance", type=float,
                        help="rank tolerance (analyze) or cross-covariance rtol (verify)")
        sp.add_argument("--threads", type=int, help="limit BLAS/OpenMP threads")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "analyze":
            sp.add_argument("--allow-large", action="store_true",
                            help="proceed when D(k_max) exceeds the memory budget")
        if name == "verify":
            sp.add_argument("--negative-control", action="store_true",
                            help="score the naive time-reversal block as a real identity (expected to fail)")
    return parser


def _threads(n):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config is not None else from_dict({}).validate()
        cfg = _apply_overrides(cfg, args)
        cfg.validate()
        with _threads(args.threads):
            return COMMANDS[args.command](cfg, args)
    except (ConfigError, InputError, MatrixFileError, FileNotFoundError) as exc:
        print(f"dynlead: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
