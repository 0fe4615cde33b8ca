"""Command-line pipeline: generate, match, register, evaluate, pipeline.

Every command is reproducible: the same config and seed produce
byte-identical output files.  Wall-clock timings go to stdout only, never
into output files.  Exit codes: 0 success, 2 config error, 3 data error,
4 solver non-convergence, 5 internal error.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .dataset import (DatasetSample, generate_sample, load_patient,
                      read_sample, write_sample)
from .errors import ConfigError, DataError, ParseError, SolverError
from .features import compute_fpfh
from .fem import MaterialParams
from .geometry import TriMesh
from .matching import (CorrespondenceSet, MatchingConfig, dual_softmax,
                       load_correspondences, match_by_nearest_feature,
                       mutual_nn_threshold, save_correspondences, similarity)
from .metrics import (aggregate, format_table, fre, hausdorff,
                      matching_metrics, tre)
from .meshio import save_mesh_ply
from .registration import (CgOptions, register_sample,
                           surface_positions_from_registration)
from .synth import write_patient
from .tensorio import read_tensors

_CONFIG_KEYS = {
    "patient": str, "out": str, "seed": int, "count": int, "workers": int,
    "provider": str, "features": str, "tau": float, "theta": float,
    "fpfh_normal_radius": float, "fpfh_radius": float,
    "young": float, "poisson": float, "k": float, "substeps": int,
    "prealign": bool, "matches": str, "sample": str, "run": str,
}


def _load_run_config(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    if sys.version_info >= (3, 11):
        import tomllib
    else:
        import tomli as tomllib
    try:
        with open(p, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"cannot parse config {p}: {e}")
    for key, val in raw.items():
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"unknown config key '{key}' in {p}")
        want = _CONFIG_KEYS[key]
        if want is float and isinstance(val, int) and not isinstance(val, bool):
            val = float(val)
        if not isinstance(val, want) or (want is int and isinstance(val, bool)):
            raise ConfigError(
                f"config key '{key}' must be {want.__name__}, got {type(val).__name__}"
            )
        raw[key] = val
    return raw


def _opt(args, config, key, default=None):
    """Flag value if given, else config file value, else default."""
    val = getattr(args, key, None)
    if val is not None:
        return val
    return config.get(key, default)


def _require(val, flag):
    if val is None:
        raise ConfigError(f"missing required option {flag}")
    return val


def _dump_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _sample_dir_name(seed: int) -> str:
    return f"sample_{seed:05d}"


def _generate_one(patient_path: str, seed: int, out_root: str):
    patient = load_patient(patient_path)
    t0 = time.perf_counter()
    sample = generate_sample(patient, seed)
    elapsed = time.perf_counter() - t0
    write_sample(sample, Path(out_root) / _sample_dir_name(seed))
    return seed, elapsed, sample.flagged


def cmd_generate(args) -> int:
    config = _load_run_config(args.config)
    patient_path = _require(_opt(args, config, "patient"), "--patient")
    out_root = Path(_require(_opt(args, config, "out"), "--out"))
    seed_base = int(_opt(args, config, "seed", 0))
    count = int(_opt(args, config, "count", 1))
    workers = int(_opt(args, config, "workers", 1))
    if count < 1:
        raise ConfigError("--count must be >= 1")
    load_patient(patient_path)  # fail fast on config problems
    out_root.mkdir(parents=True, exist_ok=True)

    seeds = list(range(seed_base, seed_base + count))
    results = []
    if workers > 1 and count > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futs = [pool.submit(_generate_one, str(patient_path), s, str(out_root))
                    for s in seeds]
            results = [f.result() for f in futs]
    else:
        for s in seeds:
            results.append(_generate_one(str(patient_path), s, str(out_root)))
    for seed, elapsed, flagged in sorted(results):
        note = "  [short crop]" if flagged else ""
        print(f"{_sample_dir_name(seed)}  {elapsed:.3f}s{note}")
    return 0


def _oracle_features(sample: DatasetSample):
    """Per-point features equal to the ground-truth deformed coordinates."""
    fx = sample.gt_deformed[sample.perm_x]
    pairs = sample.gt_matches.pairs
    vert_of_y = np.empty(len(sample.partial), dtype=np.int64)
    vert_of_y[pairs[:, 1]] = sample.perm_x[pairs[:, 0]]
    fy = sample.gt_deformed[vert_of_y]
    return fx, fy


def _match_one(sample_dir: Path, provider: str, features_path, tau, theta,
               normal_radius, feature_radius, out_dir: Path):
    sample = read_sample(sample_dir)
    if provider == "fpfh":
        fx, _ = compute_fpfh(sample.complete, normal_radius, feature_radius)
        fy, _ = compute_fpfh(sample.partial, normal_radius, feature_radius)
        matches = match_by_nearest_feature(fx, fy)
    elif provider == "features-file":
        if features_path is None:
            raise ConfigError("provider features-file needs --features")
        tensors = read_tensors(features_path)
        for name in ("features_x", "features_y"):
            if name not in tensors:
                raise DataError(f"features file lacks tensor '{name}'")
        fx = tensors["features_x"].astype(np.float64)
        fy = tensors["features_y"].astype(np.float64)
        if len(fx) != len(sample.complete) or len(fy) != len(sample.partial):
            raise DataError("feature row counts do not match the sample clouds")
        if fx.shape[1] != fy.shape[1]:
            raise DataError("feature dimensions differ between clouds")
        M = dual_softmax(similarity(fx, fy), temperature=tau)
        matches = mutual_nn_threshold(M, threshold=theta)
    elif provider == "oracle":
        fx, fy = _oracle_features(sample)
        M = dual_softmax(similarity(fx, fy), temperature=tau)
        matches = mutual_nn_threshold(M, threshold=theta)
    else:
        raise ConfigError(f"unknown provider '{provider}'")

    out_dir.mkdir(parents=True, exist_ok=True)
    save_correspondences(out_dir / "matches.json", matches)
    mm = matching_metrics(matches, sample.gt_matches)
    _dump_json(out_dir / "match_metrics.json", mm.as_dict())
    return mm


def cmd_match(args) -> int:
    config = _load_run_config(args.config)
    sample_dir = Path(_require(_opt(args, config, "sample"), "--sample"))
    if not sample_dir.is_dir():
        raise DataError(f"sample directory not found: {sample_dir}")
    provider = _opt(args, config, "provider", "fpfh")
    cfg = MatchingConfig()
    tau = float(_opt(args, config, "tau", cfg.temperature))
    theta = float(_opt(args, config, "theta", cfg.threshold))
    nr = float(_opt(args, config, "fpfh_normal_radius", 0.025))
    fr = float(_opt(args, config, "fpfh_radius", 0.05))
    out_dir = Path(_opt(args, config, "out", sample_dir))
    t0 = time.perf_counter()
    mm = _match_one(sample_dir, provider, _opt(args, config, "features"),
                    tau, theta, nr, fr, out_dir)
    print(f"matched {sample_dir.name} in {time.perf_counter() - t0:.3f}s: "
          f"MS {mm.matching_score:.2f}%  IR {mm.inlier_ratio:.2f}%  "
          f"({mm.exact_match_count}/{mm.predicted_count} predictions correct)")
    return 0


def _gt_correspondences(sample: DatasetSample) -> CorrespondenceSet:
    pairs = sample.gt_matches.pairs
    return CorrespondenceSet(pairs=pairs, confidence=np.ones(len(pairs)))


def _register_one(sample_dir: Path, matches_spec: str, patient, material,
                  k, substeps, prealign, out_dir: Path):
    sample = read_sample(sample_dir)
    if patient.tet is None:
        raise ConfigError("registration requires a patient with a tet_mesh")
    if matches_spec == "gt":
        matches = _gt_correspondences(sample)
    else:
        if not Path(matches_spec).exists():
            raise DataError(f"matches file not found: {matches_spec}")
        matches = load_correspondences(matches_spec)
    if len(matches) == 0:
        raise DataError("fewer than 1 match")

    outcome = register_sample(sample, matches, patient.tet, material=material,
                              k=k, substeps=substeps, prealign=prealign)
    surf = surface_positions_from_registration(
        patient.surface.vertices, patient.tet, outcome)

    scale = sample.scale_mm
    hidden = sample.hidden_vertex_mask()
    t_reg = tre(surf, sample.gt_deformed, hidden, scale)
    # Identity registration: the preoperative model at its delivered
    # (rigidly perturbed) pose, i.e. what the error is if we do nothing.
    unregistered = sample.rigid.apply(patient.surface.vertices)
    t_base = tre(unregistered, sample.gt_deformed, hidden, scale)
    reduction = 100.0 * (1.0 - t_reg.mean / t_base.mean) if t_base.mean > 0 else 0.0
    f_mm = fre(outcome.registered, outcome.snapped, outcome.snapped_targets, scale)
    f_norm = fre(outcome.registered, outcome.snapped, outcome.snapped_targets, 1.0)
    hd = hausdorff(surf, sample.partial.points, scale_mm=scale)

    out_dir.mkdir(parents=True, exist_ok=True)
    save_mesh_ply(out_dir / "registered.ply",
                  TriMesh(surf, patient.surface.faces))
    _dump_json(out_dir / "displacement.json",
               {"displacement": outcome.field.displacement.tolist()})
    report = outcome.solve_report()
    report["material"] = {"young_modulus": material.young_modulus,
                         "poisson_ratio": material.poisson_ratio}
    report["prealign"] = bool(prealign)
    _dump_json(out_dir / "solve_report.json", report)
    metrics = {
        "tre": t_reg.as_dict(),
        "tre_baseline": t_base.as_dict(),
        "tre_reduction_percent": reduction,
        "fre": f_mm.as_dict(),
        "fre_norm_mean": f_norm.mean,
        "hausdorff_mm": hd,
        "scale_mm": scale,
    }
    _dump_json(out_dir / "reg_metrics.json", metrics)
    return metrics, outcome


def cmd_register(args) -> int:
    config = _load_run_config(args.config)
    sample_dir = Path(_require(_opt(args, config, "sample"), "--sample"))
    if not sample_dir.is_dir():
        raise DataError(f"sample directory not found: {sample_dir}")
    patient = load_patient(_require(_opt(args, config, "patient"), "--patient"))
    matches_spec = _opt(args, config, "matches",
                        str(sample_dir / "matches.json"))
    material = MaterialParams(float(_opt(args, config, "young", 1500.0)),
                              float(_opt(args, config, "poisson", 0.45)))
    k = _opt(args, config, "k")
    substeps = int(_opt(args, config, "substeps", 1))
    prealign = _opt(args, config, "prealign", True)
    out_dir = Path(_opt(args, config, "out", sample_dir))

    t0 = time.perf_counter()
    metrics, outcome = _register_one(sample_dir, matches_spec, patient,
                                     material, k, substeps, prealign, out_dir)
    print(f"registered {sample_dir.name} in {time.perf_counter() - t0:.3f}s: "
          f"TRE {metrics['tre']['mean']:.3f} mm "
          f"(baseline {metrics['tre_baseline']['mean']:.3f} mm, "
          f"{metrics['tre_reduction_percent']:.1f}% reduction)  "
          f"FRE {metrics['fre']['mean']:.3f} mm")
    if not outcome.field.converged:
        print("solver did not converge within the iteration budget",
              file=sys.stderr)
        return 4
    return 0


def _flat_sample_metrics(sample_dir: Path):
    rec = {}
    mpath = sample_dir / "match_metrics.json"
    if mpath.exists():
        with open(mpath) as fh:
            mm = json.load(fh)
        for key in ("matching_score", "inlier_ratio", "exact_match_count",
                    "predicted_count", "gt_count"):
            rec[key] = mm[key]
    rpath = sample_dir / "reg_metrics.json"
    if rpath.exists():
        with open(rpath) as fh:
            rm = json.load(fh)
        rec["tre_mm"] = rm["tre"]["mean"]
        rec["tre_baseline_mm"] = rm["tre_baseline"]["mean"]
        rec["tre_reduction_percent"] = rm["tre_reduction_percent"]
        rec["fre_mm"] = rm["fre"]["mean"]
        rec["fre_norm"] = rm["fre_norm_mean"]
        rec["hausdorff_mm"] = rm["hausdorff_mm"]
    return rec


def cmd_evaluate(args) -> int:
    config = _load_run_config(args.config)
    run_dir = Path(_require(_opt(args, config, "run"), "--run"))
    if not run_dir.is_dir():
        raise DataError(f"run directory not found: {run_dir}")
    sample_dirs = sorted(p for p in run_dir.iterdir()
                         if p.is_dir() and p.name.startswith("sample_"))
    if not sample_dirs:
        raise DataError(f"no sample directories under {run_dir}")

    per_sample, incomplete = [], []
    for sd in sample_dirs:
        core_ok = all((sd / f).exists() for f in
                      ("complete.ply", "partial.ply", "gt_matches.json",
                       "meta.json"))
        rec = _flat_sample_metrics(sd) if core_ok else {}
        if rec:
            rec = {"sample": sd.name, **rec}
            per_sample.append(rec)
        else:
            incomplete.append(sd.name)

    if not per_sample:
        raise DataError("no complete samples with metrics to aggregate")
    agg = aggregate([{k: v for k, v in rec.items() if k != "sample"}
                     for rec in per_sample])
    table = format_table(agg)
    _dump_json(run_dir / "evaluation.json",
               {"per_sample": per_sample, "aggregate": agg,
                "incomplete": incomplete})
    (run_dir / "evaluation.txt").write_text(table + "\n")
    print(table)
    if incomplete:
        print("incomplete samples excluded: " + ", ".join(incomplete),
              file=sys.stderr)
        return 3
    return 0


def cmd_pipeline(args) -> int:
    code = cmd_generate(args)
    if code != 0:
        return code
    config = _load_run_config(args.config)
    out_root = Path(_require(_opt(args, config, "out"), "--out"))
    seed_base = int(_opt(args, config, "seed", 0))
    count = int(_opt(args, config, "count", 1))
    provider = _opt(args, config, "provider", "fpfh")
    cfg = MatchingConfig()
    tau = float(_opt(args, config, "tau", cfg.temperature))
    theta = float(_opt(args, config, "theta", cfg.threshold))
    nr = float(_opt(args, config, "fpfh_normal_radius", 0.025))
    fr = float(_opt(args, config, "fpfh_radius", 0.05))
    patient = load_patient(_require(_opt(args, config, "patient"), "--patient"))
    material = MaterialParams(float(_opt(args, config, "young", 1500.0)),
                              float(_opt(args, config, "poisson", 0.45)))
    k = _opt(args, config, "k")
    substeps = int(_opt(args, config, "substeps", 1))
    prealign = _opt(args, config, "prealign", True)

    worst = 0
    for seed in range(seed_base, seed_base + count):
        sd = out_root / _sample_dir_name(seed)
        t0 = time.perf_counter()
        mm = _match_one(sd, provider, _opt(args, config, "features"),
                        tau, theta, nr, fr, sd)
        metrics, outcome = _register_one(
            sd, str(sd / "matches.json"), patient, material, k, substeps,
            prealign, sd)
        print(f"{sd.name}  match+register {time.perf_counter() - t0:.3f}s  "
              f"MS {mm.matching_score:.2f}%  "
              f"TRE {metrics['tre']['mean']:.3f} mm")
        if not outcome.field.converged:
            worst = max(worst, 4)

    eval_args = argparse.Namespace(config=args.config, run=str(out_root))
    code = cmd_evaluate(eval_args)
    return max(worst, code)


def cmd_make_patient(args) -> int:
    out = Path(args.out)
    path = write_patient(out, kind=args.kind, seed=args.seed)
    print(f"wrote {args.kind} patient bundle to {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lapreg",
        description="Synthetic deformable registration pipeline: dataset "
                    "generation, correspondence matching, elastic "
                    "registration, and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML run config; flags override it")

    g = sub.add_parser("generate", help="synthesize dataset samples")
    common(g)
    g.add_argument("--patient", help="patient config TOML")
    g.add_argument("--out", help="output run directory")
    g.add_argument("--seed", type=int, help="base seed (default 0)")
    g.add_argument("--count", type=int, help="number of samples (default 1)")
    g.add_argument("--workers", type=int, help="parallel workers (default 1)")
    g.set_defaults(func=cmd_generate)

    m = sub.add_parser("match", help="predict correspondences for a sample")
    common(m)
    m.add_argument("--sample", help="sample directory")
    m.add_argument("--provider", choices=("fpfh", "features-file", "oracle"),
                   help="feature source (default fpfh)")
    m.add_argument("--features", help="tensor file with features_x/features_y")
    m.add_argument("--tau", type=float, help="dual-softmax temperature")
    m.add_argument("--theta", type=float, help="confidence threshold")
    m.add_argument("--fpfh-normal-radius", dest="fpfh_normal_radius",
                   type=float, help="normal estimation radius")
    m.add_argument("--fpfh-radius", dest="fpfh_radius", type=float,
                   help="feature neighborhood radius")
    m.add_argument("--out", help="output directory (default: sample dir)")
    m.set_defaults(func=cmd_match)

    r = sub.add_parser("register", help="elastic registration of one sample")
    common(r)
    r.add_argument("--sample", help="sample directory")
    r.add_argument("--patient", help="patient config TOML (needs tet_mesh)")
    r.add_argument("--matches",
                   help="correspondence JSON path, or 'gt' (default: "
                        "<sample>/matches.json)")
    r.add_argument("--young", type=float, help="Young's modulus (default 1500)")
    r.add_argument("--poisson", type=float, help="Poisson ratio (default 0.45)")
    r.add_argument("--k", type=float,
                   help="data-term stiffness (default 10x mean diagonal)")
    r.add_argument("--substeps", type=int, help="target increments (default 1)")
    r.add_argument("--prealign", action=argparse.BooleanOptionalAction,
                   help="best-fit rigid alignment before the solve "
                        "(default on)")
    r.add_argument("--out", help="output directory (default: sample dir)")
    r.set_defaults(func=cmd_register)

    e = sub.add_parser("evaluate", help="aggregate per-sample metrics")
    common(e)
    e.add_argument("--run", help="run directory holding sample_* subdirs")
    e.add_argument("--workers", type=int, help="accepted for symmetry")
    e.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pipeline",
                       help="generate, match, register, evaluate in one run")
    common(p)
    for flag, kw in (
        ("--patient", {}), ("--out", {}), ("--seed", {"type": int}),
        ("--count", {"type": int}), ("--workers", {"type": int}),
        ("--provider", {"choices": ("fpfh", "features-file", "oracle")}),
        ("--features", {}), ("--tau", {"type": float}),
        ("--theta", {"type": float}),
        ("--fpfh-normal-radius", {"dest": "fpfh_normal_radius", "type": float}),
        ("--fpfh-radius", {"dest": "fpfh_radius", "type": float}),
        ("--young", {"type": float}), ("--poisson", {"type": float}),
        ("--k", {"type": float}), ("--substeps", {"type": int}),
        ("--prealign", {"action": argparse.BooleanOptionalAction}),
    ):
        p.add_argument(flag, **kw)
    p.set_defaults(func=cmd_pipeline)

    mp = sub.add_parser("make-patient",
                        help="write a synthetic patient bundle")
    mp.add_argument("--kind", choices=("matching", "registration",
                                       "throughput"), default="matching")
    mp.add_argument("--out", required=True)
    mp.add_argument("--seed", type=int, default=7)
    mp.set_defaults(func=cmd_make_patient)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (ParseError, DataError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except SolverError as e:
        print(f"solver error: {e}", file=sys.stderr)
        return 4
    except Exception:
        traceback.print_exc()
        return 5


if __name__ == "__main__":
    sys.exit(main())
