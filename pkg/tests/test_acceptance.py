"""Acceptance checklist for the whole toolkit.

Eleven criteria, one test each, every test printing a single PASS/FAIL
line straight to the terminal so a plain pytest run doubles as a release
checklist.  Tolerances are pinned here and must not be loosened.
"""
import math
import time
from pathlib import Path

import numpy as np
import pytest

from lapreg.arap import ArapConfig, DeformationConstraints, arap_solve
from lapreg.cg import conjugate_gradient
from lapreg.cli import main
from lapreg.crop import CropConfig, facing_candidates, sample_camera, visible_crop
from lapreg.dataset import generate_sample, load_patient
from lapreg.features import compute_fpfh
from lapreg.fem import MaterialParams, assemble_stiffness, element_stiffness
from lapreg.geometry import (PointCloud, TriMesh, compute_vertex_normals,
                             random_rigid)
from lapreg.losses import (focal_matching_loss, overlap_loss,
                           weighted_chamfer_loss)
from lapreg.matching import (MatchingConfig, dual_softmax,
                             match_by_nearest_feature, mutual_nn_threshold,
                             similarity)
from lapreg.metrics import fre, matching_metrics, tre
from lapreg.network import overlap_head
from lapreg.registration import (register_sample,
                                 surface_positions_from_registration)
from lapreg.synth import write_patient

from test_fem import random_rational_tet, symbolic_element_stiffness
from test_losses import finite_difference


def report(capsys, num, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {num:>2}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {num} failed: {detail}"


@pytest.fixture(scope="session")
def matching_patient(tmp_path_factory):
    cfg = write_patient(tmp_path_factory.mktemp("acc_matching"),
                        kind="matching", seed=7)
    return load_patient(cfg)


@pytest.fixture(scope="session")
def registration_bundle(tmp_path_factory):
    cfg = write_patient(tmp_path_factory.mktemp("acc_registration"),
                        kind="registration", seed=7)
    return cfg, load_patient(cfg)


@pytest.fixture(scope="session")
def throughput_patient(tmp_path_factory):
    cfg = write_patient(tmp_path_factory.mktemp("acc_throughput"),
                        kind="throughput", seed=7)
    return load_patient(cfg)


def test_criterion_01_fpfh_baseline_is_weak(matching_patient, capsys):
    # handcrafted features barely cope with deformation: both scores must
    # stay under 2% across 50 samples, inside a 5 minute budget
    t0 = time.perf_counter()
    ms, ir = [], []
    for seed in range(50):
        s = generate_sample(matching_patient, seed)
        fx, _ = compute_fpfh(s.complete)
        fy, _ = compute_fpfh(s.partial)
        m = matching_metrics(match_by_nearest_feature(fx, fy), s.gt_matches)
        ms.append(m.matching_score)
        ir.append(m.inlier_ratio)
    elapsed = time.perf_counter() - t0
    ms_mean, ir_mean = float(np.mean(ms)), float(np.mean(ir))
    ok = ms_mean < 2.0 and ir_mean < 2.0 and elapsed < 300.0
    report(capsys, 1, ok,
           f"FPFH on 50 samples x {len(matching_patient.surface.vertices)} "
           f"verts: MS {ms_mean:.2f}% IR {ir_mean:.2f}% "
           f"(limits < 2%), {elapsed:.0f}s (< 300s)")


def test_criterion_02_oracle_features_recover_matches(matching_patient,
                                                      capsys):
    # features equal to the ground-truth deformed coordinates: the
    # dual-softmax + mutual-NN machinery must recover the pairing
    cfg = MatchingConfig()
    ms, ir = [], []
    for seed in range(5):
        s = generate_sample(matching_patient, seed)
        fx = s.gt_deformed[s.perm_x]
        pairs = s.gt_matches.pairs
        vert_of_y = np.empty(len(s.partial), dtype=np.int64)
        vert_of_y[pairs[:, 1]] = s.perm_x[pairs[:, 0]]
        fy = s.gt_deformed[vert_of_y]
        M = dual_softmax(similarity(fx, fy), temperature=cfg.temperature)
        pred = mutual_nn_threshold(M, threshold=cfg.threshold)
        m = matching_metrics(pred, s.gt_matches)
        ms.append(m.matching_score)
        ir.append(m.inlier_ratio)
    ok = min(ms) > 90.0 and min(ir) > 95.0
    report(capsys, 2, ok,
           f"oracle features, 5 noise-free samples: worst MS {min(ms):.1f}% "
           f"(> 90%), worst IR {min(ir):.1f}% (> 95%)")


def test_criterion_03_registration_reduces_hidden_tre(registration_bundle,
                                                      capsys):
    _, patient = registration_bundle
    assert patient.deform.compression_max <= 0.05
    t_reg, t_base, f_norm, times = [], [], [], []
    for seed in range(10):
        s = generate_sample(patient, seed)
        t0 = time.perf_counter()
        outcome = register_sample(s, s.gt_matches, patient.tet)
        surf = surface_positions_from_registration(
            patient.surface.vertices, patient.tet, outcome)
        times.append(time.perf_counter() - t0)
        hidden = s.hidden_vertex_mask()
        t_reg.append(tre(surf, s.gt_deformed, hidden).mean)
        base = s.rigid.apply(patient.surface.vertices)
        t_base.append(tre(base, s.gt_deformed, hidden).mean)
        f_norm.append(fre(outcome.registered, outcome.snapped,
                          outcome.snapped_targets).mean)
    reduction = 100.0 * (1.0 - np.mean(t_reg) / np.mean(t_base))
    # unit normalization puts the bounding-box diagonal at exactly 1
    ok = (reduction >= 70.0 and max(f_norm) < 0.01 and max(times) < 120.0)
    report(capsys, 3, ok,
           f"10 compression samples at {patient.tet.num_tets} tets: mean "
           f"hidden TRE {np.mean(t_base):.4f} -> {np.mean(t_reg):.4f} "
           f"({reduction:.1f}% reduction, >= 70%), worst FRE "
           f"{max(f_norm):.5f} of the diagonal (< 0.01), worst "
           f"{max(times):.1f}s/sample (< 120s)")


def test_criterion_04_stiffness_correctness(registration_bundle, capsys):
    _, patient = registration_bundle
    stiff = assemble_stiffness(patient.tet, MaterialParams())
    S = stiff.matrix
    norm = abs(S).max()
    asym = abs(S - S.T).max() / norm
    sym_ok = asym <= 1e-10

    null_resid = 0.0
    for axis in range(3):
        t = np.zeros(S.shape[0])
        t[axis::3] = 1.0
        null_resid = max(null_resid, float(np.max(np.abs(S @ t))))
    null_ok = null_resid < 1e-8 * norm

    rng = np.random.default_rng(0)
    quad_min = np.inf
    for _ in range(100):
        u = rng.normal(size=S.shape[0])
        u /= np.linalg.norm(u)
        quad_min = min(quad_min, float(u @ (S @ u)))
    psd_ok = quad_min >= -1e-12

    mat = MaterialParams(young_modulus=1500.0, poisson_ratio=0.45)
    worst_rel = 0.0
    tets = [np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])]
    tets += [random_rational_tet(rng) for _ in range(3)]
    for pts in tets:
        K = element_stiffness(pts, mat)
        K_exact = symbolic_element_stiffness(pts, 1500, 0.45)
        worst_rel = max(worst_rel, float(
            np.max(np.abs(K - K_exact)) / np.max(np.abs(K_exact))))
    oracle_ok = worst_rel < 1e-9

    ok = sym_ok and null_ok and psd_ok and oracle_ok
    report(capsys, 4, ok,
           f"stiffness at {patient.tet.num_tets} tets: asymmetry {asym:.1e} "
           f"(<= 1e-10), translation residual {null_resid / norm:.1e} of "
           f"max entry (< 1e-8), min quadratic form {quad_min:.1e} "
           f"(>= -1e-12), element oracle gap {worst_rel:.1e} (< 1e-9)")


def test_criterion_05_cg_matches_dense_solver(capsys):
    rng = np.random.default_rng(0)
    worst_res, worst_gap = 0.0, 0.0
    for _ in range(5):
        Q, _ = np.linalg.qr(rng.normal(size=(50, 50)))
        A = Q @ np.diag(np.geomspace(1.0, 100.0, 50)) @ Q.T
        b = rng.normal(size=50)
        res = conjugate_gradient(A, b, tol=1e-10)
        assert res.converged
        worst_res = max(worst_res, float(
            np.linalg.norm(b - A @ res.solution) / np.linalg.norm(b)))
        exact = np.linalg.solve(A, b)
        worst_gap = max(worst_gap, float(
            np.linalg.norm(res.solution - exact) / np.linalg.norm(exact)))
    ident = conjugate_gradient(np.eye(40), rng.normal(size=40), tol=1e-10)
    ok = worst_res <= 1e-10 and worst_gap < 1e-8 and ident.iterations == 1
    report(capsys, 5, ok,
           f"5 random 50x50 SPD systems: worst residual {worst_res:.1e} "
           f"(<= 1e-10), worst gap to dense solve {worst_gap:.1e} (< 1e-8), "
           f"identity in {ident.iterations} iteration")


def test_criterion_06_loss_gradients_match_finite_differences(capsys):
    rng = np.random.default_rng(0)
    step = 1e-6

    def rel(analytic, fd):
        return float(np.max(np.abs(analytic - fd))
                     / max(np.max(np.abs(fd)), 1e-12))

    worst = 0.0
    for i in range(100):
        kind = i % 3
        if kind == 0:
            n, m = rng.integers(3, 7), rng.integers(3, 7)
            M = rng.uniform(0.1, 0.9, size=(n, m))
            npos = int(rng.integers(1, min(n, m) + 1))
            pairs = np.stack([rng.choice(n, npos, replace=False),
                              rng.choice(m, npos, replace=False)], axis=1)
            _, g = focal_matching_loss(M, pairs)
            fd = finite_difference(
                lambda: focal_matching_loss(M, pairs)[0], M, step)
            worst = max(worst, rel(g, fd))
        elif kind == 1:
            p = 1 if (i // 3) % 2 else 2
            X = rng.normal(size=(int(rng.integers(4, 9)), 3))
            Y = rng.normal(size=(int(rng.integers(4, 9)), 3))
            s = rng.uniform(0.1, 1.0, size=len(X))
            _, gx, gs = weighted_chamfer_loss(X, Y, s, p=p)
            fd_x = finite_difference(
                lambda: weighted_chamfer_loss(X, Y, s, p=p)[0], X, step)
            fd_s = finite_difference(
                lambda: weighted_chamfer_loss(X, Y, s, p=p)[0], s, step)
            worst = max(worst, rel(gx, fd_x), rel(gs, fd_s))
        else:
            sc = rng.uniform(0.05, 0.95, size=int(rng.integers(5, 20)))
            lab = (rng.uniform(size=len(sc)) > 0.5).astype(float)
            _, g = overlap_loss(sc, lab)
            fd = finite_difference(lambda: overlap_loss(sc, lab)[0], sc, step)
            worst = max(worst, rel(g, fd))
    ok = worst < 1e-5
    report(capsys, 6, ok,
           f"focal, chamfer (p=1 and p=2), overlap over 100 instances: "
           f"max relative gradient error {worst:.1e} (< 1e-5)")


def test_criterion_07_overlap_head_is_exact_logistic(capsys):
    rng = np.random.default_rng(7)
    worst = 0.0
    strictly_open = True
    for _ in range(20):
        n = int(rng.integers(5, 40))
        d = int(rng.integers(4, 16))
        C = rng.normal(size=(n, d))
        w3 = rng.normal(size=d) / math.sqrt(d)
        b3 = float(rng.normal())
        out = overlap_head(C, w3, b3)
        direct = np.array([1.0 / (1.0 + math.exp(-(C[i] @ w3 + b3)))
                           for i in range(n)])
        worst = max(worst, float(np.max(np.abs(out - direct))))
        strictly_open = strictly_open and bool(
            np.all(out > 0.0) and np.all(out < 1.0))
    ok = worst <= 1e-12 and strictly_open
    report(capsys, 7, ok,
           f"overlap head vs direct logistic: max gap {worst:.1e} "
           f"(<= 1e-12), outputs strictly inside (0, 1): {strictly_open}")


def test_criterion_08_arap_properties(sphere_mesh, capsys):
    V = sphere_mesh.vertices
    n = len(V)
    energy_ok, exact_ok = True, True
    for trial in range(20):
        rng = np.random.default_rng(100 + trial)
        nh = int(rng.integers(3, 10))
        idx = rng.choice(n, nh, replace=False)
        targets = V[idx] + rng.normal(scale=0.05, size=(nh, 3))
        cons = DeformationConstraints(idx, targets)
        P, energies = arap_solve(sphere_mesh, cons, return_energies=True)
        diffs = np.diff(energies)
        energy_ok = energy_ok and bool(np.all(diffs <= 1e-9))
        exact_ok = exact_ok and np.array_equal(P[idx], targets)

    rng = np.random.default_rng(5)
    idx = rng.choice(n, 6, replace=False)
    targets = V[idx] + rng.normal(scale=0.05, size=(6, 3))
    base = arap_solve(sphere_mesh, DeformationConstraints(idx, targets))
    move = random_rigid(rng, max_angle_deg=40.0, max_translation=0.3)
    moved_mesh = TriMesh(move.apply(V), sphere_mesh.faces)
    moved = arap_solve(moved_mesh,
                       DeformationConstraints(idx, move.apply(targets)))
    inv_gap = float(np.max(np.abs(moved - move.apply(base))))
    ok = energy_ok and exact_ok and inv_gap < 1e-6
    report(capsys, 8, ok,
           f"20 constraint sets: energy non-increasing {energy_ok}, "
           f"constraints exact {exact_ok}, rigid invariance gap "
           f"{inv_gap:.1e} (< 1e-6)")


def test_criterion_09_crop_contract(matching_patient, capsys):
    surface = matching_patient.surface
    normals, _ = compute_vertex_normals(surface)
    cloud = PointCloud(surface.vertices, normals)
    cfg = CropConfig()  # keep 5% within an 80 degree cone
    cam = sample_camera(np.random.default_rng(3), cloud, cfg)
    idx = visible_crop(cloud, cam, cfg)
    target = math.ceil(cfg.keep_fraction * len(cloud))
    sufficient = len(facing_candidates(cloud, cam, cfg)) >= target
    count_ok = sufficient and len(idx) == target

    # independent visibility filter: plain per-point trigonometry
    cos_limit = math.cos(math.radians(cfg.max_angle))
    angle_ok = True
    for i in idx:
        v = cam.position - cloud.points[i]
        cosang = float(np.dot(cloud.normals[i], v) / np.linalg.norm(v))
        angle_ok = angle_ok and cosang > cos_limit - 1e-12
    cam2 = sample_camera(np.random.default_rng(3), cloud, cfg)
    idx2 = visible_crop(cloud, cam2, cfg)
    det_ok = np.array_equal(idx, idx2) and np.allclose(
        cam.position, cam2.position, rtol=0, atol=0)
    ok = count_ok and angle_ok and det_ok
    report(capsys, 9, ok,
           f"crop keeps {len(idx)} of {len(cloud)} points "
           f"(ceil(0.05 M) = {target}), all pass the independent 80 degree "
           f"filter: {angle_ok}, identical seed reproduces the crop: {det_ok}")


def test_criterion_10_pipeline_byte_identical(registration_bundle, tmp_path,
                                              capsys):
    cfg_path, _ = registration_bundle
    runs = [tmp_path / "run_a", tmp_path / "run_b"]
    for run in runs:
        code = main(["pipeline", "--patient", str(cfg_path), "--out",
                     str(run), "--seed", "0", "--count", "2",
                     "--provider", "oracle"])
        assert code == 0
    files_a = sorted(p.relative_to(runs[0])
                     for p in runs[0].rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(runs[1])
                     for p in runs[1].rglob("*") if p.is_file())
    same_sets = files_a == files_b
    diffs = [str(rel) for rel in files_a
             if (runs[0] / rel).read_bytes() != (runs[1] / rel).read_bytes()]
    ok = same_sets and not diffs and len(files_a) > 0
    report(capsys, 10, ok,
           f"two pipeline runs, {len(files_a)} files each: "
           + ("all byte-identical" if ok else
              f"differences in {diffs[:3]}"))


def test_criterion_11_generation_throughput(throughput_patient, capsys):
    nv = len(throughput_patient.surface.vertices)
    generate_sample(throughput_patient, 99)  # warm the caches once
    times = []
    for seed in range(3):
        t0 = time.perf_counter()
        generate_sample(throughput_patient, seed)
        times.append(time.perf_counter() - t0)
    ok = max(times) <= 2.0
    report(capsys, 11, ok,
           f"generate_sample at {nv} vertices: "
           + ", ".join(f"{t:.2f}s" for t in times) + " (each <= 2s)")
