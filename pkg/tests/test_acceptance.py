"""Acceptance criteria, one test per criterion.

Each test records a one-line PASS/FAIL summary (printed at the end of the
pytest run by the hook in conftest.py) before asserting.
"""
import json
import math
import time

import numpy as np
import pytest

from conftest import central_diff, random_cloud, small_camera
from fogsplat import io
from fogsplat.cli import main
from fogsplat.fog import FogParams
from fogsplat.losses import (LossWeights, depth_loss, depth_weight, depth_weighted_recon, psnr,
                             reconstruction_loss, ssim, ssim_and_grad)
from fogsplat.optim import TrainConfig, view_loss
from fogsplat.priors import MattingLaplacian, bcp_loss, compute_prior_maps, dcp_loss, dcp_transmission
from fogsplat.raster import render, render_backward
from fogsplat.synth import analytic_dehaze, synthesize_fog
from fogsplat.toy import TOY_AIRLIGHT, TOY_BETA, make_toy_scene, write_toy_scene
from test_priors import patterned_scene
from test_raster import brute_force_composite

REPORT = {}

# end-to-end budget: the synthetic preset's 30000 iterations take about 30 min on one core at
# this scale, so the recovery run uses the preset's settings with an explicit iteration count
RECOVERY_ITERS = 2000
RECOVERY_BUDGET_S = 15 * 60
ABLATION_ITERS = 400
ABLATION_SEEDS = (0, 1, 2)
ABLATION_GAP = 0.3


def record(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    REPORT[n] = line
    print(line)
    return ok


def _rel(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


# ---------------------------------------------------------------- 1

def _fd_scene(seed, use_sigmoid):
    rng = np.random.default_rng(seed)
    cloud = random_cloud(rng, 8, spread=0.35, scale=(0.2, 0.5))
    fog = FogParams(np.array([0.7]), rng.normal(1.0, 0.3, 3), use_sigmoid)
    cam = small_camera(8)
    other = random_cloud(rng, 8, spread=0.35, scale=(0.2, 0.5))
    target = np.clip(render(other, cam, fog).color + rng.normal(0, 0.02, (8, 8, 3)), 0, 1)
    pseudo = rng.uniform(0.5, 2.0, (8, 8))
    return cloud, fog, cam, target, pseudo


def test_criterion_1_gradients():
    start = time.time()
    worst_param, worst_op = 0.0, 0.0
    cfg = TrainConfig(iterations=10, densify=False)
    for seed, use_sigmoid in ((11, False), (12, True)):
        cloud, fog, cam, target, pseudo = _fd_scene(seed, use_sigmoid)
        prior = compute_prior_maps(target, airlight=fog.airlight)
        lap = MattingLaplacian(target)
        vl = view_loss(cloud, fog, cam, target, pseudo, cfg, 3, prior=prior, laplacian=lap)
        assert set(vl.report.components) == {"rec", "dcp", "bcp", "depth", "dweighted"}
        grads = render_backward(vl.out, vl.g_color, vl.g_depth, vl.g_t)

        def total():
            return view_loss(cloud, fog, cam, target, pseudo, cfg, 3, laplacian=lap, frozen=vl.frozen).report.total

        for name, p in list(cloud.params().items()) + list(fog.params().items()):
            analytic = grads.cloud[name] if name in grads.cloud else grads.fog[name]
            worst_param = max(worst_param, _rel(analytic, central_diff(total, p)))

    # loss-level operations on their own
    rng = np.random.default_rng(13)
    a, b = rng.uniform(0, 1, (10, 9, 3)), rng.uniform(0, 1, (10, 9, 3))
    t, tp = rng.uniform(0.2, 1, (10, 9)), rng.uniform(0.2, 1, (10, 9))
    d, p = rng.uniform(0, 3, (10, 9)), rng.uniform(0, 1, (10, 9))
    lap = MattingLaplacian(b)
    align = depth_loss(d, p)[2]
    checks = [
        (ssim_and_grad(a, b)[1], lambda: ssim(a, b), a),
        (reconstruction_loss(a, b)[1], lambda: reconstruction_loss(a, b)[0], a),
        (dcp_loss(t, tp, laplacian=lap)[1], lambda: dcp_loss(t, tp, laplacian=lap)[0], t),
        (bcp_loss(t, tp)[1], lambda: bcp_loss(t, tp)[0], t),
        (depth_loss(d, p)[1], lambda: depth_loss(d, p, align=align)[0], d),
        (depth_weighted_recon(a, b, p)[1], lambda: depth_weighted_recon(a, b, p)[0], a),
    ]
    for g, f, x in checks:
        worst_op = max(worst_op, _rel(g, central_diff(f, x)))
    elapsed = time.time() - start
    ok = worst_param <= 1e-4 and worst_op <= 1e-6 and elapsed < 60
    record(1, ok, f"max rel err params {worst_param:.2e} (<= 1e-4), loss ops {worst_op:.2e} (<= 1e-6), "
                  f"{elapsed:.1f}s (< 60s)")
    assert ok


# ---------------------------------------------------------------- 2

def test_criterion_2_fog_round_trip():
    rng = np.random.default_rng(21)
    worst = 0.0
    for _ in range(20):
        J = rng.uniform(0, 1, (32, 32, 3))
        A = rng.uniform(0.6, 1.0, 3)
        I, t = synthesize_fog(J, rng.uniform(0, 10, (32, 32)), rng.uniform(0, 3.5), A)
        ok = t >= 0.05
        worst = max(worst, float(np.max(np.abs(analytic_dehaze(I, t, A) - J)[ok])))
    ok = worst <= 1e-6
    record(2, ok, f"max abs round-trip error {worst:.2e} where t >= 0.05 (<= 1e-6)")
    assert ok


# ---------------------------------------------------------------- 3

def test_criterion_3_dcp_oracle():
    rng = np.random.default_rng(31)
    worst = 0.0
    for _ in range(5):
        J, t = patterned_scene(rng)
        A = rng.uniform(0.7, 0.95, 3)
        I = J * t[:, :, None] + A * (1 - t[:, :, None])
        est = dcp_transmission(I, A, omega=1.0, patch=15)
        # interior: the whole 15x15 patch lies inside one constant-t block
        interior = np.zeros_like(t, dtype=bool)
        for by in range(2):
            for bx in range(2):
                interior[by * 24 + 7:by * 24 + 17, bx * 24 + 7:bx * 24 + 17] = True
        worst = max(worst, float(np.max(np.abs(est - t)[interior])))
    ok = worst <= 1e-6
    record(3, ok, f"max abs transmission error {worst:.2e} on interior pixels (<= 1e-6)")
    assert ok


# ---------------------------------------------------------------- 4 and 5 (end to end)

def _train(scene_dir, out, iters, seed, *extra):
    args = ["train", "--scene", str(scene_dir), "--iters", str(iters), "--no-sigmoid", "--seed", str(seed),
            "--preset", "synthetic", "--out", str(out), *extra]
    assert main(args) == 0
    return json.loads((out / "summary.json").read_text())


@pytest.mark.slow
def test_criterion_4_end_to_end_recovery(tmp_path):
    scene = make_toy_scene(0)
    assert scene.beta == TOY_BETA and tuple(scene.airlight) == TOY_AIRLIGHT
    assert len(scene.cloud) == 1000 and len(scene.cameras) == 12 and scene.hazy[0].shape == (128, 128, 3)
    write_toy_scene(tmp_path / "scene", scene)
    start = time.time()
    summary = _train(tmp_path / "scene", tmp_path / "run", RECOVERY_ITERS, 0, "--no-densify")
    elapsed = time.time() - start
    A_err = np.max(np.abs(np.array(summary["A"]) - np.array(TOY_AIRLIGHT)))
    ok = A_err <= 0.05 and summary["psnr"] >= 25 and summary["ssim"] >= 0.85 and elapsed <= RECOVERY_BUDGET_S
    record(4, ok, f"A={np.round(summary['A'], 4).tolist()} (max err {A_err:.4f} <= 0.05), "
                  f"PSNR {summary['psnr']:.2f} dB (>= 25), SSIM {summary['ssim']:.4f} (>= 0.85), "
                  f"beta {summary['beta']:.3f}, {RECOVERY_ITERS} iters in {elapsed:.0f}s (<= 900s)")
    assert ok


@pytest.mark.slow
def test_criterion_5_ablation_ordering(tmp_path):
    variants = {
        "all": ["--no-densify"],
        "rec": ["--no-densify"] + [a for k in ("dcp", "bcp", "depth", "dweighted") for a in ("--disable-loss", k)],
        "nofog": ["--no-densify", "--no-fog"],
    }
    scores = {k: [] for k in variants}
    for seed in ABLATION_SEEDS:
        root = tmp_path / f"s{seed}"
        write_toy_scene(root / "scene", make_toy_scene(seed))
        for name, extra in variants.items():
            scores[name].append(_train(root / "scene", root / name, ABLATION_ITERS, seed, *extra)["psnr"])
    mean = {k: float(np.mean(v)) for k, v in scores.items()}
    gap1, gap2 = mean["all"] - mean["rec"], mean["rec"] - mean["nofog"]
    ok = gap1 >= ABLATION_GAP and gap2 >= ABLATION_GAP
    record(5, ok, f"mean PSNR all {mean['all']:.2f} / rec-only {mean['rec']:.2f} / no-fog {mean['nofog']:.2f} dB, "
                  f"gaps {gap1:.2f} and {gap2:.2f} (>= {ABLATION_GAP}) over seeds {list(ABLATION_SEEDS)}")
    assert ok


# ---------------------------------------------------------------- 6

def test_criterion_6_schedules():
    cfg = TrainConfig.from_preset("synthetic")
    m = cfg.iterations
    vals = [depth_weight(0, m), depth_weight(m, m), depth_weight(m // 2, m), cfg.beta_lr(0), cfg.beta_lr(m)]
    ok = (vals[0] == 1.0 and abs(vals[1] - 0.01) <= 1e-12 and abs(vals[2] - 0.1) <= 1e-12
          and abs(vals[3] - 1e-7) <= 1e-19 and abs(vals[4] - 1e-8) <= 1e-20)
    record(6, ok, f"depth weight {vals[0]:g} -> {vals[1]:.12g}, midpoint {vals[2]:.15g}; "
                  f"beta lr {vals[3]:.3g} -> {vals[4]:.3g}")
    assert ok


# ---------------------------------------------------------------- 7

def test_criterion_7_metric_sanity():
    rng = np.random.default_rng(71)
    a = rng.uniform(0, 0.5, (32, 32, 3))
    b = rng.uniform(0, 1, (32, 32, 3))
    p = psnr(a, a + 0.5)
    s_same = ssim(b, b)
    asym = abs(ssim(a, b) - ssim(b, a))
    ok = abs(p - 6.0206) <= 1e-3 and s_same == 1.0 and asym <= 1e-12
    record(7, ok, f"PSNR {p:.6f} dB (6.0206 +- 1e-3), SSIM(I,I) = {s_same!r}, |SSIM(a,b)-SSIM(b,a)| = {asym:.1e}")
    assert ok


# ---------------------------------------------------------------- 8

def test_criterion_8_determinism(tmp_path):
    write_toy_scene(tmp_path / "scene", make_toy_scene(0, n_views=4, size=48))
    outs = []
    for run in ("a", "b"):
        # densification enabled with an early window so the remapping path is exercised
        _train(tmp_path / "scene", tmp_path / run, 60, 5, "--checkpoint-every", "30")
        outs.append(tmp_path / run)
    names = ["final.ply", "final.json", "ckpt_000030.ply", "ckpt_000030.json", "loss.jsonl"]
    same = [(outs[0] / n).read_bytes() == (outs[1] / n).read_bytes() for n in names]
    ok = all(same)
    record(8, ok, f"{sum(same)}/{len(names)} artifacts byte-identical across two runs ({', '.join(names)})")
    assert ok


# ---------------------------------------------------------------- 9

def test_criterion_9_rasterizer_equivalence():
    rng = np.random.default_rng(91)
    worst = 0.0
    for trial in range(6):
        n = int(rng.integers(5, 51))
        cloud = random_cloud(rng, n, spread=0.7, scale=(0.03, 0.4))
        cam = small_camera(32, eye=rng.normal(0, 0.3, 3) + [0, 0, -4])
        fog = FogParams(np.array([rng.uniform(0.2, 1.5)]), rng.normal(0.5, 0.5, 3), bool(trial % 2))
        bg = rng.uniform(0, 1, 3)
        out = render(cloud, cam, fog, background=bg)
        bg5 = np.zeros(5)
        bg5[:3] = bg
        ref, T = brute_force_composite(out.ctx.proj, out.ctx.feats, bg5, 32, 32)
        worst = max(worst, float(np.max(np.abs(out.color - ref[:, :, :3]))),
                    float(np.max(np.abs(out.transmission - ref[:, :, 3]))),
                    float(np.max(np.abs(out.depth - ref[:, :, 4]))), float(np.max(np.abs(out.alpha - (1 - T)))))
    ok = worst <= 1e-6
    record(9, ok, f"max abs difference tiled vs brute force {worst:.2e} (<= 1e-6) over 6 scenes of <= 50 Gaussians")
    assert ok
