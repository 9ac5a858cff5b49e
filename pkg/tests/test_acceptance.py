"""Acceptance criteria. Each test records one PASS/FAIL line (echoed in the run summary)."""
import json
import math
import time
from fractions import Fraction

import numpy as np
import pytest

import _pipeline as P
from qdbev import cli
from qdbev import tensor as T
from qdbev.bevnet import STAGES, BevNet, save_checkpoint
from qdbev.distill import (DistillConfig, bev_distill_loss, distill_losses, image_distill_loss,
                           view_guided_loss)
from qdbev.geometry import BevGrid, Camera, build_bev_mask, default_rig, default_rig_spec
from qdbev.metrics import bops, model_size
from qdbev.quant import QuantScheme, RangeState, channel_absmax, compute_scale, fake_quantize
from qdbev.tensor import Tensor

TRAIN_SEEDS = P.SEEDS


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} | {detail}"
    P.RESULTS.append(line)
    print(line)
    assert ok, line


# 1 ------------------------------------------------------------ quantizer


def test_criterion_1_quantizer_exactness():
    t0 = time.perf_counter()
    rng = T.seeded_rng(2024)
    bad = {"idempotent": 0, "symmetric": 0, "bound": 0, "scale_ulp": 0}
    for _ in range(1000):
        shape = tuple(rng.integers(1, 7, size=rng.integers(1, 4)))
        x = rng.normal(0, 10 ** rng.uniform(-3, 3), size=shape)
        k = int(rng.integers(2, 17))
        per_channel = bool(rng.integers(0, 2))
        r = channel_absmax(x) if per_channel else np.array(np.abs(x).max())
        state = RangeState(r)
        q1 = fake_quantize(Tensor(x), k, state).data
        q2 = fake_quantize(Tensor(q1), k, state).data
        bad["idempotent"] += q1.tobytes() != q2.tobytes()
        bad["symmetric"] += not np.array_equal(fake_quantize(Tensor(-x), k, state).data, -q1)
        s = compute_scale(r, k)
        s_b = np.reshape(s, (-1,) + (1,) * (x.ndim - 1)) if per_channel else s
        # |q - x| is itself rounded; allow two ulps of x beyond the half step
        bad["bound"] += not np.all(np.abs(q1 - x) <= s_b / 2 + 2 * np.spacing(np.abs(x)))
        for rv, sv in zip(np.ravel(r), np.ravel(s)):
            exact = Fraction(2) * Fraction(float(rv)) / (2**k - 1)
            bad["scale_ulp"] += abs(Fraction(float(sv)) - exact) > Fraction(np.spacing(float(sv)))
    dt = time.perf_counter() - t0
    ok = not any(bad.values()) and dt < 5.0
    record(1, ok, f"violations {bad} over 1000 tensors, {dt:.2f}s (< 5s)")


# 2 ------------------------------------------------------------ gradients


def _tiny():
    rig = [Camera.from_yaw(y, fov_deg=90.0, image_size=(8, 8)) for y in (0.0, 180.0)]
    grid = BevGrid(h=2, w=2, cell_size=4.0, z_levels=(0.5, 1.0))
    mask = build_bev_mask(rig, grid)
    teacher = BevNet(rig, grid, channels=3, bev_channels=3, hidden=4, seed=11)
    rng = np.random.default_rng(11)
    for p in teacher.params.values():
        if p.ndim == 1:
            p.data[:] = rng.uniform(0.05, 0.2, size=p.shape)
    student = teacher.clone()
    for p in student.params.values():
        p.data = p.data + 0.2 * rng.normal(size=p.shape)
    images = rng.uniform(size=(2, 2, 1, 8, 8))
    truth = (rng.uniform(size=(2, 4)) > 0.5).astype(float)
    return teacher, student, mask, images, truth


def _param_check(student, name, loss_of_tap, images, mask):
    def f(leaf):
        net = student.clone()
        net.params[name] = leaf
        return loss_of_tap(net.forward(images, mask, quantize_on=False))
    return T.grad_check(f, student.params[name].data)


def test_criterion_2_gradient_suite():
    t0 = time.perf_counter()
    teacher, student, mask, images, truth = _tiny()
    cfg = DistillConfig(tau=1.0)
    tap_t = teacher.forward(images, mask, quantize_on=False)
    paths = {
        "task_bce": lambda tap: T.bce_with_logits(tap.predictions, truth),
        "image_kl": lambda tap: image_distill_loss(tap_t.img_features.data, tap.img_features, cfg).sum(),
        "bev_kl": lambda tap: bev_distill_loss(tap_t.bev_features.data, tap.bev_features, cfg).sum(),
        "vgd": lambda tap: distill_losses(tap_t, tap, mask.flat, cfg).vgd,
    }
    upstream = {"task_bce": list(student.params),
                "image_kl": [n for n in student.params if n.split(".")[0] in ("backbone", "neck")],
                "bev_kl": [n for n in student.params if not n.startswith("decoder")],
                "vgd": [n for n in student.params if not n.startswith("decoder")]}
    worst = {}
    for path, fn in paths.items():
        worst[path] = max(_param_check(student, n, fn, images, mask) for n in upstream[path])
    # STE: conv gradient through quantized weights equals the plain conv gradient at the lattice point
    rng = np.random.default_rng(3)
    x, w, up = rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=(2, 3, 5, 5))
    wq = Tensor(w, requires_grad=True)
    (T.conv2d(Tensor(x), fake_quantize(wq, 4)) * Tensor(up)).sum().backward()
    wl = Tensor(fake_quantize(Tensor(w), 4).data, requires_grad=True)
    (T.conv2d(Tensor(x), wl) * Tensor(up)).sum().backward()
    ste_exact = wq.grad.tobytes() == wl.grad.tobytes()
    dt = time.perf_counter() - t0
    ok = all(v < 1e-4 for v in worst.values()) and ste_exact and dt < 30.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record(2, ok, f"max rel err {detail} (< 1e-4); STE exact {ste_exact}; {dt:.1f}s (< 30s)")


# 3 ------------------------------------------------------------- geometry


def _oracle(spec, p):
    w, h = spec["image_size"]
    psi = math.radians(spec["yaw_deg"])
    d = [p[i] - spec["position"][i] for i in range(3)]
    depth = d[0] * math.cos(psi) + d[1] * math.sin(psi)
    if depth <= 0:
        return 0.0
    f = (w / 2) / math.tan(math.radians(spec["fov_deg"]) / 2)
    u = w / 2 + f * (-d[0] * math.sin(psi) + d[1] * math.cos(psi)) / depth
    v = h / 2 + f * (-d[2]) / depth
    return float(0 <= u < w and 0 <= v < h)


def test_criterion_3_geometry_oracle():
    grid = BevGrid()
    specs = default_rig_spec()
    mask = build_bev_mask(default_rig(), grid, batch=2)
    pts = grid.pillar_points()
    oracle = np.array([[[_oracle(s, pts[p, z]) for z in range(len(grid.z_levels))]
                        for p in range(grid.n_cells)] for s in specs])
    mismatches = int(sum((mask.raw[:, b] != oracle).sum() for b in range(2)))
    flat_exact = np.array_equal(mask.flat, mask.raw[:, 0].mean(axis=-1)) and \
        np.array_equal(mask.flat, oracle.mean(axis=-1))
    record(3, mismatches == 0 and flat_exact,
           f"{oracle.size} (camera, cell, z) triples, {mismatches} mismatches; flat == height mean: {flat_exact}")


# 4 ---------------------------------------------------------- distillation


def test_criterion_4_distillation_values():
    hand = 0.5 * (2 / 3 * math.log(4 / 3) + 1 / 3 * math.log(2 / 3))
    img = image_distill_loss(np.array([math.log(2), 0.0]).reshape(1, 1, 1, 1, 2),
                             Tensor(np.zeros((1, 1, 1, 1, 2)))).data[0]
    bev = bev_distill_loss(np.array([math.log(2), 0.0]).reshape(1, 2, 1, 1),
                           Tensor(np.zeros((1, 2, 1, 1)))).data[0]
    vgd = view_guided_loss(Tensor([0.5]), Tensor([0.2]), [[0.5]]).item()
    teacher, student, mask, images, _ = _tiny()
    tap = teacher.forward(images, mask, quantize_on=False)
    same = distill_losses(tap, teacher.clone().forward(images, mask, quantize_on=False), mask.flat).vgd.item()
    diff = distill_losses(tap, student.forward(images, mask, quantize_on=False), mask.flat)
    zero_mask = view_guided_loss(diff.img, diff.bev, np.zeros_like(mask.flat)).item()
    ok = (abs(img - hand) < 1e-9 and abs(bev - hand) < 1e-9 and abs(vgd - 0.05) < 1e-9
          and same == 0.0 and zero_mask == 0.0 and diff.vgd.item() > 0)
    record(4, ok, f"image KL {img:.10f}, BEV KL {bev:.10f} (hand {hand:.10f}); VGD {vgd:.10f} (0.05); "
                  f"teacher==student {same}; zero mask {zero_mask}")


# 5 ------------------------------------------------------------ efficiency


def _enumerate_macs(n_cam, img, c, cb, hid, cells):
    h, w = img
    return {"backbone": n_cam * (h * w * c * 9 + (h // 2) * (w // 2) * c * c * 9),
            "neck": n_cam * (h // 4) * (w // 4) * c * c,
            "encoder": cells * cb * c,
            "decoder": cells * (hid * cb + hid)}


def test_criterion_5_efficiency_accounting():
    net = BevNet(default_rig(), BevGrid())
    macs = _enumerate_macs(6, (32, 32), 8, 8, 16, 256)
    rng = np.random.default_rng(0)
    exact = True
    for _ in range(20):
        bits = {s: QuantScheme(int(rng.integers(2, 33)), int(rng.integers(2, 33))) for s in STAGES}
        expected = sum(bits[s].w_bits * bits[s].a_bits * macs[s.key] for s in STAGES)
        exact &= bops(net, bits).bops == expected
    ratio = model_size(net, 32) / model_size(net, 4)
    full_mb = 126.8
    w4_mb = full_mb * 4 / 32
    ok = exact and ratio == 8.0 and abs(w4_mb - 15.85) < 1e-12 and abs(w4_mb - 15.9) <= 0.1 + 1e-12
    record(5, ok, f"BOPS exact over 20 bit assignments: {exact}; W32/W4 size ratio {ratio}; "
                  f"126.8 MB at W4 -> {w4_mb:.2f} MB (reported 15.9 within 0.1)")


# 6 ------------------------------------------------- progressive vs one-shot


def test_criterion_6_progressive_vs_oneshot():
    rows, wins, slow = [], 0, 0
    for seed in TRAIN_SEEDS:
        (_, prog), (_, one) = P.phase1(seed, False), P.phase1(seed, True)
        assert len(prog.records) == len(one.records)
        p, o = prog.final.eval_metric, one.final.eval_metric
        wins += p <= o
        secs = P.seconds(("teacher", seed, None), ("phase1", seed, False), ("phase1", seed, True))
        slow += secs >= 600
        rows.append(f"seed {seed}: {p:.5f} vs {o:.5f} ({secs:.0f}s)")
    record(6, wins == 3 and slow == 0,
           f"progressive <= one-shot eval loss on {wins}/3 seeds (need 3); " + "; ".join(rows))


# 7 ------------------------------------------------------------- VGD benefit


def test_criterion_7_vgd_benefit():
    loss_wins, std_wins, rows, slow = 0, 0, [], 0
    for seed in TRAIN_SEEDS:
        (_, vgd), (_, ctrl) = P.phase2(seed, True), P.phase2(seed, False)
        lv, lc = vgd.final.eval_metric, ctrl.final.eval_metric
        sv, sc = P.last5_std(vgd), P.last5_std(ctrl)
        loss_wins += lv <= lc
        std_wins += sv <= sc
        secs = P.seconds(("phase2", seed, True), ("phase2", seed, False))
        slow += secs >= 600
        mean_vgd = float(np.mean(vgd.column("vgd_loss")))
        rows.append(f"seed {seed}: loss {lv:.5f} vs {lc:.5f}, std {sv:.2e} vs {sc:.2e}, "
                    f"mean L_vgd {mean_vgd:.1e}")
    record(7, loss_wins >= 2 and std_wins >= 2 and slow == 0,
           f"lambda=1 loss <= lambda=0 on {loss_wins}/3, last-5 std <= on {std_wins}/3 (need 2 and 2); "
           + "; ".join(rows))


# 8 ------------------------------------------------------ sensitivity order


def test_criterion_8_sensitivity_ordering(tmp_path):
    holds, rows = 0, []
    for seed in TRAIN_SEEDS:
        table = P.sweep(seed)
        d = {r.label: r.degradation for r in table.rows}
        holds += table.ordering_holds()
        rows.append(f"seed {seed}: " + " ".join(f"{k} {v:.1e}" for k, v in d.items() if k != "none"))
    # the run report carries the flag for the default seed
    run = tmp_path / "run"
    save_checkpoint(P.teacher(0)[0], run / "teacher")
    assert cli.main(["report", "--out", str(run)]) == 0
    flag = json.loads((run / "report.json").read_text())["sensitivity_ordering_holds"]
    flag_ok = flag == P.sweep(0).ordering_holds()
    record(8, holds >= 2 and flag_ok,
           f"ordering holds on {holds}/3 seeds (need 2); report flag {flag} matches seed 0: {flag_ok}; "
           + "; ".join(rows))


# 9 --------------------------------------------------- determinism, harness


RIG = """{"cameras": [
  {"yaw_deg": 0, "position": [0, 0, 1], "fov_deg": 90, "image_size": [16, 16]},
  {"yaw_deg": 180, "position": [0, 0, 1], "fov_deg": 90, "image_size": [16, 16]}],
 "grid": {"h": 4, "w": 4, "cell_size": 2.0, "z_levels": [0.0, 1.0]}}"""
SMALL = ("[experiment]\nrig_file = rig.json\n[trainer]\nn_train = 8\nn_eval = 4\nn_calib = 2\n"
         "teacher_epochs = 2\n[schedule]\nn1 = 1\nn2 = 2\nn3 = 3\nn4 = 4\np2 = 2\n")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_criterion_9_determinism_and_harness(tmp_path):
    (tmp_path / "rig.json").write_text(RIG)
    cfg = tmp_path / "small.ini"
    cfg.write_text(SMALL)
    codes = {}
    for d in ("a", "b"):
        for sub in (["train-teacher"], ["qat", "--oneshot"], ["qat", "--progressive"], ["vgd"],
                    ["ptq-sweep"], ["report"]):
            codes[(d, sub[-1])] = cli.main([*sub, "--config", str(cfg), "--out", str(tmp_path / d)])
    curves = sorted(p.name for p in (tmp_path / "a" / "curves").iterdir())
    identical = len(curves) == 4 and all(
        (tmp_path / "a" / "curves" / c).read_bytes() == (tmp_path / "b" / "curves" / c).read_bytes()
        for c in curves)
    default = cli.parse_config_text(cli.default_config_text())
    tweaked = cli.parse_config_text(default.to_ini().replace("tau = 1.0", "tau = 0.1"))
    roundtrip = all(cli.parse_config_text(c.to_ini()) == c for c in (default, tweaked))
    (tmp_path / "bad.ini").write_text("[quant]\nw_bits = 1\n")
    (tmp_path / "boom.ini").write_text(SMALL + "[optimizer]\nteacher_lr = 1e200\n")
    exits = {
        "ok": all(v == 0 for v in codes.values()),
        "config": cli.main(["train-teacher", "--config", str(tmp_path / "bad.ini")]) == 2,
        "abort": cli.main(["train-teacher", "--config", str(tmp_path / "boom.ini"),
                           "--out", str(tmp_path / "boom")]) == 3,
        "missing": cli.main(["vgd", "--config", str(cfg), "--out", str(tmp_path / "none")]) == 4,
    }
    ok = identical and roundtrip and all(exits.values())
    record(9, ok, f"{len(curves)} curve CSVs byte-identical across reruns: {identical}; "
                  f"config round-trip: {roundtrip}; exit codes {exits}")
